//! Sealed JSONL run logs and per-generation CSV tables.
//!
//! A run log holds one `FitnessRecord` per line followed by a trailer line
//! `{"trailer":{"records":N,"sha256":"..."}}`, where the digest covers every
//! preceding byte. Readers reject logs whose trailer is missing or wrong.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evolve::{FitnessRecord, GenerationSummary, PopulationStats};
use crate::policy::Chromosome;

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("run log has no trailer")]
    Unsealed,
    #[error("trailer says {expected} records, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("data after trailer")]
    TrailingData,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trailer {
    pub records: usize,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TrailerLine {
    trailer: Trailer,
}

/// Append-only writer; `seal` writes the trailer and consumes the writer.
pub struct RunLogWriter<W: Write> {
    out: W,
    hasher: Sha256,
    records: usize,
}

impl RunLogWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> RunLogWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            hasher: Sha256::new(),
            records: 0,
        }
    }

    pub fn append(&mut self, record: &FitnessRecord) -> io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
        line.push('\n');
        self.hasher.update(line.as_bytes());
        self.out.write_all(line.as_bytes())?;
        self.records += 1;
        Ok(())
    }

    pub fn seal(self) -> io::Result<Trailer> {
        self.finish().map(|(t, _)| t)
    }

    /// Seals the log and returns the underlying writer.
    pub fn finish(mut self) -> io::Result<(Trailer, W)> {
        let trailer = Trailer {
            records: self.records,
            sha256: hex::encode(self.hasher.finalize()),
        };
        let line = serde_json::to_string(&TrailerLine {
            trailer: trailer.clone(),
        })
        .map_err(io::Error::other)?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok((trailer, self.out))
    }
}

pub fn write_runlog(path: impl AsRef<Path>, records: &[FitnessRecord]) -> io::Result<Trailer> {
    let mut w = RunLogWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.seal()
}

/// Parses and verifies a sealed run log.
pub fn parse_runlog(r: impl Read) -> Result<Vec<FitnessRecord>, RunLogError> {
    let mut reader = BufReader::new(r);
    let mut hasher = Sha256::new();
    let mut records = Vec::new();
    let mut trailer: Option<Trailer> = None;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        if trailer.is_some() {
            if buf.trim().is_empty() {
                continue;
            }
            return Err(RunLogError::TrailingData);
        }
        if buf.starts_with("{\"trailer\"") {
            let t: TrailerLine = serde_json::from_str(buf.trim_end()).map_err(|e| RunLogError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            trailer = Some(t.trailer);
            continue;
        }
        hasher.update(buf.as_bytes());
        records.push(serde_json::from_str(buf.trim_end()).map_err(|e| RunLogError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?);
    }
    let t = trailer.ok_or(RunLogError::Unsealed)?;
    if t.records != records.len() {
        return Err(RunLogError::CountMismatch {
            expected: t.records,
            found: records.len(),
        });
    }
    if t.sha256 != hex::encode(hasher.finalize()) {
        return Err(RunLogError::ChecksumMismatch);
    }
    Ok(records)
}

pub fn read_runlog(path: impl AsRef<Path>) -> Result<Vec<FitnessRecord>, RunLogError> {
    parse_runlog(File::open(path)?)
}

pub const GENERATIONS_HEADER: [&str; 5] = ["generation", "f_max", "f_mean", "f_min", "best_chromosome"];

#[derive(Serialize, Deserialize)]
struct GenerationRow {
    generation: usize,
    f_max: f64,
    f_mean: f64,
    f_min: f64,
    best_chromosome: String,
}

pub fn write_generations_csv(gens: &[GenerationSummary], w: impl Write) -> Result<(), RunLogError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(GENERATIONS_HEADER)?;
    for g in gens {
        out.serialize(GenerationRow {
            generation: g.generation,
            f_max: g.stats.f_max,
            f_mean: g.stats.f_mean,
            f_min: g.stats.f_min,
            best_chromosome: g.stats.best_chromosome.to_json_line(),
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generations_csv(r: impl Read) -> Result<Vec<GenerationSummary>, RunLogError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<GenerationRow>().enumerate() {
        let row = row?;
        let best_chromosome = Chromosome::from_json_line(&row.best_chromosome).map_err(|e| RunLogError::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.push(GenerationSummary {
            generation: row.generation,
            stats: PopulationStats {
                f_max: row.f_max,
                f_mean: row.f_mean,
                f_min: row.f_min,
                best_chromosome,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{Gene, Operator};
    use crate::policy::SslAlgorithm;

    fn record(id: u64, fitness: f64) -> FitnessRecord {
        FitnessRecord {
            evaluation_id: id,
            generation: id as usize / 2,
            slot: id as usize % 2,
            seed: 4,
            algorithm: SslAlgorithm::Byol,
            fitness,
            chromosome: Chromosome::new(vec![Gene::new(Operator::Rotate, -7.25), Gene::new(Operator::Color, 0.1 + 0.2)]),
            flag: (id == 1).then(|| "diverged".to_string()),
        }
    }

    fn sealed(records: &[FitnessRecord]) -> Vec<u8> {
        let mut w = RunLogWriter::new(Vec::new());
        for r in records {
            w.append(r).unwrap();
        }
        w.finish().unwrap().1
    }

    #[test]
    fn round_trip_is_exact() {
        let records: Vec<_> = (0..5).map(|i| record(i, 1.0 / 3.0 + i as f64 * 1e-17)).collect();
        let bytes = sealed(&records);
        assert_eq!(parse_runlog(&bytes[..]).unwrap(), records);
    }

    #[test]
    fn tampering_is_detected() {
        let records: Vec<_> = (0..3).map(|i| record(i, 0.5)).collect();
        let bytes = sealed(&records);
        let text = String::from_utf8(bytes).unwrap();
        let edited = text.replacen("0.5", "0.6", 1);
        assert!(matches!(parse_runlog(edited.as_bytes()), Err(RunLogError::ChecksumMismatch)));
        let unsealed: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_runlog(unsealed.as_bytes()), Err(RunLogError::Unsealed)));
        let dropped: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_runlog(dropped.as_bytes()), Err(RunLogError::CountMismatch { expected: 3, found: 2 })));
        let extra = format!("{text}{}\n", text.lines().next().unwrap());
        assert!(matches!(parse_runlog(extra.as_bytes()), Err(RunLogError::TrailingData)));
    }

    #[test]
    fn generations_csv_round_trip() {
        let gens: Vec<GenerationSummary> = (0..3)
            .map(|g| GenerationSummary {
                generation: g,
                stats: PopulationStats {
                    f_max: 0.7 + g as f64 / 30.0,
                    f_mean: 0.1 + 0.2,
                    f_min: 0.0,
                    best_chromosome: record(g as u64, 0.0).chromosome.with_algorithm(SslAlgorithm::SwAV),
                },
            })
            .collect();
        let mut buf = Vec::new();
        write_generations_csv(&gens, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("generation,f_max,f_mean,f_min,best_chromosome\n"));
        assert_eq!(read_generations_csv(&buf[..]).unwrap(), gens);
    }
}
