//! Post-hoc analysis of run logs: how much swapping one operator changes
//! fitness (sensitivity) and how often an operator appears among the best
//! chromosomes (importance).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Operator;
use crate::evolve::FitnessRecord;
use crate::policy::SslAlgorithm;

pub const DEFAULT_TOP_N: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("analysis log is empty")]
    EmptyLog,
    #[error("no record has a comparator for {0}")]
    NoComparators(Operator),
    #[error("log has {len} records, fewer than the top {n} requested")]
    LogTooSmall { len: usize, n: usize },
    #[error("fitness {0} outside [0,1]")]
    BadFitness(f64),
}

/// Records analysed together, usually one (algorithm, dataset, batch size)
/// group.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisLog {
    pub label: String,
    pub records: Vec<FitnessRecord>,
}

impl AnalysisLog {
    pub fn new(label: impl Into<String>, records: Vec<FitnessRecord>) -> Result<Self, ExplainError> {
        if records.is_empty() {
            return Err(ExplainError::EmptyLog);
        }
        if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.fitness)) {
            return Err(ExplainError::BadFitness(r.fitness));
        }
        Ok(Self {
            label: label.into(),
            records,
        })
    }
}

/// Splits records by the algorithm that produced them, labelled
/// `<algorithm>` or `<algorithm>/<suffix>` when `suffix` is non-empty.
pub fn group_by_algorithm(records: &[FitnessRecord], suffix: &str) -> Vec<AnalysisLog> {
    let mut groups: BTreeMap<SslAlgorithm, Vec<FitnessRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.algorithm).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(alg, records)| AnalysisLog {
            label: if suffix.is_empty() {
                alg.to_string()
            } else {
                format!("{alg}/{suffix}")
            },
            records,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sensitivity {
    pub value: f64,
    /// Records containing the operator that had at least one comparator.
    pub matched: usize,
    /// Comparator pairs over all matched records.
    pub comparators: usize,
}

/// Mean over every record `c` containing `op` (and having comparators) of
/// `|f(c) − mean f(comparators)|`, where a comparator is any record whose
/// operator set is `ops(c)` with `op` replaced by some other operator.
/// Matching ignores intensities and gene order.
pub fn sensitivity(log: &AnalysisLog, op: Operator) -> Result<Sensitivity, ExplainError> {
    let bit = 1u16 << op.index();
    let masks: Vec<u16> = log.records.iter().map(|r| r.chromosome.operator_mask()).collect();
    let mut by_mask: HashMap<u16, Vec<usize>> = HashMap::new();
    for (i, &m) in masks.iter().enumerate() {
        by_mask.entry(m).or_default().push(i);
    }
    let mut total = 0.0;
    let mut matched = 0;
    let mut comparators = 0;
    let mut idx = Vec::new();
    for (c, &mc) in masks.iter().enumerate() {
        if mc & bit == 0 {
            continue;
        }
        let rest = mc & !bit;
        idx.clear();
        for x in Operator::ALL {
            let xb = 1u16 << x.index();
            if mc & xb != 0 {
                continue;
            }
            if let Some(list) = by_mask.get(&(rest | xb)) {
                idx.extend_from_slice(list);
            }
        }
        if idx.is_empty() {
            continue;
        }
        // record order keeps the sum independent of hashing
        idx.sort_unstable();
        let mean = idx.iter().map(|&i| log.records[i].fitness).sum::<f64>() / idx.len() as f64;
        total += (log.records[c].fitness - mean).abs();
        matched += 1;
        comparators += idx.len();
    }
    if matched == 0 {
        return Err(ExplainError::NoComparators(op));
    }
    Ok(Sensitivity {
        value: total / matched as f64,
        matched,
        comparators,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Importance {
    pub count: usize,
    pub n: usize,
    pub share: f64,
}

/// Indices of the records sorted best first: fitness descending, then
/// earlier generation, then lower evaluation id.
pub fn ranked(records: &[FitnessRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.fitness
            .total_cmp(&ra.fitness)
            .then(ra.generation.cmp(&rb.generation))
            .then(ra.evaluation_id.cmp(&rb.evaluation_id))
    });
    order
}

/// How many of the top `n` records contain `op`.
pub fn importance(log: &AnalysisLog, op: Operator, n: usize) -> Result<Importance, ExplainError> {
    if log.records.len() < n || n == 0 {
        return Err(ExplainError::LogTooSmall {
            len: log.records.len(),
            n,
        });
    }
    let count = ranked(&log.records)[..n]
        .iter()
        .filter(|&&i| log.records[i].chromosome.contains(op))
        .count();
    Ok(Importance {
        count,
        n,
        share: count as f64 / n as f64,
    })
}

/// One (operator, group) cell of the stacked report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub operator: Operator,
    pub algorithm: String,
    /// `None` when the operator had no comparators in this group.
    pub sensitivity: Option<f64>,
    pub comparator_count: usize,
    pub importance_raw: usize,
    pub importance_share: f64,
}

/// Sensitivity and importance of all twelve operators for every group.
/// Groups smaller than `n` use all their records for importance.
pub fn stacked_report(groups: &[AnalysisLog], n: usize) -> Vec<ReportRow> {
    let mut rows = Vec::with_capacity(groups.len() * Operator::COUNT);
    for g in groups {
        let n_eff = n.min(g.records.len());
        if n_eff < n {
            log::warn!("{}: only {} records, importance uses top {n_eff}", g.label, g.records.len());
        }
        for op in Operator::ALL {
            let s = sensitivity(g, op).ok();
            let imp = importance(g, op, n_eff).expect("n_eff within log size");
            rows.push(ReportRow {
                operator: op,
                algorithm: g.label.clone(),
                sensitivity: s.map(|s| s.value),
                comparator_count: s.map_or(0, |s| s.comparators),
                importance_raw: imp.count,
                importance_share: imp.share,
            });
        }
    }
    rows
}

/// Per-operator sums over groups, `(operator, sensitivity, share)`; flagged
/// cells contribute nothing.
pub fn stacked_totals(rows: &[ReportRow]) -> Vec<(Operator, f64, f64)> {
    Operator::ALL
        .iter()
        .map(|&op| {
            let cells = rows.iter().filter(|r| r.operator == op);
            let (s, i) = cells.fold((0.0, 0.0), |(s, i), r| (s + r.sensitivity.unwrap_or(0.0), i + r.importance_share));
            (op, s, i)
        })
        .collect()
}

pub const CSV_HEADER: [&str; 6] = [
    "operator",
    "algorithm",
    "sensitivity",
    "comparator_count",
    "importance_raw",
    "importance_share",
];

/// Writes the report; flagged sensitivities are left empty.
pub fn write_report_csv(rows: &[ReportRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.operator.to_string(),
            r.algorithm.clone(),
            r.sensitivity.map(|v| v.to_string()).unwrap_or_default(),
            r.comparator_count.to_string(),
            r.importance_raw.to_string(),
            r.importance_share.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Gene;
    use crate::policy::Chromosome;
    use Operator::*;

    fn rec(id: u64, ops: &[Operator], fitness: f64) -> FitnessRecord {
        FitnessRecord {
            evaluation_id: id,
            generation: 0,
            slot: id as usize,
            seed: 0,
            algorithm: SslAlgorithm::SimSiam,
            fitness,
            chromosome: Chromosome::new(ops.iter().map(|&op| Gene::new(op, op.range().min)).collect()),
            flag: None,
        }
    }

    #[test]
    fn hand_built_swap_pair() {
        let log = AnalysisLog::new(
            "t",
            vec![
                rec(0, &[Rotate, Color, Contrast], 0.60),
                rec(1, &[Solarize, Color, Contrast], 0.50),
                rec(2, &[ShearX, ShearY, Brightness], 0.40),
                rec(3, &[TranslateX, TranslateY, Sharpness], 0.30),
                rec(4, &[HorizontalFlip, VerticalFlip, ShearX], 0.20),
            ],
        )
        .unwrap();
        let s = sensitivity(&log, Rotate).unwrap();
        assert!((s.value - 0.10).abs() < 1e-15);
        assert_eq!((s.matched, s.comparators), (1, 1));
        assert_eq!(sensitivity(&log, Brightness), Err(ExplainError::NoComparators(Brightness)));
        // Color appears in both, but they share it, so neither is a comparator
        assert!(sensitivity(&log, Color).is_err());
    }

    #[test]
    fn flat_fitness_is_insensitive() {
        let ops = [Rotate, Color, Contrast, Solarize, ShearX];
        let records = (0..20)
            .map(|i| {
                let a = ops[i % 5];
                let b = ops[(i + 1) % 5];
                let c = ops[(i + 2) % 5];
                rec(i as u64, &[a, b, c], 0.7)
            })
            .collect();
        let log = AnalysisLog::new("t", records).unwrap();
        for op in ops {
            assert_eq!(sensitivity(&log, op).unwrap().value, 0.0);
        }
    }

    #[test]
    fn importance_edges() {
        let records: Vec<_> = (0..60).map(|i| rec(i, &[Rotate, Color, Contrast], i as f64 / 100.0)).collect();
        let log = AnalysisLog::new("t", records).unwrap();
        let imp = importance(&log, Rotate, 50).unwrap();
        assert_eq!((imp.count, imp.share), (50, 1.0));
        assert_eq!(importance(&log, Solarize, 50).unwrap().count, 0);
        assert_eq!(importance(&log, Rotate, 61), Err(ExplainError::LogTooSmall { len: 60, n: 61 }));
    }

    #[test]
    fn ranking_tie_breaks() {
        let mut a = rec(5, &[Rotate], 0.5);
        a.generation = 1;
        let b = rec(9, &[Color], 0.5);
        let c = rec(2, &[Contrast], 0.5);
        let d = rec(1, &[Solarize], 0.9);
        assert_eq!(ranked(&[a, b, c, d]), vec![3, 2, 1, 0]);
    }

    #[test]
    fn rejects_bad_logs() {
        assert_eq!(AnalysisLog::new("t", vec![]), Err(ExplainError::EmptyLog));
        assert_eq!(
            AnalysisLog::new("t", vec![rec(0, &[Rotate], 1.5)]),
            Err(ExplainError::BadFitness(1.5))
        );
    }

    #[test]
    fn csv_layout() {
        let log = AnalysisLog::new("SimSiam", vec![rec(0, &[Rotate, Color], 0.5), rec(1, &[Solarize, Color], 0.4)]).unwrap();
        let rows = stacked_report(&[log], 50);
        assert_eq!(rows.len(), 12);
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("operator,algorithm,sensitivity,comparator_count,importance_raw,importance_share"));
        assert_eq!(lines.next(), Some("HorizontalFlip,SimSiam,,0,0,0"));
        assert!(text.contains(&format!("Rotate,SimSiam,{},1,1,0.5", 0.5f64 - 0.4)));
    }
}
