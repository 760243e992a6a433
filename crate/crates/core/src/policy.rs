//! Chromosomes: augmentation policies, optionally tagged with the SSL
//! algorithm that should train on them.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{Gene, Operator};

/// Default number of genes per chromosome.
pub const DEFAULT_LENGTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SslAlgorithm {
    #[serde(rename = "BYOL")]
    Byol,
    #[serde(rename = "SimSiam")]
    SimSiam,
    #[serde(rename = "NNCLR")]
    Nnclr,
    #[serde(rename = "SwAV")]
    SwAV,
}

impl SslAlgorithm {
    pub const ALL: [SslAlgorithm; 4] = [
        SslAlgorithm::Byol,
        SslAlgorithm::SimSiam,
        SslAlgorithm::Nnclr,
        SslAlgorithm::SwAV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslAlgorithm::Byol => "BYOL",
            SslAlgorithm::SimSiam => "SimSiam",
            SslAlgorithm::Nnclr => "NNCLR",
            SslAlgorithm::SwAV => "SwAV",
        }
    }
}

impl fmt::Display for SslAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown SSL algorithm `{0}`")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for SslAlgorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SslAlgorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownAlgorithm(s.to_string()))
    }
}

/// Single optimization (fixed algorithm) or multiple optimization (the
/// algorithm is a gene).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    So,
    Mo,
}

/// An ordered augmentation policy. Gene order is the application order and
/// takes part in equality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<SslAlgorithm>,
    pub genes: Vec<Gene>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("chromosome length {0} outside 1..=12")]
    InvalidLength(usize),
    #[error("malformed chromosome record: {0}")]
    Parse(String),
}

/// One violated chromosome invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    TooLong { len: usize, max: usize },
    DuplicateOperator(Operator),
    OutOfRange { op: Operator, intensity: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => f.write_str("chromosome has no genes"),
            Violation::TooLong { len, max } => write!(f, "length {len} exceeds maximum {max}"),
            Violation::DuplicateOperator(op) => write!(f, "duplicate operator {op}"),
            Violation::OutOfRange { op, intensity } => {
                write!(f, "intensity {intensity} of {op} out of range {}", op.range())
            }
        }
    }
}

impl Chromosome {
    pub fn new(genes: Vec<Gene>) -> Self {
        Self {
            algorithm: None,
            genes,
        }
    }

    pub fn with_algorithm(mut self, algorithm: SslAlgorithm) -> Self {
        self.algorithm = Some(algorithm);
        self
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn contains(&self, op: Operator) -> bool {
        self.genes.iter().any(|g| g.op == op)
    }

    pub fn operators(&self) -> impl Iterator<Item = Operator> + '_ {
        self.genes.iter().map(|g| g.op)
    }

    /// Bit `i` is set iff `Operator::ALL[i]` is present.
    pub fn operator_mask(&self) -> u16 {
        self.operators().fold(0, |m, op| m | (1 << op.index()))
    }

    /// Reports every violated invariant, with `max_len` as the length cap.
    pub fn validate(&self, max_len: usize) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        if self.genes.is_empty() {
            violations.push(Violation::Empty);
        }
        if self.genes.len() > max_len {
            violations.push(Violation::TooLong {
                len: self.genes.len(),
                max: max_len,
            });
        }
        let mut seen = [false; Operator::COUNT];
        for g in &self.genes {
            if std::mem::replace(&mut seen[g.op.index()], true) {
                violations.push(Violation::DuplicateOperator(g.op));
            }
            if !g.is_in_range() {
                violations.push(Violation::OutOfRange {
                    op: g.op,
                    intensity: g.intensity,
                });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate(Operator::COUNT).is_ok()
    }

    /// Single-line text form used in logs and the worker protocol.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("chromosome serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(line).map_err(|e| PolicyError::Parse(e.to_string()))
    }

    /// Key with bitwise intensity equality, suitable for hashing.
    pub fn key(&self) -> ChromosomeKey {
        ChromosomeKey(self.clone())
    }
}

impl fmt::Display for Chromosome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(alg) = self.algorithm {
            write!(f, "{alg}: ")?;
        }
        for (i, g) in self.genes.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "({}, {})", g.op, g.intensity)?;
        }
        Ok(())
    }
}

/// Hashable view of a chromosome; intensities compare by bit pattern.
#[derive(Clone, Debug)]
pub struct ChromosomeKey(Chromosome);

impl PartialEq for ChromosomeKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.algorithm == other.0.algorithm
            && self.0.genes.len() == other.0.genes.len()
            && self
                .0
                .genes
                .iter()
                .zip(&other.0.genes)
                .all(|(a, b)| a.op == b.op && a.intensity.to_bits() == b.intensity.to_bits())
    }
}

impl Eq for ChromosomeKey {}

impl Hash for ChromosomeKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.algorithm.hash(state);
        for g in &self.0.genes {
            g.op.hash(state);
            g.intensity.to_bits().hash(state);
        }
    }
}

/// Draws `len` distinct operators uniformly, each with a continuous-uniform
/// intensity; in MO mode also draws the algorithm gene.
pub fn random_chromosome<R: Rng + ?Sized>(
    rng: &mut R,
    mode: Mode,
    len: usize,
) -> Result<Chromosome, PolicyError> {
    if len == 0 || len > Operator::COUNT {
        return Err(PolicyError::InvalidLength(len));
    }
    let mut ops = Operator::ALL;
    let (chosen, _) = ops.partial_shuffle(rng, len);
    let genes = chosen
        .iter()
        .map(|&op| {
            let r = op.range();
            Gene::new(op, rng.random_range(r.min..=r.max))
        })
        .collect();
    let algorithm = match mode {
        Mode::So => None,
        Mode::Mo => Some(
            *SslAlgorithm::ALL
                .choose(rng)
                .expect("algorithm list is non-empty"),
        ),
    };
    Ok(Chromosome { algorithm, genes })
}
