//! Two-dimensional loss surfaces `f(α, β) = L(θ* + αδ + βη)` around a
//! trained downstream model, with random directions rescaled row by row to
//! the norms of the weights they perturb.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ssl::head;
use crate::ssl::params::{write_checkpoint, ParamSpec, Params};
use crate::ssl::pretext;
use crate::ssl::Downstream;

/// Encoder arrays occupy manifest slots `0..4`, the feature scaler `4..6`
/// and the head `6..12`.
pub const SCALER_MEAN: usize = 4;
pub const SCALER_SCALE: usize = 5;
pub const HEAD_START: usize = 6;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("grid does not contain the origin (0, 0)")]
    MissingOrigin,
    #[error("grid axis is empty")]
    EmptyAxis,
    #[error("direction has {got} values, model has {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("evaluation set is empty or labels do not match")]
    BadEvalSet,
}

/// Which parameters the directions may move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Only the classifier head; encoder features stay fixed.
    #[default]
    Head,
    /// Encoder and head.
    Full,
}

impl Scope {
    fn includes(self, slot: usize) -> bool {
        match self {
            Scope::Head => slot >= HEAD_START,
            Scope::Full => !(SCALER_MEAN..HEAD_START).contains(&slot),
        }
    }
}

/// The downstream model as one parameter buffer: encoder, feature scaler,
/// head.
pub fn downstream_checkpoint(d: &Downstream) -> Params {
    let enc = &d.encoder.manifest;
    let mut arrays: Vec<(String, Vec<usize>)> = enc[..4].iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    let r = d.scaler.mean.len();
    arrays.push(("probe.mean".into(), vec![r]));
    arrays.push(("probe.scale".into(), vec![r]));
    arrays.extend(d.head.manifest.iter().map(|s| (s.name.clone(), s.shape.clone())));
    let refs: Vec<(&str, &[usize])> = arrays.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let mut p = Params::new(&refs);
    let enc_len = enc[3].range().end;
    p.values[..enc_len].copy_from_slice(&d.encoder.values[..enc_len]);
    p.values[p.manifest[SCALER_MEAN].range()].copy_from_slice(&d.scaler.mean);
    p.values[p.manifest[SCALER_SCALE].range()].copy_from_slice(&d.scaler.scale);
    let head_start = p.manifest[HEAD_START].offset;
    p.values[head_start..].copy_from_slice(&d.head.values);
    p
}

/// Head inputs: encoder output mapped through the stored scaler.
pub fn features(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>) -> Array2<f64> {
    let mut f = pretext::encode(values, m, x);
    let mean = &values[m[SCALER_MEAN].range()];
    let scale = &values[m[SCALER_SCALE].range()];
    for (j, mut col) in f.columns_mut().into_iter().enumerate() {
        let (mu, s) = (mean[j], scale[j]);
        col.mapv_inplace(|v| (v - mu) * s);
    }
    f
}

/// Mean cross-entropy of the downstream model over `(x, labels)`.
pub fn model_loss(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    head::loss(values, &m[HEAD_START..], &features(values, m, x).view(), labels)
}

/// A perturbation direction laid out like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
    /// `(array name, row)` of weight rows left at zero because the model
    /// row has norm zero.
    pub zero_rows: Vec<(String, usize)>,
}

impl Direction {
    pub fn zeros(model: &Params) -> Self {
        Self {
            values: vec![0.0; model.len()],
            zero_rows: Vec::new(),
        }
    }
}

/// Standard Gaussian rows for every in-scope weight matrix, each rescaled
/// to the norm of the matching row of `model`; everything else zero.
pub fn sample_direction<R: Rng + ?Sized>(model: &Params, scope: Scope, rng: &mut R) -> Direction {
    let mut dir = Direction::zeros(model);
    for (slot, spec) in model.manifest.iter().enumerate() {
        if !spec.is_matrix() || !scope.includes(slot) {
            continue;
        }
        let cols = spec.shape[1];
        for row in 0..spec.shape[0] {
            let start = spec.offset + row * cols;
            let theta = &model.values[start..start + cols];
            let d = &mut dir.values[start..start + cols];
            for v in d.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let tn = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tn == 0.0 || dn == 0.0 {
                log::warn!("{} row {row} has zero norm; direction row set to zero", spec.name);
                d.fill(0.0);
                dir.zero_rows.push((spec.name.clone(), row));
            } else {
                let k = tn / dn;
                d.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    dir
}

/// Grid coordinates; must contain 0 on both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

/// `n` points `lo + (hi − lo)·k/n` for `k = 0..n`: the left edges of `n`
/// equal cells. With a symmetric range and even `n` the midpoint is exactly
/// zero.
pub fn cell_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        let axis = cell_axis(lo, hi, n);
        Self {
            alphas: axis.clone(),
            betas: axis,
        }
    }

    fn validate(&self) -> Result<(), LandscapeError> {
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(LandscapeError::EmptyAxis);
        }
        if !self.alphas.contains(&0.0) || !self.betas.contains(&0.0) {
            return Err(LandscapeError::MissingOrigin);
        }
        Ok(())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::square(-1.0, 1.0, 50)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` at `(alphas[i], betas[j])`; non-finite losses are
    /// stored as `+inf`.
    pub losses: Vec<Vec<f64>>,
    pub center_loss: f64,
}

impl LandscapeGrid {
    pub fn at_origin(&self) -> f64 {
        let i = self.alphas.iter().position(|&a| a == 0.0).expect("grid holds the origin");
        let j = self.betas.iter().position(|&b| b == 0.0).expect("grid holds the origin");
        self.losses[i][j]
    }
}

/// `θ* + αδ + βη`, elementwise in that order.
pub fn perturbed(theta: &[f64], delta: &[f64], eta: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(delta)
        .zip(eta)
        .map(|((t, d), e)| t + alpha * d + beta * e)
        .collect()
}

/// Loss at every grid point. `model` is never modified; each point gets its
/// own buffer. Points run on `jobs` threads with identical results for any
/// thread count.
pub fn compute_grid(
    model: &Params,
    x: &ArrayView2<f64>,
    labels: &[usize],
    grid: &GridSpec,
    delta: &Direction,
    eta: &Direction,
    jobs: usize,
) -> Result<LandscapeGrid, LandscapeError> {
    grid.validate()?;
    for d in [delta, eta] {
        if d.values.len() != model.len() {
            return Err(LandscapeError::ShapeMismatch {
                got: d.values.len(),
                want: model.len(),
            });
        }
    }
    if x.nrows() == 0 || x.nrows() != labels.len() {
        return Err(LandscapeError::BadEvalSet);
    }
    let m = &model.manifest;
    let head_offset = m[HEAD_START].offset;
    // with the encoder and scaler untouched the features are shared by all
    // points; θ + α·0 + β·0 is θ bit for bit, so this changes nothing
    let frozen = delta.values[..head_offset].iter().chain(&eta.values[..head_offset]).all(|&v| v == 0.0);
    let cached = frozen.then(|| features(&model.values, m, x));
    let point = |alpha: f64, beta: f64| -> f64 {
        let v = perturbed(&model.values, &delta.values, &eta.values, alpha, beta);
        let loss = match &cached {
            Some(f) => head::loss(&v, &m[HEAD_START..], &f.view(), labels),
            None => model_loss(&v, m, x, labels),
        };
        if loss.is_finite() {
            loss
        } else {
            f64::INFINITY
        }
    };
    let coords: Vec<(f64, f64)> = grid
        .alphas
        .iter()
        .flat_map(|&a| grid.betas.iter().map(move |&b| (a, b)))
        .collect();
    let flat: Vec<f64> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| coords.par_iter().map(|&(a, b)| point(a, b)).collect())
    } else {
        coords.iter().map(|&(a, b)| point(a, b)).collect()
    };
    let losses = flat.chunks(grid.betas.len()).map(<[f64]>::to_vec).collect();
    Ok(LandscapeGrid {
        alphas: grid.alphas.clone(),
        betas: grid.betas.clone(),
        losses,
        center_loss: model_loss(&model.values, m, x, labels),
    })
}

/// Header `alpha,<betas…>`, then one row per alpha.
pub fn write_grid_csv(grid: &LandscapeGrid, w: impl std::io::Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["alpha".to_string()];
    header.extend(grid.betas.iter().map(f64::to_string));
    out.write_record(&header)?;
    for (a, row) in grid.alphas.iter().zip(&grid.losses) {
        let mut rec = vec![a.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Sidecar describing how a grid was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeManifest {
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub eval_split: String,
    pub scope: Scope,
    pub grid: GridSpec,
    pub center_loss: f64,
    pub zero_rows: usize,
}

/// SHA-256 of the checkpoint encoding of `model`.
pub fn checkpoint_id(model: &Params) -> String {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}
