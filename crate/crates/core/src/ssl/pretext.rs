//! The pretext network and the SimSiam, BYOL, NNCLR and SwAV objectives.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::nn::{
    batch_standardize, batch_standardize_backward, cross_entropy, linear, linear_backward, log_softmax_rows,
    normalize_rows, normalize_rows_backward, relu, relu_backward, softmax_rows,
};
use super::optim::Sgd;
use super::params::{matrix_of, matrix_of_mut, ParamSpec, Params};
use super::{SslConfig, SslError, INPUT_DIM};
use crate::policy::SslAlgorithm;
use crate::rng::substream;

pub const ENC1_W: usize = 0;
pub const ENC1_B: usize = 1;
pub const ENC2_W: usize = 2;
pub const ENC2_B: usize = 3;
pub const PROJ_W: usize = 4;
pub const PROJ_B: usize = 5;
pub const PRED_W: usize = 6;
pub const PRED_B: usize = 7;
pub const PROTOS: usize = 8;

/// Parameters of encoder and projector, the part mirrored by BYOL's target.
pub fn online_prefix_len(params: &Params) -> usize {
    params.manifest[PRED_W].offset
}

/// Randomly initialized pretext parameters. The encoder depends only on
/// `seed`, so every algorithm (and the supervised probe) starts from the
/// same encoder for a given seed.
pub fn init_params(cfg: &SslConfig, seed: u64) -> Params {
    let (h, r, p, k) = (cfg.hidden, cfg.repr, cfg.proj, cfg.prototypes);
    let mut params = Params::new(&[
        ("encoder.0.weight", &[h, INPUT_DIM]),
        ("encoder.0.bias", &[h]),
        ("encoder.1.weight", &[r, h]),
        ("encoder.1.bias", &[r]),
        ("projector.weight", &[p, r]),
        ("projector.bias", &[p]),
        ("predictor.weight", &[p, p]),
        ("predictor.bias", &[p]),
        ("prototypes", &[k, p]),
    ]);
    let mut rng = substream(seed, "init-encoder", &[]);
    params.init_linear(ENC1_W, ENC1_B, &mut rng);
    params.init_linear(ENC2_W, ENC2_B, &mut rng);
    let mut rng = substream(seed, "init-pretext-heads", &[]);
    params.init_linear(PROJ_W, PROJ_B, &mut rng);
    params.init_linear(PRED_W, PRED_B, &mut rng);
    if cfg.predictor_identity_init {
        let spec = params.manifest[PRED_W].clone();
        let mut w = matrix_of_mut(&spec, &mut params.values);
        w.fill(0.0);
        w.diag_mut().fill(1.0);
        let b = params.manifest[PRED_B].range();
        params.values[b].fill(0.0);
    }
    let r = params.manifest[PROTOS].range();
    for v in &mut params.values[r] {
        *v = rng.sample(StandardNormal);
    }
    normalize_prototypes(&mut params);
    params
}

pub fn normalize_prototypes(params: &mut Params) {
    let spec = params.manifest[PROTOS].clone();
    let mut c = matrix_of_mut(&spec, &mut params.values);
    for mut row in c.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Activations kept for the backward pass.
pub struct Forward {
    h1: Array2<f64>,
    a1: Array2<f64>,
    pub y: Array2<f64>,
    /// Projector output before batch standardization.
    pub z_raw: Array2<f64>,
    bn_inv: Option<Array1<f64>>,
    pub z: Array2<f64>,
    pub p: Option<Array2<f64>>,
}

/// Encoder, projector and optionally predictor. `values` may be the
/// online-prefix slice when `with_pred` is false. With `bn` the projector
/// output is batch-standardized.
pub fn forward(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>, with_pred: bool, bn: bool) -> Forward {
    let h1 = linear(x, values, &m[ENC1_W], Some(&m[ENC1_B]));
    let a1 = relu(&h1);
    let y = linear(&a1.view(), values, &m[ENC2_W], Some(&m[ENC2_B]));
    let z_raw = linear(&y.view(), values, &m[PROJ_W], Some(&m[PROJ_B]));
    let (z, bn_inv) = if bn {
        batch_standardize(&z_raw)
    } else {
        (z_raw.clone(), None)
    };
    let p = with_pred.then(|| linear(&z.view(), values, &m[PRED_W], Some(&m[PRED_B])));
    Forward {
        h1,
        a1,
        y,
        z_raw,
        bn_inv,
        z,
        p,
    }
}

/// Encoder output only.
pub fn encode(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>) -> Array2<f64> {
    let a1 = relu(&linear(x, values, &m[ENC1_W], Some(&m[ENC1_B])));
    linear(&a1.view(), values, &m[ENC2_W], Some(&m[ENC2_B]))
}

fn backward(
    values: &[f64],
    m: &[ParamSpec],
    x: &ArrayView2<f64>,
    fw: &Forward,
    mut dz: Array2<f64>,
    dp: Option<Array2<f64>>,
    grad: &mut [f64],
) {
    if let Some(dp) = dp {
        dz += &linear_backward(&fw.z.view(), &dp, values, grad, &m[PRED_W], Some(&m[PRED_B]), true)
            .expect("dx requested");
    }
    let dz = batch_standardize_backward(&dz, &fw.z, fw.bn_inv.as_ref());
    let dy = linear_backward(&fw.y.view(), &dz, values, grad, &m[PROJ_W], Some(&m[PROJ_B]), true)
        .expect("dx requested");
    let mut dh1 = linear_backward(&fw.a1.view(), &dy, values, grad, &m[ENC2_W], Some(&m[ENC2_B]), true)
        .expect("dx requested");
    relu_backward(&mut dh1, &fw.h1);
    linear_backward(x, &dh1, values, grad, &m[ENC1_W], Some(&m[ENC1_B]), false);
}

/// Sinkhorn-Knopp: `Q = exp(scores/ε)` (row max subtracted first), then
/// `iters` rounds of scaling rows to sum `1/B` and columns to sum `1/K`;
/// the result is rescaled so that every row sums to one.
pub fn sinkhorn(scores: &Array2<f64>, epsilon: f64, iters: usize) -> Array2<f64> {
    let (b, k) = scores.dim();
    let mut q = scores.clone();
    for mut row in q.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| ((v - m) / epsilon).exp());
    }
    for _ in 0..iters {
        for mut row in q.rows_mut() {
            let s = row.sum();
            row *= 1.0 / (b as f64 * s);
        }
        for mut col in q.columns_mut() {
            let s = col.sum();
            if s > 0.0 {
                col *= 1.0 / (k as f64 * s);
            }
        }
    }
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    q
}

/// Stop-gradient quantities of one step: treated as constants when
/// differentiating the loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Projections of the other view.
    SimSiam { z1: Array2<f64>, z2: Array2<f64> },
    /// Target-network projections.
    Byol { t1: Array2<f64>, t2: Array2<f64> },
    /// Unit-norm positives: the support-set neighbours of each view.
    Nnclr { nn1: Array2<f64>, nn2: Array2<f64> },
    /// Sinkhorn codes of each view.
    SwAV { q1: Array2<f64>, q2: Array2<f64> },
}

fn nearest_neighbours(zh: &Array2<f64>, queue: &VecDeque<Array1<f64>>) -> Array2<f64> {
    if queue.is_empty() {
        return zh.clone();
    }
    let mut out = Array2::zeros(zh.dim());
    for (row, mut dst) in zh.rows().into_iter().zip(out.rows_mut()) {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, q) in queue.iter().enumerate() {
            let s = q.dot(&row);
            if s > best_sim {
                best_sim = s;
                best = i;
            }
        }
        dst.assign(&queue[best]);
    }
    out
}

/// SimSiam / BYOL per-row term: `‖p̂ − t̂‖²` for BYOL, `−cos(p, t)` for
/// SimSiam. Returns the summed value and `d/dp` scaled by `scale`.
fn alignment(p: &Array2<f64>, t: &Array2<f64>, byol: bool, scale: f64) -> (f64, Array2<f64>) {
    let (ph, pn) = normalize_rows(p);
    let (th, _) = normalize_rows(t);
    let (value, d_hat) = if byol {
        let diff = &ph - &th;
        ((&diff * &diff).sum(), diff * (2.0 * scale))
    } else {
        (-(&ph * &th).sum(), th * -scale)
    };
    (value, normalize_rows_backward(&d_hat, &ph, &pn))
}

/// InfoNCE with constant positives `pos` against in-batch candidates `zh`:
/// row `b` of `pos` should match row `b` of `zh`.
fn info_nce(pos: &Array2<f64>, zh: &Array2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let logits = pos.dot(&zh.t()) / temperature;
    let labels: Vec<usize> = (0..zh.nrows()).collect();
    let (loss, dlogits) = cross_entropy(&logits, &labels, true);
    (loss, dlogits.expect("grad requested").t().dot(pos) / temperature)
}

/// Swapped prediction term `−Σ_b q_b · log softmax(s_b / T) / B` and its
/// gradient with respect to the scores.
fn swapped(scores: &Array2<f64>, codes: &Array2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let b = scores.nrows() as f64;
    let scaled = scores / temperature;
    let logp = log_softmax_rows(&scaled);
    let loss = -(codes * &logp).sum() / b;
    let mut d = softmax_rows(&scaled);
    for (mut drow, qrow) in d.rows_mut().into_iter().zip(codes.rows()) {
        let mass = qrow.sum();
        drow *= mass;
        drow -= &qrow;
    }
    (loss, d / (temperature * b))
}

/// The loss given fixed targets; accumulates its exact gradient when
/// `grad` is given. This is the function the optimizer differentiates.
#[allow(clippy::too_many_arguments)]
pub fn loss_with_targets(
    algorithm: SslAlgorithm,
    cfg: &SslConfig,
    values: &[f64],
    m: &[ParamSpec],
    x1: &ArrayView2<f64>,
    x2: &ArrayView2<f64>,
    targets: &Targets,
    grad: Option<&mut [f64]>,
) -> f64 {
    let with_pred = matches!(algorithm, SslAlgorithm::SimSiam | SslAlgorithm::Byol);
    let fw1 = forward(values, m, x1, with_pred, cfg.projector_bn);
    let fw2 = forward(values, m, x2, with_pred, cfg.projector_bn);
    loss_from_forward(algorithm, cfg, values, m, x1, x2, &fw1, &fw2, targets, grad)
}

#[allow(clippy::too_many_arguments)]
fn loss_from_forward(
    algorithm: SslAlgorithm,
    cfg: &SslConfig,
    values: &[f64],
    m: &[ParamSpec],
    x1: &ArrayView2<f64>,
    x2: &ArrayView2<f64>,
    fw1: &Forward,
    fw2: &Forward,
    targets: &Targets,
    grad: Option<&mut [f64]>,
) -> f64 {
    let b = x1.nrows() as f64;
    let (loss, dz1, dz2, dp1, dp2) = match (algorithm, targets) {
        (SslAlgorithm::SimSiam, Targets::SimSiam { z1, z2 }) | (SslAlgorithm::Byol, Targets::Byol { t1: z1, t2: z2 }) => {
            let byol = algorithm == SslAlgorithm::Byol;
            let scale = 0.5 / b;
            let p1 = fw1.p.as_ref().expect("predictor output");
            let p2 = fw2.p.as_ref().expect("predictor output");
            let (v1, dp1) = alignment(p1, z2, byol, scale);
            let (v2, dp2) = alignment(p2, z1, byol, scale);
            let zero = Array2::zeros(fw1.z.dim());
            ((v1 + v2) * scale, zero.clone(), zero, Some(dp1), Some(dp2))
        }
        (SslAlgorithm::Nnclr, Targets::Nnclr { nn1, nn2 }) => {
            let (z1h, n1) = normalize_rows(&fw1.z);
            let (z2h, n2) = normalize_rows(&fw2.z);
            let (la, dz2h) = info_nce(nn1, &z2h, cfg.nnclr_temperature);
            let (lb, dz1h) = info_nce(nn2, &z1h, cfg.nnclr_temperature);
            let dz1 = normalize_rows_backward(&(dz1h * 0.5), &z1h, &n1);
            let dz2 = normalize_rows_backward(&(dz2h * 0.5), &z2h, &n2);
            (0.5 * (la + lb), dz1, dz2, None, None)
        }
        (SslAlgorithm::SwAV, Targets::SwAV { q1, q2 }) => {
            let c = matrix_of(&m[PROTOS], values);
            let (z1h, n1) = normalize_rows(&fw1.z);
            let (z2h, n2) = normalize_rows(&fw2.z);
            let s1 = z1h.dot(&c.t());
            let s2 = z2h.dot(&c.t());
            let (la, ds1) = swapped(&s1, q2, cfg.swav_temperature);
            let (lb, ds2) = swapped(&s2, q1, cfg.swav_temperature);
            let (ds1, ds2) = (ds1 * 0.5, ds2 * 0.5);
            let loss = 0.5 * (la + lb);
            if let Some(grad) = grad {
                let mut gc = matrix_of_mut(&m[PROTOS], grad);
                gc += &ds1.t().dot(&z1h);
                gc += &ds2.t().dot(&z2h);
                let dz1 = normalize_rows_backward(&ds1.dot(&c), &z1h, &n1);
                let dz2 = normalize_rows_backward(&ds2.dot(&c), &z2h, &n2);
                backward(values, m, x1, fw1, dz1, None, grad);
                backward(values, m, x2, fw2, dz2, None, grad);
            }
            return loss;
        }
        _ => panic!("targets do not belong to {algorithm}"),
    };
    if let Some(grad) = grad {
        backward(values, m, x1, fw1, dz1, dp1, grad);
        backward(values, m, x2, fw2, dz2, dp2, grad);
    }
    loss
}

/// A pretext network together with its algorithm-specific state.
#[derive(Clone, Debug)]
pub struct PretextModel {
    pub algorithm: SslAlgorithm,
    pub cfg: SslConfig,
    pub params: Params,
    /// BYOL's EMA copy of the online prefix.
    pub target: Option<Vec<f64>>,
    /// NNCLR's support set, oldest first.
    pub queue: VecDeque<Array1<f64>>,
    pub ema_tau: f64,
    opt: Sgd,
    grad: Vec<f64>,
}

impl PretextModel {
    pub fn new(algorithm: SslAlgorithm, cfg: &SslConfig, seed: u64) -> Self {
        let params = init_params(cfg, seed);
        let target = (algorithm == SslAlgorithm::Byol).then(|| params.values[..online_prefix_len(&params)].to_vec());
        let n = params.len();
        Self {
            algorithm,
            cfg: cfg.clone(),
            target,
            queue: VecDeque::new(),
            ema_tau: cfg.ema_tau,
            opt: Sgd::new(cfg.sgd_lr, cfg.sgd_momentum, n),
            grad: vec![0.0; n],
            params,
        }
    }

    fn uses_predictor(&self) -> bool {
        matches!(self.algorithm, SslAlgorithm::SimSiam | SslAlgorithm::Byol)
    }

    /// Computes the stop-gradient targets at the current parameters.
    pub fn targets(&self, x1: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> Targets {
        let bn = self.cfg.projector_bn;
        let fw1 = forward(&self.params.values, &self.params.manifest, x1, false, bn);
        let fw2 = forward(&self.params.values, &self.params.manifest, x2, false, bn);
        self.targets_from(x1, x2, &fw1, &fw2)
    }

    fn targets_from(&self, x1: &ArrayView2<f64>, x2: &ArrayView2<f64>, fw1: &Forward, fw2: &Forward) -> Targets {
        let m = &self.params.manifest;
        match self.algorithm {
            SslAlgorithm::SimSiam => Targets::SimSiam {
                z1: fw1.z.clone(),
                z2: fw2.z.clone(),
            },
            SslAlgorithm::Byol => {
                let t = self.target.as_ref().expect("BYOL keeps a target");
                Targets::Byol {
                    t1: forward(t, m, x1, false, self.cfg.projector_bn).z,
                    t2: forward(t, m, x2, false, self.cfg.projector_bn).z,
                }
            }
            SslAlgorithm::Nnclr => Targets::Nnclr {
                nn1: nearest_neighbours(&normalize_rows(&fw1.z).0, &self.queue),
                nn2: nearest_neighbours(&normalize_rows(&fw2.z).0, &self.queue),
            },
            SslAlgorithm::SwAV => {
                let c = self.params.matrix(PROTOS);
                let codes = |z: &Array2<f64>| {
                    let scores = normalize_rows(z).0.dot(&c.t());
                    sinkhorn(&scores, self.cfg.sinkhorn_epsilon, self.cfg.sinkhorn_iters)
                };
                Targets::SwAV {
                    q1: codes(&fw1.z),
                    q2: codes(&fw2.z),
                }
            }
        }
    }

    /// One optimizer step on a pair of views; returns the loss before the
    /// step.
    pub fn step(&mut self, x1: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> Result<f64, SslError> {
        let (values, m) = (&self.params.values, &self.params.manifest);
        let bn = self.cfg.projector_bn;
        let fw1 = forward(values, m, x1, self.uses_predictor(), bn);
        let fw2 = forward(values, m, x2, self.uses_predictor(), bn);
        let targets = self.targets_from(x1, x2, &fw1, &fw2);
        self.grad.fill(0.0);
        let loss = loss_from_forward(
            self.algorithm,
            &self.cfg,
            values,
            m,
            x1,
            x2,
            &fw1,
            &fw2,
            &targets,
            Some(&mut self.grad),
        );
        if !loss.is_finite() {
            return Err(SslError::Diverged("pretext loss"));
        }
        self.opt.step(&mut self.params.values, &self.grad);
        if !self.params.is_finite() {
            return Err(SslError::Diverged("pretext parameters"));
        }
        match self.algorithm {
            SslAlgorithm::Byol => self.ema_update(),
            SslAlgorithm::Nnclr => {
                for row in normalize_rows(&fw1.z).0.rows() {
                    self.enqueue(row.to_owned());
                }
            }
            SslAlgorithm::SwAV => normalize_prototypes(&mut self.params),
            SslAlgorithm::SimSiam => {}
        }
        Ok(loss)
    }

    /// `target ← τ·target + (1−τ)·online` over encoder and projector.
    pub fn ema_update(&mut self) {
        let tau = self.ema_tau;
        if let Some(t) = self.target.as_mut() {
            for (t, &o) in t.iter_mut().zip(&self.params.values) {
                *t = tau * *t + (1.0 - tau) * o;
            }
        }
    }

    /// Appends to the support set, evicting the oldest entry when full.
    pub fn enqueue(&mut self, v: Array1<f64>) {
        if self.cfg.queue_size == 0 {
            return;
        }
        if self.queue.len() == self.cfg.queue_size {
            self.queue.pop_front();
        }
        self.queue.push_back(v);
    }

    pub fn encode(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        encode(&self.params.values, &self.params.manifest, x)
    }

    /// Unit-normalized projections, standardized over `x` as a batch when
    /// the projector is.
    pub fn embed(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        normalize_rows(&forward(&self.params.values, &self.params.manifest, x, false, self.cfg.projector_bn).z).0
    }

    pub fn last_gradient(&self) -> &[f64] {
        &self.grad
    }
}

/// Mean pairwise cosine distance of normalized projections, standardized
/// over the probe set when the projector is; 0 means every probe maps to the
/// same point. Vanishing projections (a constant projector under
/// standardization) count as identical to each other.
pub fn collapse_metric(model: &PretextModel, probes: &ArrayView2<f64>) -> f64 {
    let n = probes.nrows();
    assert!(n >= 2, "collapse metric needs at least two probes");
    let z = forward(&model.params.values, &model.params.manifest, probes, false, model.cfg.projector_bn).z;
    let (e, norms) = normalize_rows(&z);
    let zero: Vec<bool> = norms.iter().map(|&v| v < 1e-6).collect();
    let g = e.dot(&e.t());
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if !(zero[i] && zero[j]) {
                total += 1.0 - g[[i, j]];
            }
        }
    }
    (total / (n * (n - 1) / 2) as f64).max(0.0)
}

/// Row sums, for checks.
pub fn row_sums(a: &Array2<f64>) -> Array1<f64> {
    a.sum_axis(Axis(1))
}
