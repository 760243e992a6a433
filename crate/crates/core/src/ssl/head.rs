//! The downstream classifier: three dense layers with ReLU, trained with
//! cross-entropy and Adam.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::nn::{cross_entropy, linear, linear_backward, relu, relu_backward};
use super::optim::Adam;
use super::params::{ParamSpec, Params};
use super::{SslConfig, SslError};
use crate::rng::substream;

pub const H1_W: usize = 0;
pub const H1_B: usize = 1;
pub const H2_W: usize = 2;
pub const H2_B: usize = 3;
pub const H3_W: usize = 4;
pub const H3_B: usize = 5;

pub fn init_head(in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Params {
    let mut p = Params::new(&[
        ("head.0.weight", &[hidden, in_dim]),
        ("head.0.bias", &[hidden]),
        ("head.1.weight", &[hidden, hidden]),
        ("head.1.bias", &[hidden]),
        ("head.2.weight", &[classes, hidden]),
        ("head.2.bias", &[classes]),
    ]);
    let mut rng = substream(seed, "init-head", &[]);
    p.init_linear(H1_W, H1_B, &mut rng);
    p.init_linear(H2_W, H2_B, &mut rng);
    p.init_linear(H3_W, H3_B, &mut rng);
    p
}

struct HeadForward {
    h1: Array2<f64>,
    a1: Array2<f64>,
    h2: Array2<f64>,
    a2: Array2<f64>,
    logits: Array2<f64>,
}

fn forward(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>) -> HeadForward {
    let h1 = linear(x, values, &m[H1_W], Some(&m[H1_B]));
    let a1 = relu(&h1);
    let h2 = linear(&a1.view(), values, &m[H2_W], Some(&m[H2_B]));
    let a2 = relu(&h2);
    let logits = linear(&a2.view(), values, &m[H3_W], Some(&m[H3_B]));
    HeadForward { h1, a1, h2, a2, logits }
}

pub fn logits(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>) -> Array2<f64> {
    forward(values, m, x).logits
}

/// Mean cross-entropy over `x`.
pub fn loss(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    cross_entropy(&logits(values, m, x), labels, false).0
}

/// Mean cross-entropy and its gradient (accumulated into `grad`). Returns
/// the gradient with respect to the input when `need_dx` is set.
pub fn loss_grad(
    values: &[f64],
    m: &[ParamSpec],
    x: &ArrayView2<f64>,
    labels: &[usize],
    grad: &mut [f64],
    need_dx: bool,
) -> (f64, Option<Array2<f64>>) {
    let fw = forward(values, m, x);
    let (l, d) = cross_entropy(&fw.logits, labels, true);
    let d = d.expect("grad requested");
    let mut da2 = linear_backward(&fw.a2.view(), &d, values, grad, &m[H3_W], Some(&m[H3_B]), true)
        .expect("dx requested");
    relu_backward(&mut da2, &fw.h2);
    let mut da1 = linear_backward(&fw.a1.view(), &da2, values, grad, &m[H2_W], Some(&m[H2_B]), true)
        .expect("dx requested");
    relu_backward(&mut da1, &fw.h1);
    let dx = linear_backward(x, &da1, values, grad, &m[H1_W], Some(&m[H1_B]), need_dx);
    (l, dx)
}

pub fn accuracy(values: &[f64], m: &[ParamSpec], x: &ArrayView2<f64>, labels: &[usize]) -> f64 {
    let lg = logits(values, m, x);
    let correct = lg
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best == l
        })
        .count();
    correct as f64 / labels.len() as f64
}

pub fn gather_rows(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Trains a fresh head on fixed features.
pub fn train_head(
    x: &ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    epochs: usize,
    seed: u64,
    cfg: &SslConfig,
) -> Result<Params, SslError> {
    let mut head = init_head(x.ncols(), cfg.head_hidden, classes, seed);
    let mut opt = Adam::new(cfg.adam, head.len());
    let mut grad = head.zeros_like();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut substream(seed, "downstream-order", &[epoch as u64]));
        for chunk in order.chunks(cfg.downstream_batch_size.max(1)) {
            let xb = gather_rows(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            grad.fill(0.0);
            let (l, _) = loss_grad(&head.values, &head.manifest, &xb.view(), &yb, &mut grad, false);
            if !l.is_finite() {
                return Err(SslError::Diverged("downstream loss"));
            }
            opt.step(&mut head.values, &grad);
        }
        if !head.is_finite() {
            return Err(SslError::Diverged("downstream parameters"));
        }
    }
    Ok(head)
}
