//! Dense-layer primitives with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{matrix_of, matrix_of_mut, vector_of, vector_of_mut, ParamSpec};

/// Norm floor used when normalizing vectors.
pub const NORM_EPS: f64 = 1e-12;

/// `x · Wᵀ + b`.
pub fn linear(x: &ArrayView2<f64>, values: &[f64], w: &ParamSpec, b: Option<&ParamSpec>) -> Array2<f64> {
    let wm = matrix_of(w, values);
    let mut y = x.dot(&wm.t());
    if let Some(b) = b {
        y += &vector_of(b, values);
    }
    y
}

/// Accumulates weight and bias gradients into `grad` and returns the
/// gradient with respect to the input when `need_dx` is set.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    dy: &Array2<f64>,
    values: &[f64],
    grad: &mut [f64],
    w: &ParamSpec,
    b: Option<&ParamSpec>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    {
        let mut gw = matrix_of_mut(w, grad);
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
    }
    if let Some(b) = b {
        let mut gb = vector_of_mut(b, grad);
        gb += &dy.sum_axis(Axis(0));
    }
    need_dx.then(|| dy.dot(&matrix_of(w, values)))
}

pub fn relu(h: &Array2<f64>) -> Array2<f64> {
    h.mapv(|v| v.max(0.0))
}

pub fn relu_backward(dy: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(dy).and(pre).for_each(|d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Row-wise L2 normalization; returns the normalized rows and the norms
/// actually divided by.
pub fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
    let mut out = z.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `dz = (dẑ − ẑ (ẑ·dẑ)) / ‖z‖`.
pub fn normalize_rows_backward(d_hat: &Array2<f64>, hat: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut dz = d_hat.clone();
    for ((mut row, h), &n) in dz.rows_mut().into_iter().zip(hat.rows()).zip(norms) {
        let proj = h.dot(&row);
        row.scaled_add(-proj, &h);
        row /= n;
    }
    dz
}

/// Variance floor of [`batch_standardize`].
pub const BN_EPS: f64 = 1e-5;

/// Parameter-free batch normalization: every column shifted to zero mean
/// and scaled to unit (biased) variance over the batch. Returns the output
/// and the per-column `1/sqrt(var + eps)`. Batches of one row pass through
/// unchanged.
pub fn batch_standardize(z: &Array2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
    if z.nrows() < 2 {
        return (z.clone(), None);
    }
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let centred = z - &mean;
    let var = centred.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
    let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    (centred * &inv, Some(inv))
}

/// Backward of [`batch_standardize`] given its output `hat`:
/// `dz = inv · (dẑ − mean(dẑ) − ẑ · mean(dẑ ⊙ ẑ))`, column-wise.
pub fn batch_standardize_backward(d_hat: &Array2<f64>, hat: &Array2<f64>, inv: Option<&Array1<f64>>) -> Array2<f64> {
    let Some(inv) = inv else {
        return d_hat.clone();
    };
    let mean_d = d_hat.mean_axis(Axis(0)).expect("non-empty batch");
    let mean_dh = (d_hat * hat).mean_axis(Axis(0)).expect("non-empty batch");
    (d_hat - &mean_d - &(hat * &mean_dh)) * inv
}

/// Row-wise softmax of `logits`.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise log-softmax of `logits`.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy of `logits` against integer labels and, optionally,
/// its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize], want_grad: bool) -> (f64, Option<Array2<f64>>) {
    let n = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logp[[i, l]])
        .sum::<f64>()
        / n;
    let grad = want_grad.then(|| {
        let mut g = logp.mapv(f64::exp);
        for (i, &l) in labels.iter().enumerate() {
            g[[i, l]] -= 1.0;
        }
        g / n
    });
    (loss, grad)
}
