//! Desk-scale self-supervised trainers with exact manual gradients, and the
//! downstream classifier used as fitness.

pub mod head;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretext;

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_policy, AugmentError, Gene};
use crate::data::Dataset;
use crate::fitness::{EvalContext, EvalError, Evaluation, Evaluator};
use crate::image::{normalize_into, Image};
use crate::policy::Chromosome;
use crate::rng::substream;

pub use optim::AdamConfig;
pub use params::Params;
pub use pretext::{collapse_metric, sinkhorn, PretextModel};

/// Flattened 32x32 RGB input.
pub const INPUT_DIM: usize = 3072;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownstreamMode {
    /// Train the head on frozen encoder features.
    #[default]
    FrozenProbe,
    /// Train head and encoder together.
    FineTune,
}

/// Model sizes and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub hidden: usize,
    pub repr: usize,
    pub proj: usize,
    pub prototypes: usize,
    pub queue_size: usize,
    pub head_hidden: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub ema_tau: f64,
    pub nnclr_temperature: f64,
    pub swav_temperature: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    /// Subtracted from every normalized pixel before the encoder.
    pub input_shift: f64,
    pub predictor_identity_init: bool,
    /// Batch-standardize the projector output during pretext training.
    pub projector_bn: bool,
    /// Standardize frozen features with train-set statistics before the
    /// head sees them.
    pub probe_standardize: bool,
    pub adam: AdamConfig,
    pub downstream_batch_size: usize,
    pub downstream_mode: DownstreamMode,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            repr: 32,
            proj: 16,
            prototypes: 8,
            queue_size: 256,
            head_hidden: 64,
            sgd_lr: 0.05,
            sgd_momentum: 0.9,
            ema_tau: 0.99,
            nnclr_temperature: 0.1,
            swav_temperature: 0.1,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 3,
            input_shift: 0.5,
            predictor_identity_init: false,
            projector_bn: true,
            probe_standardize: true,
            adam: AdamConfig::default(),
            downstream_batch_size: 32,
            downstream_mode: DownstreamMode::FrozenProbe,
        }
    }
}

#[derive(Debug, Error)]
pub enum SslError {
    #[error("training diverged: non-finite {0}")]
    Diverged(&'static str),
    #[error(transparent)]
    Policy(#[from] AugmentError),
    #[error(transparent)]
    Context(#[from] EvalError),
}

/// Writes images as rows of normalized, shifted pixels.
pub fn images_to_matrix<'a>(images: impl ExactSizeIterator<Item = &'a Image>, shift: f64) -> Array2<f64> {
    let mut x = Array2::zeros((images.len(), INPUT_DIM));
    for (img, mut row) in images.zip(x.rows_mut()) {
        let out = row.as_slice_mut().expect("rows of a standard array are contiguous");
        normalize_into(img, out);
        if shift != 0.0 {
            out.iter_mut().for_each(|v| *v -= shift);
        }
    }
    x
}

pub fn dataset_matrix(ds: &Dataset, shift: f64) -> Array2<f64> {
    images_to_matrix(ds.images.iter(), shift)
}

/// Pretext training with the given augmentation policy. Returns the model
/// and the mean loss of each epoch.
pub fn pretrain(
    genes: &[Gene],
    train: &Dataset,
    ctx: &EvalContext,
    cfg: &SslConfig,
) -> Result<(PretextModel, Vec<f64>), SslError> {
    ctx.validate()?;
    crate::augment::check_unique(genes)?;
    let mut model = PretextModel::new(ctx.algorithm, cfg, ctx.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(ctx.pretext_epochs);
    for epoch in 0..ctx.pretext_epochs {
        order.shuffle(&mut substream(ctx.seed, "pretext-order", &[epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(ctx.pretext_batch_size) {
            let views = |v: u64| -> Result<Array2<f64>, SslError> {
                let imgs = chunk
                    .iter()
                    .map(|&i| {
                        let mut rng = substream(ctx.seed, "view", &[epoch as u64, i as u64, v]);
                        apply_policy(genes, &train.images[i], &mut rng)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(images_to_matrix(imgs.iter(), cfg.input_shift))
            };
            let (x1, x2) = (views(0)?, views(1)?);
            total += model.step(&x1.view(), &x2.view())?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((model, epoch_losses))
}

/// Result of downstream training.
#[derive(Clone, Debug)]
pub struct Downstream {
    pub accuracy: f64,
    pub head: Params,
    /// Encoder used for the final features (a fine-tuned copy in
    /// fine-tune mode).
    pub encoder: Params,
    /// Map from encoder output to head input.
    pub scaler: FeatureScaler,
    /// Features exactly as the head consumes them.
    pub train_features: Array2<f64>,
    pub test_features: Array2<f64>,
}

/// Per-feature affine map `(v − mean) · scale` applied to encoder features
/// before the head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and inverse standard deviations of `x`; constant
    /// columns are only centred.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let (mut mean, mut scale) = (Vec::with_capacity(x.ncols()), Vec::with_capacity(x.ncols()));
        for col in x.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.mapv_inplace(|v| (v - m) * s);
        }
    }
}

/// Standardizes `train` and `test` with the statistics of `train`.
pub fn standardize_features(train: &mut Array2<f64>, test: &mut Array2<f64>) -> FeatureScaler {
    let scaler = FeatureScaler::fit(train);
    scaler.apply(train);
    scaler.apply(test);
    scaler
}

/// Trains the downstream head on top of `encoder` and measures test
/// accuracy. `train_x`/`test_x` are un-augmented inputs.
#[allow(clippy::too_many_arguments)]
pub fn train_downstream(
    encoder: &Params,
    train_x: &ArrayView2<f64>,
    train_y: &[usize],
    test_x: &ArrayView2<f64>,
    test_y: &[usize],
    classes: usize,
    ctx: &EvalContext,
    cfg: &SslConfig,
) -> Result<Downstream, SslError> {
    let (encoder, head, scaler, train_features, test_features) = match cfg.downstream_mode {
        DownstreamMode::FrozenProbe => {
            let mut train_f = pretext::encode(&encoder.values, &encoder.manifest, train_x);
            let mut test_f = pretext::encode(&encoder.values, &encoder.manifest, test_x);
            let scaler = if cfg.probe_standardize {
                standardize_features(&mut train_f, &mut test_f)
            } else {
                FeatureScaler::identity(train_f.ncols())
            };
            let head = head::train_head(&train_f.view(), train_y, classes, ctx.downstream_epochs, ctx.seed, cfg)?;
            (encoder.clone(), head, scaler, train_f, test_f)
        }
        DownstreamMode::FineTune => {
            let (enc, head) = fine_tune(encoder, train_x, train_y, classes, ctx, cfg)?;
            let train_f = pretext::encode(&enc.values, &enc.manifest, train_x);
            let test_f = pretext::encode(&enc.values, &enc.manifest, test_x);
            let scaler = FeatureScaler::identity(train_f.ncols());
            (enc, head, scaler, train_f, test_f)
        }
    };
    let accuracy = head::accuracy(&head.values, &head.manifest, &test_features.view(), test_y);
    Ok(Downstream {
        accuracy,
        head,
        encoder,
        scaler,
        train_features,
        test_features,
    })
}

/// Joint training of encoder and head.
fn fine_tune(
    encoder: &Params,
    x: &ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    ctx: &EvalContext,
    cfg: &SslConfig,
) -> Result<(Params, Params), SslError> {
    use pretext::{ENC1_B, ENC1_W, ENC2_B, ENC2_W};
    let mut enc = encoder.clone();
    let mut head = head::init_head(cfg.repr, cfg.head_hidden, classes, ctx.seed);
    let mut enc_opt = optim::Adam::new(cfg.adam, enc.len());
    let mut head_opt = optim::Adam::new(cfg.adam, head.len());
    let mut g_enc = enc.zeros_like();
    let mut g_head = head.zeros_like();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let m = enc.manifest.clone();
    for epoch in 0..ctx.downstream_epochs {
        order.shuffle(&mut substream(ctx.seed, "downstream-order", &[epoch as u64]));
        for chunk in order.chunks(cfg.downstream_batch_size.max(1)) {
            let xb = head::gather_rows(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let h1 = nn::linear(&xb.view(), &enc.values, &m[ENC1_W], Some(&m[ENC1_B]));
            let a1 = nn::relu(&h1);
            let feats = nn::linear(&a1.view(), &enc.values, &m[ENC2_W], Some(&m[ENC2_B]));
            g_enc.fill(0.0);
            g_head.fill(0.0);
            let (l, dfeat) = head::loss_grad(&head.values, &head.manifest, &feats.view(), &yb, &mut g_head, true);
            if !l.is_finite() {
                return Err(SslError::Diverged("downstream loss"));
            }
            let dfeat = dfeat.expect("dx requested");
            let mut dh1 = nn::linear_backward(&a1.view(), &dfeat, &enc.values, &mut g_enc, &m[ENC2_W], Some(&m[ENC2_B]), true)
                .expect("dx requested");
            nn::relu_backward(&mut dh1, &h1);
            nn::linear_backward(&xb.view(), &dh1, &enc.values, &mut g_enc, &m[ENC1_W], Some(&m[ENC1_B]), false);
            enc_opt.step(&mut enc.values, &g_enc);
            head_opt.step(&mut head.values, &g_head);
        }
        if !enc.is_finite() || !head.is_finite() {
            return Err(SslError::Diverged("downstream parameters"));
        }
    }
    Ok((enc, head))
}

/// Datasets prepared once and shared between evaluations.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub train_x: Arc<Array2<f64>>,
    pub test_x: Arc<Array2<f64>>,
}

impl PreparedData {
    pub fn new(train: Dataset, test: Dataset, cfg: &SslConfig) -> Self {
        let train_x = dataset_matrix(&train, cfg.input_shift);
        let test_x = dataset_matrix(&test, cfg.input_shift);
        Self {
            train: Arc::new(train),
            test: Arc::new(test),
            train_x: Arc::new(train_x),
            test_x: Arc::new(test_x),
        }
    }

    pub fn classes(&self) -> usize {
        self.train.num_classes()
    }
}

/// Pretext training with `genes`, then downstream training.
pub fn run_policy(genes: &[Gene], data: &PreparedData, ctx: &EvalContext, cfg: &SslConfig) -> Result<Downstream, SslError> {
    let (model, _) = pretrain(genes, &data.train, ctx, cfg)?;
    downstream_of(&model.params, data, ctx, cfg)
}

/// Downstream training on a randomly initialized encoder: the supervised
/// reference.
pub fn run_supervised(data: &PreparedData, ctx: &EvalContext, cfg: &SslConfig) -> Result<Downstream, SslError> {
    ctx.validate()?;
    let params = pretext::init_params(cfg, ctx.seed);
    downstream_of(&params, data, ctx, cfg)
}

fn downstream_of(encoder: &Params, data: &PreparedData, ctx: &EvalContext, cfg: &SslConfig) -> Result<Downstream, SslError> {
    train_downstream(
        encoder,
        &data.train_x.view(),
        &data.train.labels,
        &data.test_x.view(),
        &data.test.labels,
        data.classes(),
        ctx,
        cfg,
    )
}

/// Fitness = downstream test accuracy after pretext training with the
/// chromosome's policy.
#[derive(Clone, Debug)]
pub struct SslEvaluator {
    pub data: PreparedData,
    pub cfg: SslConfig,
}

impl SslEvaluator {
    pub fn new(data: PreparedData, cfg: SslConfig) -> Self {
        Self { data, cfg }
    }
}

impl Evaluator for SslEvaluator {
    fn evaluate(&self, c: &Chromosome, ctx: &EvalContext) -> Result<Evaluation, EvalError> {
        match run_policy(&c.genes, &self.data, ctx, &self.cfg) {
            Ok(d) => Ok(Evaluation::new(d.accuracy)),
            Err(SslError::Diverged(what)) => {
                log::warn!("{c}: training diverged ({what}), fitness set to 0");
                Ok(Evaluation::flagged(0.0, format!("training diverged: non-finite {what}")))
            }
            Err(SslError::Context(e)) => Err(e),
            Err(e) => Err(EvalError::Internal(e.to_string())),
        }
    }
}
