//! Linear-encoder trainer for the contrastive objective.
//!
//! Encoders are `f(x) = normalize(x W)`. Each step draws a batch from a
//! per-epoch permutation, asks a picker which text variant (AltText-derived or
//! VeCap-derived features) each pair uses, and applies one AdamW update under
//! a warmup + cosine schedule.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{contrastive_loss_raw, normalize_rows, AdamW, LossError, Reduction, DEFAULT_INIT_TAU};
use crate::eval::{recall_at_k, RetrievalGroundTruth};
use crate::sampler::{keyed_rng, CaptionSource, Sampler, SamplerConfig};
use crate::shardio::ImageTextRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub init_tau: f64,
    /// Lower clamp on the temperature; `None` disables it.
    pub min_tau: Option<f64>,
    pub learn_tau: bool,
    pub reduction: Reduction,
    /// Std-dev of Gaussian jitter added to image features each step.
    pub aug_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps_adam: 1e-8,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 64,
            seed: 0,
            embed_dim: 16,
            init_tau: DEFAULT_INIT_TAU,
            min_tau: Some(0.01),
            learn_tau: true,
            reduction: Reduction::Mean,
            aug_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidConfig(m));
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return bad(format!(
                "need 0 < beta1 < beta2 < 1, got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps_adam > 0.0) {
            return bad("lr and weight_decay must be >= 0, eps_adam > 0".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(self.init_tau > 0.0) || self.min_tau.is_some_and(|t| !(t > 0.0)) {
            return bad("temperatures must be positive".into());
        }
        if !(self.aug_sigma >= 0.0) {
            return bad("aug_sigma must be >= 0".into());
        }
        Ok(())
    }
}

/// Which text feature row a pair contributes at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextVariant {
    AltText,
    VeCap,
}

impl From<CaptionSource> for TextVariant {
    fn from(s: CaptionSource) -> Self {
        match s {
            CaptionSource::AltText => TextVariant::AltText,
            CaptionSource::VeCap | CaptionSource::Ser => TextVariant::VeCap,
        }
    }
}

/// Picker for [`train_toy`] backed by the record sampler: pair `i` is a
/// record with one AltText and one VeCap whose id is `pair-{i}`, and the
/// sampler's choice decides the feature variant.
pub fn sampler_picker(
    cfg: SamplerConfig,
    pairs: usize,
) -> impl Fn(usize, u64, u64) -> TextVariant + Send + Sync {
    let records: Vec<ImageTextRecord> = (0..pairs)
        .map(|i| {
            let mut r = ImageTextRecord::new(format!("pair-{i}"), format!("pair-{i}"), "alttext");
            r.vec = Some("vec".into());
            r.vecap = Some("vecap".into());
            r
        })
        .collect();
    let sampler = Sampler::new(cfg);
    move |pair, epoch, step| {
        sampler
            .choose(&records[pair], epoch, step)
            .map(|c| c.source.into())
            .expect("synthetic records satisfy every scheme")
    }
}

/// Row-aligned image features and two text-feature variants.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatures {
    pub image: Array2<f64>,
    pub alt_text: Array2<f64>,
    /// Falls back to `alt_text` when absent.
    pub vecap_text: Option<Array2<f64>>,
}

impl PairedFeatures {
    pub fn new(
        image: Array2<f64>,
        alt_text: Array2<f64>,
        vecap_text: Option<Array2<f64>>,
    ) -> Result<Self, LossError> {
        let n = image.nrows();
        let shape_ok = alt_text.nrows() == n
            && vecap_text
                .as_ref()
                .map_or(true, |v| v.nrows() == n && v.ncols() == alt_text.ncols());
        if !shape_ok {
            return Err(LossError::ShapeMismatch(
                "feature sets must have the same number of rows".into(),
            ));
        }
        if image.iter().chain(alt_text.iter()).any(|v| !v.is_finite())
            || vecap_text.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(LossError::InvalidConfig("features must be finite".into()));
        }
        Ok(Self {
            image,
            alt_text,
            vecap_text,
        })
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text(&self, variant: TextVariant) -> ArrayView2<'_, f64> {
        match (variant, &self.vecap_text) {
            (TextVariant::VeCap, Some(v)) => v.view(),
            _ => self.alt_text.view(),
        }
    }

    /// First `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head = |a: &Array2<f64>| a.slice(s![..n, ..]).to_owned();
        let tail = |a: &Array2<f64>| a.slice(s![n.., ..]).to_owned();
        (
            Self {
                image: head(&self.image),
                alt_text: head(&self.alt_text),
                vecap_text: self.vecap_text.as_ref().map(head),
            },
            Self {
                image: tail(&self.image),
                alt_text: tail(&self.alt_text),
                vecap_text: self.vecap_text.as_ref().map(tail),
            },
        )
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Separable synthetic pairs: image features are standard normal, each text
/// variant is the image feature plus its own Gaussian noise.
pub fn synthetic_pairs(
    pairs: usize,
    feature_dim: usize,
    alt_noise: f64,
    vecap_noise: f64,
    seed: u64,
) -> PairedFeatures {
    let mut rng = keyed_rng(seed, 0, None, "synthetic-pairs");
    let image = gaussian(pairs, feature_dim, &mut rng);
    let alt_text = &image + &(gaussian(pairs, feature_dim, &mut rng) * alt_noise);
    let vecap_text = &image + &(gaussian(pairs, feature_dim, &mut rng) * vecap_noise);
    PairedFeatures {
        image,
        alt_text,
        vecap_text: Some(vecap_text),
    }
}

/// Two linear projections and a log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub w_image: Array2<f64>,
    pub w_text: Array2<f64>,
    pub log_tau: f64,
}

impl ToyModel {
    pub fn init(image_dim: usize, text_dim: usize, cfg: &TrainConfig) -> Self {
        let mut rng = keyed_rng(cfg.seed, 0, None, "toy-init");
        let w_image = gaussian(image_dim, cfg.embed_dim, &mut rng) / (image_dim as f64).sqrt();
        let w_text = gaussian(text_dim, cfg.embed_dim, &mut rng) / (text_dim as f64).sqrt();
        Self {
            w_image,
            w_text,
            log_tau: cfg.init_tau.ln(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn encode_image(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, LossError> {
        Ok(normalize_rows(x.dot(&self.w_image).view(), "image")?.0)
    }

    pub fn encode_text(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, LossError> {
        Ok(normalize_rows(x.dot(&self.w_text).view(), "text")?.0)
    }

    /// Image-to-text R@1 over all pairs of `data` with identity ground truth.
    pub fn recall_at_1(
        &self,
        data: &PairedFeatures,
        variant: TextVariant,
    ) -> Result<f64, LossError> {
        let zi = self.encode_image(data.image.view())?;
        let zt = self.encode_text(data.text(variant))?;
        let gt = RetrievalGroundTruth::identity(data.len());
        let r = recall_at_k(zi.view(), zt.view(), &gt, &[1])
            .map_err(|e| LossError::ShapeMismatch(e.to_string()))?;
        Ok(r[&1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    /// History as CSV with header `step,lr,loss,tau`.
    pub fn history_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for rec in &self.history {
            w.serialize(rec).expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }
}

/// Trains a [`ToyModel`] on `data`. `pick(pair, epoch, step)` chooses the
/// text variant of each pair in a batch.
pub fn train_toy(
    data: &PairedFeatures,
    cfg: &TrainConfig,
    pick: &dyn Fn(usize, u64, u64) -> TextVariant,
) -> Result<TrainOutcome, LossError> {
    cfg.validate()?;
    let n = data.len();
    if n < cfg.batch_size {
        return Err(LossError::InvalidConfig(format!(
            "{n} pairs cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    let batches_per_epoch = n / cfg.batch_size;
    let mut model = ToyModel::init(data.image.ncols(), data.alt_text.ncols(), cfg);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps_adam, cfg.weight_decay);
    let min_log_tau = cfg.min_tau.map(f64::ln);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let epoch = (step / batches_per_epoch) as u64;
        let slot = step % batches_per_epoch;
        if slot == 0 {
            order = (0..n).collect();
            order.shuffle(&mut keyed_rng(cfg.seed, epoch, None, "toy-shuffle"));
        }
        let idx = &order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];

        let mut x_image = data.image.select(Axis(0), idx);
        if cfg.aug_sigma > 0.0 {
            let mut rng = keyed_rng(cfg.seed, epoch, Some(step as u64), "toy-aug");
            x_image += &(gaussian(x_image.nrows(), x_image.ncols(), &mut rng) * cfg.aug_sigma);
        }
        let mut x_text = Array2::zeros((idx.len(), data.alt_text.ncols()));
        for (row, &i) in idx.iter().enumerate() {
            let variant = pick(i, epoch, step as u64);
            x_text.row_mut(row).assign(&data.text(variant).row(i));
        }

        let raw_image = x_image.dot(&model.w_image);
        let raw_text = x_text.dot(&model.w_text);
        let (value, grad) = contrastive_loss_raw(
            raw_image.view(),
            raw_text.view(),
            model.log_tau,
            cfg.reduction,
        )
        .map_err(|e| match e {
            LossError::ZeroRow { .. } => LossError::DivergenceDetected { step },
            other => other,
        })?;
        let d_w_image = x_image.t().dot(&grad.d_image);
        let d_w_text = x_text.t().dot(&grad.d_text);
        let finite = value.total.is_finite()
            && grad.d_log_tau.is_finite()
            && d_w_image
                .iter()
                .chain(d_w_text.iter())
                .all(|v| v.is_finite());
        if !finite {
            return Err(LossError::DivergenceDetected { step });
        }

        let lr = super::lr_at(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        history.push(StepRecord {
            step,
            lr,
            loss: value.total,
            tau: model.tau(),
        });

        opt.begin_step();
        opt.update(
            0,
            model.w_image.as_slice_mut().expect("standard layout"),
            d_w_image.as_slice().expect("standard layout"),
            lr,
            true,
        );
        opt.update(
            1,
            model.w_text.as_slice_mut().expect("standard layout"),
            d_w_text.as_slice().expect("standard layout"),
            lr,
            true,
        );
        if cfg.learn_tau {
            let mut lt = [model.log_tau];
            opt.update(2, &mut lt, &[grad.d_log_tau], lr, false);
            model.log_tau = lt[0];
        }
        if let Some(floor) = min_log_tau {
            model.log_tau = model.log_tau.max(floor);
        }
    }

    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alt_only(_: usize, _: u64, _: u64) -> TextVariant {
        TextVariant::AltText
    }

    #[test]
    fn zero_lr_leaves_parameters_and_loss_fixed() {
        let data = synthetic_pairs(64, 8, 0.1, 0.1, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 64,
            total_steps: 20,
            warmup_steps: 5,
            ..TrainConfig::default()
        };
        let out = train_toy(&data, &cfg, &alt_only).unwrap();
        let init = ToyModel::init(8, 8, &cfg);
        assert_eq!(out.model, init);
        let first = out.history[0].loss;
        for h in &out.history {
            assert!((h.loss - first).abs() < 1e-12);
        }
    }

    #[test]
    fn history_follows_schedule() {
        let data = synthetic_pairs(32, 4, 0.1, 0.1, 1);
        let cfg = TrainConfig {
            batch_size: 8,
            total_steps: 40,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let out = train_toy(&data, &cfg, &alt_only).unwrap();
        assert_eq!(out.history.len(), 40);
        assert_eq!(out.history[0].lr, 0.0);
        assert_eq!(out.history[10].lr, cfg.lr);
        let csv = out.history_csv();
        assert!(csv.starts_with("step,lr,loss,tau\n0,0.0,"));
        assert_eq!(csv.lines().count(), 41);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                beta1: 0.99,
                ..ok.clone()
            },
            TrainConfig {
                warmup_steps: 600,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 1,
                ..ok.clone()
            },
            TrainConfig {
                init_tau: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let data = synthetic_pairs(10, 4, 0.1, 0.1, 1);
        assert!(train_toy(&data, &ok, &alt_only).is_err());
    }

    #[test]
    fn non_finite_features_abort_with_step() {
        let mut data = synthetic_pairs(16, 4, 0.1, 0.1, 2);
        data.image[[3, 0]] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 16,
            total_steps: 10,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(
            train_toy(&data, &cfg, &alt_only),
            Err(LossError::DivergenceDetected { step: 0 })
        );
    }

    #[test]
    fn split_keeps_alignment() {
        let data = synthetic_pairs(10, 3, 0.1, 0.2, 5);
        let (a, b) = data.split_at(7);
        assert_eq!(a.len(), 7);
        assert_eq!(b.len(), 3);
        assert_eq!(b.image.row(0), data.image.row(7));
        assert_eq!(
            b.text(TextVariant::VeCap).row(2),
            data.text(TextVariant::VeCap).row(9)
        );
    }
}
