//! Symmetric image-text contrastive loss with a learnable temperature.
//!
//! For a batch of `N` pairs with unit-norm embeddings `z_img[i]`, `z_txt[i]`
//! and logits `S[i][j] = <z_img[i], z_txt[j]> / tau`:
//!
//! ```text
//! L_img = -(1/N) sum_i log softmax_j(S[i][.])[i]
//! L_txt = -(1/N) sum_j log softmax_i(S[.][j])[j]
//! L     = (L_img + L_txt) / 2
//! ```
//!
//! `tau = exp(log_tau)`. With [`Reduction::Sum`] the `1/N` factors are
//! dropped. Gradients are reported with respect to the *unnormalised* encoder
//! outputs, i.e. the normalisation Jacobian is applied; at unit-norm inputs
//! this is the projection onto the sphere's tangent space.

mod optim;
mod schedule;
mod train;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use optim::AdamW;
pub use schedule::lr_at;
pub use train::{
    sampler_picker, synthetic_pairs, train_toy, PairedFeatures, StepRecord, TextVariant, ToyModel,
    TrainConfig, TrainOutcome,
};

/// Tolerance on row norms accepted by [`similarity`] and [`LossState`].
pub const NORM_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INIT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{which} row {row} has norm {norm}, expected 1")]
    NormViolation {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("{which} row {row} is zero and cannot be normalised")]
    ZeroRow { which: &'static str, row: usize },
    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("log_tau must be finite, got {0}")]
    BadTemperature(f64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged (non-finite) at step {step}")]
    DivergenceDetected { step: usize },
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_unit(v: ArrayView1<'_, f64>, which: &'static str, row: usize) -> Result<(), LossError> {
    let n = norm(v);
    if (n - 1.0).abs() > NORM_TOLERANCE || !n.is_finite() {
        return Err(LossError::NormViolation {
            which,
            row,
            norm: n,
        });
    }
    Ok(())
}

/// Dot product of two unit vectors.
pub fn similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} vs {}",
            u.len(),
            v.len()
        )));
    }
    check_unit(u, "u", 0)?;
    check_unit(v, "v", 0)?;
    Ok(u.dot(&v).clamp(-1.0, 1.0))
}

/// A validated batch: `N >= 2` unit-norm image and text rows plus `log_tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossState {
    z_image: Array2<f64>,
    z_text: Array2<f64>,
    log_tau: f64,
}

impl LossState {
    pub fn new(z_image: Array2<f64>, z_text: Array2<f64>, log_tau: f64) -> Result<Self, LossError> {
        check_shapes(z_image.view(), z_text.view(), log_tau)?;
        for (i, r) in z_image.rows().into_iter().enumerate() {
            check_unit(r, "image", i)?;
        }
        for (i, r) in z_text.rows().into_iter().enumerate() {
            check_unit(r, "text", i)?;
        }
        Ok(Self {
            z_image,
            z_text,
            log_tau,
        })
    }

    pub fn with_tau(
        z_image: Array2<f64>,
        z_text: Array2<f64>,
        tau: f64,
    ) -> Result<Self, LossError> {
        if !(tau > 0.0) {
            return Err(LossError::BadTemperature(tau));
        }
        Self::new(z_image, z_text, tau.ln())
    }

    pub fn batch_size(&self) -> usize {
        self.z_image.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z_image.ncols()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn image(&self) -> ArrayView2<'_, f64> {
        self.z_image.view()
    }

    pub fn text(&self) -> ArrayView2<'_, f64> {
        self.z_text.view()
    }
}

fn check_shapes(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    log_tau: f64,
) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "image {:?} vs text {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() < 2 {
        return Err(LossError::BatchTooSmall(a.nrows()));
    }
    if a.ncols() == 0 {
        return Err(LossError::ShapeMismatch("embedding dim is 0".into()));
    }
    if !log_tau.is_finite() {
        return Err(LossError::BadTemperature(log_tau));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// `(image + text) / 2`
    pub total: f64,
    /// Image-to-text direction (softmax over each row).
    pub image: f64,
    /// Text-to-image direction (softmax over each column).
    pub text: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_image: Array2<f64>,
    pub d_text: Array2<f64>,
    pub d_log_tau: f64,
}

/// Per-row `-log softmax(row)[diag]` and the softmax itself. The largest
/// logit is factored out; when it is the diagonal term the remaining mass goes
/// through `ln_1p` so tiny losses keep their precision.
fn softmax_xent(row: ArrayView1<'_, f64>, diag: usize) -> (f64, Vec<f64>) {
    let (arg, max) =
        row.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, e)| e)
        .sum();
    let lse_shift = rest.ln_1p(); // log(sum exp(l - max))
    let xent = lse_shift + (max - row[diag]);
    let total = 1.0 + rest;
    (xent, exps.into_iter().map(|e| e / total).collect())
}

/// Loss and gradients for unit-norm embeddings `z_image`, `z_text`.
/// Gradients are w.r.t. the embeddings themselves (no projection).
fn loss_and_grad_unit(
    z_image: ArrayView2<'_, f64>,
    z_text: ArrayView2<'_, f64>,
    log_tau: f64,
    reduction: Reduction,
) -> (LossValue, Array2<f64>, Array2<f64>, f64) {
    let n = z_image.nrows();
    let inv_tau = (-log_tau).exp();
    let logits = z_image.dot(&z_text.t()) * inv_tau;
    let scale = match reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    };

    // dL/dlogits = 0.5 * scale * ((P - I) + (Q - I)), P row-softmax, Q column-softmax
    let mut g = Array2::<f64>::zeros((n, n));
    let mut l_image = 0.0;
    for i in 0..n {
        let (x, p) = softmax_xent(logits.row(i), i);
        l_image += x;
        for (j, pj) in p.into_iter().enumerate() {
            g[[i, j]] += pj;
        }
        g[[i, i]] -= 1.0;
    }
    let mut l_text = 0.0;
    for j in 0..n {
        let (x, q) = softmax_xent(logits.column(j), j);
        l_text += x;
        for (i, qi) in q.into_iter().enumerate() {
            g[[i, j]] += qi;
        }
        g[[j, j]] -= 1.0;
    }
    g *= 0.5 * scale;
    let value = LossValue {
        total: 0.5 * scale * (l_image + l_text),
        image: scale * l_image,
        text: scale * l_text,
    };

    let d_log_tau = -(&g * &logits).sum();
    let g_sim = g * inv_tau;
    let d_image = g_sim.dot(&z_text);
    let d_text = g_sim.t().dot(&z_image);
    (value, d_image, d_text, d_log_tau)
}

pub fn clip_loss(state: &LossState, reduction: Reduction) -> LossValue {
    loss_and_grad_unit(state.image(), state.text(), state.log_tau, reduction).0
}

/// Loss plus gradients w.r.t. the (unit-norm) encoder outputs, normalisation
/// Jacobian included, and w.r.t. `log_tau`.
pub fn clip_loss_grad(state: &LossState, reduction: Reduction) -> (LossValue, LossGrad) {
    let (value, d_zi, d_zt, d_log_tau) =
        loss_and_grad_unit(state.image(), state.text(), state.log_tau, reduction);
    let ones = vec![1.0; state.batch_size()];
    let grad = LossGrad {
        d_image: back_through_normalize(state.image(), &ones, d_zi),
        d_text: back_through_normalize(state.text(), &ones, d_zt),
        d_log_tau,
    };
    (value, grad)
}

/// Normalises rows of `raw`, returning the normalised matrix and the norms.
pub fn normalize_rows(
    raw: ArrayView2<'_, f64>,
    which: &'static str,
) -> Result<(Array2<f64>, Vec<f64>), LossError> {
    let mut out = raw.to_owned();
    let mut norms = Vec::with_capacity(raw.nrows());
    for (i, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(r.view());
        if !(n > 0.0) || !n.is_finite() {
            return Err(LossError::ZeroRow { which, row: i });
        }
        r /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// `dL/du = (dL/dz - z <z, dL/dz>) / |u|` row by row, for `z = u / |u|`.
fn back_through_normalize(
    z: ArrayView2<'_, f64>,
    norms: &[f64],
    mut d_z: Array2<f64>,
) -> Array2<f64> {
    for ((mut g, zr), &n) in d_z.axis_iter_mut(Axis(0)).zip(z.rows()).zip(norms) {
        let radial = g.dot(&zr);
        g.scaled_add(-radial, &zr);
        g /= n;
    }
    d_z
}

/// Loss and gradients for raw (unnormalised) encoder outputs: rows are
/// L2-normalised internally and the gradient flows back through that step.
pub fn contrastive_loss_raw(
    raw_image: ArrayView2<'_, f64>,
    raw_text: ArrayView2<'_, f64>,
    log_tau: f64,
    reduction: Reduction,
) -> Result<(LossValue, LossGrad), LossError> {
    check_shapes(raw_image, raw_text, log_tau)?;
    let (z_image, n_image) = normalize_rows(raw_image, "image")?;
    let (z_text, n_text) = normalize_rows(raw_text, "text")?;
    let (value, d_zi, d_zt, d_log_tau) =
        loss_and_grad_unit(z_image.view(), z_text.view(), log_tau, reduction);
    Ok((
        value,
        LossGrad {
            d_image: back_through_normalize(z_image.view(), &n_image, d_zi),
            d_text: back_through_normalize(z_text.view(), &n_text, d_zt),
            d_log_tau,
        },
    ))
}
