//! Training-time caption selection.
//!
//! Each record contributes one caption per draw: its AltText, its fused
//! caption, or (for the simplified-entity ablation) `"a photo of <nouns>"`.
//! In mixed mode the choice between AltText and fused caption is a fair coin
//! drawn from a stream keyed by `(seed, epoch[, step], record_id)`, so the
//! result does not depend on iteration order, thread count or shard layout.

mod tagger;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use tagger::{HeuristicTagger, NounTagger};

use crate::shardio::ImageTextRecord;

pub const SER_PREFIX: &str = "a photo of";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    #[serde(rename = "alttext")]
    AltText,
    #[serde(rename = "vecap")]
    VeCap,
    Ser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionChoice {
    pub text: String,
    pub source: CaptionSource,
    /// Which AltText was used when `source` is `AltText`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_index: Option<usize>,
}

/// How one AltText is chosen when a record has several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltTextMode {
    /// Highest precomputed image-text score.
    #[default]
    Hcs,
    Random,
}

/// Which caption family a record contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    AltText,
    VeCap,
    /// Uniform choice between AltText and VeCap per draw.
    #[default]
    Mixed,
    /// Simplified entity representation of the VeCap.
    Ser,
}

/// Granularity at which mixed draws change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    #[default]
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alttext_mode: AltTextMode,
    pub scheme: Scheme,
    pub seed: u64,
    pub resample: Resample,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("HCS selection needs alt_scores on record {0:?}")]
    MissingScores(String),
    #[error("record {0:?} has no vecap")]
    MissingVeCap(String),
    #[error("caption is empty")]
    EmptyCaption,
}

/// Index of the highest score; ties go to the lowest index.
pub fn hcs_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn select_alttext<'r, R: Rng + ?Sized>(
    rec: &'r ImageTextRecord,
    mode: AltTextMode,
    rng: &mut R,
) -> Result<(&'r str, usize), SampleError> {
    let n = rec.alt_texts.len();
    let index = if n == 1 {
        0
    } else {
        match mode {
            AltTextMode::Hcs => match &rec.alt_scores {
                Some(scores) => hcs_index(scores),
                None => return Err(SampleError::MissingScores(rec.record_id.clone())),
            },
            AltTextMode::Random => rng.random_range(0..n),
        }
    };
    Ok((&rec.alt_texts[index], index))
}

/// Deterministic stream for one `(seed, epoch, step, record)` key.
pub fn keyed_rng(seed: u64, epoch: u64, step: Option<u64>, record_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"vecap.mix.v1");
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    match step {
        None => h.update([0u8]),
        Some(s) => {
            h.update([1u8]);
            h.update(s.to_le_bytes());
        }
    }
    h.update(record_id.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// `"a photo of <noun, noun, ...>"` with duplicates removed.
pub fn ser_transform(vecap: &str, tagger: &dyn NounTagger) -> Result<String, SampleError> {
    if vecap.trim().is_empty() {
        return Err(SampleError::EmptyCaption);
    }
    let mut seen: Vec<String> = Vec::new();
    for noun in tagger.nouns(vecap) {
        if !seen.contains(&noun) {
            seen.push(noun);
        }
    }
    if seen.is_empty() {
        let first = vecap.split_whitespace().next().unwrap_or_default();
        return Ok(format!("{SER_PREFIX} {first}"));
    }
    Ok(format!("{SER_PREFIX} {}", seen.join(", ")))
}

/// Config plus the noun tagger used for [`Scheme::Ser`].
pub struct Sampler {
    cfg: SamplerConfig,
    tagger: Box<dyn NounTagger + Send + Sync>,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        Self {
            cfg,
            tagger: Box::new(HeuristicTagger),
        }
    }

    pub fn with_tagger(mut self, tagger: impl NounTagger + Send + Sync + 'static) -> Self {
        self.tagger = Box::new(tagger);
        self
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Caption for `rec` at `epoch`; `step` only matters with
    /// [`Resample::PerStep`].
    pub fn choose(
        &self,
        rec: &ImageTextRecord,
        epoch: u64,
        step: u64,
    ) -> Result<CaptionChoice, SampleError> {
        let step = match self.cfg.resample {
            Resample::PerEpoch => None,
            Resample::PerStep => Some(step),
        };
        let mut rng = keyed_rng(self.cfg.seed, epoch, step, &rec.record_id);
        let vecap = rec.vecap.as_deref().filter(|v| !v.trim().is_empty());

        let alt = |rng: &mut ChaCha8Rng| -> Result<CaptionChoice, SampleError> {
            let (text, i) = select_alttext(rec, self.cfg.alttext_mode, rng)?;
            Ok(CaptionChoice {
                text: text.to_string(),
                source: CaptionSource::AltText,
                alt_index: Some(i),
            })
        };
        let fused = |text: &str| CaptionChoice {
            text: text.to_string(),
            source: CaptionSource::VeCap,
            alt_index: None,
        };

        match self.cfg.scheme {
            Scheme::AltText => alt(&mut rng),
            Scheme::VeCap => vecap
                .map(fused)
                .ok_or_else(|| SampleError::MissingVeCap(rec.record_id.clone())),
            Scheme::Ser => {
                let v = vecap.ok_or_else(|| SampleError::MissingVeCap(rec.record_id.clone()))?;
                Ok(CaptionChoice {
                    text: ser_transform(v, self.tagger.as_ref())?,
                    source: CaptionSource::Ser,
                    alt_index: None,
                })
            }
            Scheme::Mixed => {
                let take_vecap = rng.random_bool(0.5);
                match vecap {
                    Some(v) if take_vecap => Ok(fused(v)),
                    _ => alt(&mut rng),
                }
            }
        }
    }
}

/// [`Sampler::choose`] with the default tagger, per-epoch keys.
pub fn mix(
    rec: &ImageTextRecord,
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<CaptionChoice, SampleError> {
    Sampler::new(*cfg).choose(rec, epoch, 0)
}
