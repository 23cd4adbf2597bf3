//! Two-stage recaptioning: an AltText-independent caption from a multimodal
//! captioner (VeC), then an LLM fusion of AltText and VeC into the final
//! caption (VeCap).
//!
//! Two failure modes are handled without dropping records:
//! - the fuser refuses (e.g. "I am sorry that I cannot ..."): fusion is rerun
//!   with the generated caption as the only input;
//! - the AltText is too long: it is cut at a word boundary before fusion.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::llmclient::{LlmClient, LlmError, PromptItem, ScheduleOptions};
use crate::sampler::hcs_index;
use crate::shardio::{open_records, Flag, ImageTextRecord, RecordError, ShardError, ShardWriter};

/// Prompt sent to the captioner with every image.
pub const VEC_PROMPT: &str = "Describe the image concisely, less than 20 words";

/// Instruction prefix of the fusion prompt; the numbered sentences follow it.
pub const FUSION_INSTRUCTION: &str = "Rephrase the following two sentences into one short sentence while adhering to the provided instructions: Place attributes before noun entities without introducing new meaning. Do not start with \"The image\".";

pub const DEFAULT_MAX_ALTTEXT_CHARS: usize = 300;
pub const MIN_ALTTEXT_CHARS: usize = 20;
pub const DEFAULT_REFUSAL_MARKERS: [&str; 4] = ["i am sorry", "i'm sorry", "i cannot", "as an ai"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecaptionConfig {
    pub max_alttext_chars: usize,
    /// Lowercase prefixes that mark a completion as a refusal.
    pub refusal_markers: Vec<String>,
    pub vec_prompt: String,
    pub fusion_instruction: String,
}

impl Default for RecaptionConfig {
    fn default() -> Self {
        Self {
            max_alttext_chars: DEFAULT_MAX_ALTTEXT_CHARS,
            refusal_markers: DEFAULT_REFUSAL_MARKERS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec_prompt: VEC_PROMPT.to_string(),
            fusion_instruction: FUSION_INSTRUCTION.to_string(),
        }
    }
}

impl RecaptionConfig {
    pub fn validate(&self) -> Result<(), RecaptionError> {
        if self.refusal_markers.is_empty() {
            return Err(RecaptionError::Config("refusal_markers is empty".into()));
        }
        if self.max_alttext_chars < MIN_ALTTEXT_CHARS {
            return Err(RecaptionError::Config(format!(
                "max_alttext_chars must be >= {MIN_ALTTEXT_CHARS}, got {}",
                self.max_alttext_chars
            )));
        }
        Ok(())
    }

    pub fn fusion_prompt(&self, alt_text: &str, vec: &str) -> Result<String, PromptError> {
        fusion_prompt_with(&self.fusion_instruction, alt_text, vec)
    }

    pub fn is_refusal(&self, text: &str) -> bool {
        is_refusal_with(text, &self.refusal_markers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("generated caption is empty")]
    EmptyVec,
}

pub fn build_vec_prompt() -> String {
    VEC_PROMPT.to_string()
}

/// Fusion prompt for an AltText and a generated caption. An empty `alt_text`
/// yields the single-sentence form used after a refusal.
pub fn build_fusion_prompt(alt_text: &str, vec: &str) -> Result<String, PromptError> {
    fusion_prompt_with(FUSION_INSTRUCTION, alt_text, vec)
}

fn fusion_prompt_with(instruction: &str, alt_text: &str, vec: &str) -> Result<String, PromptError> {
    if vec.trim().is_empty() {
        return Err(PromptError::EmptyVec);
    }
    Ok(if alt_text.is_empty() {
        format!("{instruction} 1. {vec}")
    } else {
        format!("{instruction} 1. {alt_text}; 2. {vec}")
    })
}

/// Case-insensitive prefix match against the default refusal markers.
pub fn detect_refusal(text: &str) -> bool {
    is_refusal_with(text, &DEFAULT_REFUSAL_MARKERS)
}

fn is_refusal_with<S: AsRef<str>>(text: &str, markers: &[S]) -> bool {
    let norm = text.trim().to_lowercase().replace('\u{2019}', "'");
    markers.iter().any(|m| norm.starts_with(m.as_ref()))
}

/// Cuts `alt` to at most `max_chars` characters, preferring the last
/// whitespace boundary; falls back to a hard cut when there is none.
pub fn truncate_alttext(alt: &str, max_chars: usize) -> (String, bool) {
    let chars: Vec<(usize, char)> = alt.char_indices().collect();
    if chars.len() <= max_chars {
        return (alt.to_string(), false);
    }
    let soft = (1..=max_chars)
        .rev()
        .find(|&i| chars[i].1.is_whitespace())
        .map(|i| alt[..chars[i].0].trim_end())
        .filter(|s| !s.is_empty());
    let out = soft.unwrap_or(&alt[..chars[max_chars].0]);
    (out.to_string(), true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    pub captioner: Url,
    pub fuser: Url,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineErrorKind {
    #[error("invalid input record: {0}")]
    InvalidRecord(#[from] RecordError),
    #[error("captioner: {0}")]
    Captioner(LlmError),
    #[error("fuser: {0}")]
    Fuser(LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("record {record_id:?}: {kind}")]
pub struct PipelineError {
    pub record_id: String,
    pub kind: PipelineErrorKind,
}

#[derive(Debug, thiserror::Error)]
pub enum RecaptionError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("interrupted after writing {written} record(s); output marked partial")]
    Interrupted { written: usize },
}

/// Counters for one shard run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Records written to the output.
    pub records: usize,
    /// Records that gained a fused caption in this run.
    pub enriched: usize,
    /// Records that already had a fused caption.
    pub skipped: usize,
    pub refusals: usize,
    pub truncations: usize,
    /// Records passed through with the `pipeline_failed` flag.
    pub failed: usize,
    /// Input lines that could not be parsed.
    pub malformed_lines: usize,
    /// The input ended in an unterminated line.
    pub input_corrupt: bool,
}

#[derive(Debug, Clone)]
pub struct ShardOptions {
    pub batch_size: usize,
    pub workers: usize,
    /// Records read and enriched per round; `None` means
    /// `batch_size * workers * 8`.
    pub chunk_records: Option<usize>,
    /// Checked while running; when set the output is closed with the
    /// partial-file sentinel.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for ShardOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            workers: 4,
            chunk_records: None,
            cancel: None,
        }
    }
}

enum Outcome {
    Unchanged(ImageTextRecord),
    Enriched {
        rec: ImageTextRecord,
        refusal: bool,
        truncated: bool,
    },
    Failed {
        rec: ImageTextRecord,
        error: PipelineError,
    },
}

enum Slot {
    Done,
    Failed(PipelineErrorKind),
    Pending {
        vec: Option<String>,
        truncated: bool,
        fused: Option<String>,
        refusal: bool,
    },
}

/// Fans batch outcomes out to one result per input prompt.
async fn run_prompts(
    client: &LlmClient,
    endpoint: &Url,
    items: Vec<PromptItem>,
    opts: &ScheduleOptions,
) -> Vec<Result<String, LlmError>> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    match client.schedule_batches(endpoint, items, opts) {
        Err(e) => out.resize(n, Err(e)),
        Ok(stream) => {
            let mut stream = std::pin::pin!(stream);
            while let Some(outcome) = stream.next().await {
                match outcome.result {
                    Ok(completions) => out.extend(completions.into_iter().map(Ok)),
                    Err(e) => out.extend(outcome.range.map(|_| Err(e.clone()))),
                }
            }
        }
    }
    out
}

/// Enriches a group of records using batched calls to both endpoints.
async fn enrich(
    records: Vec<ImageTextRecord>,
    cfg: &RecaptionConfig,
    endpoints: &Endpoints,
    client: &LlmClient,
    sched: &ScheduleOptions,
    tag: &str,
) -> Vec<Outcome> {
    let opts = |stage: &str| ScheduleOptions {
        request_prefix: format!("{tag}-{stage}"),
        ..sched.clone()
    };

    let mut slots: Vec<Slot> = records
        .iter()
        .map(|rec| {
            if let Err(e) = rec.validate() {
                Slot::Failed(e.into())
            } else if rec.vecap.is_some() {
                Slot::Done
            } else {
                Slot::Pending {
                    vec: rec.vec.clone(),
                    truncated: false,
                    fused: None,
                    refusal: false,
                }
            }
        })
        .collect();

    // Stage 1: generated captions for records that lack one.
    let need_vec: Vec<usize> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Slot::Pending { vec: None, .. }))
        .map(|(i, _)| i)
        .collect();
    let items = need_vec
        .iter()
        .map(|&i| PromptItem {
            prompt: cfg.vec_prompt.clone(),
            image: Some(records[i].image_ref.clone()),
        })
        .collect();
    let results = run_prompts(client, &endpoints.captioner, items, &opts("vec")).await;
    for (i, res) in need_vec.into_iter().zip(results) {
        slots[i] = match res {
            Ok(text) => Slot::Pending {
                vec: Some(text.trim().to_string()),
                truncated: false,
                fused: None,
                refusal: false,
            },
            Err(e) => Slot::Failed(PipelineErrorKind::Captioner(e)),
        };
    }

    // Stage 2: fuse the selected AltText with the generated caption.
    let mut fuse_idx = Vec::new();
    let mut items = Vec::new();
    for (i, slot) in slots.iter_mut().enumerate() {
        let Slot::Pending {
            vec: Some(vec),
            truncated,
            ..
        } = slot
        else {
            continue;
        };
        let rec = &records[i];
        let alt_index = rec.alt_scores.as_deref().map_or(0, hcs_index);
        let (alt, cut) = truncate_alttext(&rec.alt_texts[alt_index], cfg.max_alttext_chars);
        *truncated = cut;
        match cfg.fusion_prompt(&alt, vec) {
            Ok(prompt) => {
                fuse_idx.push(i);
                items.push(PromptItem::from(prompt));
            }
            Err(e) => *slot = Slot::Failed(e.into()),
        }
    }
    let results = run_prompts(client, &endpoints.fuser, items, &opts("fuse")).await;
    for (i, res) in fuse_idx.into_iter().zip(results) {
        match res {
            Ok(text) => {
                if let Slot::Pending { fused, .. } = &mut slots[i] {
                    *fused = Some(text.trim().to_string());
                }
            }
            Err(e) => slots[i] = Slot::Failed(PipelineErrorKind::Fuser(e)),
        }
    }

    // Stage 3: refusals are rewritten from the generated caption alone.
    let mut retry_idx = Vec::new();
    let mut items = Vec::new();
    for (i, slot) in slots.iter_mut().enumerate() {
        if let Slot::Pending {
            vec: Some(vec),
            fused: Some(fused),
            refusal,
            ..
        } = slot
        {
            if cfg.is_refusal(fused) {
                *refusal = true;
                retry_idx.push(i);
                // vec was checked non-empty in stage 2
                items.push(PromptItem::from(
                    cfg.fusion_prompt("", vec).unwrap_or_default(),
                ));
            }
        }
    }
    let results = run_prompts(client, &endpoints.fuser, items, &opts("fallback")).await;
    for (i, res) in retry_idx.into_iter().zip(results) {
        match res {
            Ok(text) => {
                if let Slot::Pending {
                    vec: Some(vec),
                    fused,
                    ..
                } = &mut slots[i]
                {
                    let text = text.trim();
                    // A second refusal keeps the generated caption itself.
                    let caption = if text.is_empty() || cfg.is_refusal(text) {
                        vec.clone()
                    } else {
                        text.to_string()
                    };
                    *fused = Some(caption);
                }
            }
            Err(e) => slots[i] = Slot::Failed(PipelineErrorKind::Fuser(e)),
        }
    }

    records
        .into_iter()
        .zip(slots)
        .map(|(mut rec, slot)| match slot {
            Slot::Done => Outcome::Unchanged(rec),
            Slot::Failed(kind) => Outcome::Failed {
                error: PipelineError {
                    record_id: rec.record_id.clone(),
                    kind,
                },
                rec,
            },
            Slot::Pending {
                vec,
                truncated,
                fused,
                refusal,
            } => {
                rec.vec = vec;
                rec.vecap = fused;
                rec.flags.remove(&Flag::PipelineFailed);
                if truncated {
                    rec.flags.insert(Flag::AlttextTruncated);
                }
                if refusal {
                    rec.flags.insert(Flag::RefusalFallback);
                }
                Outcome::Enriched {
                    rec,
                    refusal,
                    truncated,
                }
            }
        })
        .collect()
}

/// Fills in `vec` and `vecap` for one record. Records that already carry a
/// fused caption are returned unchanged.
pub async fn recaption_record(
    rec: ImageTextRecord,
    cfg: &RecaptionConfig,
    endpoints: &Endpoints,
    client: &LlmClient,
) -> Result<ImageTextRecord, PipelineError> {
    let sched = ScheduleOptions {
        batch_size: 1,
        workers: 1,
        request_prefix: String::new(),
    };
    let tag = format!("rec-{}", rec.record_id);
    let outcome = enrich(vec![rec], cfg, endpoints, client, &sched, &tag)
        .await
        .pop()
        .expect("one outcome per record");
    match outcome {
        Outcome::Unchanged(rec) | Outcome::Enriched { rec, .. } => Ok(rec),
        Outcome::Failed { error, .. } => Err(error),
    }
}

async fn wait_for_cancel(flag: Option<&AtomicBool>) {
    match flag {
        None => std::future::pending().await,
        Some(flag) => {
            while !flag.load(Ordering::SeqCst) {
                tokio::time::sleep(Duration::from_millis(25)).await;
            }
        }
    }
}

/// Enriches every record of `in_path` into `out_path`, preserving order.
/// Per-record failures are counted and passed through with the
/// `pipeline_failed` flag; only I/O errors and cancellation abort the run.
pub async fn recaption_shard(
    in_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
    cfg: &RecaptionConfig,
    endpoints: &Endpoints,
    client: &LlmClient,
    opts: &ShardOptions,
) -> Result<PipelineStats, RecaptionError> {
    cfg.validate()?;
    if opts.batch_size == 0 || opts.workers == 0 {
        return Err(RecaptionError::Config(
            "batch_size and workers must be >= 1".into(),
        ));
    }
    let chunk_len = opts
        .chunk_records
        .unwrap_or(opts.batch_size * opts.workers * 8)
        .max(1);
    let sched = ScheduleOptions {
        batch_size: opts.batch_size,
        workers: opts.workers,
        request_prefix: String::new(),
    };
    let cancel = opts.cancel.as_deref();

    let mut reader = open_records(in_path)?;
    let mut writer = ShardWriter::create(out_path)?;
    let mut stats = PipelineStats::default();

    for chunk_no in 0.. {
        let mut chunk = Vec::with_capacity(chunk_len);
        for item in reader.by_ref().take(chunk_len) {
            match item {
                Ok(rec) => chunk.push(rec),
                Err(e) => {
                    writer.abort()?;
                    return Err(e.into());
                }
            }
        }
        if chunk.is_empty() {
            break;
        }
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            let written = writer.abort()?;
            return Err(RecaptionError::Interrupted { written });
        }
        let tag = format!("c{chunk_no}");
        let outcomes = tokio::select! {
            outcomes = enrich(chunk, cfg, endpoints, client, &sched, &tag) => outcomes,
            _ = wait_for_cancel(cancel) => {
                let written = writer.abort()?;
                return Err(RecaptionError::Interrupted { written });
            }
        };
        for outcome in outcomes {
            let rec = match outcome {
                Outcome::Unchanged(rec) => {
                    stats.skipped += 1;
                    rec
                }
                Outcome::Enriched {
                    rec,
                    refusal,
                    truncated,
                } => {
                    stats.enriched += 1;
                    stats.refusals += usize::from(refusal);
                    stats.truncations += usize::from(truncated);
                    rec
                }
                Outcome::Failed { mut rec, error } => {
                    log::warn!("{error}");
                    stats.failed += 1;
                    rec.flags.insert(Flag::PipelineFailed);
                    rec
                }
            };
            if let Err(e) = writer.write(&rec) {
                let _ = writer.abort();
                return Err(e.into());
            }
        }
    }

    stats.malformed_lines = reader.malformed().len();
    stats.input_corrupt = reader.is_corrupt();
    stats.records = writer.finish()?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_prompt_is_fixed() {
        assert_eq!(
            build_vec_prompt(),
            "Describe the image concisely, less than 20 words"
        );
        assert_eq!(build_vec_prompt(), build_vec_prompt());
    }

    #[test]
    fn fusion_prompt_golden() {
        let p = build_fusion_prompt(
            "Ring Capri Pomellato",
            "A delicate white ring on a white background",
        )
        .unwrap();
        assert_eq!(
            p,
            "Rephrase the following two sentences into one short sentence while adhering to the provided instructions: Place attributes before noun entities without introducing new meaning. Do not start with \"The image\". 1. Ring Capri Pomellato; 2. A delicate white ring on a white background"
        );
    }

    #[test]
    fn fusion_prompt_single_item_and_empty_vec() {
        let p = build_fusion_prompt("", "A red barn in a field").unwrap();
        assert!(p.ends_with("\"The image\". 1. A red barn in a field"));
        assert!(!p.contains("2."));
        assert_eq!(build_fusion_prompt("alt", ""), Err(PromptError::EmptyVec));
        assert_eq!(build_fusion_prompt("alt", "  "), Err(PromptError::EmptyVec));
    }

    #[test]
    fn refusal_detection() {
        assert!(detect_refusal("I am sorry that I cannot describe this."));
        assert!(!detect_refusal("A sunny beach with palm trees."));
        assert!(detect_refusal("I'M SORRY, no."));
        assert!(detect_refusal("  I\u{2019}m sorry, but no"));
        assert!(detect_refusal("As an AI language model"));
        assert!(!detect_refusal("Sorry state of a rusty car"));
    }

    #[test]
    fn truncation_cases() {
        assert_eq!(
            truncate_alttext("short caption", 300),
            ("short caption".to_string(), false)
        );
        let long: String = "x".repeat(50);
        let (out, cut) = truncate_alttext(&long, 20);
        assert_eq!(out, "x".repeat(20));
        assert!(cut);
        // boundary exactly at the limit
        let (out, cut) = truncate_alttext("aaaa bbbb cccc dddd eeee", 20);
        assert_eq!(out, "aaaa bbbb cccc dddd");
        assert!(cut);
        let (out, _) = truncate_alttext("aaaa bbbb cccc ddddd eeee", 20);
        assert_eq!(out, "aaaa bbbb cccc ddddd");
        // multibyte text is cut on char boundaries
        let (out, cut) = truncate_alttext(&"é".repeat(30), 20);
        assert_eq!(out.chars().count(), 20);
        assert!(cut);
    }

    #[test]
    fn config_validation() {
        assert!(RecaptionConfig::default().validate().is_ok());
        let cfg = RecaptionConfig {
            max_alttext_chars: 19,
            ..RecaptionConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RecaptionConfig {
            refusal_markers: vec![],
            ..RecaptionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
