use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Written (without a trailing newline) when a writer is aborted. Any shard
/// whose last line is not newline-terminated must be treated as corrupt.
pub const PARTIAL_SENTINEL: &str = "#partial";

/// Pipeline bookkeeping attached to a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// The fusion model refused and the caption was rewritten from the
    /// generated caption alone.
    RefusalFallback,
    /// The AltText fed to fusion was shortened to the configured limit.
    AlttextTruncated,
    /// Enrichment failed (transport or protocol error); the record was passed
    /// through unchanged.
    PipelineFailed,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::RefusalFallback => "refusal_fallback",
            Flag::AlttextTruncated => "alttext_truncated",
            Flag::PipelineFailed => "pipeline_failed",
        }
    }
}

/// One web image with its raw and generated captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTextRecord {
    pub record_id: String,
    /// Opaque image key; never dereferenced here.
    pub image_ref: String,
    /// Crawled AltTexts. At least one, none blank.
    pub alt_texts: Vec<String>,
    /// Precomputed image-text similarity per AltText, used for HCS selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_scores: Option<Vec<f64>>,
    /// Visual-enriched caption produced by the multimodal captioner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vec: Option<String>,
    /// Fused caption produced from an AltText and `vec`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vecap: Option<String>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("record_id is empty")]
    EmptyRecordId,
    #[error("alt_texts is empty")]
    EmptyAltTexts,
    #[error("alt_texts[{0}] is blank")]
    BlankAltText(usize),
    #[error("alt_scores has {scores} entries but alt_texts has {alt_texts}")]
    ScoreLengthMismatch { scores: usize, alt_texts: usize },
    #[error("alt_scores[{0}] is not finite")]
    NonFiniteScore(usize),
    #[error("vecap is present without vec")]
    VecapWithoutVec,
}

impl ImageTextRecord {
    /// Minimal record with a single AltText.
    pub fn new(
        record_id: impl Into<String>,
        image_ref: impl Into<String>,
        alt_text: impl Into<String>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            image_ref: image_ref.into(),
            alt_texts: vec![alt_text.into()],
            alt_scores: None,
            vec: None,
            vecap: None,
            flags: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.record_id.is_empty() {
            return Err(RecordError::EmptyRecordId);
        }
        if self.alt_texts.is_empty() {
            return Err(RecordError::EmptyAltTexts);
        }
        if let Some(i) = self.alt_texts.iter().position(|a| a.trim().is_empty()) {
            return Err(RecordError::BlankAltText(i));
        }
        if let Some(scores) = &self.alt_scores {
            if scores.len() != self.alt_texts.len() {
                return Err(RecordError::ScoreLengthMismatch {
                    scores: scores.len(),
                    alt_texts: self.alt_texts.len(),
                });
            }
            if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
                return Err(RecordError::NonFiniteScore(i));
            }
        }
        if self.vecap.is_some() && self.vec.is_none() {
            return Err(RecordError::VecapWithoutVec);
        }
        Ok(())
    }

    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LineErrorKind {
    MissingField(&'static str),
    InvalidJson(String),
    Invariant(RecordError),
    DuplicateId(String),
    /// Final line without a terminating newline: the shard was not finished.
    Unterminated,
}

/// A line that was skipped while reading a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    /// 1-based line number.
    pub line_no: usize,
    pub kind: LineErrorKind,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line_no)?;
        match &self.kind {
            LineErrorKind::MissingField(name) => write!(f, "missing field `{name}`"),
            LineErrorKind::InvalidJson(msg) => write!(f, "malformed JSON: {msg}"),
            LineErrorKind::Invariant(e) => write!(f, "{e}"),
            LineErrorKind::DuplicateId(id) => write!(f, "duplicate record_id {id:?}"),
            LineErrorKind::Unterminated => write!(f, "unterminated final line (partial shard)"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("record {record_id:?}: {source}")]
    InvalidRecord {
        record_id: String,
        #[source]
        source: RecordError,
    },
    #[error("duplicate record_id {0:?}")]
    DuplicateId(String),
}

// Mirror of the wire schema with every required field optional so that a
// missing field can be named instead of surfacing serde's message.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    record_id: Option<String>,
    image_ref: Option<String>,
    alt_texts: Option<Vec<String>>,
    #[serde(default)]
    alt_scores: Option<Vec<f64>>,
    #[serde(default)]
    vec: Option<String>,
    #[serde(default)]
    vecap: Option<String>,
    #[serde(default)]
    flags: Option<BTreeSet<Flag>>,
}

fn parse_line(line: &str) -> Result<ImageTextRecord, LineErrorKind> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| LineErrorKind::InvalidJson(e.to_string()))?;
    let rec = ImageTextRecord {
        record_id: raw
            .record_id
            .ok_or(LineErrorKind::MissingField("record_id"))?,
        image_ref: raw
            .image_ref
            .ok_or(LineErrorKind::MissingField("image_ref"))?,
        alt_texts: raw
            .alt_texts
            .ok_or(LineErrorKind::MissingField("alt_texts"))?,
        alt_scores: raw.alt_scores,
        vec: raw.vec,
        vecap: raw.vecap,
        flags: raw.flags.unwrap_or_default(),
    };
    rec.validate().map_err(LineErrorKind::Invariant)?;
    Ok(rec)
}

/// Streaming JSONL reader. Malformed lines are skipped and collected in
/// [`RecordReader::malformed`]; iteration ends early only on an I/O error.
pub struct RecordReader<R> {
    inner: R,
    buf: String,
    line_no: usize,
    seen: HashSet<String>,
    malformed: Vec<LineError>,
    corrupt: bool,
    done: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: String::new(),
            line_no: 0,
            seen: HashSet::new(),
            malformed: Vec::new(),
            corrupt: false,
            done: false,
        }
    }

    pub fn malformed(&self) -> &[LineError] {
        &self.malformed
    }

    /// True once an unterminated final line has been seen.
    pub fn is_corrupt(&self) -> bool {
        self.corrupt
    }

    fn skip(&mut self, kind: LineErrorKind) {
        let err = LineError {
            line_no: self.line_no,
            kind,
        };
        log::warn!("skipping {err}");
        self.malformed.push(err);
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<ImageTextRecord, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            let n = match self.inner.read_line(&mut self.buf) {
                Ok(n) => n,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            if n == 0 {
                self.done = true;
                break;
            }
            self.line_no += 1;
            if !self.buf.ends_with('\n') {
                self.done = true;
                self.corrupt = true;
                self.skip(LineErrorKind::Unterminated);
                break;
            }
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line) {
                Ok(rec) => {
                    if !self.seen.insert(rec.record_id.clone()) {
                        self.skip(LineErrorKind::DuplicateId(rec.record_id));
                        continue;
                    }
                    return Some(Ok(rec));
                }
                Err(kind) => self.skip(kind),
            }
        }
        None
    }
}

pub fn open_records(path: impl AsRef<Path>) -> Result<RecordReader<BufReader<File>>, ShardError> {
    Ok(RecordReader::new(BufReader::new(File::open(path)?)))
}

/// Everything read from one shard.
#[derive(Debug, Default)]
pub struct ShardContents {
    pub records: Vec<ImageTextRecord>,
    pub malformed: Vec<LineError>,
    pub corrupt: bool,
}

/// Reads a whole shard into memory, preserving file order.
pub fn read_records(path: impl AsRef<Path>) -> Result<ShardContents, ShardError> {
    let mut reader = open_records(path)?;
    let records = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(ShardContents {
        records,
        malformed: std::mem::take(&mut reader.malformed),
        corrupt: reader.corrupt,
    })
}

/// Incremental shard writer. Call [`ShardWriter::finish`] on success or
/// [`ShardWriter::abort`] to leave the corrupt-file sentinel behind.
pub struct ShardWriter<W: Write> {
    out: BufWriter<W>,
    seen: HashSet<String>,
    count: usize,
}

impl ShardWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ShardError> {
        Ok(Self::new(File::create(path)?))
    }
}

impl<W: Write> ShardWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            out: BufWriter::new(inner),
            seen: HashSet::new(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn write(&mut self, rec: &ImageTextRecord) -> Result<(), ShardError> {
        rec.validate().map_err(|source| ShardError::InvalidRecord {
            record_id: rec.record_id.clone(),
            source,
        })?;
        if !self.seen.insert(rec.record_id.clone()) {
            return Err(ShardError::DuplicateId(rec.record_id.clone()));
        }
        let line = serde_json::to_string(rec).map_err(io::Error::other)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize, ShardError> {
        self.out.flush()?;
        Ok(self.count)
    }

    /// Flushes what was written so far followed by [`PARTIAL_SENTINEL`] with
    /// no newline, so readers flag the shard as corrupt.
    pub fn abort(mut self) -> Result<usize, ShardError> {
        self.out.write_all(PARTIAL_SENTINEL.as_bytes())?;
        self.out.flush()?;
        Ok(self.count)
    }
}

/// Writes `records` to `path`. All records are validated before the file is
/// created, so an invalid record leaves no file behind.
pub fn write_records(
    path: impl AsRef<Path>,
    records: &[ImageTextRecord],
) -> Result<usize, ShardError> {
    let mut ids = HashSet::with_capacity(records.len());
    for rec in records {
        rec.validate().map_err(|source| ShardError::InvalidRecord {
            record_id: rec.record_id.clone(),
            source,
        })?;
        if !ids.insert(rec.record_id.as_str()) {
            return Err(ShardError::DuplicateId(rec.record_id.clone()));
        }
    }
    let mut writer = ShardWriter::create(path)?;
    for rec in records {
        if let Err(e) = writer.write(rec) {
            let _ = writer.abort();
            return Err(e);
        }
    }
    writer.finish()
}
