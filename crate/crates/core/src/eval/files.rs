//! JSONL readers for ground truth and labels.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{EvalError, RetrievalGroundTruth};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GtLine {
    query: usize,
    relevant: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    index: usize,
    label: usize,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, EvalError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: p.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

/// Places each entry at its declared position; every position in `0..n` must
/// appear exactly once.
fn dense<T>(path: &Path, n: usize, entries: Vec<(usize, usize, T)>) -> Result<Vec<T>, EvalError> {
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let parse = |line, message: String| EvalError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    for (line, pos, v) in entries {
        match slots.get_mut(pos) {
            None => return Err(parse(line, format!("position {pos} outside 0..{n}"))),
            Some(Some(_)) => return Err(parse(line, format!("position {pos} repeated"))),
            Some(slot) => *slot = Some(v),
        }
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(parse(0, format!("position {missing} missing")));
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("checked above"))
        .collect())
}

/// Reads `{"query": q, "relevant": [...]}` lines for `num_queries` queries
/// over an index of `index_size` items.
pub fn read_ground_truth(
    path: impl AsRef<Path>,
    num_queries: usize,
    index_size: usize,
) -> Result<RetrievalGroundTruth, EvalError> {
    let path = path.as_ref();
    let entries = read_jsonl::<GtLine>(path)?
        .into_iter()
        .map(|(line, g)| (line, g.query, g.relevant))
        .collect();
    RetrievalGroundTruth::new(dense(path, num_queries, entries)?, index_size)
}

/// Reads `{"index": i, "label": l}` lines covering positions `0..n`.
pub fn read_labels(path: impl AsRef<Path>, n: usize) -> Result<Vec<usize>, EvalError> {
    let path = path.as_ref();
    let entries = read_jsonl::<LabelLine>(path)?
        .into_iter()
        .map(|(line, l)| (line, l.index, l.label))
        .collect();
    dense(path, n, entries)
}
