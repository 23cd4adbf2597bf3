//! Retrieval and classification metrics over precomputed embeddings.
//!
//! All rankings sort by dot product descending with ties broken towards the
//! lower index. Per-query work runs on the rayon pool; reductions are
//! performed sequentially in query order so results do not depend on the
//! thread count.

mod files;
mod report;

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

pub use files::{read_ground_truth, read_labels};
pub use report::{eval_report, EvalInputs, EvalReport};

/// Below this norm a class mean is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("index set is empty")]
    EmptyIndex,
    #[error("invalid k list: {0}")]
    InvalidK(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("label {label} at position {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("class {0} has a single member; leave-one-out needs at least two")]
    SingletonClass(usize),
    #[error("mean template embedding has norm {0:e}")]
    DegenerateMean(f64),
    #[error("no template embeddings")]
    EmptyTemplates,
    #[error("{path}: {source}")]
    Embedding {
        path: String,
        source: crate::shardio::EmbeddingError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Relevant index positions per query. Supports one-to-many ground truth such
/// as several captions per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalGroundTruth {
    relevant: Vec<Vec<usize>>,
    index_size: usize,
}

impl RetrievalGroundTruth {
    /// Each relevant list must be non-empty and inside `0..index_size`.
    /// Lists are sorted and deduplicated.
    pub fn new(mut relevant: Vec<Vec<usize>>, index_size: usize) -> Result<Self, EvalError> {
        for (q, rel) in relevant.iter_mut().enumerate() {
            if rel.is_empty() {
                return Err(EvalError::InvalidGroundTruth(format!(
                    "query {q} has no relevant items"
                )));
            }
            rel.sort_unstable();
            rel.dedup();
            if let Some(&bad) = rel.iter().find(|&&i| i >= index_size) {
                return Err(EvalError::InvalidGroundTruth(format!(
                    "query {q} lists item {bad} but the index has {index_size}"
                )));
            }
        }
        Ok(Self {
            relevant,
            index_size,
        })
    }

    /// `i` relevant to query `i` only.
    pub fn identity(n: usize) -> Self {
        Self {
            relevant: (0..n).map(|i| vec![i]).collect(),
            index_size: n,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn index_size(&self) -> usize {
        self.index_size
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }

    /// Ground truth for the opposite direction (e.g. text-to-image from
    /// image-to-text). Fails if some index item is relevant to no query.
    pub fn invert(&self) -> Result<Self, EvalError> {
        let mut inv = vec![Vec::new(); self.index_size];
        for (q, rel) in self.relevant.iter().enumerate() {
            for &i in rel {
                inv[i].push(q);
            }
        }
        Self::new(inv, self.relevant.len())
    }
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn scores(q: ArrayView1<'_, f64>, index: ArrayView2<'_, f64>) -> Vec<f64> {
    index.rows().into_iter().map(|r| dot(q, r)).collect()
}

/// `a` ranks ahead of `b`.
fn ahead(s: &[f64], a: usize, b: usize) -> bool {
    s[a] > s[b] || (s[a] == s[b] && a < b)
}

/// Zero-based rank of `target` among all items in `s`.
fn rank_of(s: &[f64], target: usize) -> usize {
    (0..s.len())
        .filter(|&i| i != target && ahead(s, i, target))
        .count()
}

fn check_ks(ks: &[usize], limit: usize, what: &str) -> Result<(), EvalError> {
    if ks.is_empty() {
        return Err(EvalError::InvalidK("empty".into()));
    }
    if ks[0] == 0 {
        return Err(EvalError::InvalidK("k must be at least 1".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidK(format!(
            "{ks:?} is not strictly ascending"
        )));
    }
    let max = ks[ks.len() - 1];
    if max > limit {
        return Err(EvalError::InvalidK(format!(
            "k={max} exceeds the {limit} {what}"
        )));
    }
    Ok(())
}

fn fraction_within(ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = ranks.len() as f64;
    ks.iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect()
}

/// Fraction of queries with at least one relevant item in the top `k`, for
/// each `k` in `ks`.
pub fn recall_at_k(
    queries: ArrayView2<'_, f64>,
    index: ArrayView2<'_, f64>,
    gt: &RetrievalGroundTruth,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    if index.nrows() == 0 {
        return Err(EvalError::EmptyIndex);
    }
    if queries.ncols() != index.ncols() {
        return Err(EvalError::DimMismatch(format!(
            "queries have dim {}, index has dim {}",
            queries.ncols(),
            index.ncols()
        )));
    }
    if gt.num_queries() != queries.nrows() || gt.index_size() != index.nrows() {
        return Err(EvalError::InvalidGroundTruth(format!(
            "ground truth is {}x{}, embeddings are {}x{}",
            gt.num_queries(),
            gt.index_size(),
            queries.nrows(),
            index.nrows()
        )));
    }
    check_ks(ks, index.nrows(), "index items")?;
    if queries.nrows() == 0 {
        return Ok(ks.iter().map(|&k| (k, 0.0)).collect());
    }

    let ranks: Vec<usize> = (0..queries.nrows())
        .into_par_iter()
        .map(|q| {
            let s = scores(queries.row(q), index);
            let rel = gt.relevant(q);
            let best = rel
                .iter()
                .copied()
                .reduce(|a, b| if ahead(&s, b, a) { b } else { a })
                .expect("relevant sets are non-empty");
            rank_of(&s, best)
        })
        .collect();
    Ok(fraction_within(&ranks, ks))
}

/// Mean of the template rows, L2-normalised.
pub fn build_class_embedding(templates: ArrayView2<'_, f64>) -> Result<Array1<f64>, EvalError> {
    let t = templates.nrows();
    if t == 0 {
        return Err(EvalError::EmptyTemplates);
    }
    let mut mean = Array1::<f64>::zeros(templates.ncols());
    for row in templates.rows() {
        mean += &row;
    }
    mean /= t as f64;
    let norm = dot(mean.view(), mean.view()).sqrt();
    if !(norm >= DEGENERATE_NORM) {
        return Err(EvalError::DegenerateMean(norm));
    }
    mean /= norm;
    Ok(mean)
}

/// Top-k accuracy of predicting `labels[i]` for image `i` by ranking the
/// class embeddings.
pub fn zeroshot_classify(
    images: ArrayView2<'_, f64>,
    classes: ArrayView2<'_, f64>,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    if classes.nrows() == 0 {
        return Err(EvalError::EmptyIndex);
    }
    if images.ncols() != classes.ncols() {
        return Err(EvalError::DimMismatch(format!(
            "images have dim {}, classes have dim {}",
            images.ncols(),
            classes.ncols()
        )));
    }
    if labels.len() != images.nrows() {
        return Err(EvalError::DimMismatch(format!(
            "{} labels for {} images",
            labels.len(),
            images.nrows()
        )));
    }
    let c = classes.nrows();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(EvalError::LabelOutOfRange {
            index,
            label,
            classes: c,
        });
    }
    check_ks(ks, c, "classes")?;
    if images.nrows() == 0 {
        return Ok(ks.iter().map(|&k| (k, 0.0)).collect());
    }

    let ranks: Vec<usize> = (0..images.nrows())
        .into_par_iter()
        .map(|i| rank_of(&scores(images.row(i), classes), labels[i]))
        .collect();
    Ok(fraction_within(&ranks, ks))
}

/// Non-interpolated average precision of one ranked relevance list.
fn average_precision(hits: impl Iterator<Item = bool>) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, hit) in hits.enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

/// Leave-one-out mAP: each image queries all the others, and items sharing
/// its label are relevant. AP is computed over the full ranking.
pub fn map_leave_one_out(embs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, EvalError> {
    let n = embs.nrows();
    if labels.len() != n {
        return Err(EvalError::DimMismatch(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(EvalError::EmptyIndex);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(EvalError::SingletonClass(label));
    }

    let aps: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|q| {
            let s = scores(embs.row(q), embs);
            let mut order: Vec<usize> = (0..n).filter(|&i| i != q).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            average_precision(order.iter().map(|&i| labels[i] == labels[q]))
        })
        .collect();
    Ok(aps.iter().sum::<f64>() / n as f64)
}

/// Rows grouped into consecutive blocks of `per_class` templates, each
/// reduced with [`build_class_embedding`].
pub fn class_embeddings_from_templates(
    templates: ArrayView2<'_, f64>,
    per_class: usize,
) -> Result<ndarray::Array2<f64>, EvalError> {
    if per_class == 0 || templates.nrows() % per_class != 0 {
        return Err(EvalError::DimMismatch(format!(
            "{} template rows do not split into groups of {per_class}",
            templates.nrows()
        )));
    }
    let c = templates.nrows() / per_class;
    let mut out = ndarray::Array2::zeros((c, templates.ncols()));
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let block = templates.slice(ndarray::s![k * per_class..(k + 1) * per_class, ..]);
        row.assign(&build_class_embedding(block)?);
    }
    Ok(out)
}
