use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    class_embeddings_from_templates, map_leave_one_out, read_ground_truth, read_labels,
    recall_at_k, zeroshot_classify, EvalError, RetrievalGroundTruth,
};
use crate::shardio::read_embeddings;

/// Metric summary. Keys of the inner maps are the `k` values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"i2t"` / `"t2i"` to recall at each k.
    pub recall: BTreeMap<String, BTreeMap<usize, f64>>,
    pub topk: BTreeMap<usize, f64>,
    pub map: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (dir, row) in &self.recall {
            write!(f, "{dir:<6}")?;
            for (k, v) in row {
                write!(f, "  R@{k:<3} {:>7.2}", v * 100.0)?;
            }
            writeln!(f)?;
        }
        if !self.topk.is_empty() {
            write!(f, "{:<6}", "top-k")?;
            for (k, v) in &self.topk {
                write!(f, "  T@{k:<3} {:>7.2}", v * 100.0)?;
            }
            writeln!(f)?;
        }
        if let Some(m) = self.map {
            writeln!(f, "{:<6}  mAP   {:>7.2}", "i2i", m * 100.0)?;
        }
        Ok(())
    }
}

/// File inputs for [`eval_report`]. Embedding files use the binary matrix
/// format from `shardio`; rows are expected to be L2-normalised.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalInputs {
    pub images: PathBuf,
    /// Text embeddings for image-text retrieval.
    pub texts: Option<PathBuf>,
    /// Image-to-text ground truth; identity when absent.
    pub ground_truth: Option<PathBuf>,
    /// Class template embeddings, `templates_per_class` consecutive rows per class.
    pub classes: Option<PathBuf>,
    pub templates_per_class: usize,
    /// Image labels for zero-shot classification.
    pub labels: Option<PathBuf>,
    /// Image labels for leave-one-out retrieval.
    pub map_labels: Option<PathBuf>,
    pub ks: Vec<usize>,
}

fn load(path: &Path) -> Result<Array2<f64>, EvalError> {
    read_embeddings(path)
        .map(|m| m.to_f64())
        .map_err(|source| EvalError::Embedding {
            path: path.display().to_string(),
            source,
        })
}

fn same_dim(a: &Path, da: usize, b: &Path, db: usize) -> Result<(), EvalError> {
    if da != db {
        return Err(EvalError::DimMismatch(format!(
            "{} has dim {da}, {} has dim {db}",
            a.display(),
            b.display()
        )));
    }
    Ok(())
}

fn ks_up_to(ks: &[usize], limit: usize, what: &str) -> Vec<usize> {
    let kept: Vec<usize> = ks.iter().copied().filter(|&k| k <= limit).collect();
    if kept.len() < ks.len() {
        log::warn!("dropping k > {limit} ({what})");
    }
    kept
}

fn nonempty(ks: Vec<usize>) -> Result<Vec<usize>, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::InvalidK("no k fits the index size".into()));
    }
    Ok(ks)
}

/// Loads embeddings and auxiliary files and computes every metric their
/// presence allows. `ks` larger than an index are dropped with a warning.
pub fn eval_report(inputs: &EvalInputs) -> Result<EvalReport, EvalError> {
    let mut ks = inputs.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let images = load(&inputs.images)?;
    let mut report = EvalReport::default();

    if let Some(tp) = &inputs.texts {
        let texts = load(tp)?;
        same_dim(&inputs.images, images.ncols(), tp, texts.ncols())?;
        let gt = match &inputs.ground_truth {
            Some(p) => read_ground_truth(p, images.nrows(), texts.nrows())?,
            None if images.nrows() == texts.nrows() => {
                RetrievalGroundTruth::identity(images.nrows())
            }
            None => {
                return Err(EvalError::InvalidGroundTruth(format!(
                    "{} images and {} texts need a ground-truth file",
                    images.nrows(),
                    texts.nrows()
                )))
            }
        };
        let i2t_ks = nonempty(ks_up_to(&ks, texts.nrows(), "texts"))?;
        let t2i_ks = nonempty(ks_up_to(&ks, images.nrows(), "images"))?;
        report.recall.insert(
            "i2t".into(),
            recall_at_k(images.view(), texts.view(), &gt, &i2t_ks)?,
        );
        report.recall.insert(
            "t2i".into(),
            recall_at_k(texts.view(), images.view(), &gt.invert()?, &t2i_ks)?,
        );
    }

    match (&inputs.classes, &inputs.labels) {
        (Some(cp), Some(lp)) => {
            let templates = load(cp)?;
            same_dim(&inputs.images, images.ncols(), cp, templates.ncols())?;
            let classes = class_embeddings_from_templates(
                templates.view(),
                inputs.templates_per_class.max(1),
            )?;
            let labels = read_labels(lp, images.nrows())?;
            let top_ks = nonempty(ks_up_to(&ks, classes.nrows(), "classes"))?;
            report.topk = zeroshot_classify(images.view(), classes.view(), &labels, &top_ks)?;
        }
        (None, None) => {}
        _ => {
            return Err(EvalError::InvalidGroundTruth(
                "zero-shot needs both class embeddings and labels".into(),
            ))
        }
    }

    if let Some(mp) = &inputs.map_labels {
        let labels = read_labels(mp, images.nrows())?;
        report.map = Some(map_leave_one_out(images.view(), &labels)?);
    }
    Ok(report)
}
