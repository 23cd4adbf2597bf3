//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vecap_core::loss::{contrastive_loss_raw, Reduction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r /= n;
    }
    m
}

/// Product of a few random Householder reflections.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::eye(d);
    for _ in 0..4 {
        let v = unit_rows(gaussian(1, d, rng));
        let v = v.row(0);
        let mut h = Array2::<f64>::eye(d);
        for i in 0..d {
            for j in 0..d {
                h[[i, j]] -= 2.0 * v[i] * v[j];
            }
        }
        q = q.dot(&h);
    }
    q
}

fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Index positions sorted best-first by a full sort.
fn full_ranking(q: &[f64], index: ArrayView2<'_, f64>, skip: Option<usize>) -> Vec<usize> {
    let s: Vec<f64> = index
        .rows()
        .into_iter()
        .map(|r| seq_dot(q, r.as_slice().unwrap()))
        .collect();
    let mut order: Vec<usize> = (0..s.len()).filter(|&i| Some(i) != skip).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then_with(|| a.cmp(&b)));
    order
}

pub fn oracle_recall(
    queries: ArrayView2<'_, f64>,
    index: ArrayView2<'_, f64>,
    relevant: &[Vec<usize>],
    ks: &[usize],
) -> Vec<f64> {
    let firsts: Vec<usize> = (0..queries.nrows())
        .map(|q| {
            let order = full_ranking(queries.row(q).as_slice().unwrap(), index, None);
            order.iter().position(|i| relevant[q].contains(i)).unwrap()
        })
        .collect();
    ks.iter()
        .map(|&k| firsts.iter().filter(|&&p| p < k).count() as f64 / firsts.len() as f64)
        .collect()
}

pub fn oracle_topk(
    images: ArrayView2<'_, f64>,
    classes: ArrayView2<'_, f64>,
    labels: &[usize],
    ks: &[usize],
) -> Vec<f64> {
    let relevant: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    oracle_recall(images, classes, &relevant, ks)
}

pub fn oracle_ap(hits: &[bool]) -> f64 {
    let r = hits.iter().filter(|&&h| h).count();
    let mut sum = 0.0;
    let mut j = 0;
    for (pos, &h) in hits.iter().enumerate() {
        if h {
            j += 1;
            sum += j as f64 / (pos + 1) as f64;
        }
    }
    sum / r as f64
}

pub fn oracle_map(embs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let n = embs.nrows();
    let mut total = 0.0;
    for q in 0..n {
        let order = full_ranking(embs.row(q).as_slice().unwrap(), embs, Some(q));
        let hits: Vec<bool> = order.iter().map(|&i| labels[i] == labels[q]).collect();
        total += oracle_ap(&hits);
    }
    total / n as f64
}

/// Largest violation of `|analytic - numeric| <= max(rel * |numeric|, abs)`
/// over every component, as `(violation, component description)`.
pub fn gradient_check(seed: u64, n: usize, d: usize, h: f64, rel: f64, abs: f64) -> Option<String> {
    let mut r = rng(seed);
    let xi = gaussian(n, d, &mut r);
    let xt = gaussian(n, d, &mut r);
    let log_tau = (0.05 + 0.5 * r.random::<f64>()).ln();
    let loss = |a: &Array2<f64>, b: &Array2<f64>, lt: f64| {
        contrastive_loss_raw(a.view(), b.view(), lt, Reduction::Mean)
            .unwrap()
            .0
            .total
    };
    let (_, grad) = contrastive_loss_raw(xi.view(), xt.view(), log_tau, Reduction::Mean).unwrap();
    let check = |analytic: f64, numeric: f64, what: String| -> Option<String> {
        let err = (analytic - numeric).abs();
        (err > (rel * numeric.abs()).max(abs))
            .then(|| format!("seed {seed} {what}: analytic {analytic:e} numeric {numeric:e}"))
    };
    for (which, base, analytic) in [("image", &xi, &grad.d_image), ("text", &xt, &grad.d_text)] {
        for i in 0..n {
            for j in 0..d {
                let mut plus = base.clone();
                plus[[i, j]] += h;
                let mut minus = base.clone();
                minus[[i, j]] -= h;
                let (lp, lm) = if which == "image" {
                    (loss(&plus, &xt, log_tau), loss(&minus, &xt, log_tau))
                } else {
                    (loss(&xi, &plus, log_tau), loss(&xi, &minus, log_tau))
                };
                if let Some(m) = check(
                    analytic[[i, j]],
                    (lp - lm) / (2.0 * h),
                    format!("{which}[{i},{j}]"),
                ) {
                    return Some(m);
                }
            }
        }
    }
    let numeric = (loss(&xi, &xt, log_tau + h) - loss(&xi, &xt, log_tau - h)) / (2.0 * h);
    check(grad.d_log_tau, numeric, "log_tau".into())
}
