mod common;

use common::{
    gaussian, oracle_ap, oracle_map, oracle_recall, oracle_topk, random_orthogonal, rng, unit_rows,
};
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use vecap_core::eval::{
    build_class_embedding, map_leave_one_out, recall_at_k, zeroshot_classify, RetrievalGroundTruth,
};

fn values(m: std::collections::BTreeMap<usize, f64>) -> Vec<f64> {
    m.into_values().collect()
}

/// Random instance; some rows are duplicated so exact ties occur.
fn instance(seed: u64) -> (Array2<f64>, Array2<f64>, Vec<Vec<usize>>) {
    let mut r = rng(seed);
    let n = r.random_range(1..=200);
    let m = r.random_range(1..=200);
    let d = r.random_range(2..=16);
    let q = unit_rows(gaussian(n, d, &mut r));
    let mut x = unit_rows(gaussian(m, d, &mut r));
    for _ in 0..m / 5 {
        let (a, b) = (r.random_range(0..m), r.random_range(0..m));
        let row = x.row(a).to_owned();
        x.row_mut(b).assign(&row);
    }
    let relevant = (0..n)
        .map(|_| {
            let k = r.random_range(1..=3.min(m));
            (0..k).map(|_| r.random_range(0..m)).collect()
        })
        .collect();
    (q, x, relevant)
}

fn ks_for(m: usize) -> Vec<usize> {
    [1, 5, 10, 50].into_iter().filter(|&k| k <= m).collect()
}

#[test]
fn recall_matches_full_sort_oracle() {
    for seed in 0..50 {
        let (q, x, rel) = instance(seed);
        let ks = ks_for(x.nrows());
        let gt = RetrievalGroundTruth::new(rel.clone(), x.nrows()).unwrap();
        let got = values(recall_at_k(q.view(), x.view(), &gt, &ks).unwrap());
        assert_eq!(
            got,
            oracle_recall(q.view(), x.view(), &rel, &ks),
            "seed {seed}"
        );
    }
}

#[test]
fn zeroshot_matches_full_sort_oracle() {
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..=200);
        let c = r.random_range(1..=200);
        let d = r.random_range(2..=16);
        let images = unit_rows(gaussian(n, d, &mut r));
        let mut classes = unit_rows(gaussian(c, d, &mut r));
        if c > 2 {
            let row = classes.row(0).to_owned();
            classes.row_mut(c - 1).assign(&row);
        }
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let ks = ks_for(c);
        let got = values(zeroshot_classify(images.view(), classes.view(), &labels, &ks).unwrap());
        assert_eq!(
            got,
            oracle_topk(images.view(), classes.view(), &labels, &ks),
            "seed {seed}"
        );
    }
}

#[test]
fn map_matches_full_sort_oracle() {
    for seed in 0..50 {
        let mut r = rng(2000 + seed);
        let classes = r.random_range(1..=10);
        let n = r.random_range(2 * classes..=200);
        let d = r.random_range(2..=16);
        let mut embs = unit_rows(gaussian(n, d, &mut r));
        if n > 4 {
            let row = embs.row(1).to_owned();
            embs.row_mut(3).assign(&row);
        }
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut r);
        let got = map_leave_one_out(embs.view(), &labels).unwrap();
        assert_eq!(got, oracle_map(embs.view(), &labels), "seed {seed}");
    }
}

#[test]
fn handcrafted_map_golden() {
    // classes {0, 1} and {2, 3}
    let embs = array![[1.0, 0.0], [0.6, 0.8], [0.8, 0.6], [0.0, 1.0]];
    let labels = [0, 0, 1, 1];
    // query 0: 2 (0.8), 1 (0.6), 3 (0.0) -> relevant at rank 2 -> AP 1/2
    // query 1: 3 (0.8), 2 (0.96) ... ranked 2, 3, 0 -> relevant 0 at rank 3 -> 1/3
    // query 2: 1 (0.96), 0 (0.8), 3 (0.6) -> relevant 3 at rank 3 -> 1/3
    // query 3: 1 (0.8), 2 (0.6), 0 (0.0) -> relevant 2 at rank 2 -> 1/2
    let golden = (0.5 + 1.0 / 3.0 + 1.0 / 3.0 + 0.5) / 4.0;
    assert_eq!(map_leave_one_out(embs.view(), &labels).unwrap(), golden);
    assert_eq!(oracle_map(embs.view(), &labels), golden);
}

#[test]
fn orthogonal_classes_give_perfect_map() {
    let mut embs = Array2::<f64>::zeros((120, 12));
    let labels: Vec<usize> = (0..120).map(|i| i / 10).collect();
    for (i, &l) in labels.iter().enumerate() {
        embs[[i, l]] = 1.0;
    }
    assert_eq!(map_leave_one_out(embs.view(), &labels).unwrap(), 1.0);
}

#[test]
fn random_map_matches_monte_carlo_expectation() {
    // Exchangeability makes each query's ranking a uniform permutation of
    // the other 9 items, 4 of them relevant.
    let mut r = rng(77);
    let draws = 200_000;
    let mut hits = [true, true, true, true, false, false, false, false, false];
    let mut expected = 0.0;
    for _ in 0..draws {
        hits.shuffle(&mut r);
        expected += oracle_ap(&hits);
    }
    expected /= draws as f64;

    let maps: Vec<f64> = (0..200)
        .map(|seed| {
            let mut r = rng(5000 + seed);
            let embs = unit_rows(gaussian(10, 8, &mut r));
            let labels: Vec<usize> = (0..10).map(|i| i / 5).collect();
            map_leave_one_out(embs.view(), &labels).unwrap()
        })
        .collect();
    let mean = maps.iter().sum::<f64>() / 200.0;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 199.0;
    let sigma = (var / 200.0).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * sigma,
        "mean {mean} expected {expected} sigma {sigma}"
    );
}

#[test]
fn handcrafted_zeroshot() {
    // 4 images, 3 classes
    let classes = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
    let images = array![[0.6, 0.8], [0.8, -0.6], [-0.6, 0.8], [-0.8, -0.6]];
    let labels = [0, 1, 2, 0];
    let got =
        values(zeroshot_classify(images.view(), classes.view(), &labels, &[1, 2, 3]).unwrap());
    assert_eq!(
        got,
        oracle_topk(images.view(), classes.view(), &labels, &[1, 2, 3])
    );
    // image 0 ranks 1,0,2; image 1 ranks 0,1,2; image 2 ranks 1,2,0; image 3 ranks 2,1,0
    assert_eq!(got, [0.0, 0.75, 1.0]);
}

#[test]
fn class_embeddings_are_unit_norm() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let t = r.random_range(1..=80);
        let d = r.random_range(2..=64);
        let e = build_class_embedding(unit_rows(gaussian(t, d, &mut r)).view()).unwrap();
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn metrics_invariant_under_rotation() {
    for seed in 0..10 {
        let mut r = rng(9000 + seed);
        let d = 8;
        let q = unit_rows(gaussian(40, d, &mut r));
        let x = unit_rows(gaussian(60, d, &mut r));
        let rot = random_orthogonal(d, &mut r);
        let rel: Vec<Vec<usize>> = (0..40).map(|i| vec![i]).collect();
        let gt = RetrievalGroundTruth::new(rel, 60).unwrap();
        let ks = [1, 5, 10];
        assert_eq!(
            recall_at_k(q.view(), x.view(), &gt, &ks).unwrap(),
            recall_at_k(q.dot(&rot).view(), x.dot(&rot).view(), &gt, &ks).unwrap()
        );
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        assert_eq!(
            zeroshot_classify(
                x.view(),
                q.slice(ndarray::s![..6, ..]).view(),
                &labels,
                &ks[..2]
            )
            .unwrap(),
            zeroshot_classify(
                x.dot(&rot).view(),
                q.slice(ndarray::s![..6, ..]).dot(&rot).view(),
                &labels,
                &ks[..2]
            )
            .unwrap()
        );
        let a = map_leave_one_out(x.view(), &labels).unwrap();
        let b = map_leave_one_out(x.dot(&rot).view(), &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn map_invariant_under_input_permutation() {
    let mut r = rng(11);
    let embs = unit_rows(gaussian(50, 6, &mut r));
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let mut perm: Vec<usize> = (0..50).collect();
    perm.shuffle(&mut r);
    let pe = embs.select(Axis(0), &perm);
    let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let a = map_leave_one_out(embs.view(), &labels).unwrap();
    let b = map_leave_one_out(pe.view(), &pl).unwrap();
    assert!((a - b).abs() < 1e-12);
}

proptest! {
    #[test]
    fn recall_monotone_and_complete(seed in any::<u64>(), n in 1usize..30, m in 1usize..30) {
        let mut r = rng(seed);
        let q = unit_rows(gaussian(n, 4, &mut r));
        let x = unit_rows(gaussian(m, 4, &mut r));
        let rel: Vec<Vec<usize>> = (0..n).map(|_| vec![r.random_range(0..m)]).collect();
        let gt = RetrievalGroundTruth::new(rel, m).unwrap();
        let ks: Vec<usize> = (1..=m).collect();
        let v = values(recall_at_k(q.view(), x.view(), &gt, &ks).unwrap());
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(*v.last().unwrap(), 1.0);
    }
}
