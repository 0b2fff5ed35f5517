//! k-nearest-neighbour classification.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::bank::{FeatureBank, Split};
use super::report::{GridPoint, ProbeMetric, ProbeReport};
use crate::error::{CapiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance.
    L2,
    /// One minus cosine similarity.
    Cosine,
}

fn squared_l2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from one query to every bank row.
pub fn distances(bank: &Array2<f64>, query: ArrayView1<f64>, metric: Metric) -> Vec<f64> {
    match metric {
        Metric::L2 => bank
            .axis_iter(Axis(0))
            .map(|b| squared_l2(b, query))
            .collect(),
        Metric::Cosine => {
            let qn = query.dot(&query).sqrt();
            bank.axis_iter(Axis(0))
                .map(|b| {
                    let denom = qn * b.dot(&b).sqrt();
                    if denom > 0.0 {
                        1.0 - b.dot(&query) / denom
                    } else {
                        1.0
                    }
                })
                .collect()
        }
    }
}

/// Indices of the `k` nearest rows, nearest first; equal distances are
/// ordered by bank index.
pub fn nearest(dist: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| {
        dist[*a]
            .partial_cmp(&dist[*b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Majority label among neighbours given nearest first. Equal counts go to
/// the label whose closest member ranks first.
pub fn vote(neighbour_labels: &[usize]) -> usize {
    let mut best: Option<(usize, usize, usize)> = None; // (count, first rank, label)
    for (rank, &label) in neighbour_labels.iter().enumerate() {
        if neighbour_labels[..rank].contains(&label) {
            continue;
        }
        let count = neighbour_labels.iter().filter(|&&l| l == label).count();
        let better = match best {
            None => true,
            Some((c, r, l)) => count > c || (count == c && (rank < r || (rank == r && label < l))),
        };
        if better {
            best = Some((count, rank, label));
        }
    }
    best.map_or(0, |b| b.2)
}

/// Predicts a label for every query row.
///
/// The `k` neighbours are the nearest bank rows (ties at the boundary go to
/// the lower bank index). The prediction is the most frequent label; a tie
/// between labels goes to the one with the nearer neighbour.
pub fn knn_predict(
    bank: &Array2<f64>,
    labels: &[usize],
    queries: &Array2<f64>,
    k: usize,
    metric: Metric,
) -> Result<Vec<usize>> {
    if bank.nrows() == 0 {
        return Err(CapiError::DegenerateInput("k-NN bank is empty".into()));
    }
    if labels.len() != bank.nrows() {
        return Err(CapiError::InvalidShape(format!(
            "{} labels for {} bank rows",
            labels.len(),
            bank.nrows()
        )));
    }
    if k == 0 || k > bank.nrows() {
        return Err(CapiError::Config(format!(
            "k = {k} must be in 1..={}",
            bank.nrows()
        )));
    }
    if queries.ncols() != bank.ncols() {
        return Err(CapiError::InvalidShape(format!(
            "queries have dim {}, bank {}",
            queries.ncols(),
            bank.ncols()
        )));
    }
    Ok(queries
        .axis_iter(Axis(0))
        .map(|q| {
            let d = distances(bank, q, metric);
            let near: Vec<usize> = nearest(&d, k).into_iter().map(|i| labels[i]).collect();
            vote(&near)
        })
        .collect())
}

/// Neighbour counts searched by default.
pub const DEFAULT_KS: [usize; 4] = [1, 3, 10, 30];

/// Grid search over `k × metric`: the train split is the bank, the
/// validation split selects, the test split (if any) reports. Values of `k`
/// larger than the train split are skipped.
pub fn knn_probe(
    bank: &FeatureBank,
    ks: &[usize],
    metrics: &[Metric],
    score: ProbeMetric,
) -> Result<ProbeReport> {
    let (xt, yt) = bank.subset(Split::Train);
    let (xv, yv) = bank.subset(Split::Val);
    if yv.is_empty() {
        return Err(CapiError::Config(
            "k-NN probe needs a validation split".into(),
        ));
    }
    let c = bank.n_classes();
    let mut points = Vec::new();
    let mut settings = Vec::new();
    for &metric in metrics {
        for &k in ks.iter().filter(|&&k| k <= yt.len()) {
            let pred = knn_predict(&xt, &yt, &xv, k, metric)?;
            let code = match metric {
                Metric::L2 => 0.0,
                Metric::Cosine => 1.0,
            };
            points.push(GridPoint::new(
                &[("k", k as f64), ("cosine", code)],
                score.score(&pred, &yv, c),
            ));
            settings.push((k, metric));
        }
    }
    let mut report = ProbeReport::select("knn", score, points)?;
    let (xs, ys) = bank.subset(Split::Test);
    if !ys.is_empty() {
        let (k, metric) = settings[report.selected];
        report.test_metric = Some(score.score(&knn_predict(&xt, &yt, &xs, k, metric)?, &ys, c));
    }
    Ok(report)
}
