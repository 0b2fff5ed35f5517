//! Patch-level segmentation probes: k-NN and logistic regression over
//! standardized patch features, scored by mIoU.

use serde::{Deserialize, Serialize};

use super::bank::{standardize, FeatureBank, Split, Standardizer};
use super::knn::{knn_probe, Metric, DEFAULT_KS};
use super::logreg::{default_c_grid, logreg_probe, LbfgsConfig, LogisticRegression};
use super::report::{ProbeMetric, ProbeReport};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub ks: Vec<usize>,
    pub metrics: Vec<Metric>,
    pub c_grid: Vec<f64>,
    pub lbfgs: LbfgsConfig,
    /// Fraction of training images moved to validation when the bank has none.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            metrics: vec![Metric::L2, Metric::Cosine],
            c_grid: default_c_grid(),
            lbfgs: LbfgsConfig::default(),
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationReports {
    pub knn: ProbeReport,
    pub logreg: ProbeReport,
    pub classifier: LogisticRegression,
    pub standardizer: Standardizer,
}

pub fn segmentation_probes(
    bank: &FeatureBank,
    cfg: &SegmentationConfig,
) -> Result<SegmentationReports> {
    let mut bank = bank.clone();
    if bank.indices(Split::Val).is_empty() {
        bank.hold_out(cfg.holdout, cfg.seed);
    }
    let (bank, standardizer) = standardize(&bank)?;
    let knn = knn_probe(&bank, &cfg.ks, &cfg.metrics, ProbeMetric::MeanIou)?;
    let (classifier, logreg) = logreg_probe(&bank, &cfg.c_grid, cfg.lbfgs, ProbeMetric::MeanIou)?;
    Ok(SegmentationReports {
        knn,
        logreg,
        classifier,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::bank::Provenance;
    use crate::rng::seeded;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn clustered_patches_segment_well() {
        let mut rng = seeded(2);
        let (images, per) = (40, 16);
        let n = images * per;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let features = Array2::from_shape_fn((n, 5), |(i, j)| {
            100.0 + 10.0 * f64::from(u8::from(labels[i] == j % 3)) + rng.random_range(-1.0..1.0)
        });
        let splits = (0..n)
            .map(|i| {
                if i / per >= 32 {
                    Split::Test
                } else {
                    Split::Train
                }
            })
            .collect();
        let prov = (0..n)
            .map(|i| Provenance {
                image: i / per,
                position: Some(i % per),
            })
            .collect();
        let bank = FeatureBank::new(features, labels, splits, prov).unwrap();
        let r = segmentation_probes(&bank, &SegmentationConfig::default()).unwrap();
        assert!(r.knn.test_metric.unwrap() > 0.95, "{:?}", r.knn);
        assert!(r.logreg.test_metric.unwrap() > 0.95, "{:?}", r.logreg);
        assert_eq!(r.logreg.grid.len(), 8);
    }
}
