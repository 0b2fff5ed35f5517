//! Labelled feature matrices and their standardization.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::error::{CapiError, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(CapiError::Archive(format!("bad split code {v}"))),
        }
    }
}

/// Where a feature row came from: an image and, for patch features, the
/// raster index of the patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: usize,
    pub position: Option<usize>,
}

/// Rows of features with one label, split tag and provenance each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub provenance: Vec<Provenance>,
}

impl FeatureBank {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || splits.len() != n || provenance.len() != n {
            return Err(CapiError::InvalidShape(format!(
                "{n} feature rows but {} labels, {} split tags, {} provenance entries",
                labels.len(),
                splits.len(),
                provenance.len()
            )));
        }
        if features.iter().any(|v| v.is_nan()) {
            return Err(CapiError::NonFinite("feature bank contains NaN".into()));
        }
        Ok(Self {
            features,
            labels,
            splits,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// One more than the largest label.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Features and labels of one split.
    pub fn subset(&self, split: Split) -> (Array2<f64>, Vec<usize>) {
        let idx = self.indices(split);
        (
            self.features.select(Axis(0), &idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Moves a seeded random `fraction` of the train rows to the validation
    /// split, grouped by image so patches of one image stay together.
    pub fn hold_out(&mut self, fraction: f64, seed: u64) {
        let mut images: Vec<usize> = self
            .indices(Split::Train)
            .iter()
            .map(|&i| self.provenance[i].image)
            .collect();
        images.sort_unstable();
        images.dedup();
        images.shuffle(&mut substream(seed, "holdout", 0));
        let take =
            ((images.len() as f64 * fraction).round() as usize).min(images.len().saturating_sub(1));
        let held: std::collections::HashSet<usize> = images[..take].iter().copied().collect();
        for i in 0..self.len() {
            if self.splits[i] == Split::Train && held.contains(&self.provenance[i].image) {
                self.splits[i] = Split::Val;
            }
        }
    }

    /// Rows of all parts in order.
    pub fn concat(parts: &[FeatureBank]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|b| b.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| CapiError::InvalidShape(e.to_string()))?;
        Self::new(
            features,
            parts
                .iter()
                .flat_map(|b| b.labels.iter().copied())
                .collect(),
            parts
                .iter()
                .flat_map(|b| b.splits.iter().copied())
                .collect(),
            parts
                .iter()
                .flat_map(|b| b.provenance.iter().copied())
                .collect(),
        )
    }

    pub fn to_archive(&self) -> Archive {
        let n = self.len();
        let mut a = Archive::new(json!({ "kind": "feature-bank", "n_classes": self.n_classes() }));
        a.insert("features", self.features.clone());
        a.insert(
            "labels",
            Array2::from_shape_fn((n, 1), |(i, _)| self.labels[i] as f64),
        );
        a.insert(
            "split",
            Array2::from_shape_fn((n, 1), |(i, _)| self.splits[i].code()),
        );
        a.insert(
            "provenance",
            Array2::from_shape_fn((n, 2), |(i, j)| {
                let p = self.provenance[i];
                if j == 0 {
                    p.image as f64
                } else {
                    p.position.map_or(-1.0, |v| v as f64)
                }
            }),
        );
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let features = a.get("features")?.clone();
        let labels = a.get("labels")?.iter().map(|&v| v as usize).collect();
        let splits = a
            .get("split")?
            .iter()
            .map(|&v| Split::from_code(v))
            .collect::<Result<_>>()?;
        let provenance = a
            .get("provenance")?
            .rows()
            .into_iter()
            .map(|r| Provenance {
                image: r[0] as usize,
                position: (r[1] >= 0.0).then_some(r[1] as usize),
            })
            .collect();
        Self::new(features, labels, splits, provenance)
    }
}

/// Per-dimension statistics of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-8;

    /// Mean and population standard deviation of every column. A constant
    /// column gets its exact value as mean, so it maps to zero.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(CapiError::DegenerateInput(
                "cannot standardize with no training rows".into(),
            ));
        }
        let n = x.nrows() as f64;
        let mut mean = Array1::zeros(x.ncols());
        let mut std = Array1::zeros(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let first = col[0];
            let m = if col.iter().all(|&v| v == first) {
                first
            } else {
                col.sum() / n
            };
            let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = var.sqrt().max(Self::STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }
}

/// Standardizes every split with statistics of the train split.
pub fn standardize(bank: &FeatureBank) -> Result<(FeatureBank, Standardizer)> {
    let (train, _) = bank.subset(Split::Train);
    let stats = Standardizer::fit(&train)?;
    let out = FeatureBank {
        features: stats.apply(&bank.features),
        ..bank.clone()
    };
    Ok((out, stats))
}
