//! Grid-search records and classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CapiError, Result};

/// Which score a probe maximizes on the validation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    Accuracy,
    MeanIou,
}

impl ProbeMetric {
    pub fn score(self, predicted: &[usize], truth: &[usize], n_classes: usize) -> f64 {
        match self {
            ProbeMetric::Accuracy => accuracy(predicted, truth),
            ProbeMetric::MeanIou => mean_iou(predicted, truth, n_classes),
        }
    }
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Intersection over union averaged over classes that occur in either the
/// prediction or the truth.
pub fn mean_iou(predicted: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            if p < n_classes {
                union[p] += 1;
            }
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..n_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// One evaluated hyperparameter setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub params: BTreeMap<String, f64>,
    pub val_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

impl GridPoint {
    pub fn new(params: &[(&str, f64)], val_metric: f64) -> Self {
        Self {
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            val_metric,
            converged: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub metric: ProbeMetric,
    pub grid: Vec<GridPoint>,
    /// Index into `grid` of the best validation score; the first wins ties.
    pub selected: usize,
    pub test_metric: Option<f64>,
}

impl ProbeReport {
    pub fn select(probe: &str, metric: ProbeMetric, grid: Vec<GridPoint>) -> Result<Self> {
        if grid.is_empty() {
            return Err(CapiError::Config("empty hyperparameter grid".into()));
        }
        let mut selected = 0;
        for (i, g) in grid.iter().enumerate() {
            if g.val_metric > grid[selected].val_metric || grid[selected].val_metric.is_nan() {
                selected = i;
            }
        }
        Ok(Self {
            probe: probe.to_string(),
            metric,
            grid,
            selected,
            test_metric: None,
        })
    }

    pub fn selected_point(&self) -> &GridPoint {
        &self.grid[self.selected]
    }

    /// One JSON record per grid point, then a summary record.
    pub fn to_records(&self) -> Result<String> {
        let mut out = String::new();
        for (i, g) in self.grid.iter().enumerate() {
            let mut rec = serde_json::to_value(g)?;
            rec["probe"] = json!(self.probe);
            rec["selected"] = json!(i == self.selected);
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        let summary = json!({
            "probe": self.probe,
            "metric": self.metric,
            "selected_params": self.selected_point().params,
            "val_metric": self.selected_point().val_metric,
            "test_metric": self.test_metric,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }
}
