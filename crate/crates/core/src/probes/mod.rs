//! Frozen-feature evaluation probes.

pub mod attentive;
pub mod bank;
pub mod knn;
pub mod logreg;
pub mod pca;
pub mod pooling;
pub mod report;
pub mod segment;

pub use attentive::{
    attentive_param_count, attentive_probe_train, AttentiveConfig, AttentiveProbe, ImageTokens,
};
pub use bank::{standardize, FeatureBank, Provenance, Split, Standardizer};
pub use knn::{knn_predict, knn_probe, Metric};
pub use logreg::{default_c_grid, fit_logreg, logreg_probe, LbfgsConfig, LogisticRegression};
pub use pca::{pca_feature_map, principal_components};
pub use pooling::{average_pooling, patch_features, predictor_pooling};
pub use report::{accuracy, mean_iou, GridPoint, ProbeMetric, ProbeReport};
pub use segment::{segmentation_probes, SegmentationConfig, SegmentationReports};
