//! Frozen-feature banks built from datasets.

use std::ops::Range;

use ndarray::Array2;

use crate::error::Result;
use crate::network::{NetworkConfig, ParamSet};
use crate::probes::pooling::patch_features;
use crate::probes::{FeatureBank, Provenance, Split};
use crate::workbench::synthetic::SyntheticDataset;

/// Which label each patch row carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    /// The patch's own ground-truth label (segmentation).
    Patch,
    /// The label of the image it belongs to (classification).
    Image,
}

/// Encoder patch features of `indices` of a synthetic dataset, one row per
/// patch, with `(image index, raster position)` provenance.
pub fn synthetic_patch_bank(
    data: &SyntheticDataset,
    indices: Range<usize>,
    encoder: &ParamSet,
    net: &NetworkConfig,
    split: Split,
    labels: LabelKind,
) -> Result<FeatureBank> {
    let mut rows = Vec::new();
    let mut label_col = Vec::new();
    let mut provenance = Vec::new();
    let mut dim = net.enc_dim;
    for i in indices {
        let s = data.sample(i);
        let f = patch_features(&s.image, encoder, net)?;
        dim = f.ncols();
        rows.extend(f.iter().copied());
        for (pos, &l) in s.patch_labels.iter().enumerate() {
            label_col.push(match labels {
                LabelKind::Patch => l,
                LabelKind::Image => s.image_label,
            });
            provenance.push(Provenance {
                image: i,
                position: Some(pos),
            });
        }
    }
    let n = label_col.len();
    FeatureBank::new(
        Array2::from_shape_vec((n, dim), rows).expect("row-major features"),
        label_col,
        vec![split; n],
        provenance,
    )
}

/// Raw pixel patches in place of encoder features; a reference point for
/// what the encoder adds.
pub fn synthetic_pixel_bank(
    data: &SyntheticDataset,
    indices: Range<usize>,
    split: Split,
) -> Result<FeatureBank> {
    let ps = data.spec.patch_size;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for i in indices {
        let s = data.sample(i);
        let (raw, _) = crate::network::extract_patches(&s.image, ps)?;
        rows.extend(raw.iter().copied());
        labels.extend(s.patch_labels.iter().copied());
        provenance.extend((0..raw.nrows()).map(|pos| Provenance {
            image: i,
            position: Some(pos),
        }));
    }
    let n = labels.len();
    FeatureBank::new(
        Array2::from_shape_vec((n, ps * ps * 3), rows).expect("row-major patches"),
        labels,
        vec![split; n],
        provenance,
    )
}
