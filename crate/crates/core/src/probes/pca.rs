//! PCA of patch features rendered as RGB maps.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::error::{CapiError, Result};
use crate::masking::LatticeShape;

/// Principal directions of the rows of `x`, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct Principal {
    pub mean: Array1<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Array2<f64>,
    pub variances: Array1<f64>,
}

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Up to `k` components with non-negligible variance.
pub fn principal_components(x: &Array2<f64>, k: usize) -> Result<Principal> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(CapiError::DegenerateInput("PCA of an empty matrix".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .take(k)
        .filter(|&i| top > 0.0 && eig.eigenvalues[i] > RANK_TOL * top)
        .collect();
    let mut components = Array2::zeros((keep.len(), d));
    for (r, &i) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // sign convention: largest-magnitude entry positive
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[r, j]] = sign * v[j];
        }
    }
    let variances = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(Principal {
        mean,
        components,
        variances,
    })
}

/// Rescales every column to [0, 1]; constant columns become 0.5.
fn min_max_columns(p: &mut Array2<f64>) {
    for mut col in p.axis_iter_mut(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            col.mapv_inplace(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
        } else {
            col.fill(0.5);
        }
    }
}

/// Projects onto the first three components and rescales each channel;
/// missing components give constant 0.5 channels.
fn rgb_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let pc = principal_components(x, 3)?;
    let proj = (x - &pc.mean).dot(&pc.components.t());
    let mut rgb = Array2::from_elem((x.nrows(), 3), 0.5);
    rgb.slice_mut(s![.., ..proj.ncols()]).assign(&proj);
    let mut head = rgb.slice(s![.., ..proj.ncols()]).to_owned();
    min_max_columns(&mut head);
    rgb.slice_mut(s![.., ..proj.ncols()]).assign(&head);
    Ok(rgb)
}

/// One `rows × cols × 3` map in [0, 1] per image. With `joint`, a single
/// PCA and rescaling is shared across all images; otherwise each image is
/// handled alone.
pub fn pca_feature_map(
    features: &[Array2<f64>],
    lattice: LatticeShape,
    joint: bool,
) -> Result<Vec<Array3<f64>>> {
    let total: usize = features.iter().map(Array2::nrows).sum();
    if total < 3 {
        return Err(CapiError::DegenerateInput(format!(
            "PCA maps need at least 3 patch tokens, got {total}"
        )));
    }
    if let Some(f) = features.iter().find(|f| f.nrows() != lattice.len()) {
        return Err(CapiError::InvalidShape(format!(
            "{} rows for a {}-patch lattice",
            f.nrows(),
            lattice.len()
        )));
    }
    let to_map = |rgb: Array2<f64>| {
        rgb.into_shape_with_order((lattice.rows, lattice.cols, 3))
            .expect("lattice sized")
    };
    if joint {
        let views: Vec<_> = features.iter().map(Array2::view).collect();
        let all = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| CapiError::InvalidShape(e.to_string()))?;
        let rgb = rgb_rows(&all)?;
        Ok((0..features.len())
            .map(|i| {
                to_map(
                    rgb.slice(s![i * lattice.len()..(i + 1) * lattice.len(), ..])
                        .to_owned(),
                )
            })
            .collect())
    } else {
        features.iter().map(|f| rgb_rows(f).map(to_map)).collect()
    }
}
