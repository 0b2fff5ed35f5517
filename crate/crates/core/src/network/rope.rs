//! Axial rotary position embedding.
//!
//! Frequency convention: a head of width `hd` holds `hd / 2` rotation pairs
//! `(2j, 2j+1)`. Pairs `0 .. hd/4` rotate with the row position, pairs
//! `hd/4 .. hd/2` with the column position. Within an axis the `hd / 4`
//! frequencies are `π · logspace(rope_freq_min, rope_freq_max)`. Lattice
//! coordinates are mapped to `[-1, 1]` by [`lattice_position`], so the angle
//! of a pair is `θ_f · position`. Tokens without a position (registers) are
//! left unrotated.

use std::f64::consts::PI;

use ndarray::Array2;

use super::config::NetworkConfig;
use crate::autograd::rotate_pairs;
use crate::error::{CapiError, Result};
use crate::masking::{Coord, LatticeShape};

/// Per-axis angular frequencies for a head of width `head_dim`.
pub fn axis_frequencies(head_dim: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let count = head_dim / 4;
    if count == 1 {
        return vec![PI * fmin];
    }
    let (lo, hi) = (fmin.ln(), fmax.ln());
    (0..count)
        .map(|f| PI * (lo + (hi - lo) * f as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Centre of a lattice cell in `[-1, 1]²`.
pub fn lattice_position(coord: Coord, shape: LatticeShape) -> [f64; 2] {
    [
        2.0 * (coord.row as f64 + 0.5) / shape.rows as f64 - 1.0,
        2.0 * (coord.col as f64 + 0.5) / shape.cols as f64 - 1.0,
    ]
}

/// Cosine and sine tables (`rows × dim/2`) for `heads` heads sharing one layout.
pub fn rope_tables(
    positions: &[Option<[f64; 2]>],
    dim: usize,
    heads: usize,
    fmin: f64,
    fmax: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if heads == 0 || !dim.is_multiple_of(heads) || !(dim / heads).is_multiple_of(4) {
        return Err(CapiError::Config(format!(
            "rope needs a head dim divisible by 4 (dim {dim}, heads {heads})"
        )));
    }
    let hd = dim / heads;
    let freqs = axis_frequencies(hd, fmin, fmax);
    let quarter = hd / 4;
    let mut cos = Array2::ones((positions.len(), dim / 2));
    let mut sin = Array2::zeros((positions.len(), dim / 2));
    for (r, pos) in positions.iter().enumerate() {
        let Some([pr, pc]) = *pos else { continue };
        for h in 0..heads {
            for j in 0..hd / 2 {
                let angle = if j < quarter {
                    freqs[j] * pr
                } else {
                    freqs[j - quarter] * pc
                };
                let col = h * hd / 2 + j;
                cos[[r, col]] = angle.cos();
                sin[[r, col]] = angle.sin();
            }
        }
    }
    Ok((cos, sin))
}

/// Rotates query or key vectors (`rows × dim`) by their positions.
pub fn rope_rotate(
    vectors: &Array2<f64>,
    positions: &[Option<[f64; 2]>],
    heads: usize,
    cfg: &NetworkConfig,
) -> Result<Array2<f64>> {
    if positions.len() != vectors.nrows() {
        return Err(CapiError::InvalidShape(format!(
            "{} positions for {} vectors",
            positions.len(),
            vectors.nrows()
        )));
    }
    let (cos, sin) = rope_tables(
        positions,
        vectors.ncols(),
        heads,
        cfg.rope_freq_min,
        cfg.rope_freq_max,
    )?;
    Ok(rotate_pairs(vectors.view(), &cos, &sin, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn cfg() -> NetworkConfig {
        NetworkConfig::toy()
    }

    fn rand_vecs(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn frequencies_span_the_configured_range() {
        let f = axis_frequencies(16, 7e-4, 7.0);
        assert_eq!(f.len(), 4);
        assert!((f[0] - PI * 7e-4).abs() < 1e-15);
        assert!((f[3] - PI * 7.0).abs() < 1e-12);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn origin_is_identity() {
        let x = rand_vecs(3, 64, 1);
        let y = rope_rotate(&x, &[Some([0.0, 0.0]); 3], 4, &cfg()).unwrap();
        assert_eq!(x, y);
        let z = rope_rotate(&x, &[None; 3], 4, &cfg()).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn pair_norms_preserved() {
        let x = rand_vecs(5, 64, 2);
        let pos: Vec<_> = (0..5)
            .map(|i| Some([0.3 * i as f64, -0.7 + 0.2 * i as f64]))
            .collect();
        let y = rope_rotate(&x, &pos, 4, &cfg()).unwrap();
        for r in 0..5 {
            for j in 0..32 {
                let a = x[[r, 2 * j]].hypot(x[[r, 2 * j + 1]]);
                let b = y[[r, 2 * j]].hypot(y[[r, 2 * j + 1]]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_products_depend_on_offsets_only() {
        let shape = LatticeShape::new(32, 32).unwrap();
        let q = rand_vecs(1, 16, 3);
        let k = rand_vecs(1, 16, 4);
        let dot = |a: Coord, b: Coord| {
            let qr = rope_rotate(&q, &[Some(lattice_position(a, shape))], 1, &cfg()).unwrap();
            let kr = rope_rotate(&k, &[Some(lattice_position(b, shape))], 1, &cfg()).unwrap();
            qr.row(0).dot(&kr.row(0))
        };
        let base = dot(Coord::new(2, 7), Coord::new(5, 1));
        let shifted = dot(Coord::new(5, 12), Coord::new(8, 6));
        assert!((base - shifted).abs() <= 1e-5 * base.abs().max(1e-12));
    }

    #[test]
    fn indivisible_head_dim_is_rejected() {
        let x = rand_vecs(1, 12, 5);
        assert!(matches!(
            rope_rotate(&x, &[None], 2, &cfg()),
            Err(CapiError::Config(_))
        ));
    }
}
