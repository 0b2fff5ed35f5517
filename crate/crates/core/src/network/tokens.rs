use ndarray::{s, Array2, Array3, Axis};

use super::config::NetworkConfig;
use super::params::{ParamSet, ENCODER};
use crate::error::{CapiError, Result};
use crate::masking::{Coord, LatticeShape, PatchMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Patch,
    Register,
    MaskQuery,
}

/// Token vectors with their lattice coordinates and roles.
///
/// Registers carry no coordinate. Mask queries carry the coordinate they
/// predict.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub vectors: Array2<f64>,
    pub coords: Vec<Option<Coord>>,
    pub roles: Vec<TokenRole>,
    pub lattice: LatticeShape,
}

impl TokenSet {
    pub fn new(
        vectors: Array2<f64>,
        coords: Vec<Option<Coord>>,
        roles: Vec<TokenRole>,
        lattice: LatticeShape,
    ) -> Result<Self> {
        let n = vectors.nrows();
        if coords.len() != n || roles.len() != n {
            return Err(CapiError::InvalidShape(format!(
                "{} vectors, {} coords, {} roles",
                n,
                coords.len(),
                roles.len()
            )));
        }
        for c in coords.iter().flatten() {
            if c.row >= lattice.rows || c.col >= lattice.cols {
                return Err(CapiError::InvalidShape(format!(
                    "coordinate {c:?} outside {}x{} lattice",
                    lattice.rows, lattice.cols
                )));
            }
        }
        Ok(Self {
            vectors,
            coords,
            roles,
            lattice,
        })
    }

    /// Patch tokens at the given coordinates.
    pub fn patches(
        vectors: Array2<f64>,
        coords: Vec<Coord>,
        lattice: LatticeShape,
    ) -> Result<Self> {
        let n = coords.len();
        Self::new(
            vectors,
            coords.into_iter().map(Some).collect(),
            vec![TokenRole::Patch; n],
            lattice,
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn count(&self, role: TokenRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Rows with role `role`, in order.
    pub fn select_role(&self, role: TokenRole) -> TokenSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.roles[i] == role).collect();
        TokenSet {
            vectors: self.vectors.select(Axis(0), &idx),
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            roles: idx.iter().map(|&i| self.roles[i]).collect(),
            lattice: self.lattice,
        }
    }

    pub fn patch_coords(&self) -> Vec<Coord> {
        self.coords
            .iter()
            .zip(&self.roles)
            .filter(|(_, &r)| r == TokenRole::Patch)
            .filter_map(|(c, _)| *c)
            .collect()
    }
}

/// Raw flattened patches (`n × ps·ps·3`, raster order) of an `H × W × 3` image.
pub fn extract_patches(
    image: &Array3<f64>,
    patch_size: usize,
) -> Result<(Array2<f64>, LatticeShape)> {
    let (h, w, ch) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 || h == 0 || w == 0 {
        return Err(CapiError::InvalidShape(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    if ch != 3 {
        return Err(CapiError::InvalidShape(format!(
            "expected 3 channels, got {ch}"
        )));
    }
    let shape = LatticeShape::new(h / patch_size, w / patch_size)?;
    let dim = patch_size * patch_size * 3;
    let mut out = Array2::zeros((shape.len(), dim));
    for r in 0..shape.rows {
        for c in 0..shape.cols {
            let patch = image.slice(s![
                r * patch_size..(r + 1) * patch_size,
                c * patch_size..(c + 1) * patch_size,
                ..
            ]);
            let mut row = out.row_mut(r * shape.cols + c);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = *src;
            }
        }
    }
    Ok((out, shape))
}

/// Every coordinate of `shape` in raster order.
pub fn raster_coords(shape: LatticeShape) -> Vec<Coord> {
    (0..shape.len()).map(|i| shape.coord(i)).collect()
}

/// Embeds every patch of `image` with the encoder's linear patch embedding.
pub fn patchify(image: &Array3<f64>, params: &ParamSet, cfg: &NetworkConfig) -> Result<TokenSet> {
    let (raw, shape) = extract_patches(image, cfg.patch_size)?;
    let w = params.get(&format!("{ENCODER}.patch_embed.weight"));
    if w.ncols() != raw.ncols() {
        return Err(CapiError::InvalidShape(format!(
            "patch embedding expects {} inputs, patches have {}",
            w.ncols(),
            raw.ncols()
        )));
    }
    TokenSet::patches(raw.dot(&w.t()), raster_coords(shape), shape)
}

/// Keeps the tokens whose mask cell is false, preserving their coordinates.
pub fn drop_patches(tokens: &TokenSet, mask: &PatchMask) -> Result<TokenSet> {
    if tokens.lattice != mask.shape() {
        return Err(CapiError::InvalidShape(format!(
            "token lattice {}x{} vs mask lattice {}x{}",
            tokens.lattice.rows,
            tokens.lattice.cols,
            mask.shape().rows,
            mask.shape().cols
        )));
    }
    let keep: Vec<usize> = (0..tokens.len())
        .filter(|&i| match tokens.coords[i] {
            Some(c) => !mask.get(c),
            None => true,
        })
        .collect();
    Ok(TokenSet {
        vectors: tokens.vectors.select(Axis(0), &keep),
        coords: keep.iter().map(|&i| tokens.coords[i]).collect(),
        roles: keep.iter().map(|&i| tokens.roles[i]).collect(),
        lattice: tokens.lattice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{generate_mask, MaskSpec, MaskStrategy};
    use crate::network::params::init_encoder;
    use crate::rng::seeded;

    fn cfg_with_patch(ps: usize) -> NetworkConfig {
        NetworkConfig {
            patch_size: ps,
            ..NetworkConfig::toy()
        }
    }

    #[test]
    fn lattice_sizes() {
        for (side, ps, n, grid) in [(224, 16, 196, 14), (224, 14, 256, 16), (32, 8, 16, 4)] {
            let img = Array3::zeros((side, side, 3));
            let (raw, shape) = extract_patches(&img, ps).unwrap();
            assert_eq!(raw.nrows(), n);
            assert_eq!((shape.rows, shape.cols), (grid, grid));
        }
        assert!(extract_patches(&Array3::zeros((30, 32, 3)), 8).is_err());
    }

    #[test]
    fn patches_are_raster_ordered() {
        let img = Array3::from_shape_fn((4, 6, 3), |(y, x, c)| (100 * y + 10 * x + c) as f64);
        let (raw, shape) = extract_patches(&img, 2).unwrap();
        assert_eq!((shape.rows, shape.cols), (2, 3));
        // patch (1, 2) starts at pixel (2, 4)
        assert_eq!(raw[[5, 0]], 240.0);
        assert_eq!(raw[[5, 3]], 250.0);
    }

    #[test]
    fn patchify_then_drop() {
        let cfg = cfg_with_patch(16);
        let params = init_encoder(&cfg, &mut seeded(0));
        let img = Array3::from_elem((224, 224, 3), 0.1);
        let tokens = patchify(&img, &params, &cfg).unwrap();
        assert_eq!(tokens.len(), 196);
        let mask = generate_mask(
            tokens.lattice,
            MaskSpec::new(MaskStrategy::InverseBlockRoll, 0.65).unwrap(),
            &mut seeded(1),
        )
        .unwrap();
        let kept = drop_patches(&tokens, &mask).unwrap();
        assert_eq!(kept.len(), 69);
        assert!(kept.patch_coords().iter().all(|&c| !mask.get(c)));

        assert_eq!(
            drop_patches(&tokens, &PatchMask::empty(tokens.lattice)).unwrap(),
            tokens
        );
        let full = PatchMask::empty(tokens.lattice).inverted();
        assert!(drop_patches(&tokens, &full).unwrap().is_empty());

        let other = PatchMask::empty(LatticeShape::new(4, 4).unwrap());
        assert!(matches!(
            drop_patches(&tokens, &other),
            Err(CapiError::InvalidShape(_))
        ));
    }
}
