//! Synthetic images with known per-patch labels.
//!
//! Each class owns a few procedural texture tiles (a color plus an oriented
//! grating). An image is split into a 2×2 layout of equal blocks of patches,
//! circularly shifted by a random offset; three blocks carry the image class
//! and one randomly chosen block carries a uniformly drawn class. Every
//! patch is a library tile of its block's class plus Gaussian noise.
//!
//! Because the image class, the odd block and the shift are all uniform, the
//! label of any fixed position is uniform over classes: position alone says
//! nothing about content.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};
use crate::masking::LatticeShape;
use crate::rng::substream;
use crate::trainer::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Texture tiles per class.
    pub variants: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            image_size: 32,
            patch_size: 8,
            variants: 3,
            noise: 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CapiError::Config(m));
        if self.n_classes < 2 || self.variants == 0 {
            return bad("synthetic data needs at least 2 classes and 1 variant".into());
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.image_size / self.patch_size).is_multiple_of(2) {
            return bad("the patch lattice side must be even for the 2×2 block layout".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }

    pub fn lattice(&self) -> LatticeShape {
        let side = self.image_size / self.patch_size;
        LatticeShape {
            rows: side,
            cols: side,
        }
    }
}

/// `key=value` pairs separated by commas, e.g.
/// `classes=4,size=32,patch=8,variants=3,noise=3`. Missing keys keep their
/// defaults.
impl FromStr for SyntheticSpec {
    type Err = CapiError;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_pairs(s)? {
            match key {
                "classes" => spec.n_classes = parse_num(key, value)?,
                "size" => spec.image_size = parse_num(key, value)?,
                "patch" => spec.patch_size = parse_num(key, value)?,
                "variants" => spec.variants = parse_num(key, value)?,
                "noise" => spec.noise = parse_num(key, value)?,
                "count" | "seed" => {}
                other => {
                    return Err(CapiError::Config(format!(
                        "unknown synthetic key '{other}'"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn parse_pairs(s: &str) -> Result<Vec<(&str, &str)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CapiError::Config(format!("expected key=value, got '{p}'")))
        })
        .collect()
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CapiError::Config(format!("bad value '{value}' for '{key}'")))
}

/// `[class][variant]` tiles of `patch × patch × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureLibrary {
    pub tiles: Vec<Vec<Array3<f64>>>,
}

impl TextureLibrary {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let ps = spec.patch_size;
        let n = spec.n_classes;
        let tiles = (0..n)
            .map(|c| {
                let hue = 2.0 * PI * c as f64 / n as f64;
                let color: Vec<f64> = (0..3)
                    .map(|ch| 0.5 * (hue + ch as f64 * 2.0 * PI / 3.0).cos())
                    .collect();
                let theta = PI * c as f64 / n as f64;
                (0..spec.variants)
                    .map(|v| {
                        let freq = 1.0 + v as f64 * 0.5;
                        let phase = 2.0 * PI * (v as f64 * 0.37 + c as f64 * 0.11);
                        Array3::from_shape_fn((ps, ps, 3), |(y, x, ch)| {
                            let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / ps as f64;
                            color[ch] + (2.0 * PI * freq * u + phase).cos()
                        })
                    })
                    .collect()
            })
            .collect();
        Self { tiles }
    }
}

/// One generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Array3<f64>,
    pub image_label: usize,
    /// Label of every patch, raster order.
    pub patch_labels: Vec<usize>,
    /// Library variant used for every patch, raster order.
    pub patch_variants: Vec<usize>,
}

/// Sample `index` of the stream seeded by `seed`; depends on nothing else.
pub fn synthetic_sample(
    spec: &SyntheticSpec,
    library: &TextureLibrary,
    seed: u64,
    index: u64,
) -> SyntheticSample {
    let mut rng = substream(seed, "synthetic", index);
    let lattice = spec.lattice();
    let (rows, cols) = (lattice.rows, lattice.cols);
    let image_label = rng.random_range(0..spec.n_classes);
    let odd_block = rng.random_range(0..4);
    let odd_label = rng.random_range(0..spec.n_classes);
    let shift = (rng.random_range(0..rows), rng.random_range(0..cols));
    let ps = spec.patch_size;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("validated noise");

    let mut image = Array3::zeros((spec.image_size, spec.image_size, 3));
    let mut patch_labels = Vec::with_capacity(lattice.len());
    let mut patch_variants = Vec::with_capacity(lattice.len());
    for r in 0..rows {
        for c in 0..cols {
            let (br, bc) = (
                ((r + shift.0) % rows) / (rows / 2),
                ((c + shift.1) % cols) / (cols / 2),
            );
            let label = if br * 2 + bc == odd_block {
                odd_label
            } else {
                image_label
            };
            let variant = rng.random_range(0..spec.variants);
            let mut dst = image.slice_mut(s![r * ps..(r + 1) * ps, c * ps..(c + 1) * ps, ..]);
            dst.assign(&library.tiles[label][variant]);
            if spec.noise > 0.0 {
                dst.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            patch_labels.push(label);
            patch_variants.push(variant);
        }
    }
    SyntheticSample {
        image,
        image_label,
        patch_labels,
        patch_variants,
    }
}

/// The first `count` samples of the stream.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let library = TextureLibrary::new(spec);
    Ok((0..count as u64)
        .map(|i| synthetic_sample(spec, &library, seed, i))
        .collect())
}

/// A finite synthetic dataset; images are generated on demand.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub library: TextureLibrary,
    pub seed: u64,
    pub count: usize,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticSpec, count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let library = TextureLibrary::new(&spec);
        Ok(Self {
            spec,
            library,
            seed,
            count,
        })
    }

    pub fn sample(&self, index: usize) -> SyntheticSample {
        synthetic_sample(&self.spec, &self.library, self.seed, index as u64)
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn image(&self, index: usize) -> Result<Array3<f64>> {
        if index >= self.count {
            return Err(CapiError::Dataset(format!(
                "index {index} out of {}",
                self.count
            )));
        }
        Ok(self.sample(index).image)
    }
}
