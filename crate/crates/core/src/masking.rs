//! Patch-lattice masks with exact masked counts.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeShape {
    pub rows: usize,
    pub cols: usize,
}

impl LatticeShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CapiError::InvalidShape(format!(
                "degenerate lattice {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, coord: Coord) -> usize {
        coord.row * self.cols + coord.col
    }

    pub fn coord(&self, index: usize) -> Coord {
        Coord {
            row: index / self.cols,
            col: index % self.cols,
        }
    }
}

/// A cell of the patch lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Block,
    InverseBlock,
    InverseBlockRoll,
}

impl MaskStrategy {
    /// Ratio used when none is configured: random masking works best with
    /// more aggressive dropping.
    pub fn default_ratio(self) -> f64 {
        match self {
            MaskStrategy::Random => 0.90,
            _ => 0.65,
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
            MaskStrategy::InverseBlock => "inverse_block",
            MaskStrategy::InverseBlockRoll => "inverse_block_roll",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = CapiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "block" => Ok(Self::Block),
            "inverse_block" => Ok(Self::InverseBlock),
            "inverse_block_roll" => Ok(Self::InverseBlockRoll),
            other => Err(CapiError::InvalidSpec(format!(
                "unknown masking strategy '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, ratio: f64) -> Result<Self> {
        let spec = Self { strategy, ratio };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_default_ratio(strategy: MaskStrategy) -> Self {
        Self {
            strategy,
            ratio: strategy.default_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(CapiError::InvalidSpec(format!(
                "ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Exact number of masked cells, `floor(ratio · n)`.
    pub fn masked_count(&self, shape: LatticeShape) -> usize {
        ((self.ratio * shape.len() as f64) + 1e-9).floor() as usize
    }
}

/// Boolean occupancy over the lattice; `true` means dropped.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PatchMask {
    shape: LatticeShape,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn empty(shape: LatticeShape) -> Self {
        Self {
            shape,
            cells: vec![false; shape.len()],
        }
    }

    pub fn from_cells(shape: LatticeShape, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != shape.len() {
            return Err(CapiError::InvalidShape(format!(
                "{} cells for a {}x{} lattice",
                cells.len(),
                shape.rows,
                shape.cols
            )));
        }
        Ok(Self { shape, cells })
    }

    pub fn shape(&self) -> LatticeShape {
        self.shape
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, coord: Coord) -> bool {
        self.cells[self.shape.index(coord)]
    }

    pub fn set(&mut self, coord: Coord, value: bool) {
        let i = self.shape.index(coord);
        self.cells[i] = value;
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn kept_count(&self) -> usize {
        self.shape.len() - self.masked_count()
    }

    /// Masked coordinates in row-major order.
    pub fn masked_coords(&self) -> Vec<Coord> {
        self.coords_where(true)
    }

    /// Kept coordinates in row-major order.
    pub fn kept_coords(&self) -> Vec<Coord> {
        self.coords_where(false)
    }

    fn coords_where(&self, value: bool) -> Vec<Coord> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == value)
            .map(|(i, _)| self.shape.coord(i))
            .collect()
    }

    pub fn inverted(&self) -> Self {
        Self {
            shape: self.shape,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    /// Row-major `0`/`1` string.
    pub fn to_bits(&self) -> String {
        self.cells
            .iter()
            .map(|&c| if c { '1' } else { '0' })
            .collect()
    }
}

/// Fixture file: one header line then one line of row-major bits.
///
/// ```text
/// rows cols strategy ratio seed
/// 0110...
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFixture {
    pub spec: MaskSpec,
    pub seed: u64,
    pub mask: PatchMask,
}

impl MaskFixture {
    pub fn to_text(&self) -> String {
        let sh = self.mask.shape();
        format!(
            "{} {} {} {} {}\n{}\n",
            sh.rows,
            sh.cols,
            self.spec.strategy,
            self.spec.ratio,
            self.seed,
            self.mask.to_bits()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| CapiError::InvalidSpec(format!("mask fixture: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing header"))?
            .split_whitespace()
            .collect();
        if header.len() != 5 {
            return Err(bad("header needs 5 fields"));
        }
        let rows: usize = header[0].parse().map_err(|_| bad("rows"))?;
        let cols: usize = header[1].parse().map_err(|_| bad("cols"))?;
        let strategy: MaskStrategy = header[2].parse()?;
        let ratio: f64 = header[3].parse().map_err(|_| bad("ratio"))?;
        let seed: u64 = header[4].parse().map_err(|_| bad("seed"))?;
        let bits = lines.next().ok_or_else(|| bad("missing bits"))?.trim();
        let cells = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("bits must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: MaskSpec::new(strategy, ratio)?,
            seed,
            mask: PatchMask::from_cells(LatticeShape::new(rows, cols)?, cells)?,
        })
    }
}

pub fn generate_mask(shape: LatticeShape, spec: MaskSpec, rng: &mut impl Rng) -> Result<PatchMask> {
    LatticeShape::new(shape.rows, shape.cols)?;
    spec.validate()?;
    let target = spec.masked_count(shape);
    Ok(match spec.strategy {
        MaskStrategy::Random => random_mask(shape, target, rng),
        MaskStrategy::Block => block_mask(shape, target, rng).0,
        MaskStrategy::InverseBlock => block_mask(shape, shape.len() - target, rng).0.inverted(),
        MaskStrategy::InverseBlockRoll => {
            let inv = block_mask(shape, shape.len() - target, rng).0.inverted();
            let shift = (
                rng.random_range(0..shape.rows),
                rng.random_range(0..shape.cols),
            );
            roll_mask(&inv, (shift.0 as isize, shift.1 as isize))
        }
    })
}

fn random_mask(shape: LatticeShape, target: usize, rng: &mut impl Rng) -> PatchMask {
    let mut mask = PatchMask::empty(shape);
    let mut picked = sample(rng, shape.len(), target).into_vec();
    picked.sort_unstable();
    for i in picked {
        mask.cells[i] = true;
    }
    mask
}

/// Rectangle placed for a block mask, before truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples one rectangle covering at least `target` cells and truncates the
/// excess at its lower-right end (row-major suffix).
///
/// Side lengths come from a log-uniform aspect ratio in `[1/2, 2]`, clamped to
/// the lattice and grown until the area suffices. The placement is uniform
/// among the positions where the rectangle fits.
pub fn block_mask(
    shape: LatticeShape,
    target: usize,
    rng: &mut impl Rng,
) -> (PatchMask, Option<BlockRect>) {
    let mut mask = PatchMask::empty(shape);
    if target == 0 {
        return (mask, None);
    }
    let aspect = rng.random_range(0.5f64.ln()..=2.0f64.ln()).exp();
    let area = target as f64;
    let height = ((area * aspect).sqrt().round() as usize).clamp(1, shape.rows);
    let width = target.div_ceil(height).clamp(1, shape.cols);
    let height = height.max(target.div_ceil(width)).min(shape.rows);
    debug_assert!(height * width >= target);
    let top = rng.random_range(0..=shape.rows - height);
    let left = rng.random_range(0..=shape.cols - width);
    let mut cells: Vec<usize> = Vec::with_capacity(height * width);
    for r in top..top + height {
        for c in left..left + width {
            cells.push(shape.index(Coord::new(r, c)));
        }
    }
    for &i in &cells[..target] {
        mask.cells[i] = true;
    }
    (
        mask,
        Some(BlockRect {
            top,
            left,
            height,
            width,
        }),
    )
}

/// Circular shift: `out(r, c) = in((r − Δr) mod rows, (c − Δc) mod cols)`.
pub fn roll_mask(mask: &PatchMask, shift: (isize, isize)) -> PatchMask {
    let sh = mask.shape;
    let (rows, cols) = (sh.rows as isize, sh.cols as isize);
    let mut out = PatchMask::empty(sh);
    for r in 0..rows {
        for c in 0..cols {
            let sr = (r - shift.0).rem_euclid(rows) as usize;
            let sc = (c - shift.1).rem_euclid(cols) as usize;
            out.cells[(r * cols + c) as usize] = mask.cells[sr * sh.cols + sc];
        }
    }
    out
}

/// Uniform sample without replacement of `n_pred` masked coordinates.
pub fn sample_prediction_targets(
    mask: &PatchMask,
    n_pred: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Coord>> {
    let masked = mask.masked_coords();
    if n_pred > masked.len() {
        return Err(CapiError::InsufficientTargets {
            requested: n_pred,
            available: masked.len(),
        });
    }
    Ok(sample(rng, masked.len(), n_pred)
        .into_iter()
        .map(|i| masked[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Random,
        MaskStrategy::Block,
        MaskStrategy::InverseBlock,
        MaskStrategy::InverseBlockRoll,
    ];

    #[test]
    fn paper_lattice_counts() {
        let shape = LatticeShape::new(14, 14).unwrap();
        for s in ALL {
            let m = generate_mask(shape, MaskSpec::new(s, 0.65).unwrap(), &mut seeded(1)).unwrap();
            assert_eq!(m.masked_count(), 127);
            assert_eq!(m.kept_count(), 69);
        }
    }

    #[test]
    fn zero_ratio_is_empty() {
        let shape = LatticeShape::new(5, 3).unwrap();
        for s in ALL {
            let m = generate_mask(
                shape,
                MaskSpec {
                    strategy: s,
                    ratio: 0.0,
                },
                &mut seeded(2),
            )
            .unwrap();
            assert_eq!(m, PatchMask::empty(shape));
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            MaskSpec::new(MaskStrategy::Block, 1.5),
            Err(CapiError::InvalidSpec(_))
        ));
        assert!(matches!(
            LatticeShape::new(0, 4),
            Err(CapiError::InvalidShape(_))
        ));
        let bad = LatticeShape { rows: 0, cols: 3 };
        let spec = MaskSpec::with_default_ratio(MaskStrategy::Random);
        assert!(matches!(
            generate_mask(bad, spec, &mut seeded(0)),
            Err(CapiError::InvalidShape(_))
        ));
    }

    #[test]
    fn seeded_random_mask_fixture() {
        // Recorded with seed 42 on a 4x4 lattice at ratio 0.5.
        let shape = LatticeShape::new(4, 4).unwrap();
        let spec = MaskSpec::new(MaskStrategy::Random, 0.5).unwrap();
        let m = generate_mask(shape, spec, &mut seeded(42)).unwrap();
        let fixture = MaskFixture {
            spec,
            seed: 42,
            mask: m.clone(),
        };
        let text = fixture.to_text();
        assert_eq!(MaskFixture::parse(&text).unwrap(), fixture);
        assert_eq!(m.masked_count(), 8);
        assert_eq!(
            text,
            include_str!("../tests/fixtures/mask_random_4x4_seed42.txt")
        );
        assert_eq!(generate_mask(shape, spec, &mut seeded(42)).unwrap(), m);
    }

    #[test]
    fn roll_examples() {
        let shape = LatticeShape::new(3, 3).unwrap();
        let mut m = PatchMask::empty(shape);
        m.set(Coord::new(0, 0), true);
        assert_eq!(roll_mask(&m, (0, 0)), m);
        assert_eq!(roll_mask(&m, (3, 3)), m);
        let r = roll_mask(&m, (1, 2));
        assert_eq!(r.masked_coords(), vec![Coord::new(1, 2)]);
    }

    #[test]
    fn block_truncation_removes_row_major_suffix() {
        let shape = LatticeShape::new(14, 14).unwrap();
        for seed in 0..200 {
            let (m, rect) = block_mask(shape, 69, &mut seeded(seed));
            let rect = rect.unwrap();
            let mut inside = Vec::new();
            for r in rect.top..rect.top + rect.height {
                for c in rect.left..rect.left + rect.width {
                    inside.push(m.get(Coord::new(r, c)));
                }
            }
            let first_false = inside.iter().position(|&b| !b).unwrap_or(inside.len());
            assert_eq!(first_false, 69);
            assert!(inside[first_false..].iter().all(|&b| !b));
            assert_eq!(m.masked_count(), 69);
        }
    }

    #[test]
    fn prediction_targets() {
        let shape = LatticeShape::new(14, 14).unwrap();
        let spec = MaskSpec::new(MaskStrategy::InverseBlockRoll, 0.65).unwrap();
        let m = generate_mask(shape, spec, &mut seeded(5)).unwrap();
        let t = sample_prediction_targets(&m, 7, &mut seeded(6)).unwrap();
        assert_eq!(t.len(), 7);
        let mut u = t.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 7);
        assert!(t.iter().all(|&c| m.get(c)));

        let mut all = sample_prediction_targets(&m, 127, &mut seeded(6)).unwrap();
        all.sort();
        assert_eq!(all, m.masked_coords());
        assert!(sample_prediction_targets(&m, 0, &mut seeded(6))
            .unwrap()
            .is_empty());
        assert!(matches!(
            sample_prediction_targets(&m, 128, &mut seeded(6)),
            Err(CapiError::InsufficientTargets {
                requested: 128,
                available: 127
            })
        ));
    }

    proptest! {
        #[test]
        fn exact_count_for_every_strategy(rows in 1usize..16, cols in 1usize..16, ratio in 0.0f64..=1.0, seed: u64, s in 0usize..4) {
            let shape = LatticeShape::new(rows, cols).unwrap();
            let spec = MaskSpec::new(ALL[s], ratio).unwrap();
            let m = generate_mask(shape, spec, &mut seeded(seed)).unwrap();
            prop_assert_eq!(m.masked_count(), (ratio * (rows * cols) as f64 + 1e-9).floor() as usize);
        }

        #[test]
        fn roll_is_a_bijection(rows in 1usize..10, cols in 1usize..10, dr in -30isize..30, dc in -30isize..30, seed: u64) {
            let shape = LatticeShape::new(rows, cols).unwrap();
            let m = generate_mask(shape, MaskSpec::new(MaskStrategy::Random, 0.4).unwrap(), &mut seeded(seed)).unwrap();
            let back = roll_mask(&roll_mask(&m, (dr, dc)), (-dr, -dc));
            prop_assert_eq!(roll_mask(&m, (dr, dc)).masked_count(), m.masked_count());
            prop_assert_eq!(back, m);
        }
    }
}
