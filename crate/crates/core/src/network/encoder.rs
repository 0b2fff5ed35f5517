//! Bias-free pre-norm ViT encoder with registers and axial RoPE.

use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};

use super::config::NetworkConfig;
use super::params::{ParamSet, ENCODER};
use super::rope::{lattice_position, rope_tables};
use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{CapiError, Result};
use crate::masking::{Coord, LatticeShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where one image's tokens live in a stacked encoder output: its patch rows
/// (in input order) followed by its register rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRows {
    pub rows: Range<usize>,
    pub patch_coords: Vec<Coord>,
    pub n_reg: usize,
}

impl ImageRows {
    pub fn patch_rows(&self) -> Range<usize> {
        self.rows.start..self.rows.start + self.patch_coords.len()
    }

    pub fn register_rows(&self) -> Range<usize> {
        self.rows.start + self.patch_coords.len()..self.rows.end
    }

    /// Per-row rope position; registers have none.
    pub fn positions(&self, lattice: LatticeShape) -> impl Iterator<Item = Option<[f64; 2]>> + '_ {
        self.patch_coords
            .iter()
            .map(move |&c| Some(lattice_position(c, lattice)))
            .chain(std::iter::repeat_n(None, self.n_reg))
    }
}

/// Applies the patch embedding to stacked raw patches.
pub fn embed_patches(tape: &mut Tape, params: &ParamSet, pixels: Array2<f64>) -> Var {
    let name = format!("{ENCODER}.patch_embed.weight");
    let w = tape.param(&name, params.get(&name));
    let x = tape.input(pixels);
    tape.linear(x, w)
}

fn p(tape: &mut Tape, params: &ParamSet, name: String) -> Var {
    tape.param(&name, params.get(&name))
}

/// Per-row stochastic-depth multipliers: one Bernoulli draw per image.
fn drop_path_scales(
    layout: &[ImageRows],
    total: usize,
    rate: f64,
    rng: &mut dyn RngCore,
) -> Array1<f64> {
    let mut scales = Array1::zeros(total);
    for img in layout {
        let keep = rng.random::<f64>() >= rate;
        let s = if keep { 1.0 / (1.0 - rate) } else { 0.0 };
        scales.slice_mut(ndarray::s![img.rows.clone()]).fill(s);
    }
    scales
}

/// Runs the encoder over a batch of images whose embedded patch tokens are
/// stacked in `tokens` (image after image, `coords[i]` giving image `i`'s
/// coordinates). Registers are appended after each image's patches.
///
/// Stochastic depth is only active in [`Mode::Train`] with a generator.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &NetworkConfig,
    lattice: LatticeShape,
    tokens: Var,
    coords: &[Vec<Coord>],
    mode: Mode,
    mut drop_rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Vec<ImageRows>)> {
    let total_patches: usize = coords.iter().map(Vec::len).sum();
    if coords.is_empty() || coords.iter().any(Vec::is_empty) {
        return Err(CapiError::InvalidShape(
            "encoder requires at least one patch token per image".into(),
        ));
    }
    if tape.value(tokens).nrows() != total_patches {
        return Err(CapiError::InvalidShape(format!(
            "{} token rows for {} coordinates",
            tape.value(tokens).nrows(),
            total_patches
        )));
    }
    if tape.value(tokens).ncols() != cfg.enc_dim {
        return Err(CapiError::InvalidShape(format!(
            "token dim {} != enc_dim {}",
            tape.value(tokens).ncols(),
            cfg.enc_dim
        )));
    }

    let mut layout = Vec::with_capacity(coords.len());
    let mut gather = Vec::with_capacity(total_patches + coords.len() * cfg.n_reg);
    let mut src = 0;
    for c in coords {
        let start = gather.len();
        gather.extend(src..src + c.len());
        gather.extend(total_patches..total_patches + cfg.n_reg);
        src += c.len();
        layout.push(ImageRows {
            rows: start..gather.len(),
            patch_coords: c.clone(),
            n_reg: cfg.n_reg,
        });
    }
    let mut x = if cfg.n_reg > 0 {
        let regs = p(tape, params, format!("{ENCODER}.registers"));
        let stacked = tape.concat_rows(&[tokens, regs]);
        tape.gather_rows(stacked, gather)
    } else {
        tape.gather_rows(tokens, gather)
    };
    let total = layout.last().map(|l| l.rows.end).unwrap_or(0);

    let positions: Vec<_> = layout.iter().flat_map(|l| l.positions(lattice)).collect();
    let (cos, sin) = rope_tables(
        &positions,
        cfg.enc_dim,
        cfg.enc_heads,
        cfg.rope_freq_min,
        cfg.rope_freq_max,
    )?;
    let groups: Vec<AttnGroup> = layout
        .iter()
        .map(|l| AttnGroup {
            queries: l.rows.clone(),
            keys: l.rows.clone(),
        })
        .collect();
    let rate = cfg.stochastic_depth;
    let drop_active = mode == Mode::Train && rate > 0.0 && drop_rng.is_some();

    for i in 0..cfg.enc_depth {
        let b = format!("{ENCODER}.blocks.{i}");
        let n1 = p(tape, params, format!("{b}.norm1.weight"));
        let h = tape.rms_norm(x, n1, cfg.norm_eps);
        let wq = p(tape, params, format!("{b}.attn.q.weight"));
        let wk = p(tape, params, format!("{b}.attn.k.weight"));
        let wv = p(tape, params, format!("{b}.attn.v.weight"));
        let wo = p(tape, params, format!("{b}.attn.proj.weight"));
        let q = tape.linear(h, wq);
        let k = tape.linear(h, wk);
        let v = tape.linear(h, wv);
        let q = tape.rope(q, cos.clone(), sin.clone());
        let k = tape.rope(k, cos.clone(), sin.clone());
        let a = tape.attention(q, k, v, cfg.enc_heads, groups.clone());
        let mut a = tape.linear(a, wo);
        if drop_active {
            let rng = drop_rng.as_deref_mut().expect("checked above");
            a = tape.row_scale(a, drop_path_scales(&layout, total, rate, rng));
        }
        x = tape.add(x, a);

        let n2 = p(tape, params, format!("{b}.norm2.weight"));
        let h = tape.rms_norm(x, n2, cfg.norm_eps);
        let fc1 = p(tape, params, format!("{b}.mlp.fc1.weight"));
        let fc2 = p(tape, params, format!("{b}.mlp.fc2.weight"));
        let m = tape.linear(h, fc1);
        let m = tape.gelu(m);
        let mut m = tape.linear(m, fc2);
        if drop_active {
            let rng = drop_rng.as_deref_mut().expect("checked above");
            m = tape.row_scale(m, drop_path_scales(&layout, total, rate, rng));
        }
        x = tape.add(x, m);
    }
    let nf = p(tape, params, format!("{ENCODER}.norm.weight"));
    let out = tape.rms_norm(x, nf, cfg.norm_eps);
    Ok((out, layout))
}
