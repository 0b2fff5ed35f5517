//! Pure cross-attention predictor.
//!
//! Mask queries never attend to each other: every block's attention uses the
//! encoder output of the query's own image as keys and values, so each
//! prediction is a function of its coordinate and that context alone.

use ndarray::Array2;

use super::config::NetworkConfig;
use super::encoder::ImageRows;
use super::params::{ParamSet, HEAD, PREDICTOR};
use super::rope::{lattice_position, rope_tables};
use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{CapiError, Result};
use crate::masking::{Coord, LatticeShape};

fn p(tape: &mut Tape, params: &ParamSet, name: String) -> Var {
    tape.param(&name, params.get(&name))
}

/// How much of the predictor to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorDepth {
    /// Every block and the final norm.
    Full,
    /// Only the first block's attention sublayer (output projection included,
    /// residual excluded).
    FirstAttention,
}

struct PreparedContext {
    groups: Vec<AttnGroup>,
    q_cos: Array2<f64>,
    q_sin: Array2<f64>,
    k_cos: Array2<f64>,
    k_sin: Array2<f64>,
    total_queries: usize,
}

fn prepare(
    cfg: &NetworkConfig,
    lattice: LatticeShape,
    context_rows: &[ImageRows],
    queries: &[Vec<Coord>],
    context_len: usize,
) -> Result<PreparedContext> {
    if queries.len() != context_rows.len() {
        return Err(CapiError::InvalidShape(format!(
            "{} query groups for {} context images",
            queries.len(),
            context_rows.len()
        )));
    }
    if context_rows.iter().any(|r| r.rows.is_empty()) {
        return Err(CapiError::InvalidShape("predictor context is empty".into()));
    }
    let mut groups = Vec::with_capacity(queries.len());
    let mut q_pos = Vec::new();
    for (qs, ctx) in queries.iter().zip(context_rows) {
        let start = q_pos.len();
        q_pos.extend(qs.iter().map(|&c| Some(lattice_position(c, lattice))));
        if !qs.is_empty() {
            groups.push(AttnGroup {
                queries: start..q_pos.len(),
                keys: ctx.rows.clone(),
            });
        }
    }
    if q_pos.is_empty() {
        return Err(CapiError::InvalidShape(
            "predictor needs at least one query".into(),
        ));
    }
    let mut k_pos = vec![None; context_len];
    for ctx in context_rows {
        for (row, pos) in ctx.rows.clone().zip(ctx.positions(lattice)) {
            k_pos[row] = pos;
        }
    }
    let (q_cos, q_sin) = rope_tables(
        &q_pos,
        cfg.pred_dim,
        cfg.pred_heads,
        cfg.rope_freq_min,
        cfg.rope_freq_max,
    )?;
    let (k_cos, k_sin) = rope_tables(
        &k_pos,
        cfg.pred_dim,
        cfg.pred_heads,
        cfg.rope_freq_min,
        cfg.rope_freq_max,
    )?;
    Ok(PreparedContext {
        groups,
        q_cos,
        q_sin,
        k_cos,
        k_sin,
        total_queries: q_pos.len(),
    })
}

/// Predicts one vector per query coordinate. `queries[i]` holds the target
/// coordinates for image `i`, whose encoded tokens are `context_rows[i]` of
/// `context`.
pub fn predictor_forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &NetworkConfig,
    lattice: LatticeShape,
    context: Var,
    context_rows: &[ImageRows],
    queries: &[Vec<Coord>],
    depth: PredictorDepth,
) -> Result<Var> {
    let ctx_len = tape.value(context).nrows();
    if tape.value(context).ncols() != cfg.enc_dim {
        return Err(CapiError::InvalidShape(format!(
            "context dim {} != enc_dim {}",
            tape.value(context).ncols(),
            cfg.enc_dim
        )));
    }
    let prep = prepare(cfg, lattice, context_rows, queries, ctx_len)?;
    let mask = p(tape, params, format!("{PREDICTOR}.mask_token"));
    let mut x = tape.gather_rows(mask, vec![0; prep.total_queries]);

    let blocks = match depth {
        PredictorDepth::Full => cfg.pred_depth,
        PredictorDepth::FirstAttention => 1,
    };
    for i in 0..blocks {
        let b = format!("{PREDICTOR}.blocks.{i}");
        let n1 = p(tape, params, format!("{b}.norm1.weight"));
        let h = tape.rms_norm(x, n1, cfg.norm_eps);
        let wq = p(tape, params, format!("{b}.attn.q.weight"));
        let wk = p(tape, params, format!("{b}.attn.k.weight"));
        let wv = p(tape, params, format!("{b}.attn.v.weight"));
        let wo = p(tape, params, format!("{b}.attn.proj.weight"));
        let q = tape.linear(h, wq);
        let q = tape.rope(q, prep.q_cos.clone(), prep.q_sin.clone());
        let k = tape.linear(context, wk);
        let k = tape.rope(k, prep.k_cos.clone(), prep.k_sin.clone());
        let v = tape.linear(context, wv);
        let a = tape.attention(q, k, v, cfg.pred_heads, prep.groups.clone());
        let a = tape.linear(a, wo);
        if depth == PredictorDepth::FirstAttention {
            return Ok(a);
        }
        x = tape.add(x, a);

        let n2 = p(tape, params, format!("{b}.norm2.weight"));
        let h = tape.rms_norm(x, n2, cfg.norm_eps);
        let fc1 = p(tape, params, format!("{b}.mlp.fc1.weight"));
        let fc2 = p(tape, params, format!("{b}.mlp.fc2.weight"));
        let m = tape.linear(h, fc1);
        let m = tape.gelu(m);
        let m = tape.linear(m, fc2);
        x = tape.add(x, m);
    }
    let nf = p(tape, params, format!("{PREDICTOR}.norm.weight"));
    Ok(tape.rms_norm(x, nf, cfg.norm_eps))
}

/// Student head: predictions → prototype logits.
pub fn head_forward(tape: &mut Tape, params: &ParamSet, predictions: Var) -> Var {
    let w = p(tape, params, format!("{HEAD}.weight"));
    tape.linear(predictions, w)
}
