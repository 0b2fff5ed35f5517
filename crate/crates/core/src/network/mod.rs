//! Student encoder, cross-attention predictor and EMA teacher.
//!
//! The batched functions in [`encoder`] and [`predictor`] build onto a
//! [`Tape`] and are what training uses. The functions here are the
//! single-image forms that take and return [`TokenSet`]s.

pub mod config;
pub mod encoder;
pub mod params;
pub mod predictor;
pub mod rope;
pub mod tokens;

use rand::RngCore;

pub use config::NetworkConfig;
pub use encoder::{embed_patches, encoder_forward, ImageRows, Mode};
pub use params::{init_encoder, init_head, init_predictor, ParamSet};
pub use predictor::{head_forward, predictor_forward, PredictorDepth};
pub use rope::{lattice_position, rope_rotate};
pub use tokens::{drop_patches, extract_patches, patchify, TokenRole, TokenSet};

use crate::autograd::Tape;
use crate::error::{CapiError, Result};
use crate::masking::Coord;

/// Encodes one image's patch tokens. Output: the patches in input order,
/// then the registers.
pub fn encode(
    tokens: &TokenSet,
    params: &ParamSet,
    cfg: &NetworkConfig,
    mode: Mode,
    drop_rng: Option<&mut dyn RngCore>,
) -> Result<TokenSet> {
    if tokens.is_empty() {
        return Err(CapiError::InvalidShape(
            "encoder requires at least one patch token".into(),
        ));
    }
    if tokens.roles.iter().any(|&r| r != TokenRole::Patch) {
        return Err(CapiError::InvalidShape(
            "encoder input must be patch tokens".into(),
        ));
    }
    let coords = tokens.patch_coords();
    let mut tape = Tape::no_grad();
    let x = tape.input(tokens.vectors.clone());
    let (out, _) = encoder_forward(
        &mut tape,
        params,
        cfg,
        tokens.lattice,
        x,
        std::slice::from_ref(&coords),
        mode,
        drop_rng,
    )?;
    let mut all_coords: Vec<Option<Coord>> = coords.into_iter().map(Some).collect();
    let mut roles = vec![TokenRole::Patch; all_coords.len()];
    all_coords.extend(std::iter::repeat_n(None, cfg.n_reg));
    roles.extend(std::iter::repeat_n(TokenRole::Register, cfg.n_reg));
    TokenSet::new(tape.value(out).clone(), all_coords, roles, tokens.lattice)
}

/// Predicts one vector per query coordinate from an encoded view.
pub fn predict(
    query_coords: &[Coord],
    context: &TokenSet,
    params: &ParamSet,
    cfg: &NetworkConfig,
) -> Result<TokenSet> {
    if context.is_empty() {
        return Err(CapiError::InvalidShape("predictor context is empty".into()));
    }
    let rows = context_rows(context)?;
    let mut tape = Tape::no_grad();
    let ctx = tape.input(context.vectors.clone());
    let out = predictor_forward(
        &mut tape,
        params,
        cfg,
        context.lattice,
        ctx,
        &[rows],
        &[query_coords.to_vec()],
        PredictorDepth::Full,
    )?;
    TokenSet::new(
        tape.value(out).clone(),
        query_coords.iter().copied().map(Some).collect(),
        vec![TokenRole::MaskQuery; query_coords.len()],
        context.lattice,
    )
}

/// Layout of a single encoded image: patches first, then registers.
pub fn context_rows(context: &TokenSet) -> Result<ImageRows> {
    let n_patch = context.count(TokenRole::Patch);
    let n_reg = context.count(TokenRole::Register);
    let ordered = context.roles[..n_patch]
        .iter()
        .all(|&r| r == TokenRole::Patch)
        && context.roles[n_patch..]
            .iter()
            .all(|&r| r == TokenRole::Register);
    if !ordered {
        return Err(CapiError::InvalidShape(
            "context must list patches before registers".into(),
        ));
    }
    Ok(ImageRows {
        rows: 0..context.len(),
        patch_coords: context.patch_coords(),
        n_reg,
    })
}

/// `teacher ← μ·teacher + (1 − μ)·student`, element-wise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(CapiError::Config(format!(
            "momentum {momentum} outside [0, 1]"
        )));
    }
    teacher.check_same_shapes(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        if momentum == 0.0 {
            t.assign(s);
        } else if momentum < 1.0 {
            t.zip_mut_with(s, |tv, &sv| *tv = momentum * *tv + (1.0 - momentum) * sv);
        }
    }
    Ok(())
}
