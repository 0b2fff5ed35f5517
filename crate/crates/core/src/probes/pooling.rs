//! Frozen-feature extraction: patch tokens, average pooling and predictor
//! pooling.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::autograd::Tape;
use crate::error::Result;
use crate::network::tokens::raster_coords;
use crate::network::{
    context_rows, encode, patchify, predictor_forward, Mode, NetworkConfig, ParamSet,
    PredictorDepth,
};

/// Encoder output for every patch of `image`, raster order, registers
/// dropped. `encoder` holds `encoder.*` parameters (student or teacher).
pub fn patch_features(
    image: &Array3<f64>,
    encoder: &ParamSet,
    net: &NetworkConfig,
) -> Result<Array2<f64>> {
    let tokens = patchify(image, encoder, net)?;
    let n = tokens.len();
    let out = encode(&tokens, encoder, net, Mode::Eval, None)?;
    Ok(out.vectors.slice(s![..n, ..]).to_owned())
}

pub fn average_pooling(features: &Array2<f64>) -> Array1<f64> {
    features
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(features.ncols()))
}

/// A pooled vector and how many attention layers of the predictor produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorPooled {
    pub vector: Array1<f64>,
    pub predictor_attention_calls: usize,
}

/// Encodes the full image, places one mask query at every patch position,
/// runs the queries through the first predictor attention layer only and
/// averages the results. `network` holds the student's `encoder.*` and
/// `predictor.*` parameters.
pub fn predictor_pooling(
    image: &Array3<f64>,
    network: &ParamSet,
    net: &NetworkConfig,
) -> Result<PredictorPooled> {
    let tokens = patchify(image, network, net)?;
    let encoded = encode(&tokens, network, net, Mode::Eval, None)?;
    let rows = context_rows(&encoded)?;
    let queries = raster_coords(encoded.lattice);
    let mut tape = Tape::no_grad();
    let ctx = tape.input(encoded.vectors.clone());
    let out = predictor_forward(
        &mut tape,
        network,
        net,
        encoded.lattice,
        ctx,
        &[rows],
        &[queries],
        PredictorDepth::FirstAttention,
    )?;
    Ok(PredictorPooled {
        vector: average_pooling(tape.value(out)),
        predictor_attention_calls: tape.attention_calls(),
    })
}
