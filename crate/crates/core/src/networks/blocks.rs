//! Encoder/decoder building blocks: a residual downsampling encoder and a
//! skip-connected upsampling decoder, both width- and depth-configurable.

use super::params::{conv_init, BoundParams, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::Real;
use rand_chacha::ChaCha8Rng;

/// Channel width at encoder level `l` (1-based) for base width `c`.
pub fn level_channels(base: usize, level: usize) -> usize {
    base * (1 << (level - 1).min(3))
}

/// Register parameters for a residual encoder with `levels` stride-2 stages.
pub fn register_encoder<S: Real>(
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_channels: usize,
    base: usize,
    levels: usize,
    blocks_per_stage: usize,
) {
    let c1 = level_channels(base, 1);
    params.register(format!("{prefix}.stem.w"), conv_init(rng, vec![c1, in_channels, 3, 3]));
    params.register(format!("{prefix}.stem.b"), crate::autodiff::Tensor::zeros(vec![c1]));
    for l in 2..=levels {
        let cin = level_channels(base, l - 1);
        let cout = level_channels(base, l);
        params.register(format!("{prefix}.s{l}.conv1.w"), conv_init(rng, vec![cout, cin, 3, 3]));
        params.register(format!("{prefix}.s{l}.conv1.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        params.register(format!("{prefix}.s{l}.conv2.w"), conv_init(rng, vec![cout, cout, 3, 3]));
        params.register(format!("{prefix}.s{l}.conv2.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        params.register(format!("{prefix}.s{l}.skip.w"), conv_init(rng, vec![cout, cin, 1, 1]));
        params.register(format!("{prefix}.s{l}.skip.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        for b in 1..blocks_per_stage {
            params.register(format!("{prefix}.s{l}.extra{b}.conv1.w"), conv_init(rng, vec![cout, cout, 3, 3]));
            params.register(format!("{prefix}.s{l}.extra{b}.conv1.b"), crate::autodiff::Tensor::zeros(vec![cout]));
            params.register(format!("{prefix}.s{l}.extra{b}.conv2.w"), conv_init(rng, vec![cout, cout, 3, 3]));
            params.register(format!("{prefix}.s{l}.extra{b}.conv2.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        }
    }
}

/// Run the encoder; returns one feature map per level, strides 2, 4, ...
pub fn encoder_forward<S: Real>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    prefix: &str,
    image: Var,
    levels: usize,
    blocks_per_stage: usize,
) -> Vec<Var> {
    let mut feats = Vec::with_capacity(levels);
    let stem_w = bound.get(&format!("{prefix}.stem.w"));
    let stem_b = bound.get(&format!("{prefix}.stem.b"));
    let x = tape.conv2d(image, stem_w, stem_b, 2, 1);
    let mut x = tape.elu(x);
    feats.push(x);
    for l in 2..=levels {
        let w1 = bound.get(&format!("{prefix}.s{l}.conv1.w"));
        let b1 = bound.get(&format!("{prefix}.s{l}.conv1.b"));
        let w2 = bound.get(&format!("{prefix}.s{l}.conv2.w"));
        let b2 = bound.get(&format!("{prefix}.s{l}.conv2.b"));
        let ws = bound.get(&format!("{prefix}.s{l}.skip.w"));
        let bs = bound.get(&format!("{prefix}.s{l}.skip.b"));
        let y = tape.conv2d(x, w1, b1, 2, 1);
        let y = tape.elu(y);
        let y = tape.conv2d(y, w2, b2, 1, 1);
        let skip = tape.conv2d(x, ws, bs, 2, 0);
        let sum = tape.add(y, skip);
        x = tape.elu(sum);
        for b in 1..blocks_per_stage {
            let w1 = bound.get(&format!("{prefix}.s{l}.extra{b}.conv1.w"));
            let b1 = bound.get(&format!("{prefix}.s{l}.extra{b}.conv1.b"));
            let w2 = bound.get(&format!("{prefix}.s{l}.extra{b}.conv2.w"));
            let b2 = bound.get(&format!("{prefix}.s{l}.extra{b}.conv2.b"));
            let y = tape.conv2d(x, w1, b1, 1, 1);
            let y = tape.elu(y);
            let y = tape.conv2d(y, w2, b2, 1, 1);
            let sum = tape.add(y, x);
            x = tape.elu(sum);
        }
        feats.push(x);
    }
    feats
}

/// Register a skip-connected decoder that upsamples from the deepest level
/// back to full resolution. `skip_channels[l-1]` is the channel count of
/// the encoder feature concatenated at level `l` (0 = none).
pub fn register_decoder<S: Real>(
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    base: usize,
    levels: usize,
    top_channels: usize,
    skip_channels: &[usize],
) {
    let mut cin = top_channels;
    for l in (1..=levels).rev() {
        let cout = level_channels(base, l.max(2) - 1);
        params.register(format!("{prefix}.up{l}.w"), conv_init(rng, vec![cout, cin, 3, 3]));
        params.register(format!("{prefix}.up{l}.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        let merged_in = cout + if l >= 2 { skip_channels[l - 2] } else { 0 };
        params.register(format!("{prefix}.merge{l}.w"), conv_init(rng, vec![cout, merged_in, 3, 3]));
        params.register(format!("{prefix}.merge{l}.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        cin = cout;
    }
}

/// Decoder forward. `skips[l-1]` are encoder features (stride `2^l`); the
/// deepest one is the decoder input. Returns the full-resolution trunk.
pub fn decoder_forward<S: Real>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    prefix: &str,
    skips: &[Vec<Var>],
    levels: usize,
    top: Var,
) -> Var {
    let mut x = top;
    for l in (1..=levels).rev() {
        let w = bound.get(&format!("{prefix}.up{l}.w"));
        let b = bound.get(&format!("{prefix}.up{l}.b"));
        let y = tape.conv2d(x, w, b, 1, 1);
        let y = tape.elu(y);
        let y = tape.upsample_nearest2(y);
        let merged = if l >= 2 {
            let mut cat = vec![y];
            cat.extend_from_slice(&skips[l - 2]);
            tape.concat_c(&cat)
        } else {
            y
        };
        let w = bound.get(&format!("{prefix}.merge{l}.w"));
        let b = bound.get(&format!("{prefix}.merge{l}.b"));
        let z = tape.conv2d(merged, w, b, 1, 1);
        x = tape.elu(z);
    }
    x
}

/// A two-conv prediction head. `output_gain` scales the final layer's
/// initial weights, so heads can start near a chosen output without a
/// permanent activation penalty.
#[allow(clippy::too_many_arguments)]
pub fn register_head<S: Real>(
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_channels: usize,
    hidden: usize,
    out_channels: usize,
    bias_init: Option<&[f64]>,
    output_gain: f64,
) {
    params.register(format!("{prefix}.conv1.w"), conv_init(rng, vec![hidden, in_channels, 3, 3]));
    params.register(format!("{prefix}.conv1.b"), crate::autodiff::Tensor::zeros(vec![hidden]));
    let mut w2: crate::autodiff::Tensor<S> = conv_init(rng, vec![out_channels, hidden, 3, 3]);
    if output_gain != 1.0 {
        for v in &mut w2.data {
            *v *= S::lit(output_gain);
        }
    }
    params.register(format!("{prefix}.conv2.w"), w2);
    let bias = match bias_init {
        Some(values) => {
            assert_eq!(values.len(), out_channels);
            crate::autodiff::Tensor::new(vec![out_channels], values.iter().map(|&v| S::lit(v)).collect())
        }
        None => crate::autodiff::Tensor::zeros(vec![out_channels]),
    };
    params.register(format!("{prefix}.conv2.b"), bias);
}

pub fn head_forward<S: Real>(tape: &mut Tape<S>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let w1 = bound.get(&format!("{prefix}.conv1.w"));
    let b1 = bound.get(&format!("{prefix}.conv1.b"));
    let w2 = bound.get(&format!("{prefix}.conv2.w"));
    let b2 = bound.get(&format!("{prefix}.conv2.b"));
    let y = tape.conv2d(x, w1, b1, 1, 1);
    let y = tape.elu(y);
    tape.conv2d(y, w2, b2, 1, 1)
}
