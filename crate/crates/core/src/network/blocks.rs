use super::attention::kernel_attention;
use super::config::{AttentionConfig, NetworkConfig};
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

const NORM_EPS: f64 = 1e-6;

/// Convolution with parameters `{name}.w` / `{name}.b`.
pub(crate) fn conv(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

/// Per-position standardisation across channels.
pub fn channel_norm(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mean = tape.mean(x, &[1])?;
    let mean = tape.expand(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let var = tape.var(x, &[1])?;
    let var = tape.add_scalar(var, NORM_EPS);
    let inv = tape.pow(var, -0.5);
    let inv = tape.expand(inv, &shape)?;
    tape.mul(centered, inv)
}

/// Adversarial resistant block: pre-norm kernel attention and a
/// 1×1 → LeakyReLU → 3×3 feed-forward branch, each with a residual.
pub fn arb_forward(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let normed = channel_norm(tape, x)?;
    let att = kernel_attention(tape, bound, prefix, normed, cfg)?;
    let f = tape.add(x, att)?;
    let normed = channel_norm(tape, f)?;
    let hidden = conv(tape, bound, &format!("{prefix}.ffn1"), normed, 1, 0)?;
    let hidden = tape.leaky_relu(hidden, NetworkConfig::LEAKY_SLOPE);
    let ffn = conv(tape, bound, &format!("{prefix}.ffn2"), hidden, 1, 1)?;
    tape.add(f, ffn)
}

/// Defensive refinement module: pixel-unshuffle, a chain of ARBs,
/// pixel-shuffle, plus a global residual from the input.
pub fn drm_forward(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    prefix: &str,
    skip: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(skip).to_vec();
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "refinement module needs even spatial extents, got {shape:?}"
        )));
    }
    let mut x = tape.pixel_unshuffle(skip, 2)?;
    for k in 0..NetworkConfig::DRM_BLOCKS {
        x = arb_forward(tape, bound, &format!("{prefix}.arb{k}"), x, cfg)?;
    }
    let x = tape.pixel_shuffle(x, 2)?;
    tape.add(x, skip)
}
