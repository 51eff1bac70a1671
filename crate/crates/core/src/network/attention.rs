//! Mercer-kernel linearised self-attention.
//!
//! Token matrices are kept channel-major (`c × N`, one column per spatial
//! position), which is the transpose of the usual `N × c` token layout. The
//! feature map expands every channel into `n + 1` Taylor features
//!
//! ```text
//! φ₀ = 1,   φᵢ(q) = (q − q̄)^{2i} / (σ^{i/2} · √(i!))
//! ```
//!
//! so that `Σᵢ φᵢ(q) φᵢ(k)` is the order-`n` truncation of the kernel series.

use super::config::{AttentionConfig, AttentionMode, SigmaMode};
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

fn factorial(i: usize) -> f64 {
    (1..=i).map(|k| k as f64).product()
}

/// Maps a `c × N` token matrix to its `c(n+1) × N` Taylor features. Rows are
/// grouped by term: rows `[i·c, (i+1)·c)` hold `φᵢ` of every channel.
pub fn kernel_feature_map(tape: &mut Tape<'_>, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "feature map expects a c×N token matrix, got {shape:?}"
        )));
    }
    let mut terms = vec![tape.constant(&shape, 1.0)];
    if cfg.taylor_order == 0 {
        return Ok(terms[0]);
    }
    let mean = tape.mean(x, &[1])?;
    let mean = tape.expand(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let sigma = match cfg.sigma_mode {
        SigmaMode::PerTensorVariance => {
            let v = tape.var(x, &[0, 1])?;
            tape.clamp_min(v, cfg.sigma_floor)
        }
        SigmaMode::Fixed(s) => tape.constant(&[1, 1], s.max(cfg.sigma_floor)),
    };
    for i in 1..=cfg.taylor_order {
        let num = tape.pow(centered, 2.0 * i as f64);
        let inv = tape.pow(sigma, -(i as f64) / 2.0);
        let inv = tape.scale(inv, 1.0 / factorial(i).sqrt());
        terms.push(tape.mul(num, inv)?);
    }
    tape.concat(&terms, 0)
}

/// Attention over channel-major `q`, `k`, `v` (each `c × N`), returning the
/// `c × N` output tokens.
pub fn attend(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let c = tape.shape(q)[0];
    let mq = kernel_feature_map(tape, q, cfg)?;
    let mk = kernel_feature_map(tape, k, cfg)?;
    match cfg.mode {
        AttentionMode::SoftmaxContext => {
            // context = m(K)ᵀ·V, stored as c'×c.
            let vt = tape.transpose(v)?;
            let ctx = tape.matmul(mk, vt)?;
            let ctx = tape.scale(ctx, 1.0 / cfg.scale_dim(c).sqrt());
            let weights = tape.softmax(ctx, 0)?;
            let wt = tape.transpose(weights)?;
            tape.matmul(wt, mq)
        }
        AttentionMode::PhiNormalized => {
            let mkt = tape.transpose(mk)?;
            let kv = tape.matmul(v, mkt)?;
            let num = tape.matmul(kv, mq)?;
            let ksum = tape.sum(mk, &[1])?;
            let ksum_t = tape.transpose(ksum)?;
            let den = tape.matmul(ksum_t, mq)?;
            let den = tape.add_scalar(den, 1e-8);
            let shape = tape.shape(num).to_vec();
            let den = tape.expand(den, &shape)?;
            tape.div(num, den)
        }
        AttentionMode::DenseReference => {
            // Column t of (m(Q)m(K)ᵀ)ᵀ weights the tokens of V for output t.
            let mkt = tape.transpose(mk)?;
            let scores = tape.matmul(mkt, mq)?;
            tape.matmul(v, scores)
        }
    }
}

/// Projection to Q/K/V by a 1×1 convolution, per-sample kernel attention,
/// and an output projection back to `c` channels. `x` is `n×c×h×w`.
pub fn kernel_attention(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h * w == 0 {
        return Err(Error::Dimension("attention over an empty feature map".into()));
    }
    let qkv = tape.conv2d(
        x,
        bound.get(&format!("{prefix}.qkv.w"))?,
        Some(bound.get(&format!("{prefix}.qkv.b"))?),
        1,
        0,
    )?;
    let mut outs = Vec::with_capacity(n);
    for s in 0..n {
        let sample = tape.crop(qkv, &[s, 0, 0, 0], &[1, 3 * c, h, w])?;
        let tokens = tape.reshape(sample, &[3 * c, h * w])?;
        let q = tape.crop(tokens, &[0, 0], &[c, h * w])?;
        let k = tape.crop(tokens, &[c, 0], &[c, h * w])?;
        let v = tape.crop(tokens, &[2 * c, 0], &[c, h * w])?;
        let out = attend(tape, q, k, v, cfg)?;
        outs.push(tape.reshape(out, &[1, c, h, w])?);
    }
    let merged = tape.concat(&outs, 0)?;
    tape.conv2d(
        merged,
        bound.get(&format!("{prefix}.proj.w"))?,
        Some(bound.get(&format!("{prefix}.proj.b"))?),
        1,
        0,
    )
}
