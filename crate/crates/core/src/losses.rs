//! Fusion losses on the tape: MSE, SSIM, the base loss
//! `β·MSE + γ·(1 − SSIM)` and the anti-attack loss `L_clean + L_adv`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 100.0,
            gamma: 100.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::validation("weights.beta and weights.gamma must be >= 0"));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::validation("weights.ssim_window must be odd"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::validation("weights.ssim_sigma must be positive"));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::validation("weights.ssim_c1 and weights.ssim_c2 must be positive"));
        }
        Ok(())
    }
}

/// Normalised `1×1×k×k` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            data.push(a * b);
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![1, 1, size, size], data).expect("window shape")
}

fn same_shape(tape: &Tape<'_>, what: &str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

pub fn mse_loss(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mse", a, b)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Mean SSIM over the valid region of every image in an `n×1×h×w` batch.
pub fn ssim(tape: &mut Tape<'_>, a: Var, b: Var, w: &LossWeights) -> Result<Var> {
    same_shape(tape, "ssim", a, b)?;
    let shape = tape.shape(a).to_vec();
    let k = w.ssim_window;
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Dimension(format!(
            "ssim expects n×1×h×w images, got {shape:?}"
        )));
    }
    if shape[2] < k || shape[3] < k {
        return Err(Error::Dimension(format!(
            "image {}x{} is smaller than the {k}x{k} SSIM window",
            shape[2], shape[3]
        )));
    }
    let win = tape.input(gaussian_window(k, w.ssim_sigma));
    let blur = |tape: &mut Tape<'_>, x: Var| tape.conv2d(x, win, None, 1, 0);
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, 2.0);
    let l_num = tape.add_scalar(l_num, w.ssim_c1);
    let c_num = tape.scale(cov, 2.0);
    let c_num = tape.add_scalar(c_num, w.ssim_c2);
    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, w.ssim_c1);
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, w.ssim_c2);
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean_all(map))
}

/// `β·MSE(fused, label) + γ·(1 − SSIM(fused, label))`.
pub fn base_loss(tape: &mut Tape<'_>, fused: Var, label: Var, w: &LossWeights) -> Result<Var> {
    let mse = mse_loss(tape, fused, label)?;
    let s = ssim(tape, fused, label, w)?;
    let one_minus = tape.neg(s);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let a = tape.scale(mse, w.beta);
    let b = tape.scale(one_minus, w.gamma);
    tape.add(a, b)
}

/// `base_loss(y_clean, label) + base_loss(y_adv, label)`; both branches
/// stay on the tape.
pub fn anti_attack_loss(
    tape: &mut Tape<'_>,
    y_clean: Var,
    y_adv: Var,
    label: Var,
    w: &LossWeights,
) -> Result<Var> {
    same_shape(tape, "anti-attack loss", y_clean, y_adv)?;
    let clean = base_loss(tape, y_clean, label, w)?;
    let adv = base_loss(tape, y_adv, label, w)?;
    tape.add(clean, adv)
}

/// Base loss of two concrete images, without gradients.
pub fn base_loss_value(fused: &Tensor, label: &Tensor, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf_as(fused, false);
    let l = tape.leaf_as(label, false);
    let loss = base_loss(&mut tape, f, l, w)?;
    Ok(tape.item(loss))
}

/// Base loss of each image of a batch separately.
pub fn per_sample_base_loss(
    tape: &mut Tape<'_>,
    fused: Var,
    label: Var,
    w: &LossWeights,
) -> Result<Vec<Var>> {
    same_shape(tape, "base loss", fused, label)?;
    let shape = tape.shape(fused).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected an n×1×h×w batch, got {shape:?}")));
    }
    if shape[0] == 1 {
        return Ok(vec![base_loss(tape, fused, label, w)?]);
    }
    let extents = [1, shape[1], shape[2], shape[3]];
    (0..shape[0])
        .map(|s| {
            let f = tape.crop(fused, &[s, 0, 0, 0], &extents)?;
            let l = tape.crop(label, &[s, 0, 0, 0], &extents)?;
            base_loss(tape, f, l, w)
        })
        .collect()
}
