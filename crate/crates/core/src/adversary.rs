//! FGSM and dual-input PGD under an ℓ∞ budget.
//!
//! Both modality perturbations step from the input gradients of one shared
//! loss evaluation per iteration, and each is projected onto the ε-ball and
//! then onto the `[0, 1]` pixel domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImagePair;
use crate::losses::{per_sample_base_loss, LossWeights};
use crate::network::{forward, ModelParams, NetworkConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Start from a uniform point of the ε-ball instead of zero.
    pub random_start: bool,
    /// Seed of the random start.
    pub start_seed: u64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 3,
            random_start: false,
            start_seed: 0,
        }
    }
}

impl PerturbationBudget {
    /// The evaluation-time budget: same ε and α, 20 iterations.
    pub fn evaluation() -> Self {
        Self {
            iterations: 20,
            ..Self::default()
        }
    }

    pub fn with_iterations(self, iterations: usize) -> Self {
        Self { iterations, ..self }
    }

    /// `ε = 0` is accepted as the degenerate budget whatever α is.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::validation(format!(
                "budget.epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::validation(format!(
                "budget.alpha must satisfy 0 < alpha <= epsilon, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::validation("budget.iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Perturbations of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialPair {
    pub delta_ir: Tensor,
    pub delta_vis: Tensor,
    /// Loss at every iterate: entry `k` is evaluated at `δ_k`, so there are
    /// `iterations + 1` entries and entry 0 is the clean loss.
    pub loss_trace: Vec<f64>,
}

impl AdversarialPair {
    pub fn attacked(&self, pair: &ImagePair) -> Result<(Tensor, Tensor)> {
        Ok((
            pair.ir.zip_map(&self.delta_ir, |x, d| x + d)?,
            pair.vis_y.zip_map(&self.delta_vis, |x, d| x + d)?,
        ))
    }
}

/// Perturbations of an `n×1×h×w` batch with one loss trace per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchAttack {
    pub delta_ir: Tensor,
    pub delta_vis: Tensor,
    pub loss_traces: Vec<Vec<f64>>,
}

impl BatchAttack {
    pub fn into_pairs(self) -> Vec<AdversarialPair> {
        self.delta_ir
            .unstack_batch()
            .into_iter()
            .zip(self.delta_vis.unstack_batch())
            .zip(self.loss_traces)
            .map(|((delta_ir, delta_vis), loss_trace)| AdversarialPair {
                delta_ir,
                delta_vis,
                loss_trace,
            })
            .collect()
    }
}

/// `ε·sign(grad)` with `sign(0) = 0`.
pub fn fgsm_delta(grad: &Tensor, epsilon: f64) -> Tensor {
    grad.map(|g| epsilon * crate::tensor::sign_value(g))
}

/// Clamps `delta` to `[−ε, ε]`, then clamps `x + delta` to `[0, 1]` and
/// returns the implied perturbation.
pub fn project_linf(delta: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    x.zip_map(delta, |x, d| {
        let d = d.clamp(-epsilon, epsilon);
        if x + d > 1.0 {
            1.0 - x
        } else if x + d < 0.0 {
            -x
        } else {
            d
        }
    })
}

/// PGD against an arbitrary differentiable loss. `loss_fn` receives the
/// perturbed infrared and visible batches and returns one scalar loss per
/// sample; samples must not interact.
pub fn pgd_with<'a, F>(
    ir: &Tensor,
    vis: &Tensor,
    budget: &PerturbationBudget,
    mut loss_fn: F,
) -> Result<BatchAttack>
where
    F: FnMut(&mut Tape<'a>, Var, Var) -> Result<Vec<Var>>,
{
    budget.validate()?;
    if ir.shape() != vis.shape() || ir.shape().is_empty() {
        return Err(Error::Dimension(format!(
            "attack inputs {:?} and {:?} must share a batched shape",
            ir.shape(),
            vis.shape()
        )));
    }
    let n = ir.shape()[0];
    let eps = budget.epsilon;
    let (mut d_ir, mut d_vis) = if budget.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(budget.start_seed);
        let a = Tensor::uniform(ir.shape(), -eps, eps, &mut rng);
        let b = Tensor::uniform(vis.shape(), -eps, eps, &mut rng);
        (project_linf(&a, ir, eps)?, project_linf(&b, vis, eps)?)
    } else {
        (Tensor::zeros(ir.shape()), Tensor::zeros(vis.shape()))
    };
    let mut traces = vec![Vec::with_capacity(budget.iterations + 1); n];

    for k in 0..=budget.iterations {
        let last = k == budget.iterations;
        let x_ir = ir.zip_map(&d_ir, |x, d| x + d)?;
        let x_vis = vis.zip_map(&d_vis, |x, d| x + d)?;
        let mut tape = Tape::new();
        let v_ir = tape.input(if last { x_ir } else { x_ir.with_grad() });
        let v_vis = tape.input(if last { x_vis } else { x_vis.with_grad() });
        let losses = loss_fn(&mut tape, v_ir, v_vis)?;
        if losses.len() != n {
            return Err(Error::Contract(format!(
                "attack loss returned {} values for a batch of {n}",
                losses.len()
            )));
        }
        for (s, &l) in losses.iter().enumerate() {
            let v = tape.item(l);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "PGD loss is {v} at iteration {k} (sample {s})"
                )));
            }
            traces[s].push(v);
        }
        if last {
            break;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let grads = tape.backward(total)?;
        let g_ir = grads.get(v_ir).map(<[f64]>::to_vec);
        let g_vis = grads.get(v_vis).map(<[f64]>::to_vec);
        let step = |delta: &Tensor, g: Option<Vec<f64>>, x: &Tensor| -> Result<Tensor> {
            let g = Tensor::new(delta.shape().to_vec(), g.unwrap_or_else(|| vec![0.0; delta.numel()]))?;
            let moved = delta.zip_map(&fgsm_delta(&g, budget.alpha), |d, s| d + s)?;
            project_linf(&moved, x, eps)
        };
        let next_ir = step(&d_ir, g_ir, ir)?;
        let next_vis = step(&d_vis, g_vis, vis)?;
        d_ir = next_ir;
        d_vis = next_vis;
    }
    Ok(BatchAttack {
        delta_ir: d_ir,
        delta_vis: d_vis,
        loss_traces: traces,
    })
}

/// Dual-input PGD on a batch against the fusion network with frozen
/// parameters; the loss is the base loss against `label`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_batch(
    params: &ModelParams,
    cfg: &NetworkConfig,
    ir: &Tensor,
    vis: &Tensor,
    label: &Tensor,
    budget: &PerturbationBudget,
    weights: &LossWeights,
) -> Result<BatchAttack> {
    if label.shape() != ir.shape() {
        return Err(Error::Dimension(format!(
            "label {:?} does not match the fused output shape {:?}",
            label.shape(),
            ir.shape()
        )));
    }
    pgd_with(ir, vis, budget, |tape, x_ir, x_vis| {
        let bound = params.bind(tape, false);
        let fused = forward(tape, &bound, cfg, x_ir, x_vis)?;
        let target = tape.leaf_as(label, false);
        per_sample_base_loss(tape, fused, target, weights)
    })
}

pub fn pgd_attack(
    params: &ModelParams,
    cfg: &NetworkConfig,
    pair: &ImagePair,
    label: &Tensor,
    budget: &PerturbationBudget,
    weights: &LossWeights,
) -> Result<AdversarialPair> {
    let attack = pgd_attack_batch(params, cfg, &pair.ir, &pair.vis_y, label, budget, weights)?;
    Ok(attack.into_pairs().remove(0))
}
