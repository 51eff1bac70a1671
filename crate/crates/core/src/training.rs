//! Adam and the adversarial training loop.
//!
//! Every minibatch first generates adversarial perturbations with PGD
//! against the current (frozen) parameters, then runs the clean and the
//! perturbed batch through the network and minimises
//! `L_clean + L_adv`. The clean-only trainer uses the unperturbed batch for
//! both branches, so it is exactly adversarial training with `ε = 0`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack_batch, PerturbationBudget};
use crate::error::{Error, Result};
use crate::image_io::ImagePair;
use crate::losses::{base_loss, LossWeights};
use crate::network::{build_model, forward, validate_params, ModelParams, NetworkConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        Self {
            m: params.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: params.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            t: 0,
        }
    }

    fn to_params(&self, epoch: usize) -> Result<ModelParams> {
        let mut out = ModelParams::new();
        for (name, m) in &self.m {
            out.insert(format!("m/{name}"), Tensor::new(vec![m.len()], m.clone())?)?;
        }
        for (name, v) in &self.v {
            out.insert(format!("v/{name}"), Tensor::new(vec![v.len()], v.clone())?)?;
        }
        out.insert("step", Tensor::scalar(self.t as f64))?;
        out.insert("epoch", Tensor::scalar(epoch as f64))?;
        Ok(out)
    }

    /// Saves the state and the number of completed epochs in the
    /// checkpoint container format.
    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        self.to_params(epoch)?.save(path)
    }

    /// Returns the state and the number of completed epochs.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let p = ModelParams::load(path)?;
        let mut state = AdamState::default();
        let mut counters = [None, None];
        for (name, t) in p.iter() {
            if let Some(rest) = name.strip_prefix("m/") {
                state.m.insert(rest.to_string(), t.data().to_vec());
            } else if let Some(rest) = name.strip_prefix("v/") {
                state.v.insert(rest.to_string(), t.data().to_vec());
            } else if name == "step" {
                counters[0] = t.data().first().copied();
            } else if name == "epoch" {
                counters[1] = t.data().first().copied();
            } else {
                return Err(Error::validation(format!(
                    "optimizer state has unexpected entry `{name}`"
                )));
            }
        }
        let [Some(step), Some(epoch)] = counters else {
            return Err(Error::validation("optimizer state lacks step/epoch counters"));
        };
        state.t = step as u64;
        Ok((state, epoch as usize))
    }
}

/// Bias-corrected Adam update from the gradient buffers held by `params`.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::Contract(format!("no gradient for parameter `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        if m.len() != grad.len() || v.len() != grad.len() {
            return Err(Error::Contract(format!(
                "optimizer moments for `{name}` do not match its shape"
            )));
        }
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Train-time attack budget (3 iterations by default).
    pub budget: PerturbationBudget,
    pub weights: LossWeights,
    pub seed: u64,
    /// `false` selects the clean-only trainer.
    pub adversarial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 4,
            adam: AdamConfig::default(),
            budget: PerturbationBudget::default(),
            weights: LossWeights::default(),
            seed: 0,
            adversarial: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::validation("train.batch must be >= 1"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::validation("train.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::validation("train.adam_beta1/adam_beta2 must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::validation("train.adam_eps must be positive"));
        }
        self.budget.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_clean_loss: f64,
    pub mean_adv_loss: f64,
    pub wall_seconds: f64,
}

/// Batch order of `epoch`: a permutation seeded by `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn stack<'t>(items: impl Iterator<Item = &'t Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = items.collect();
    Tensor::stack_batch(&items)
}

/// One pass over `pairs`; `labels[i]` supervises `pairs[i]`. `epoch` is
/// zero-based and only seeds the shuffle and random PGD starts.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdamState,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    labels: &[Tensor],
    epoch: usize,
) -> Result<EpochSummary> {
    if pairs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} pairs but {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    let started = Instant::now();
    let order = epoch_permutation(cfg.seed, epoch, pairs.len());
    let (mut clean_sum, mut adv_sum) = (0.0, 0.0);
    for (b, chunk) in order.chunks(cfg.batch).enumerate() {
        let ir = stack(chunk.iter().map(|&i| &pairs[i].ir))?;
        let vis = stack(chunk.iter().map(|&i| &pairs[i].vis_y))?;
        let label = stack(chunk.iter().map(|&i| &labels[i]))?;

        let (adv_ir, adv_vis) = if cfg.adversarial {
            let budget = PerturbationBudget {
                start_seed: cfg
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((epoch as u64) << 32) | b as u64),
                ..cfg.budget
            };
            let attack = pgd_attack_batch(params, net, &ir, &vis, &label, &budget, &cfg.weights)?;
            (
                ir.zip_map(&attack.delta_ir, |x, d| x + d)?,
                vis.zip_map(&attack.delta_vis, |x, d| x + d)?,
            )
        } else {
            (ir.clone(), vis.clone())
        };

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let v_ir = tape.leaf_as(&ir, false);
        let v_vis = tape.leaf_as(&vis, false);
        let v_adv_ir = tape.leaf_as(&adv_ir, false);
        let v_adv_vis = tape.leaf_as(&adv_vis, false);
        let v_label = tape.leaf_as(&label, false);
        let y_clean = forward(&mut tape, &bound, net, v_ir, v_vis)?;
        let y_adv = forward(&mut tape, &bound, net, v_adv_ir, v_adv_vis)?;
        let l_clean = base_loss(&mut tape, y_clean, v_label, &cfg.weights)?;
        let l_adv = base_loss(&mut tape, y_adv, v_label, &cfg.weights)?;
        let loss = tape.add(l_clean, l_adv)?;
        let (lc, la) = (tape.item(l_clean), tape.item(l_adv));
        if !(lc.is_finite() && la.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training loss diverged in epoch {} batch {b}: clean {lc}, adversarial {la}",
                epoch + 1
            )));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        params.zero_grads();
        params.accumulate_grads(&bound, &grads)?;
        adam_step(params, state, &cfg.adam)?;

        clean_sum += lc * chunk.len() as f64;
        adv_sum += la * chunk.len() as f64;
    }
    let n = pairs.len().max(1) as f64;
    Ok(EpochSummary {
        epoch: epoch + 1,
        mean_clean_loss: clean_sum / n,
        mean_adv_loss: adv_sum / n,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Model, optimizer state and log of a (possibly partial) run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub state: AdamState,
    pub epochs_done: usize,
    pub log: Vec<EpochSummary>,
}

impl TrainRun {
    pub fn fresh(net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = build_model(net, cfg.seed)?;
        let state = AdamState::new(&params);
        Ok(Self {
            params,
            state,
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    /// Reloads a run written by [`TrainRun::save`].
    pub fn load(dir: &Path, net: &NetworkConfig) -> Result<Self> {
        let params = ModelParams::load(&dir.join(CHECKPOINT_FILE))?;
        validate_params(net, &params)?;
        let (state, epochs_done) = AdamState::load(&dir.join(OPTIMIZER_FILE))?;
        let log = match fs::read_to_string(dir.join(LOG_FILE)) {
            Ok(text) => parse_log(&text)?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            params,
            state,
            epochs_done,
            log,
        })
    }

    /// Runs epochs until `cfg.epochs` are complete, saving after each one
    /// when `out` is given.
    pub fn run(
        &mut self,
        net: &NetworkConfig,
        cfg: &TrainConfig,
        pairs: &[ImagePair],
        labels: &[Tensor],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochSummary),
    ) -> Result<()> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::validation("training needs a non-empty dataset"));
        }
        while self.epochs_done < cfg.epochs {
            let summary = train_epoch(
                &mut self.params,
                &mut self.state,
                net,
                cfg,
                pairs,
                labels,
                self.epochs_done,
            )?;
            self.epochs_done += 1;
            self.log.push(summary);
            on_epoch(&summary);
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// Writes checkpoint, optimizer state and CSV log; returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let opt = dir.join(OPTIMIZER_FILE);
        let log = dir.join(LOG_FILE);
        self.params.save(&ckpt)?;
        self.state.save(&opt, self.epochs_done)?;
        fs::write(&log, format_log(&self.log)).map_err(|e| Error::io(&log, e))?;
        Ok(vec![ckpt, opt, log])
    }
}

pub const CHECKPOINT_FILE: &str = "model.a2rn";
pub const OPTIMIZER_FILE: &str = "optimizer.a2rn";
pub const LOG_FILE: &str = "train_log.csv";

pub fn format_log(rows: &[EpochSummary]) -> String {
    let mut s = String::from("epoch,mean_clean_loss,mean_adv_loss,wall_seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.3}",
            r.epoch, r.mean_clean_loss, r.mean_adv_loss, r.wall_seconds
        );
    }
    s
}

fn parse_log(text: &str) -> Result<Vec<EpochSummary>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Validation {
                line: Some(i + 1),
                message: format!("malformed training log row `{l}`"),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochSummary {
                epoch: f[0].parse().map_err(|_| bad())?,
                mean_clean_loss: f[1].parse().map_err(|_| bad())?,
                mean_adv_loss: f[2].parse().map_err(|_| bad())?,
                wall_seconds: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    labels: &[Tensor],
    out: Option<&Path>,
) -> Result<TrainRun> {
    let mut run = TrainRun::fresh(net, cfg)?;
    if let Some(dir) = out {
        run.save(dir)?;
    }
    run.run(net, cfg, pairs, labels, out, |_| {})?;
    Ok(run)
}
