//! Run configuration: UTF-8 `key = value` lines grouped under `[section]`
//! headers, `#` comments. Unknown sections and keys are rejected. Real
//! values also accept fractions such as `4/255`.
//!
//! ```text
//! [network]
//! base_channels = 16
//! [budget]
//! epsilon = 4/255
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adversary::PerturbationBudget;
use crate::error::{Error, Result};
use crate::labels::{LabelMode, LabelRecipe};
use crate::network::{AttentionMode, NetworkConfig, SigmaMode};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    /// Holds the train-time budget and the loss weights.
    pub train: TrainConfig,
    /// PGD iterations for `attack` and `evaluate`.
    pub eval_iterations: usize,
    pub labels: LabelRecipe,
    pub label_cache: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Pairs per attack batch during evaluation.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval_iterations: 20,
            labels: LabelRecipe::default(),
            label_cache: None,
            manifest: None,
            checkpoint: None,
            eval_batch: 4,
        }
    }
}

fn parse_real(v: &str) -> std::result::Result<f64, String> {
    let parsed = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
            a / b
        }
        None => v.parse().map_err(|_| format!("`{v}` is not a number"))?,
    };
    if parsed.is_finite() {
        Ok(parsed)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn parse_int<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let att = &mut self.network.attention;
        let tr = &mut self.train;
        match (section, key) {
            ("network", "base_channels") => self.network.base_channels = parse_int(v)?,
            ("attention", "taylor_order") => att.taylor_order = parse_int(v)?,
            ("attention", "sigma_mode") => {
                att.sigma_mode = match v {
                    "per_tensor_variance" => SigmaMode::PerTensorVariance,
                    _ => match v.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')) {
                        Some(inner) => SigmaMode::Fixed(parse_real(inner)?),
                        None => {
                            return Err(format!(
                                "`{v}` is not `per_tensor_variance` or `fixed(<value>)`"
                            ))
                        }
                    },
                }
            }
            ("attention", "sigma_floor") => att.sigma_floor = parse_real(v)?,
            ("attention", "d_s") => {
                att.d_s = if v == "auto" { None } else { Some(parse_real(v)?) }
            }
            ("attention", "mode") => {
                att.mode = match v {
                    "softmax_context" => AttentionMode::SoftmaxContext,
                    "phi_normalized" => AttentionMode::PhiNormalized,
                    "dense_reference" => AttentionMode::DenseReference,
                    _ => return Err(format!("unknown attention mode `{v}`")),
                }
            }
            ("train", "epochs") => tr.epochs = parse_int(v)?,
            ("train", "batch") => tr.batch = parse_int(v)?,
            ("train", "learning_rate") => tr.adam.learning_rate = parse_real(v)?,
            ("train", "adam_beta1") => tr.adam.beta1 = parse_real(v)?,
            ("train", "adam_beta2") => tr.adam.beta2 = parse_real(v)?,
            ("train", "adam_eps") => tr.adam.eps = parse_real(v)?,
            ("train", "seed") => tr.seed = parse_int(v)?,
            ("train", "adversarial") => tr.adversarial = parse_bool(v)?,
            ("budget", "epsilon") => tr.budget.epsilon = parse_real(v)?,
            ("budget", "alpha") => tr.budget.alpha = parse_real(v)?,
            ("budget", "iterations") => tr.budget.iterations = parse_int(v)?,
            ("budget", "eval_iterations") => self.eval_iterations = parse_int(v)?,
            ("budget", "random_start") => tr.budget.random_start = parse_bool(v)?,
            ("weights", "beta") => tr.weights.beta = parse_real(v)?,
            ("weights", "gamma") => tr.weights.gamma = parse_real(v)?,
            ("weights", "ssim_window") => tr.weights.ssim_window = parse_int(v)?,
            ("weights", "ssim_sigma") => tr.weights.ssim_sigma = parse_real(v)?,
            ("weights", "ssim_c1") => tr.weights.ssim_c1 = parse_real(v)?,
            ("weights", "ssim_c2") => tr.weights.ssim_c2 = parse_real(v)?,
            ("labels", "mode") => {
                let (seed, epochs) = match self.labels.mode {
                    LabelMode::LearnedCnn { seed, epochs } => (seed, epochs),
                    _ => (0, 150),
                };
                self.labels.mode = match v {
                    "analytic_max" => LabelMode::AnalyticMax,
                    "analytic_weighted" => LabelMode::AnalyticWeighted { w_ir: 0.5 },
                    "learned_cnn" => LabelMode::LearnedCnn { seed, epochs },
                    _ => return Err(format!("unknown label mode `{v}`")),
                }
            }
            ("labels", "w_ir") => match &mut self.labels.mode {
                LabelMode::AnalyticWeighted { w_ir } => *w_ir = parse_real(v)?,
                _ => return Err("labels.w_ir requires mode = analytic_weighted".into()),
            },
            ("labels", "seed") => match &mut self.labels.mode {
                LabelMode::LearnedCnn { seed, .. } => *seed = parse_int(v)?,
                _ => return Err("labels.seed requires mode = learned_cnn".into()),
            },
            ("labels", "epochs") => match &mut self.labels.mode {
                LabelMode::LearnedCnn { epochs, .. } => *epochs = parse_int(v)?,
                _ => return Err("labels.epochs requires mode = learned_cnn".into()),
            },
            ("labels", "learning_rate") => self.labels.learning_rate = parse_real(v)?,
            ("labels", "cache_dir") => self.label_cache = opt_path(v),
            ("data", "manifest") => self.manifest = opt_path(v),
            ("data", "checkpoint") => self.checkpoint = opt_path(v),
            ("data", "eval_batch") => self.eval_batch = parse_int(v)?,
            _ => return Err(format!("unknown key `{section}.{key}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Validation {
                line: Some(line),
                message,
            };
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{l}`")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err(format!("key `{}` outside any [section]", k.trim())))?;
            self.set(sec, k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `section.key=value` overrides in order and revalidates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override `{o}` is not KEY=VALUE")))?;
            let (sec, key) = path.trim().split_once('.').ok_or_else(|| {
                Error::validation(format!("override key `{path}` is not section.key"))
            })?;
            self.set(sec, key, value)
                .map_err(|m| Error::validation(format!("override `{o}`: {m}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.labels.validate()?;
        self.eval_budget().validate()?;
        if self.eval_batch == 0 {
            return Err(Error::validation("data.eval_batch must be >= 1"));
        }
        Ok(())
    }

    /// Budget for `attack` and `evaluate`.
    pub fn eval_budget(&self) -> PerturbationBudget {
        self.train.budget.with_iterations(self.eval_iterations)
    }

    /// Every key with its resolved value; parsing the result reproduces
    /// `self`.
    pub fn to_text(&self) -> String {
        let a = &self.network.attention;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[network]\nbase_channels = {}\n", self.network.base_channels);
        let sigma = match a.sigma_mode {
            SigmaMode::PerTensorVariance => "per_tensor_variance".to_string(),
            SigmaMode::Fixed(v) => format!("fixed({v})"),
        };
        let mode = match a.mode {
            AttentionMode::SoftmaxContext => "softmax_context",
            AttentionMode::PhiNormalized => "phi_normalized",
            AttentionMode::DenseReference => "dense_reference",
        };
        let d_s = a.d_s.map_or_else(|| "auto".to_string(), |d| d.to_string());
        let _ = writeln!(
            s,
            "[attention]\ntaylor_order = {}\nsigma_mode = {sigma}\nsigma_floor = {}\nd_s = {d_s}\nmode = {mode}\n",
            a.taylor_order, a.sigma_floor
        );
        let _ = writeln!(
            s,
            "[train]\nepochs = {}\nbatch = {}\nlearning_rate = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\nseed = {}\nadversarial = {}\n",
            t.epochs, t.batch, t.adam.learning_rate, t.adam.beta1, t.adam.beta2, t.adam.eps, t.seed, t.adversarial
        );
        let _ = writeln!(
            s,
            "[budget]\nepsilon = {}\nalpha = {}\niterations = {}\neval_iterations = {}\nrandom_start = {}\n",
            t.budget.epsilon, t.budget.alpha, t.budget.iterations, self.eval_iterations, t.budget.random_start
        );
        let w = &t.weights;
        let _ = writeln!(
            s,
            "[weights]\nbeta = {}\ngamma = {}\nssim_window = {}\nssim_sigma = {}\nssim_c1 = {}\nssim_c2 = {}\n",
            w.beta, w.gamma, w.ssim_window, w.ssim_sigma, w.ssim_c1, w.ssim_c2
        );
        s.push_str("[labels]\n");
        match self.labels.mode {
            LabelMode::AnalyticMax => s.push_str("mode = analytic_max\n"),
            LabelMode::AnalyticWeighted { w_ir } => {
                let _ = writeln!(s, "mode = analytic_weighted\nw_ir = {w_ir}");
            }
            LabelMode::LearnedCnn { seed, epochs } => {
                let _ = writeln!(s, "mode = learned_cnn\nseed = {seed}\nepochs = {epochs}");
            }
        }
        let _ = writeln!(
            s,
            "learning_rate = {}\ncache_dir = {}\n",
            self.labels.learning_rate,
            show_path(&self.label_cache)
        );
        let _ = writeln!(
            s,
            "[data]\nmanifest = {}\ncheckpoint = {}\neval_batch = {}",
            show_path(&self.manifest),
            show_path(&self.checkpoint),
            self.eval_batch
        );
        s
    }
}
