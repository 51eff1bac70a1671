//! Pseudo-labels: the supervision target `y` for attacks and training.
//!
//! Two analytic recipes (elementwise maximum and a weighted average) and a
//! small per-pair CNN trained with l1 and SSIM terms against both sources.
//! Labels can be cached on disk: one PGM preview and one exact `f64`
//! payload per pair id, plus an index recording recipe hash, source digest
//! and payload digest for each id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{save_pgm, ImagePair};
use crate::losses::{ssim, LossWeights};
use crate::network::{BoundParams, ModelParams, NetworkConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelMode {
    AnalyticMax,
    AnalyticWeighted { w_ir: f64 },
    LearnedCnn { seed: u64, epochs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecipe {
    pub mode: LabelMode,
    /// Adam step size of the learned recipe.
    pub learning_rate: f64,
}

impl Default for LabelRecipe {
    fn default() -> Self {
        Self {
            mode: LabelMode::LearnedCnn {
                seed: 0,
                epochs: 150,
            },
            learning_rate: 0.01,
        }
    }
}

impl LabelRecipe {
    pub fn analytic_max() -> Self {
        Self {
            mode: LabelMode::AnalyticMax,
            ..Self::default()
        }
    }

    pub fn analytic_weighted(w_ir: f64) -> Self {
        Self {
            mode: LabelMode::AnalyticWeighted { w_ir },
            ..Self::default()
        }
    }

    pub fn learned(seed: u64, epochs: usize) -> Self {
        Self {
            mode: LabelMode::LearnedCnn { seed, epochs },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LabelMode::AnalyticWeighted { w_ir } if !(0.0..=1.0).contains(&w_ir) => Err(
                Error::validation(format!("labels.w_ir must lie in [0, 1], got {w_ir}")),
            ),
            LabelMode::LearnedCnn { .. } if !(self.learning_rate > 0.0) => {
                Err(Error::validation("labels.learning_rate must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn canonical(&self) -> String {
        match self.mode {
            LabelMode::AnalyticMax => "analytic_max".to_string(),
            LabelMode::AnalyticWeighted { w_ir } => {
                format!("analytic_weighted;w_ir={:016x}", w_ir.to_bits())
            }
            LabelMode::LearnedCnn { seed, epochs } => format!(
                "learned_cnn;seed={seed};epochs={epochs};lr={:016x};v1",
                self.learning_rate.to_bits()
            ),
        }
    }

    /// Short stable digest identifying the recipe in the label cache.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical().as_bytes())[..8])
    }
}

pub fn l1_loss(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!(
            "l1: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean_all(d))
}

const CNN_WIDTHS: [usize; 4] = [16, 16, 16, 1];

/// Parameters of the label network: four 3×3 convolutions.
pub fn label_cnn_params(seed: u64) -> ModelParams {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let slope = NetworkConfig::LEAKY_SLOPE;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let mut params = ModelParams::new();
    let mut c_in = 2;
    for (i, &c_out) in CNN_WIDTHS.iter().enumerate() {
        let bound = gain * (3.0 / (9 * c_in) as f64).sqrt();
        let w = Tensor::uniform(&[c_out, c_in, 3, 3], -bound, bound, &mut rng);
        params
            .insert(format!("l{i}.w"), w)
            .expect("distinct names");
        params
            .insert(format!("l{i}.b"), Tensor::zeros(&[c_out]))
            .expect("distinct names");
        c_in = c_out;
    }
    params.init_seed = Some(seed);
    params
}

pub fn label_cnn_forward(tape: &mut Tape<'_>, bound: &BoundParams, ir: Var, vis: Var) -> Result<Var> {
    let mut h = tape.concat(&[ir, vis], 1)?;
    for i in 0..CNN_WIDTHS.len() {
        let w = bound.get(&format!("l{i}.w"))?;
        let b = bound.get(&format!("l{i}.b"))?;
        h = tape.conv2d(h, w, Some(b), 1, 1)?;
        h = if i + 1 == CNN_WIDTHS.len() {
            tape.sigmoid(h)
        } else {
            tape.leaky_relu(h, NetworkConfig::LEAKY_SLOPE)
        };
    }
    Ok(h)
}

fn learned_label(pair: &ImagePair, seed: u64, epochs: usize, lr: f64) -> Result<Tensor> {
    let mut params = label_cnn_params(seed);
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        learning_rate: lr,
        ..AdamConfig::default()
    };
    let weights = LossWeights::default();
    let use_ssim = pair.height() >= weights.ssim_window && pair.width() >= weights.ssim_window;
    for step in 0..epochs {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let ir = tape.leaf_as(&pair.ir, false);
        let vis = tape.leaf_as(&pair.vis_y, false);
        let out = label_cnn_forward(&mut tape, &bound, ir, vis)?;
        let mut loss = l1_loss(&mut tape, out, ir)?;
        let l = l1_loss(&mut tape, out, vis)?;
        loss = tape.add(loss, l)?;
        if use_ssim {
            for src in [ir, vis] {
                let s = ssim(&mut tape, out, src, &weights)?;
                let s = tape.neg(s);
                let s = tape.add_scalar(s, 1.0);
                loss = tape.add(loss, s)?;
            }
        }
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "label network loss is {value} at step {step} for pair `{}`",
                pair.id
            )));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        params.zero_grads();
        params.accumulate_grads(&bound, &grads)?;
        adam_step(&mut params, &mut state, &adam)?;
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let ir = tape.leaf_as(&pair.ir, false);
    let vis = tape.leaf_as(&pair.vis_y, false);
    let out = label_cnn_forward(&mut tape, &bound, ir, vis)?;
    Ok(tape.to_tensor(out))
}

/// Generates the pseudo-label of `pair`, a `1×1×h×w` tensor in `[0, 1]`.
pub fn generate_label(pair: &ImagePair, recipe: &LabelRecipe) -> Result<Tensor> {
    recipe.validate()?;
    pair.validate()?;
    match recipe.mode {
        LabelMode::AnalyticMax => pair.ir.zip_map(&pair.vis_y, f64::max),
        LabelMode::AnalyticWeighted { w_ir } => {
            if w_ir == 1.0 {
                return Ok(pair.ir.clone());
            }
            if w_ir == 0.0 {
                return Ok(pair.vis_y.clone());
            }
            pair.ir
                .zip_map(&pair.vis_y, |a, b| (w_ir * a + (1.0 - w_ir) * b).clamp(0.0, 1.0))
        }
        LabelMode::LearnedCnn { seed, epochs } => {
            learned_label(pair, seed, epochs, recipe.learning_rate)
        }
    }
}

/// How a cached label was obtained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// The cached entry was unusable and has been rewritten.
    Regenerated(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct IndexEntry {
    recipe: String,
    source: String,
    payload: String,
}

/// On-disk label cache keyed by pair id and recipe hash.
#[derive(Clone, Debug)]
pub struct LabelCache {
    dir: PathBuf,
}

pub const INDEX_FILE: &str = "index.txt";

fn digest_f64(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

fn source_digest(pair: &ImagePair) -> String {
    let mut h = Sha256::new();
    for d in pair.ir.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in pair.ir.data().iter().chain(pair.vis_y.data()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

impl LabelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn preview_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.pgm"))
    }

    fn payload_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.f64"))
    }

    fn read_index(&self) -> BTreeMap<String, IndexEntry> {
        let Ok(text) = fs::read_to_string(self.dir.join(INDEX_FILE)) else {
            return BTreeMap::new();
        };
        text.lines()
            .filter_map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                (f.len() == 4).then(|| {
                    (
                        f[0].to_string(),
                        IndexEntry {
                            recipe: f[1].to_string(),
                            source: f[2].to_string(),
                            payload: f[3].to_string(),
                        },
                    )
                })
            })
            .collect()
    }

    fn write_index(&self, index: &BTreeMap<String, IndexEntry>) -> Result<()> {
        let mut text = String::new();
        for (id, e) in index {
            text.push_str(&format!("{id} {} {} {}\n", e.recipe, e.source, e.payload));
        }
        let path = self.dir.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn read_cached(&self, pair: &ImagePair, entry: &IndexEntry) -> std::result::Result<Tensor, String> {
        let bytes = fs::read(self.payload_path(&pair.id)).map_err(|e| format!("unreadable payload: {e}"))?;
        let n = pair.ir.numel();
        if bytes.len() != 8 * n {
            return Err(format!("payload has {} bytes, expected {}", bytes.len(), 8 * n));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if digest_f64(&data) != entry.payload {
            return Err("payload digest mismatch".into());
        }
        Tensor::new(pair.ir.shape().to_vec(), data).map_err(|e| e.to_string())
    }

    /// Returns the cached label of `pair` under `recipe`, generating and
    /// storing it when absent, stale or corrupt.
    pub fn get_or_generate(&self, pair: &ImagePair, recipe: &LabelRecipe) -> Result<(Tensor, CacheOutcome)> {
        let mut index = self.read_index();
        let recipe_hash = recipe.hash();
        let source = source_digest(pair);
        let mut outcome = CacheOutcome::Miss;
        if let Some(entry) = index.get(&pair.id) {
            if entry.recipe == recipe_hash && entry.source == source {
                match self.read_cached(pair, entry) {
                    Ok(t) => return Ok((t, CacheOutcome::Hit)),
                    Err(reason) => outcome = CacheOutcome::Regenerated(reason),
                }
            }
        }
        let label = generate_label(pair, recipe)?;
        let payload: Vec<u8> = label.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = self.payload_path(&pair.id);
        fs::write(&path, payload).map_err(|e| Error::io(&path, e))?;
        save_pgm(&self.preview_path(&pair.id), &label)?;
        index.insert(
            pair.id.clone(),
            IndexEntry {
                recipe: recipe_hash,
                source,
                payload: digest_f64(label.data()),
            },
        );
        self.write_index(&index)?;
        Ok((label, outcome))
    }
}

/// Labels for every pair, through `cache` when one is given. Corrupt cache
/// entries are reported through `warn` and regenerated.
pub fn labels_for(
    pairs: &[ImagePair],
    recipe: &LabelRecipe,
    cache: Option<&LabelCache>,
    mut warn: impl FnMut(&str),
) -> Result<Vec<Tensor>> {
    pairs
        .iter()
        .map(|p| match cache {
            None => generate_label(p, recipe),
            Some(c) => {
                let (label, outcome) = c.get_or_generate(p, recipe)?;
                if let CacheOutcome::Regenerated(reason) = outcome {
                    warn(&format!("label cache entry for `{}` regenerated: {reason}", p.id));
                }
                Ok(label)
            }
        })
        .collect()
}
