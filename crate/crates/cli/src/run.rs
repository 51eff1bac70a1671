use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use a2rnet::config::RunConfig;
use a2rnet::image_io::{crop_to, load_manifest, pad_to_multiple, ImagePair};
use a2rnet::labels::{labels_for, LabelCache};
use a2rnet::network::{validate_params, ModelParams};
use a2rnet::{Error, Tensor};
use sha2::{Digest, Sha256};

use crate::Common;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const OUTPUTS_MANIFEST: &str = "outputs.json";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Resolved configuration plus the files a command has written.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl Run {
    /// Parses `--config`, applies overrides and `--seed`, creates the output
    /// directory and writes the resolved configuration into it.
    pub fn start(command: &'static str, common: &Common) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { .. } => CliError::Validation(format!("--config: {e}")),
                other => CliError::Validation(format!("{}: {other}", p.display())),
            })?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&common.overrides)
            .map_err(|e| CliError::Validation(format!("--override: {e}")))?;
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        fs::create_dir_all(&common.out).map_err(runtime)?;
        let mut run = Self {
            cfg,
            out: common.out.clone(),
            command,
            files: Vec::new(),
        };
        let text = run.cfg.to_text();
        run.write(RESOLVED_CONFIG, text.as_bytes())?;
        Ok(run)
    }

    pub fn record(&mut self, path: PathBuf) {
        if !self.files.contains(&path) {
            self.files.push(path);
        }
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(runtime)?;
        }
        fs::write(&path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        self.record(path.clone());
        Ok(path)
    }

    pub fn load_pairs(&self) -> CliResult<Vec<ImagePair>> {
        let path = self.cfg.manifest.as_ref().ok_or_else(|| {
            CliError::Validation("no dataset: set data.manifest in the config or via --override".into())
        })?;
        let manifest = load_manifest(path).map_err(|e| match e {
            Error::Io { .. } => CliError::Validation(format!("data.manifest: {e}")),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        })?;
        if manifest.is_empty() {
            return Err(CliError::Validation(format!("{}: manifest has no pairs", path.display())));
        }
        manifest
            .load_pairs()
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn load_checkpoint(&self) -> CliResult<ModelParams> {
        let path = self.cfg.checkpoint.as_ref().ok_or_else(|| {
            CliError::Validation("no checkpoint: set data.checkpoint in the config or via --override".into())
        })?;
        let params = ModelParams::load(path).map_err(|e| match e {
            Error::Io { .. } => CliError::Validation(format!("data.checkpoint: {e}")),
            other => CliError::Validation(format!("{}: {other}", path.display())),
        })?;
        validate_params(&self.cfg.network, &params)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Ok(params)
    }

    /// `labels.cache_dir`, or `<out>/labels`.
    pub fn label_dir(&self) -> PathBuf {
        self.cfg
            .label_cache
            .clone()
            .unwrap_or_else(|| self.out.join("labels"))
    }

    /// Labels of `pairs` through the label cache.
    pub fn labels(&mut self, pairs: &[ImagePair]) -> CliResult<Vec<Tensor>> {
        let cache = LabelCache::new(self.label_dir())?;
        let labels = labels_for(pairs, &self.cfg.labels, Some(&cache), |w| eprintln!("warning: {w}"))?;
        Ok(labels)
    }

    /// Writes `outputs.json`: every produced file with its size and SHA-256.
    pub fn finish(mut self) -> CliResult<()> {
        let mut entries = Vec::new();
        for path in &self.files {
            let bytes = fs::read(path).map_err(runtime)?;
            let shown = path.strip_prefix(&self.out).unwrap_or(path);
            entries.push(serde_json::json!({
                "path": shown.display().to_string(),
                "bytes": bytes.len(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }));
        }
        let doc = serde_json::json!({ "command": self.command, "files": entries });
        let text = serde_json::to_string_pretty(&doc).map_err(runtime)?;
        let path = self.out.join(OUTPUTS_MANIFEST);
        fs::write(&path, text + "\n").map_err(runtime)?;
        self.files.clear();
        println!("wrote {}", path.display());
        Ok(())
    }
}

/// A pair edge-padded to extents divisible by 16, with its original size.
pub struct Padded {
    pub pair: ImagePair,
    pub h: usize,
    pub w: usize,
}

impl Padded {
    pub fn new(pair: &ImagePair) -> CliResult<Self> {
        let (h, w) = (pair.height(), pair.width());
        let padded = ImagePair::new(
            pair.id.clone(),
            pad_to_multiple(&pair.ir, 16)?,
            pad_to_multiple(&pair.vis_y, 16)?,
        )?;
        Ok(Self { pair: padded, h, w })
    }

    pub fn is_padded(&self) -> bool {
        self.pair.height() != self.h || self.pair.width() != self.w
    }

    pub fn crop(&self, t: &Tensor) -> CliResult<Tensor> {
        Ok(crop_to(t, self.h, self.w)?)
    }
}

pub fn pad_all(pairs: &[ImagePair]) -> CliResult<Vec<Padded>> {
    pairs.iter().map(Padded::new).collect()
}
