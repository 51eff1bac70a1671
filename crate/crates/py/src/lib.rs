//! Python bindings. Images cross the boundary as lists of rows of floats
//! in `[0, 1]`.

use std::path::PathBuf;

use a2rnet::adversary::{pgd_attack, PerturbationBudget};
use a2rnet::config::RunConfig;
use a2rnet::image_io::{self, ImagePair};
use a2rnet::labels::{self, LabelRecipe};
use a2rnet::losses::{self, LossWeights};
use a2rnet::network::{build_model, fuse, validate_params, ModelParams, NetworkConfig};
use a2rnet::training::{self, TrainConfig};
use a2rnet::{metrics, synthetic, Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Image = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    if e.is_validation() || matches!(e, Error::UndefinedCorrelation(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_tensor(img: &Image) -> PyResult<Tensor> {
    let h = img.len();
    let w = img.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || img.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty list of equal-length rows"));
    }
    Tensor::new(vec![1, 1, h, w], img.concat()).map_err(err)
}

fn to_image(t: &Tensor) -> Image {
    let w = t.shape()[t.shape().len() - 1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn pair(ir: &Image, vis: &Image) -> PyResult<ImagePair> {
    ImagePair::new("py", to_tensor(ir)?, to_tensor(vis)?).map_err(err)
}

fn recipe(mode: &str, w_ir: f64, seed: u64, epochs: usize) -> PyResult<LabelRecipe> {
    match mode {
        "analytic_max" => Ok(LabelRecipe::analytic_max()),
        "analytic_weighted" => Ok(LabelRecipe::analytic_weighted(w_ir)),
        "learned_cnn" => Ok(LabelRecipe::learned(seed, epochs)),
        _ => Err(PyValueError::new_err(format!("unknown label mode `{mode}`"))),
    }
}

/// Fusion network parameters together with their architecture.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    net: NetworkConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network.
    #[new]
    #[pyo3(signature = (base_channels = 16, seed = 0))]
    fn new(base_channels: usize, seed: u64) -> PyResult<Self> {
        let net = NetworkConfig::with_base(base_channels);
        let params = build_model(&net, seed).map_err(err)?;
        Ok(Self { params, net })
    }

    #[staticmethod]
    #[pyo3(signature = (path, base_channels = 16))]
    fn load(path: PathBuf, base_channels: usize) -> PyResult<Self> {
        let net = NetworkConfig::with_base(base_channels);
        let params = ModelParams::load(&path).map_err(err)?;
        validate_params(&net, &params).map_err(err)?;
        Ok(Self { params, net })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(err)
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.net.base_channels
    }

    /// Number of scalar parameters.
    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Fused luminance of a registered pair; extents must be multiples of 16.
    fn fuse(&self, ir: Image, vis: Image) -> PyResult<Image> {
        let p = pair(&ir, &vis)?;
        Ok(to_image(&fuse(&self.params, &self.net, &p.ir, &p.vis_y).map_err(err)?))
    }

    /// Dual-input PGD. Returns `(ir + δ_ir, vis + δ_vis, loss_trace)`.
    #[pyo3(signature = (ir, vis, label, epsilon = 4.0 / 255.0, alpha = 1.0 / 255.0, iterations = 20))]
    fn attack(
        &self,
        ir: Image,
        vis: Image,
        label: Image,
        epsilon: f64,
        alpha: f64,
        iterations: usize,
    ) -> PyResult<(Image, Image, Vec<f64>)> {
        let p = pair(&ir, &vis)?;
        let budget = PerturbationBudget {
            epsilon,
            alpha,
            iterations,
            ..PerturbationBudget::default()
        };
        let label = to_tensor(&label)?;
        let adv = pgd_attack(&self.params, &self.net, &p, &label, &budget, &LossWeights::default())
            .map_err(err)?;
        let (a_ir, a_vis) = adv.attacked(&p).map_err(err)?;
        Ok((to_image(&a_ir), to_image(&a_vis), adv.loss_trace))
    }
}

#[pyfunction]
fn load_pgm(path: PathBuf) -> PyResult<Image> {
    Ok(to_image(&image_io::load_pgm(&path).map_err(err)?))
}

#[pyfunction]
fn save_pgm(path: PathBuf, image: Image) -> PyResult<()> {
    image_io::save_pgm(&path, &to_tensor(&image)?).map_err(err)
}

/// Writes `count` synthetic pairs as PGM files plus `manifest.csv`.
#[pyfunction]
#[pyo3(signature = (dir, seed = 0, count = 8, height = 32, width = 32))]
fn write_synthetic_dataset(dir: PathBuf, seed: u64, count: usize, height: usize, width: usize) -> PyResult<PathBuf> {
    image_io::write_dataset(&dir, &synthetic::dataset(seed, count, height, width)).map_err(err)
}

/// One synthetic `(ir, vis)` scene.
#[pyfunction]
#[pyo3(signature = (seed, height = 32, width = 32))]
fn synthetic_pair(seed: u64, height: usize, width: usize) -> (Image, Image) {
    let p = synthetic::scene(seed, height, width);
    (to_image(&p.ir), to_image(&p.vis_y))
}

#[pyfunction]
#[pyo3(signature = (ir, vis, mode = "analytic_max", w_ir = 0.5, seed = 0, epochs = 150))]
fn generate_label(ir: Image, vis: Image, mode: &str, w_ir: f64, seed: u64, epochs: usize) -> PyResult<Image> {
    let label = labels::generate_label(&pair(&ir, &vis)?, &recipe(mode, w_ir, seed, epochs)?).map_err(err)?;
    Ok(to_image(&label))
}

/// `β·MSE + γ·(1 − SSIM)` with the default weights.
#[pyfunction]
fn base_loss(fused: Image, label: Image) -> PyResult<f64> {
    losses::base_loss_value(&to_tensor(&fused)?, &to_tensor(&label)?, &LossWeights::default()).map_err(err)
}

#[pyfunction]
fn entropy(image: Image) -> PyResult<f64> {
    metrics::entropy(&to_tensor(&image)?).map_err(err)
}

#[pyfunction]
fn std_dev(image: Image) -> PyResult<f64> {
    Ok(metrics::std_dev(&to_tensor(&image)?))
}

#[pyfunction]
fn psnr(fused: Image, reference: Image) -> PyResult<f64> {
    metrics::psnr(&to_tensor(&fused)?, &to_tensor(&reference)?).map_err(err)
}

#[pyfunction]
fn pearson_r(a: Image, b: Image) -> PyResult<f64> {
    metrics::pearson_r(&to_tensor(&a)?, &to_tensor(&b)?).map_err(err)
}

#[pyfunction]
fn signal_distance(a: Image, b: Image) -> PyResult<f64> {
    let ma = metrics::signal_map(&to_tensor(&a)?).map_err(err)?;
    let mb = metrics::signal_map(&to_tensor(&b)?).map_err(err)?;
    metrics::waveform_distance(&ma, &mb).map_err(err)
}

/// Trains on a manifest with the default run configuration plus
/// `section.key=value` overrides, writing the run into `out`. Returns the
/// per-epoch `(clean_loss, adversarial_loss)`.
#[pyfunction]
#[pyo3(signature = (manifest, out, overrides = Vec::new()))]
fn train(py: Python<'_>, manifest: PathBuf, out: PathBuf, overrides: Vec<String>) -> PyResult<Vec<(f64, f64)>> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&overrides).map_err(err)?;
    let pairs = image_io::load_manifest(&manifest)
        .and_then(|m| m.load_pairs())
        .map_err(err)?;
    let recipe = cfg.labels.clone();
    let (net, tcfg): (NetworkConfig, TrainConfig) = (cfg.network, cfg.train);
    let run = py
        .detach(|| {
            let labels = labels::labels_for(&pairs, &recipe, None, |_| {})?;
            training::train(&net, &tcfg, &pairs, &labels, Some(&out))
        })
        .map_err(err)?;
    Ok(run.log.iter().map(|e| (e.mean_clean_loss, e.mean_adv_loss)).collect())
}

#[pymodule]
#[pyo3(name = "a2rnet")]
fn a2rnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(save_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(generate_label, m)?)?;
    m.add_function(wrap_pyfunction!(base_loss, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(std_dev, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(signal_distance, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
