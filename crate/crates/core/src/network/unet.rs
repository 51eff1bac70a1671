use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{conv, drm_forward};
use super::config::NetworkConfig;
use super::params::{BoundParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One convolution layer of the network: `{name}.w` is
/// `c_out×c_in×k×k`, `{name}.b` has `c_out` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

fn layer(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        c_in,
        c_out,
        kernel,
    }
}

/// Encoder levels refined by a DRM on their skip connection.
pub const DRM_LEVELS: [usize; 2] = [1, 3];

fn drm_layers(prefix: &str, c: usize, out: &mut Vec<LayerSpec>) {
    for k in 0..NetworkConfig::DRM_BLOCKS {
        let p = format!("{prefix}.arb{k}");
        out.push(layer(format!("{p}.qkv"), c, 3 * c, 1));
        out.push(layer(format!("{p}.proj"), c, c, 1));
        out.push(layer(format!("{p}.ffn1"), c, 2 * c, 1));
        out.push(layer(format!("{p}.ffn2"), 2 * c, c, 3));
    }
}

/// Every convolution in the network, in forward order.
pub fn layer_specs(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let levels = NetworkConfig::LEVELS;
    for k in 1..=levels {
        let c_in = if k == 1 { 2 } else { cfg.width(k - 1) };
        let w = cfg.width(k);
        specs.push(layer(format!("enc{k}.conv1"), c_in, w, 3));
        specs.push(layer(format!("enc{k}.conv2"), w, w, 3));
        specs.push(layer(format!("enc{k}.down"), w, w, 3));
    }
    let mid = cfg.width(levels + 1);
    specs.push(layer("mid.conv1", cfg.width(levels), mid, 3));
    specs.push(layer("mid.conv2", mid, mid, 3));
    for j in 1..=levels {
        let level = levels + 1 - j;
        let w = cfg.width(level);
        let prev = cfg.width(level + 1);
        specs.push(layer(format!("dec{j}.up"), prev, 4 * w, 1));
        specs.push(layer(format!("dec{j}.conv1"), 2 * w, w, 3));
        specs.push(layer(format!("dec{j}.conv2"), w, w, 3));
    }
    specs.push(layer("head", cfg.base_channels, 1, 1));
    for level in DRM_LEVELS {
        drm_layers(&format!("drm{level}"), 4 * cfg.width(level), &mut specs);
    }
    specs
}

/// Multiplier on the Kaiming bound for a layer. Attention projections and
/// the output layers of ARB residual branches start small, since the Taylor
/// features raise centred queries and keys to even powers.
pub fn init_scale(layer: &str) -> f64 {
    if layer.ends_with(".qkv") {
        0.3
    } else if layer.ends_with(".proj") || layer.ends_with(".ffn2") {
        0.1
    } else {
        1.0
    }
}

/// Kaiming-style fan-in scaled uniform kernels (LeakyReLU gain, see
/// [`init_scale`]), zero biases.
pub fn build_model(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = NetworkConfig::LEAKY_SLOPE;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let mut params = ModelParams::new();
    for spec in layer_specs(cfg) {
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let bound = init_scale(&spec.name) * gain * (3.0 / fan_in).sqrt();
        let w = Tensor::uniform(
            &[spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            -bound,
            bound,
            &mut rng,
        );
        params.insert(format!("{}.w", spec.name), w)?;
        params.insert(format!("{}.b", spec.name), Tensor::zeros(&[spec.c_out]))?;
    }
    params.init_seed = Some(seed);
    Ok(params)
}

/// Checks that `params` has exactly the tensors `cfg` calls for.
pub fn validate_params(cfg: &NetworkConfig, params: &ModelParams) -> Result<()> {
    cfg.validate()?;
    let specs = layer_specs(cfg);
    if params.len() != 2 * specs.len() {
        return Err(Error::validation(format!(
            "checkpoint has {} tensors, configuration expects {}",
            params.len(),
            2 * specs.len()
        )));
    }
    for spec in specs {
        let expect_w = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        for (suffix, shape) in [("w", &expect_w[..]), ("b", &[spec.c_out][..])] {
            let name = format!("{}.{suffix}", spec.name);
            match params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::validation(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::validation(format!("parameter `{name}` missing"))),
            }
        }
    }
    Ok(())
}

fn conv_act(tape: &mut Tape<'_>, bound: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, bound, name, x, stride, 1)?;
    Ok(tape.leaky_relu(y, NetworkConfig::LEAKY_SLOPE))
}

/// Copy-and-crop: the centred window of `skip` matching `like`'s extents.
fn copy_and_crop(tape: &mut Tape<'_>, skip: Var, like: Var) -> Result<Var> {
    let s = tape.shape(skip).to_vec();
    let t = tape.shape(like).to_vec();
    let offsets = [0, 0, (s[2] - t[2]) / 2, (s[3] - t[3]) / 2];
    tape.crop(skip, &offsets, &[s[0], s[1], t[2], t[3]])
}

/// Fuses `ir` and `vis` (each `n×1×h×w`, extents multiples of 16) into an
/// `n×1×h×w` image in (0, 1).
pub fn forward(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    cfg: &NetworkConfig,
    ir: Var,
    vis: Var,
) -> Result<Var> {
    let shape = tape.shape(ir).to_vec();
    if shape.len() != 4 || shape[1] != 1 || tape.shape(vis) != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "fusion inputs must both be n×1×h×w, got {:?} and {:?}",
            shape,
            tape.shape(vis)
        )));
    }
    let m = NetworkConfig::SIZE_MULTIPLE;
    if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::Dimension(format!(
            "input extents {}x{} must be positive multiples of {m}; pad to a multiple of {m} first",
            shape[2], shape[3]
        )));
    }
    let levels = NetworkConfig::LEVELS;
    let mut h = tape.concat(&[ir, vis], 1)?;
    let mut skips = Vec::with_capacity(levels);
    for k in 1..=levels {
        h = conv_act(tape, bound, &format!("enc{k}.conv1"), h, 1)?;
        h = conv_act(tape, bound, &format!("enc{k}.conv2"), h, 1)?;
        skips.push(h);
        h = conv_act(tape, bound, &format!("enc{k}.down"), h, 2)?;
    }
    h = conv_act(tape, bound, "mid.conv1", h, 1)?;
    h = conv_act(tape, bound, "mid.conv2", h, 1)?;
    for j in 1..=levels {
        let level = levels + 1 - j;
        let up = conv(tape, bound, &format!("dec{j}.up"), h, 1, 0)?;
        let up = tape.pixel_shuffle(up, 2)?;
        let up = tape.leaky_relu(up, NetworkConfig::LEAKY_SLOPE);
        let skip = skips[level - 1];
        let skip = if DRM_LEVELS.contains(&level) {
            drm_forward(tape, bound, &format!("drm{level}"), skip, &cfg.attention)?
        } else {
            copy_and_crop(tape, skip, up)?
        };
        h = tape.concat(&[up, skip], 1)?;
        h = conv_act(tape, bound, &format!("dec{j}.conv1"), h, 1)?;
        h = conv_act(tape, bound, &format!("dec{j}.conv2"), h, 1)?;
    }
    let logits = conv(tape, bound, "head", h, 1, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Inference without gradients.
pub fn fuse(params: &ModelParams, cfg: &NetworkConfig, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let irv = tape.leaf_as(ir, false);
    let visv = tape.leaf_as(vis, false);
    let out = forward(&mut tape, &bound, cfg, irv, visv)?;
    Ok(tape.to_tensor(out))
}
