use a2rnet::losses::{anti_attack_loss, base_loss, ssim, LossWeights};
use a2rnet::network::{arb_forward, build_model, drm_forward, forward, AttentionConfig, NetworkConfig};
use a2rnet::tensor::{grad_check, grad_check_multi, Tape, Tensor, Var};
use a2rnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::run::{CliError, CliResult};

const TOLERANCE: f64 = 1e-4;
const FORWARD_TOLERANCE: f64 = 1e-3;

type Op = fn(&mut Tape<'_>, &[Var], u64) -> Result<Var>;
type Shapes = fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, lo, hi, &mut rng)
}

/// `Σ out ⊙ r` with a fixed random `r`.
fn project(t: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let r = t.input(uniform(&shape, seed ^ 0x5eed, -1.0, 1.0));
    let p = t.mul(v, r)?;
    Ok(t.sum_all(p))
}

fn n(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = vec![n(r, 1, 4), n(r, 1, 4)];
    vec![s.clone(), s]
}

fn vector(r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![vec![n(r, 1, 6), 2]]
}

fn cube(r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![vec![n(r, 1, 3), n(r, 1, 4), n(r, 2, 4)]]
}

fn conv_shapes(r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (ci, co) = (n(r, 1, 3), n(r, 1, 3));
    vec![vec![n(r, 1, 2), ci, n(r, 3, 6), n(r, 3, 6)], vec![co, ci, 3, 3], vec![co]]
}

fn primitives() -> Vec<(&'static str, Op, Shapes)> {
    vec![
        ("add", |t, v, s| { let y = t.add(v[0], v[1])?; project(t, y, s) }, pair),
        ("sub", |t, v, s| { let y = t.sub(v[0], v[1])?; project(t, y, s) }, pair),
        ("mul", |t, v, s| { let y = t.mul(v[0], v[1])?; project(t, y, s) }, pair),
        ("div", |t, v, s| { let d = t.add_scalar(v[1], 3.0); let y = t.div(v[0], d)?; project(t, y, s) }, pair),
        ("neg", |t, v, s| { let y = t.neg(v[0]); project(t, y, s) }, vector),
        ("scale", |t, v, s| { let y = t.scale(v[0], -1.7); project(t, y, s) }, vector),
        ("add_scalar", |t, v, s| { let y = t.add_scalar(v[0], 0.25); project(t, y, s) }, vector),
        ("leaky_relu", |t, v, s| { let y = t.leaky_relu(v[0], 0.2); project(t, y, s) }, vector),
        ("sigmoid", |t, v, s| { let y = t.sigmoid(v[0]); project(t, y, s) }, vector),
        ("pow", |t, v, s| { let a = t.abs(v[0]); let a = t.add_scalar(a, 0.5); let y = t.pow(a, 2.5); project(t, y, s) }, vector),
        ("abs", |t, v, s| { let y = t.abs(v[0]); project(t, y, s) }, vector),
        ("sqrt", |t, v, s| { let a = t.mul(v[0], v[0])?; let a = t.add_scalar(a, 0.3); let y = t.sqrt(a); project(t, y, s) }, vector),
        ("clamp_min", |t, v, s| { let y = t.clamp_min(v[0], -0.3); project(t, y, s) }, vector),
        ("sum", |t, v, s| { let y = t.sum(v[0], &[1])?; project(t, y, s) }, cube),
        ("mean", |t, v, s| { let y = t.mean(v[0], &[0, 2])?; project(t, y, s) }, cube),
        ("var", |t, v, s| { let y = t.var(v[0], &[2])?; project(t, y, s) }, cube),
        ("expand", |t, v, s| { let sh = t.shape(v[0]).to_vec(); let y = t.expand(v[0], &[sh[0], 3, sh[2]])?; project(t, y, s) }, |r| vec![vec![n(r, 1, 3), 1, n(r, 1, 3)]]),
        ("reshape", |t, v, s| { let k: usize = t.shape(v[0]).iter().product(); let y = t.reshape(v[0], &[k])?; project(t, y, s) }, |r| vec![vec![n(r, 1, 3), n(r, 1, 4)]]),
        ("transpose", |t, v, s| { let y = t.transpose(v[0])?; project(t, y, s) }, |r| vec![vec![n(r, 1, 4), n(r, 1, 4)]]),
        ("matmul", |t, v, s| { let y = t.matmul(v[0], v[1])?; project(t, y, s) }, |r| { let (m, k, c) = (n(r, 1, 4), n(r, 1, 4), n(r, 1, 4)); vec![vec![m, k], vec![k, c]] }),
        ("conv2d/stride1", |t, v, s| { let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; project(t, y, s) }, conv_shapes),
        ("conv2d/stride2", |t, v, s| { let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; project(t, y, s) }, conv_shapes),
        ("pixel_shuffle", |t, v, s| { let y = t.pixel_shuffle(v[0], 2)?; project(t, y, s) }, |r| vec![vec![n(r, 1, 2), 4 * n(r, 1, 2), n(r, 1, 3), n(r, 1, 3)]]),
        ("pixel_unshuffle", |t, v, s| { let y = t.pixel_unshuffle(v[0], 2)?; project(t, y, s) }, |r| vec![vec![n(r, 1, 2), n(r, 1, 2), 2 * n(r, 1, 3), 2 * n(r, 1, 3)]]),
        ("concat", |t, v, s| { let y = t.concat(&[v[0], v[1]], 1)?; project(t, y, s) }, |r| vec![vec![2, n(r, 1, 3), 3], vec![2, n(r, 1, 3), 3]]),
        ("crop", |t, v, s| { let y = t.crop(v[0], &[1, 0, 1], &[2, 2, 1])?; project(t, y, s) }, |r| vec![vec![3, n(r, 2, 4), 3]]),
        ("softmax", |t, v, s| { let y = t.softmax(v[0], (s % 2) as usize)?; project(t, y, s) }, |r| vec![vec![n(r, 1, 5), n(r, 1, 5)]]),
    ]
}

fn composites() -> Result<Vec<(&'static str, f64, f64)>> {
    let attn = AttentionConfig::default();
    let net = NetworkConfig::with_base(4);
    let params = build_model(&net, 11)?;
    let w = LossWeights::default();
    let img = |s| uniform(&[1, 1, 16, 16], s, 0.0, 1.0);

    let arb = grad_check(
        |t, v| {
            let b = params.bind(t, false);
            let y = arb_forward(t, &b, "drm1.arb0", v, &attn)?;
            project(t, y, 1)
        },
        &uniform(&[1, 16, 2, 2], 6, -1.0, 1.0),
        1e-5,
    )?;
    let drm = grad_check(
        |t, v| {
            let b = params.bind(t, false);
            let y = drm_forward(t, &b, "drm1", v, &attn)?;
            project(t, y, 2)
        },
        &uniform(&[1, 4, 4, 4], 9, -1.0, 1.0),
        1e-5,
    )?;
    let ssim_err = grad_check_multi(|t, v| ssim(t, v[0], v[1], &w), &[img(1), img(2)], 1e-4)?.max_rel_err();
    let base = grad_check_multi(|t, v| base_loss(t, v[0], v[1], &w), &[img(3), img(4)], 1e-4)?.max_rel_err();
    let anti = grad_check_multi(
        |t, v| anti_attack_loss(t, v[0], v[1], v[2], &w),
        &[img(5), img(6), img(7)],
        1e-4,
    )?
    .max_rel_err();
    let vis = img(31);
    let full = grad_check(
        |t, v| {
            let b = params.bind(t, false);
            let vis_v = t.input(vis.clone());
            let y = forward(t, &b, &net, v, vis_v)?;
            let half = t.constant(&[1, 1, 16, 16], 0.5);
            let d = t.sub(y, half)?;
            let sq = t.mul(d, d)?;
            Ok(t.mean_all(sq))
        },
        &img(30),
        1e-5,
    )?;
    Ok(vec![
        ("arb", arb, TOLERANCE),
        ("drm", drm, TOLERANCE),
        ("ssim", ssim_err, TOLERANCE),
        ("base_loss", base, TOLERANCE),
        ("anti_attack_loss", anti, TOLERANCE),
        ("forward", full, FORWARD_TOLERANCE),
    ])
}

pub fn run(seeds: u64, step: f64) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::Validation("--seeds must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for (name, f, shapes) in primitives() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes(&mut rng)
                .iter()
                .enumerate()
                .map(|(i, s)| uniform(s, seed * 31 + i as u64, -1.0, 1.0))
                .collect();
            let report = grad_check_multi(|t, v| f(t, v, seed), &inputs, step)?;
            worst = worst.max(report.max_rel_err());
        }
        rows.push((name, worst, TOLERANCE));
    }
    rows.extend(composites()?);

    let mut failed = 0;
    println!("{:<18} {:>12} {:>10}", "op", "max_rel_err", "tolerance");
    for (name, err, tol) in &rows {
        let ok = *err <= *tol;
        if !ok {
            failed += 1;
        }
        println!("{name:<18} {err:>12.3e} {tol:>10.0e} {}", if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} operations exceed tolerance", rows.len())));
    }
    println!("all {} operations within tolerance", rows.len());
    Ok(())
}
