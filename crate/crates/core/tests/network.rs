use a2rnet::network::{
    arb_forward, attend, build_model, drm_forward, forward, fuse, init_scale, kernel_attention,
    kernel_feature_map, validate_params, AttentionConfig, AttentionMode, ModelParams,
    NetworkConfig, SigmaMode,
};
use a2rnet::tensor::{grad_check, Tape, Tensor};
use a2rnet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, lo, hi, &mut rng)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn zero_param(p: &mut ModelParams, name: &str) {
    p.get_mut(name).unwrap().data_mut().fill(0.0);
}

#[test]
fn build_model_is_deterministic() {
    let cfg = NetworkConfig::with_base(8);
    let a = build_model(&cfg, 42).unwrap();
    let b = build_model(&cfg, 42).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = build_model(&cfg, 43).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
    assert_eq!(a.init_seed, Some(42));
}

#[test]
fn base_channels_must_be_divisible_by_four() {
    for bad in [0, 2, 5, 6, 10] {
        let err = build_model(&NetworkConfig::with_base(bad), 0).unwrap_err();
        assert!(err.is_validation(), "{err}");
        assert!(err.to_string().contains("divisible by 4"));
    }
}

/// Counts parameters by walking the layer topology independently of the
/// library's layer table.
fn walk_param_count(base: usize) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let width = |level: u32| base * 2usize.pow(level - 1);
    let mut total = 0;
    let mut c = 2;
    for level in 1..=4 {
        total += conv(c, width(level), 3) + conv(width(level), width(level), 3);
        total += conv(width(level), width(level), 3);
        c = width(level);
    }
    total += conv(c, 16 * base, 3) + conv(16 * base, 16 * base, 3);
    c = 16 * base;
    for level in (1..=4).rev() {
        let w = width(level);
        total += conv(c, 4 * w, 1);
        total += conv(2 * w, w, 3) + conv(w, w, 3);
        c = w;
    }
    total += conv(c, 1, 1);
    for level in [1, 3] {
        let ch = 4 * width(level);
        let arb = conv(ch, 3 * ch, 1) + conv(ch, ch, 1) + conv(ch, 2 * ch, 1) + conv(2 * ch, ch, 3);
        total += 5 * arb;
    }
    total
}

#[test]
fn parameter_count_matches_shape_walker() {
    for base in [4, 8, 16] {
        let p = build_model(&NetworkConfig::with_base(base), 0).unwrap();
        assert_eq!(p.count(), walk_param_count(base), "base {base}");
    }
    assert_eq!(walk_param_count(16), 10_504_801);
}

#[test]
fn init_is_fan_in_scaled_with_zero_biases() {
    let p = build_model(&NetworkConfig::with_base(4), 9).unwrap();
    for (name, t) in p.iter() {
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let fan_in = (t.shape()[1] * t.shape()[2] * t.shape()[3]) as f64;
            let layer = name.trim_end_matches(".w");
            let bound = init_scale(layer) * (2.0 / 1.04f64).sqrt() * (3.0 / fan_in).sqrt();
            assert!(t.max_abs() <= bound, "{name}");
            assert!(t.max_abs() > 0.3 * bound, "{name}");
        }
    }
}

#[test]
fn validate_params_rejects_mismatched_checkpoints() {
    let cfg = NetworkConfig::with_base(4);
    let p = build_model(&cfg, 0).unwrap();
    validate_params(&cfg, &p).unwrap();
    assert!(validate_params(&NetworkConfig::with_base(8), &p).is_err());
}

fn fixed(order: usize, sigma: f64) -> AttentionConfig {
    AttentionConfig {
        taylor_order: order,
        sigma_mode: SigmaMode::Fixed(sigma),
        ..AttentionConfig::default()
    }
}

#[test]
fn feature_map_at_the_mean_is_the_first_basis_vector() {
    let x = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.5, -1.5, -1.5, -1.5]).unwrap();
    for cfg in [AttentionConfig::default(), fixed(3, 0.7)] {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let m = kernel_feature_map(&mut tape, v, &cfg).unwrap();
        assert_eq!(tape.shape(m), &[2 * (cfg.taylor_order + 1), 3]);
        let out = tape.value(m);
        assert!(out[..6].iter().all(|&v| v == 1.0));
        assert!(out[6..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_order_feature_map_is_constant() {
    let x = rand_t(&[3, 5], 1, -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let m = kernel_feature_map(&mut tape, v, &fixed(0, 1.0)).unwrap();
    assert_eq!(tape.shape(m), &[3, 5]);
    assert!(tape.value(m).iter().all(|&v| v == 1.0));
}

/// `Σ_{i≤n} ((q−q̄)(k−k̄))^{2i} / (σ^i · i!)`, term by term.
fn kernel_series(dq: f64, dk: f64, sigma: f64, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..=n {
        let fact: f64 = (1..=i).map(|j| j as f64).product();
        total += (dq * dk).powi(2 * i as i32) / (sigma.powi(i as i32) * fact);
    }
    total
}

#[test]
fn feature_inner_products_match_truncated_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=AttentionConfig::MAX_TAYLOR_ORDER);
        let sigma = rng.random_range(0.2..3.0);
        let q = Tensor::uniform(&[1, 3], -1.5, 1.5, &mut rng);
        let k = Tensor::uniform(&[1, 3], -1.5, 1.5, &mut rng);
        let cfg = fixed(n, sigma);
        let mut tape = Tape::new();
        let (vq, vk) = (tape.leaf(&q), tape.leaf(&k));
        let mq = kernel_feature_map(&mut tape, vq, &cfg).unwrap();
        let mk = kernel_feature_map(&mut tape, vk, &cfg).unwrap();
        let (fq, fk) = (tape.value(mq), tape.value(mk));
        let col = 0;
        let dot: f64 = (0..=n).map(|i| fq[i * 3 + col] * fk[i * 3 + col]).sum();
        let q_mean = q.data().iter().sum::<f64>() / 3.0;
        let k_mean = k.data().iter().sum::<f64>() / 3.0;
        let oracle = kernel_series(q.data()[col] - q_mean, k.data()[col] - k_mean, sigma, n);
        worst = worst.max(rel(dot, oracle));
    }
    assert!(worst <= 1e-10, "worst relative error {worst}");
}

#[test]
fn per_tensor_variance_sigma_is_floored() {
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0 + 1e-9]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let m = kernel_feature_map(&mut tape, v, &AttentionConfig::default()).unwrap();
    assert!(tape.value(m).iter().all(|v| v.is_finite()));
}

#[test]
fn phi_normalized_zero_order_averages_values() {
    let cfg = AttentionConfig {
        taylor_order: 0,
        mode: AttentionMode::PhiNormalized,
        ..AttentionConfig::default()
    };
    let (c, n) = (3, 7);
    let q = rand_t(&[c, n], 1, -1.0, 1.0);
    let k = rand_t(&[c, n], 2, -1.0, 1.0);
    let v = rand_t(&[c, n], 3, -1.0, 1.0);
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
    let out = attend(&mut tape, vq, vk, vv, &cfg).unwrap();
    let out = tape.value(out);
    for ch in 0..c {
        let mean = v.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64;
        for t in 0..n {
            assert!(rel(out[ch * n + t], mean) <= 1e-8, "channel {ch} token {t}");
        }
    }
}

#[test]
fn dense_reference_equals_linear_order() {
    for seed in 0..5 {
        let cfg = AttentionConfig {
            mode: AttentionMode::DenseReference,
            ..AttentionConfig::default()
        };
        let (c, n) = (4, 9);
        let q = rand_t(&[c, n], seed, -1.0, 1.0);
        let k = rand_t(&[c, n], seed + 100, -1.0, 1.0);
        let v = rand_t(&[c, n], seed + 200, -1.0, 1.0);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let dense = attend(&mut tape, vq, vk, vv, &cfg).unwrap();
        let mq = kernel_feature_map(&mut tape, vq, &cfg).unwrap();
        let mk = kernel_feature_map(&mut tape, vk, &cfg).unwrap();
        let mkt = tape.transpose(mk).unwrap();
        let kv = tape.matmul(vv, mkt).unwrap();
        let linear = tape.matmul(kv, mq).unwrap();
        for (a, b) in tape.value(dense).iter().zip(tape.value(linear)) {
            assert!(rel(*a, *b) <= 1e-10, "{a} vs {b}");
        }
    }
}

fn attention_macs(c: usize, hw: usize) -> f64 {
    let cfg = AttentionConfig::default();
    let mut tape = Tape::new();
    let q = tape.input(rand_t(&[c, hw], 1, -1.0, 1.0));
    let k = tape.input(rand_t(&[c, hw], 2, -1.0, 1.0));
    let v = tape.input(rand_t(&[c, hw], 3, -1.0, 1.0));
    let before = tape.mac_count();
    attend(&mut tape, q, k, v, &cfg).unwrap();
    (tape.mac_count() - before) as f64
}

#[test]
fn softmax_context_cost_is_linear_in_tokens() {
    let xs = [64.0, 256.0, 1024.0];
    let ys: Vec<f64> = xs.iter().map(|&n| attention_macs(8, n as usize)).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    assert!(r2 >= 0.99, "R² = {r2}");
    let ratio = attention_macs(8, 512) / attention_macs(8, 256);
    assert!((1.5..=2.5).contains(&ratio), "doubling ratio {ratio}");
}

fn arb_params() -> (ModelParams, usize) {
    // drm1 at base 4 works on 4·4 = 16 channels.
    (build_model(&NetworkConfig::with_base(4), 11).unwrap(), 16)
}

#[test]
fn arb_with_zero_output_layers_is_identity() {
    let (mut p, c) = arb_params();
    zero_param(&mut p, "drm1.arb0.proj.w");
    zero_param(&mut p, "drm1.arb0.ffn2.w");
    let cfg = AttentionConfig::default();
    let x = rand_t(&[2, c, 3, 5], 4, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let v = tape.leaf(&x);
    let out = arb_forward(&mut tape, &bound, "drm1.arb0", v, &cfg).unwrap();
    assert_eq!(tape.shape(out), x.shape());
    assert_eq!(tape.value(out), x.data());
}

#[test]
fn arb_preserves_shape() {
    let (p, c) = arb_params();
    let cfg = AttentionConfig::default();
    for (h, w) in [(1, 1), (2, 7), (5, 4)] {
        let x = rand_t(&[1, c, h, w], 5, -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let v = tape.leaf(&x);
        let out = arb_forward(&mut tape, &bound, "drm1.arb0", v, &cfg).unwrap();
        assert_eq!(tape.shape(out), &[1, c, h, w]);
    }
}

#[test]
fn arb_input_gradient_matches_finite_differences() {
    let (p, c) = arb_params();
    let cfg = AttentionConfig::default();
    let x = rand_t(&[1, c, 2, 2], 6, -1.0, 1.0);
    let err = grad_check(
        |tape, v| {
            let bound = p.bind(tape, false);
            let out = arb_forward(tape, &bound, "drm1.arb0", v, &cfg)?;
            Ok(tape.sum_all(out))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn drm_with_zero_branches_doubles_its_input() {
    let (mut p, _) = arb_params();
    for k in 0..NetworkConfig::DRM_BLOCKS {
        zero_param(&mut p, &format!("drm1.arb{k}.proj.w"));
        zero_param(&mut p, &format!("drm1.arb{k}.ffn2.w"));
    }
    let x = rand_t(&[1, 4, 8, 6], 7, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let v = tape.leaf(&x);
    let out = drm_forward(&mut tape, &bound, "drm1", v, &AttentionConfig::default()).unwrap();
    let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.value(out), doubled.as_slice());
}

#[test]
fn drm_shapes_and_odd_extents() {
    // drm3 at base 4 takes 16-channel skips.
    let p = build_model(&NetworkConfig::with_base(4), 3).unwrap();
    let cfg = AttentionConfig::default();
    let x = rand_t(&[1, 16, 8, 8], 8, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let v = tape.leaf(&x);
    let out = drm_forward(&mut tape, &bound, "drm3", v, &cfg).unwrap();
    assert_eq!(tape.shape(out), &[1, 16, 8, 8]);

    let odd = rand_t(&[1, 16, 8, 7], 8, -1.0, 1.0);
    let v = tape.leaf(&odd);
    let err = drm_forward(&mut tape, &bound, "drm3", v, &cfg).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}

#[test]
fn drm_input_gradient_matches_finite_differences() {
    let (p, _) = arb_params();
    let cfg = AttentionConfig::default();
    let x = rand_t(&[1, 4, 4, 4], 9, -1.0, 1.0);
    let err = grad_check(
        |tape, v| {
            let bound = p.bind(tape, false);
            let out = drm_forward(tape, &bound, "drm1", v, &cfg)?;
            let r = tape.input(rand_t(&[1, 4, 4, 4], 99, -1.0, 1.0));
            let out = tape.mul(out, r)?;
            Ok(tape.sum_all(out))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max rel err {err}");
}

fn pair_inputs(seed: u64, n: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    (
        rand_t(&[n, 1, h, w], seed, 0.0, 1.0),
        rand_t(&[n, 1, h, w], seed + 1, 0.0, 1.0),
    )
}

#[test]
fn forward_is_bounded_and_deterministic() {
    let cfg = NetworkConfig::with_base(4);
    let p = build_model(&cfg, 5).unwrap();
    let (ir, vis) = pair_inputs(10, 2, 16, 32);
    let a = fuse(&p, &cfg, &ir, &vis).unwrap();
    let b = fuse(&p, &cfg, &ir, &vis).unwrap();
    assert_eq!(a.shape(), &[2, 1, 16, 32]);
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn batched_forward_matches_per_sample_forward() {
    let cfg = NetworkConfig::with_base(4);
    let p = build_model(&cfg, 5).unwrap();
    let (ir, vis) = pair_inputs(12, 3, 16, 16);
    let batched = fuse(&p, &cfg, &ir, &vis).unwrap().unstack_batch();
    for (k, (i, v)) in ir.unstack_batch().iter().zip(vis.unstack_batch()).enumerate() {
        let single = fuse(&p, &cfg, i, &v).unwrap();
        for (a, b) in single.data().iter().zip(batched[k].data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_rejects_extents_not_divisible_by_sixteen() {
    let cfg = NetworkConfig::with_base(4);
    let p = build_model(&cfg, 5).unwrap();
    let (ir, vis) = pair_inputs(1, 1, 20, 16);
    let err = fuse(&p, &cfg, &ir, &vis).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(err.to_string().contains("pad to a multiple of 16"), "{err}");
    let (ir, _) = pair_inputs(1, 1, 16, 16);
    let (_, vis) = pair_inputs(1, 1, 32, 16);
    assert!(fuse(&p, &cfg, &ir, &vis).is_err());
}

#[test]
fn forward_input_gradient_matches_finite_differences() {
    let cfg = NetworkConfig::with_base(4);
    let p = build_model(&cfg, 21).unwrap();
    let (ir, vis) = pair_inputs(30, 1, 16, 16);
    let err = grad_check(
        |tape, v| -> Result<_> {
            let bound = p.bind(tape, false);
            let vis_v = tape.input(vis.clone());
            let out = forward(tape, &bound, &cfg, v, vis_v)?;
            let half = tape.constant(&[1, 1, 16, 16], 0.5);
            let d = tape.sub(out, half)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean_all(sq))
        },
        &ir,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-3, "max rel err {err}");
}

#[test]
fn every_parameter_and_input_receives_a_gradient() {
    let cfg = NetworkConfig::with_base(4);
    let mut p = build_model(&cfg, 2).unwrap();
    let (ir, vis) = pair_inputs(40, 1, 16, 16);
    let (ir, vis) = (ir.with_grad(), vis.with_grad());
    let grads;
    let bound;
    let (gi, gv);
    {
        let mut tape = Tape::new();
        bound = p.bind(&mut tape, true);
        let (a, b) = (tape.leaf(&ir), tape.leaf(&vis));
        let out = forward(&mut tape, &bound, &cfg, a, b).unwrap();
        let loss = tape.mean_all(out);
        grads = tape.backward(loss).unwrap();
        gi = grads.get(a).map(<[f64]>::to_vec);
        gv = grads.get(b).map(<[f64]>::to_vec);
    }
    p.zero_grads();
    p.accumulate_grads(&bound, &grads).unwrap();
    for (name, t) in p.iter() {
        assert!(t.grad().is_some(), "no gradient for {name}");
    }
    assert!(gi.unwrap().iter().any(|&g| g != 0.0));
    assert!(gv.unwrap().iter().any(|&g| g != 0.0));
}

#[test]
fn kernel_attention_keeps_sample_independence() {
    let (p, c) = arb_params();
    let cfg = AttentionConfig::default();
    let x = rand_t(&[2, c, 2, 3], 50, -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let v = tape.leaf(&x);
    let both = kernel_attention(&mut tape, &bound, "drm1.arb0", v, &cfg).unwrap();
    let both = tape.value(both).to_vec();
    let first = x.unstack_batch().remove(0);
    let v1 = tape.leaf(&first);
    let one = kernel_attention(&mut tape, &bound, "drm1.arb0", v1, &cfg).unwrap();
    let one = tape.value(one);
    for (a, b) in one.iter().zip(&both[..one.len()]) {
        assert!((a - b).abs() <= 1e-12);
    }
}
