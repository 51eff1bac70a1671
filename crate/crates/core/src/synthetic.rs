//! Procedural infrared/visible scene pairs for tests and demos.
//!
//! Each scene has a few warm targets that are bright in the infrared channel
//! and dim or camouflaged in the visible channel, over a cool infrared
//! background and a textured visible background with edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::ImagePair;
use crate::tensor::Tensor;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    heat: f64,
}

pub fn scene(seed: u64, h: usize, w: usize) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);

    let blobs: Vec<Blob> = (0..rng.random_range(1..=3))
        .map(|_| Blob {
            cy: rng.random_range(0.15..0.85) * hf,
            cx: rng.random_range(0.15..0.85) * wf,
            ry: rng.random_range(0.06..0.18) * hf,
            rx: rng.random_range(0.04..0.14) * wf,
            heat: rng.random_range(0.45..0.75),
        })
        .collect();

    let ir_base = rng.random_range(0.05..0.25);
    let ir_tilt = rng.random_range(-0.1..0.1);
    let vis_base = rng.random_range(0.3..0.6);
    let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU / wf;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let stripe = rng.random_range(0.05..0.2);
    let (ry0, ry1) = {
        let a = rng.random_range(0.0..0.6) * hf;
        (a, a + rng.random_range(0.2..0.4) * hf)
    };
    let (rx0, rx1) = {
        let a = rng.random_range(0.0..0.6) * wf;
        (a, a + rng.random_range(0.2..0.4) * wf)
    };
    let rect_shift = rng.random_range(-0.25..0.25);

    let mut ir = Vec::with_capacity(h * w);
    let mut vis = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let heat: f64 = blobs
                .iter()
                .map(|b| {
                    let d = ((y - b.cy) / b.ry).powi(2) + ((x - b.cx) / b.rx).powi(2);
                    b.heat * (-0.5 * d).exp()
                })
                .sum();
            let t = ir_base + ir_tilt * y / hf + heat + rng.random_range(-0.02..0.02);
            ir.push(t.clamp(0.0, 1.0));

            let phase = freq * (x * angle.cos() + y * angle.sin());
            let mut v = vis_base + stripe * phase.sin();
            if (ry0..ry1).contains(&y) && (rx0..rx1).contains(&x) {
                v += rect_shift;
            }
            v -= 0.6 * heat * vis_base;
            v += rng.random_range(-0.03..0.03);
            vis.push(v.clamp(0.0, 1.0));
        }
    }
    ImagePair {
        id: format!("syn{seed:06}"),
        ir: Tensor::new(vec![1, 1, h, w], ir).expect("scene shape"),
        vis_y: Tensor::new(vec![1, 1, h, w], vis).expect("scene shape"),
        vis_cbcr: None,
    }
}

/// `count` scenes whose seeds are drawn from `seed`.
pub fn dataset(seed: u64, count: usize, h: usize, w: usize) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut pair = scene(rng.random(), h, w);
            pair.id = format!("syn{seed}-{i:03}");
            pair
        })
        .collect()
}
