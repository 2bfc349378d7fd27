//! Central finite-difference oracle for encoder gradients.
//!
//! The network is piecewise smooth (ReLU, max-pool, hinge), so a difference
//! quotient is only meaningful when both probes stay on the piece the base
//! point lies on. Each probe compares the activation pattern and hinge side
//! against the base point and halves the step on a crossing.

#![allow(dead_code)]

use cvmcl::embed::{euclidean, ConvLayerSpec, EncoderConfig, SiameseModel, ViewDims, ViewKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub struct Case {
    pub model: SiameseModel,
    pub ground: Vec<f64>,
    pub sat: Vec<f64>,
    pub label: bool,
    pub margin: f64,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Outcome {
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

/// A random valid small architecture with random weights and biases, random
/// inputs, label and margin.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n_layers = rng.random_range(2..=3);
        let mid = rng.random_range(0..n_layers - 1);
        let shared = rng.random_range(2..=4);
        let layers: Vec<ConvLayerSpec> = (0..n_layers)
            .map(|i| ConvLayerSpec {
                filters: if i == mid || i == n_layers - 1 { shared } else { rng.random_range(2..=4) },
                kernel: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                pool: rng.random_bool(0.3),
            })
            .collect();
        let dims = |rng: &mut ChaCha8Rng| ViewDims {
            rows: rng.random_range(6..=12),
            cols: rng.random_range(6..=12),
            channels: rng.random_range(1..=3),
        };
        let ground_input = dims(&mut rng);
        let mut sat_input = dims(&mut rng);
        sat_input.channels = ground_input.channels;
        let cfg = EncoderConfig {
            ground_input,
            sat_input,
            conv_layers: layers,
            mid_tap_layer: mid,
            embed_dim: rng.random_range(8..=12),
            seed: rng.random(),
        };
        let Ok(mut model) = SiameseModel::new(cfg) else {
            continue;
        };
        for kind in [ViewKind::Ground, ViewKind::Sat] {
            for t in model.params_mut(kind).tensors_mut() {
                for v in t.iter_mut() {
                    *v += 0.1 * (rng.random::<f64>() - 0.5);
                }
            }
        }
        let gl = model.encoder(ViewKind::Ground).arch.input_len();
        let sl = model.encoder(ViewKind::Sat).arch.input_len();
        let ground: Vec<f64> = (0..gl).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let sat: Vec<f64> = (0..sl).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let label = rng.random_bool(0.5);
        let d = embedding_distance(&model, &ground, &sat);
        // negatives: usually inside the margin so the hinge is active
        let margin = if label { rng.random_range(0.5..10.0) } else { d * rng.random_range(0.6..2.5) + 1e-3 };
        return Case {
            model,
            ground,
            sat,
            label,
            margin,
        };
    }
}

fn embedding_distance(model: &SiameseModel, g: &[f64], s: &[f64]) -> f64 {
    let (eg, _) = model.encoder(ViewKind::Ground).forward(model.params(ViewKind::Ground), g).unwrap();
    let (es, _) = model.encoder(ViewKind::Sat).forward(model.params(ViewKind::Sat), s).unwrap();
    euclidean(&eg, &es)
}

type Region = (Vec<bool>, Vec<u32>, Vec<bool>, Vec<u32>, bool);

fn region(model: &SiameseModel, c: &Case) -> (f64, Region) {
    let (eg, gc) = model.encoder(ViewKind::Ground).forward(model.params(ViewKind::Ground), &c.ground).unwrap();
    let (es, sc) = model.encoder(ViewKind::Sat).forward(model.params(ViewKind::Sat), &c.sat).unwrap();
    let d = euclidean(&eg, &es);
    let loss = if c.label { d * d } else { (c.margin - d).max(0.0).powi(2) };
    let (g1, g2) = gc.activation_pattern();
    let (s1, s2) = sc.activation_pattern();
    (loss, (g1, g2, s1, s2, d < c.margin))
}

/// Compare analytic gradients with central differences for every parameter
/// (or a strided subset when `stride > 1`).
pub fn check(case: &Case, h0: f64, rel_tol: f64, abs_floor: f64, stride: usize) -> Outcome {
    let (_, grads) = case
        .model
        .loss_and_grads(&case.ground, &case.sat, case.label, case.margin)
        .unwrap();
    let (_, base_region) = region(&case.model, case);
    let mut out = Outcome::default();
    let mut probe = case.model.clone();
    for kind in [ViewKind::Ground, ViewKind::Sat] {
        let analytic: Vec<f64> = match kind {
            ViewKind::Ground => grads.ground.tensors(),
            ViewKind::Sat => grads.sat.tensors(),
        }
        .into_iter()
        .flatten()
        .copied()
        .collect();
        for (flat, a) in analytic.iter().enumerate().step_by(stride.max(1)) {
            let orig = get(&mut probe, kind, flat);
            let mut h = h0;
            let mut numeric = None;
            for _ in 0..12 {
                set(&mut probe, kind, flat, orig + h);
                let (lp, rp) = region(&probe, case);
                set(&mut probe, kind, flat, orig - h);
                let (lm, rm) = region(&probe, case);
                set(&mut probe, kind, flat, orig);
                if rp == base_region && rm == base_region {
                    numeric = Some((lp - lm) / (2.0 * h));
                    break;
                }
                h *= 0.5;
            }
            let Some(n) = numeric else {
                out.skipped += 1;
                continue;
            };
            out.checked += 1;
            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            if err > abs_floor {
                let rel = err / scale;
                out.worst_rel = out.worst_rel.max(rel);
                if rel > rel_tol {
                    out.failures += 1;
                }
            }
        }
    }
    out
}

fn get(model: &mut SiameseModel, kind: ViewKind, flat: usize) -> f64 {
    *locate(model, kind, flat)
}

fn set(model: &mut SiameseModel, kind: ViewKind, flat: usize, v: f64) {
    *locate(model, kind, flat) = v;
}

fn locate(model: &mut SiameseModel, kind: ViewKind, mut flat: usize) -> &mut f64 {
    for t in model.params_mut(kind).tensors_mut() {
        if flat < t.len() {
            return &mut t[flat];
        }
        flat -= t.len();
    }
    panic!("parameter index out of range");
}
