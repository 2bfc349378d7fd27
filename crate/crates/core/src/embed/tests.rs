use super::*;
use crate::geo::{CropSpec, PairThresholds, Pose2D};
use crate::matching::PoseGrid;
use crate::sim::{generate_world, render_ground_views, GroundViewSpec, WorldSpec};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

fn model(seed: u64) -> SiameseModel {
    SiameseModel::new(EncoderConfig {
        seed,
        ..EncoderConfig::default()
    })
    .unwrap()
}

fn random_input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

#[test]
fn loss_examples() {
    let z = [0.0; 4];
    assert_eq!(contrastive_loss(&z, &z, true, 8.0), 0.0);
    assert_eq!(contrastive_loss(&z, &z, false, 80.0), 6400.0);
    let far = [100.0, 0.0, 0.0, 0.0];
    assert_eq!(contrastive_loss(&far, &z, false, 80.0), 0.0);
    let three = [3.0, 0.0, 0.0, 0.0];
    assert_eq!(contrastive_loss(&three, &z, true, 80.0), 9.0);
}

#[test]
fn zero_input_gives_zero_embedding() {
    let m = model(1);
    let enc = m.encoder(ViewKind::Sat);
    let x = vec![0.0; enc.arch.input_len()];
    let (e, _) = enc.forward(&m.sat, &x).unwrap();
    assert_eq!(e.len(), 64);
    assert!(e.iter().all(|v| *v == 0.0));
}

#[test]
fn forward_is_deterministic_and_checks_shape() {
    let m = model(2);
    let enc = m.encoder(ViewKind::Ground);
    let x = random_input(enc.arch.input_len(), 3);
    assert_eq!(enc.forward(&m.ground, &x).unwrap().0, enc.forward(&m.ground, &x).unwrap().0);
    assert!(enc.forward(&m.ground, &x[1..]).is_err());
}

#[test]
fn fusion_is_sum_of_branches() {
    let m = model(4);
    let enc = m.encoder(ViewKind::Sat);
    let x = random_input(enc.arch.input_len(), 5);
    let (e, branches, _) = enc.forward_branches(&m.sat, &x).unwrap();
    for ((v, h), md) in e.iter().zip(&branches.high).zip(&branches.mid) {
        assert_eq!(*v, h + md);
    }
    // zeroing the mid projection leaves the high branch alone
    let mut p = m.sat.clone();
    p.mid.weight.iter_mut().for_each(|w| *w = 0.0);
    p.mid.bias.iter_mut().for_each(|w| *w = 0.0);
    let (e0, _) = enc.forward(&p, &x).unwrap();
    assert_eq!(e0, branches.high);
}

#[test]
fn encoders_are_independent() {
    let mut m = model(6);
    let sat = ViewTensor {
        rows: 27,
        cols: 40,
        channels: 3,
        data: random_input(27 * 40 * 3, 7),
    };
    let ground = ViewTensor {
        rows: 16,
        cols: 24,
        channels: 3,
        data: random_input(16 * 24 * 3, 8),
    };
    let es = m.embed_sat(&sat).unwrap();
    let eg = m.embed_ground(&ground).unwrap();
    m.ground.high.weight[0] += 1.0;
    m.ground.convs[0].bias[0] += 0.5;
    assert_eq!(m.embed_sat(&sat).unwrap(), es);
    m.sat.high.weight[3] -= 1.0;
    assert_ne!(m.embed_sat(&sat).unwrap(), es);
    let mut m2 = model(6);
    m2.sat.convs[1].weight[0] += 1.0;
    assert_eq!(m2.embed_ground(&ground).unwrap(), eg);
}

#[test]
fn config_validation() {
    let bad_mid = EncoderConfig {
        mid_tap_layer: 2,
        ..EncoderConfig::default()
    };
    assert!(SiameseModel::new(bad_mid).is_err());
    let small_d = EncoderConfig {
        embed_dim: 4,
        ..EncoderConfig::default()
    };
    assert!(SiameseModel::new(small_d).is_err());
    let mut mismatch = EncoderConfig::default();
    mismatch.conv_layers[2].filters = 16;
    assert!(SiameseModel::new(mismatch).is_err());
}

#[test]
fn negative_beyond_margin_has_zero_gradients() {
    let m = model(9);
    let g = random_input(m.encoder(ViewKind::Ground).arch.input_len(), 10);
    let s = random_input(m.encoder(ViewKind::Sat).arch.input_len(), 11);
    let (eg, _) = m.encoder(ViewKind::Ground).forward(&m.ground, &g).unwrap();
    let (es, _) = m.encoder(ViewKind::Sat).forward(&m.sat, &s).unwrap();
    let d = euclidean(&eg, &es);
    assert!(d > 0.0);
    let (loss, grads) = m.loss_and_grads(&g, &s, false, 0.5 * d).unwrap();
    assert_eq!(loss, 0.0);
    for t in grads.ground.tensors().into_iter().chain(grads.sat.tensors()) {
        assert!(t.iter().all(|v| *v == 0.0));
    }
    // hinge kink: subgradient 0 at d = m
    let (_, dg, ds) = contrastive_grad(&eg, &es, false, d);
    assert!(dg.iter().chain(&ds).all(|v| *v == 0.0));
}

#[test]
fn coincident_positive_is_stationary() {
    let e = vec![0.3, -1.2, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0];
    let (loss, dg, ds) = contrastive_grad(&e, &e, true, 8.0);
    assert_eq!(loss, 0.0);
    assert!(dg.iter().chain(&ds).all(|v| *v == 0.0));
}

#[test]
fn loss_gradient_matches_embedding_derivative() {
    let a = [1.0, 2.0, -0.5];
    let b = [0.0, 0.5, 0.5];
    for label in [true, false] {
        let (_, dg, _) = contrastive_grad(&a, &b, label, 4.0);
        for k in 0..3 {
            let h = 1e-6;
            let mut p = a;
            p[k] += h;
            let mut q = a;
            q[k] -= h;
            let fd = (contrastive_loss(&p, &b, label, 4.0) - contrastive_loss(&q, &b, label, 4.0)) / (2.0 * h);
            assert_abs_diff_eq!(dg[k], fd, epsilon = 1e-6);
        }
    }
}

fn tiny_dataset(seed: u64) -> PairDataset {
    let world = generate_world(&WorldSpec {
        size: 96,
        seed,
        ..WorldSpec::default()
    })
    .unwrap();
    let poses = vec![Pose2D::new(10.0, 12.0, 0.3), Pose2D::new(14.0, 9.0, -1.0)];
    let grounds = render_ground_views(&world, &poses, &GroundViewSpec::default())
        .unwrap()
        .into_iter()
        .map(|o| o.view)
        .collect();
    PairDataset {
        grounds,
        raster: world,
        crop: CropSpec::default(),
        pairs: vec![
            PairRecord {
                ground: 0,
                sat_pose: poses[0],
                label: true,
            },
            PairRecord {
                ground: 0,
                sat_pose: Pose2D::new(6.0, 16.0, 2.0),
                label: false,
            },
            PairRecord {
                ground: 1,
                sat_pose: poses[1],
                label: true,
            },
        ],
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_dataset(1);
    let init = model(12);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(&data, init.clone(), &cfg, None).unwrap();
    assert_eq!(out.model.ground, init.ground);
    assert_eq!(out.model.sat, init.sat);
    assert_eq!(out.report.epoch_loss.len(), 2);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset(2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let a = train(&data, model(13), &cfg, None).unwrap();
    let b = train(&data, model(13), &cfg, None).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.report, b.report);
}

#[test]
fn memorizes_a_single_positive() {
    let mut data = tiny_dataset(3);
    data.pairs.truncate(2);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 2,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(&data, model(14), &cfg, None).unwrap();
    let pair = data.pair(0).unwrap();
    let d = euclidean(
        &out.model.embed_ground(pair.ground).unwrap(),
        &out.model.embed_sat(&pair.sat).unwrap(),
    );
    assert!(d < 0.1 * cfg.margin, "positive distance {d}");
}

#[test]
fn training_rejects_single_class_and_reports_nonfinite() {
    let mut data = tiny_dataset(4);
    data.pairs.retain(|p| p.label);
    assert!(train(&data, model(15), &TrainConfig::default(), None).is_err());
    let data = tiny_dataset(4);
    let cfg = TrainConfig {
        learning_rate: 1e200,
        epochs: 3,
        batch_size: 1,
        ..TrainConfig::default()
    };
    match train(&data, model(15), &cfg, None) {
        Err(Error::NonFiniteLoss { .. }) => {}
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

fn grid() -> PoseGrid {
    let b = crate::geo::Bounds::new(0.0, 0.0, 20.0, 20.0).unwrap();
    PoseGrid::new(b, 0.5, 0.5, PoseGrid::uniform_headings(8)).unwrap()
}

#[test]
fn mining_examples() {
    let g = grid();
    let th = PairThresholds::default();
    let truth = g.pose(1234);
    let r = mine_pairs(&[truth], &g, &th, 9, 1).unwrap();
    assert!(r.pairs.iter().any(|p| p.label && p.sat_pose == truth));
    assert_eq!(r.negatives, 9 * r.positives);
    for p in &r.pairs {
        let l = th.label(&truth, &p.sat_pose);
        assert_eq!(l == crate::geo::PairLabel::Positive, p.label);
        assert_ne!(l, crate::geo::PairLabel::Excluded);
    }
    assert_eq!(mine_pairs(&[truth], &g, &th, 9, 1).unwrap().pairs, r.pairs);
    let off = Pose2D::new(100.0, 100.0, 0.0);
    let r = mine_pairs(&[off, truth], &g, &th, 9, 1).unwrap();
    assert_eq!(r.skipped, 1);
    assert!(r.pairs.iter().all(|p| p.ground == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn loss_is_nonnegative_with_exact_zeros(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        m in 0.01f64..20.0,
        label in any::<bool>(),
    ) {
        prop_assert!(contrastive_loss(&a, &b, label, m) >= 0.0);
        prop_assert_eq!(contrastive_loss(&a, &a, true, m), 0.0);
        let d = euclidean(&a, &b);
        if d >= m {
            prop_assert_eq!(contrastive_loss(&a, &b, false, m), 0.0);
        }
    }
}
