use cvmcl::filter::{
    effective_n, init_particles, predict, run_localization, systematic_indices, DistanceProvider, EmbedderDistance,
    FilterConfig, Motion, MotionNoise, ParticleSet, RoadMask,
};
use cvmcl::geo::{Bounds, GeoTransform, Pose2D};
use cvmcl::matching::OracleEmbedder;
use cvmcl::sim::{unicycle, Control};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn road_biased_init_matches_mixture_rate() {
    let t = GeoTransform::north_up(0.5, 19.5, 1.0).unwrap();
    let cells: Vec<bool> = (0..400).map(|i| i % 20 < 10).collect();
    let mask = RoadMask::new(20, 20, cells, t).unwrap();
    // full pixel extent of the mask
    let bounds = Bounds::new(0.0, 0.0, 20.0, 20.0).unwrap();
    let n = 100_000;
    let out = init_particles(&bounds, Some(&mask), 0.8, n, 7).unwrap();
    let on = out
        .set
        .particles()
        .iter()
        .filter(|p| mask.contains(p.pose.x, p.pose.y))
        .count() as f64
        / n as f64;
    let p = 0.8 + 0.5 * 0.2;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((on - p).abs() < 3.0 * sigma, "on-road fraction {on}, expected {p} ± {}", 3.0 * sigma);
    let headings_ok = out
        .set
        .particles()
        .iter()
        .all(|q| q.pose.theta > -std::f64::consts::PI && q.pose.theta <= std::f64::consts::PI);
    assert!(headings_ok);
}

#[test]
fn predicted_mean_displacement_matches_noiseless_motion() {
    let n = 1_000_000;
    let start = Pose2D::new(2.0, -1.0, 0.7);
    let set = ParticleSet::uniform(vec![start; n], 0).unwrap();
    let u = Control { v: 1.3, omega: 0.2 };
    let noise = MotionNoise {
        v_rel: 0.1,
        omega: 0.1,
        xy: 0.05,
    };
    let out = predict(&set, &u, 1.0, &noise, 99).unwrap();
    let expected = unicycle(&start, &u, 1.0);
    let (c, s) = start.heading();
    let sx = ((u.v * noise.v_rel * c).powi(2) + noise.xy.powi(2)).sqrt();
    let sy = ((u.v * noise.v_rel * s).powi(2) + noise.xy.powi(2)).sqrt();
    let mx = out.particles().iter().map(|p| p.pose.x).sum::<f64>() / n as f64;
    let my = out.particles().iter().map(|p| p.pose.y).sum::<f64>() / n as f64;
    let nf = (n as f64).sqrt();
    assert!((mx - expected.x).abs() < 3.0 * sx / nf, "x {mx} vs {}", expected.x);
    assert!((my - expected.y).abs() < 3.0 * sy / nf, "y {my} vs {}", expected.y);
    assert_eq!(out.step(), 1);
}

#[test]
fn systematic_resampling_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 40;
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let draws = 10_000;
    let mut sums = vec![0.0; n];
    for _ in 0..draws {
        let u0 = rng.random::<f64>() / n as f64;
        let idx = systematic_indices(&w, u0);
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        for i in 0..n {
            let e = n as f64 * w[i];
            let c = counts[i] as f64;
            assert!(c >= e.floor() && c <= e.ceil(), "particle {i}: {c} copies, expected {e}");
            sums[i] += c;
        }
    }
    for i in 0..n {
        let e = n as f64 * w[i];
        let f = e - e.floor();
        let sigma = (f * (1.0 - f) / draws as f64).sqrt();
        let mean = sums[i] / draws as f64;
        assert!((mean - e).abs() <= 3.0 * sigma + 1e-9, "particle {i}: mean {mean}, expected {e}");
    }
}

#[test]
fn neff_bounds_on_random_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..2000 {
        let n = rng.random_range(1..50);
        let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let set = ParticleSet::new(
            w.iter()
                .enumerate()
                .map(|(i, w)| cvmcl::filter::Particle {
                    pose: Pose2D::new(i as f64, 0.0, 0.0),
                    weight: *w,
                })
                .collect(),
            0,
        )
        .unwrap();
        let ne = effective_n(&set);
        assert!(ne >= 1.0 - 1e-9 && ne <= n as f64 + 1e-9);
    }
}

fn straight_run(seed: u64) -> cvmcl::filter::LocalizationRun {
    let truth: Vec<Pose2D> = (0..30).map(|i| Pose2D::new(10.0 + 0.8 * i as f64, 20.0, 0.0)).collect();
    let motions = vec![
        Motion {
            control: Control { v: 0.8, omega: 0.0 },
            dt: 1.0,
        };
        29
    ];
    let cfg = FilterConfig {
        n_particles: 800,
        seed,
        ..FilterConfig::default()
    };
    let b = Bounds::new(0.0, 0.0, 40.0, 40.0).unwrap();
    let init = init_particles(&b, None, 0.0, cfg.n_particles, seed).unwrap().set;
    let oracle = OracleEmbedder { heading_weight: 2.0 };
    let queries: Vec<Vec<f64>> = truth.iter().map(|p| oracle.features(p)).collect();
    run_localization(
        &cfg,
        init,
        &truth,
        &motions,
        2.0,
        |t| -> cvmcl::Result<Box<dyn DistanceProvider + '_>> {
            Ok(Box::new(EmbedderDistance {
                embedder: &oracle,
                query: &queries[t],
            }))
        },
        |_| {},
    )
    .unwrap()
}

#[test]
fn localization_is_deterministic_and_converges_with_oracle() {
    let a = straight_run(5);
    let b = straight_run(5);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.final_set, b.final_set);
    assert!(a.convergence_step.is_some());
    assert!(a.final_error < 1.0, "final error {}", a.final_error);
    let c = straight_run(6);
    assert_ne!(a.trace, c.trace);
}
