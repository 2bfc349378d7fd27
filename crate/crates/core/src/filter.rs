//! Sequential importance resampling (SIR) particle filter over planar poses.
//!
//! Each step predicts particles through a noisy unicycle model, reweights
//! them with an exponential likelihood of an embedding distance, and
//! resamples systematically when the effective particle count drops below
//! `neff_frac · N`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{wrap_angle, Bounds, GeoRaster, GeoTransform, Pose2D};
use crate::matching::{EmbeddingIndex, PoseEmbedder, PoseGrid};
use crate::seeds;
use crate::sim::Control;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose2D,
    pub weight: f64,
}

/// Weighted particles plus the step counter. Weights are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    step: usize,
}

impl ParticleSet {
    /// Normalizes the given weights; they must be finite, non-negative and
    /// not all zero.
    pub fn new(mut particles: Vec<Particle>, step: usize) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::input("particle set must be nonempty"));
        }
        if particles.iter().any(|p| !(p.weight.is_finite() && p.weight >= 0.0)) {
            return Err(Error::input("particle weights must be finite and >= 0"));
        }
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        if !(total > 0.0) {
            return Err(Error::input("particle weights sum to zero"));
        }
        for p in &mut particles {
            p.weight /= total;
        }
        Ok(Self { particles, step })
    }

    /// Equal weights.
    pub fn uniform(poses: impl IntoIterator<Item = Pose2D>, step: usize) -> Result<Self> {
        Self::new(poses.into_iter().map(|pose| Particle { pose, weight: 1.0 }).collect(), step)
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }
}

/// Odometry and diffusion noise applied during prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionNoise {
    /// Relative std of forward speed.
    pub v_rel: f64,
    /// Absolute std of yaw rate, rad/s.
    pub omega: f64,
    /// Std of additive position diffusion per step, meters.
    pub xy: f64,
}

impl Default for MotionNoise {
    fn default() -> Self {
        Self {
            v_rel: 0.05,
            omega: 0.05,
            xy: 0.1,
        }
    }
}

impl MotionNoise {
    pub const ZERO: MotionNoise = MotionNoise {
        v_rel: 0.0,
        omega: 0.0,
        xy: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Likelihood rate; calibrated from observed distances when absent.
    pub alpha: Option<f64>,
    pub neff_frac: f64,
    pub motion: MotionNoise,
    /// Position std under which the filter counts as converged, meters.
    pub conv_std: f64,
    pub on_road_prob: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            alpha: None,
            neff_frac: 0.8,
            motion: MotionNoise::default(),
            conv_std: 1.0,
            on_road_prob: 0.8,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::config("filter needs at least 2 particles"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("alpha must be > 0, got {a}")));
            }
        }
        if !(self.neff_frac > 0.0 && self.neff_frac <= 1.0) {
            return Err(Error::config("neff_frac must be in (0, 1]"));
        }
        let m = &self.motion;
        if [m.v_rel, m.omega, m.xy].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("motion noise must be >= 0"));
        }
        if !(self.conv_std > 0.0) {
            return Err(Error::config("conv_std must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.on_road_prob) {
            return Err(Error::config("on_road_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Boolean raster of drivable cells aligned to a satellite raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadMask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
    transform: GeoTransform,
}

impl RoadMask {
    pub fn new(width: usize, height: usize, cells: Vec<bool>, transform: GeoTransform) -> Result<Self> {
        if cells.len() != width * height || width == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{width} x {height} cells"),
                found: format!("{}", cells.len()),
            });
        }
        Ok(Self {
            width,
            height,
            cells,
            transform,
        })
    }

    /// All-false mask matching `raster`.
    pub fn empty_like(raster: &GeoRaster) -> Self {
        Self {
            width: raster.width(),
            height: raster.height(),
            cells: vec![false; raster.width() * raster.height()],
            transform: *raster.transform(),
        }
    }

    /// Cells whose center lies within `half_width` meters of the polyline
    /// through `path`.
    pub fn from_path(raster: &GeoRaster, path: &[Pose2D], half_width: f64) -> Self {
        let mut mask = Self::empty_like(raster);
        let segs: Vec<(Pose2D, Pose2D)> = if path.len() == 1 {
            vec![(path[0], path[0])]
        } else {
            path.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for row in 0..mask.height {
            for col in 0..mask.width {
                let (x, y) = mask.transform.pixel_to_world(col as f64, row as f64);
                let near = segs.iter().any(|(a, b)| segment_distance(x, y, a, b) <= half_width);
                mask.cells[row * mask.width + col] = near;
            }
        }
        mask
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Whether the cell containing world point `(x, y)` is drivable.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, r) = self.transform.world_to_pixel(x, y);
        let (c, r) = (c.round(), r.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return false;
        }
        self.cells[r as usize * self.width + c as usize]
    }
}

fn segment_distance(x: f64, y: f64, a: &Pose2D, b: &Pose2D) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x - a.x - t * dx).hypot(y - a.y - t * dy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    pub set: ParticleSet,
    /// Particles drawn from the mask component.
    pub on_road_draws: usize,
    /// True when a mask was supplied but had no drivable cell.
    pub mask_fallback: bool,
}

fn uniform_heading(rng: &mut impl Rng) -> f64 {
    // maps [0, 1) onto (−π, π]
    std::f64::consts::PI - std::f64::consts::TAU * rng.random::<f64>()
}

/// Mixture initialization: with probability `on_road_prob` a particle is
/// drawn uniformly over the mask's drivable cells, otherwise uniformly over
/// `bounds`. Headings are uniform.
pub fn init_particles(
    bounds: &Bounds,
    mask: Option<&RoadMask>,
    on_road_prob: f64,
    n: usize,
    seed: u64,
) -> Result<InitOutcome> {
    if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
        return Err(Error::input("initialization bounds are empty"));
    }
    if !(0.0..=1.0).contains(&on_road_prob) {
        return Err(Error::config("on_road_prob must be in [0, 1]"));
    }
    if n == 0 {
        return Err(Error::config("need at least one particle"));
    }
    let road: Vec<(usize, usize)> = mask
        .map(|m| {
            (0..m.height)
                .flat_map(|r| (0..m.width).map(move |c| (c, r)))
                .filter(|(c, r)| m.cells[r * m.width + c])
                .collect()
        })
        .unwrap_or_default();
    let mask_fallback = mask.is_some() && road.is_empty();
    if mask_fallback {
        log::warn!("road mask has no drivable cells; initializing uniformly");
    }
    let mut rng = seeds::rng(seeds::derive(seed, "init"));
    let mut on_road_draws = 0;
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let use_road = !road.is_empty() && rng.random::<f64>() < on_road_prob;
        let (x, y) = if use_road {
            on_road_draws += 1;
            let m = mask.expect("road cells imply a mask");
            let (c, r) = road[rng.random_range(0..road.len())];
            let dc = rng.random::<f64>() - 0.5;
            let dr = rng.random::<f64>() - 0.5;
            m.transform.pixel_to_world(c as f64 + dc, r as f64 + dr)
        } else {
            (
                bounds.min_x + rng.random::<f64>() * bounds.width(),
                bounds.min_y + rng.random::<f64>() * bounds.height(),
            )
        };
        poses.push(Pose2D::new(x, y, uniform_heading(&mut rng)));
    }
    Ok(InitOutcome {
        set: ParticleSet::uniform(poses, 0)?,
        on_road_draws,
        mask_fallback,
    })
}

/// Propagate every particle through the unicycle model with perturbed
/// controls and positional diffusion. Particle `i` draws from substream `i`
/// of `stream_seed`. Weights are unchanged.
pub fn predict(set: &ParticleSet, u: &Control, dt: f64, noise: &MotionNoise, stream_seed: u64) -> Result<ParticleSet> {
    if !(dt > 0.0) {
        return Err(Error::input(format!("dt must be > 0, got {dt}")));
    }
    let particles = set
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = seeds::substream(stream_seed, i as u64);
            let mut gauss = || rng.sample::<f64, _>(StandardNormal);
            let v = u.v * (1.0 + noise.v_rel * gauss());
            let w = u.omega + noise.omega * gauss();
            let (c, s) = p.pose.heading();
            let ex = noise.xy * gauss();
            let ey = noise.xy * gauss();
            Particle {
                pose: Pose2D::new(p.pose.x + v * c * dt + ex, p.pose.y + v * s * dt + ey, p.pose.theta + w * dt),
                weight: p.weight,
            }
        })
        .collect();
    Ok(ParticleSet {
        particles,
        step: set.step + 1,
    })
}

/// Maps a pose hypothesis to its embedding distance from the current ground
/// observation. An error means "no valid distance" and zeroes the particle.
pub trait DistanceProvider: Sync {
    fn distance(&self, pose: &Pose2D) -> Result<f64>;
}

/// Embed the hypothesis on the fly (crop + encoder, or any other embedder).
pub struct EmbedderDistance<'a> {
    pub embedder: &'a dyn PoseEmbedder,
    pub query: &'a [f64],
}

impl DistanceProvider for EmbedderDistance<'_> {
    fn distance(&self, pose: &Pose2D) -> Result<f64> {
        let e = self.embedder.embed_pose(pose)?;
        Ok(crate::embed::euclidean(&e, self.query))
    }
}

/// Look up the precomputed embedding of the nearest grid pose.
pub struct IndexDistance<'a> {
    index: &'a EmbeddingIndex,
    grid: &'a PoseGrid,
    query: &'a [f64],
}

impl<'a> IndexDistance<'a> {
    /// `index` must have been built over `grid` (same length and order).
    pub fn new(index: &'a EmbeddingIndex, grid: &'a PoseGrid, query: &'a [f64]) -> Result<Self> {
        if index.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("index over {} grid poses", grid.len()),
                found: format!("{} entries", index.len()),
            });
        }
        if query.len() != index.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("query of length {}", index.dim()),
                found: format!("{}", query.len()),
            });
        }
        Ok(Self { index, grid, query })
    }
}

impl DistanceProvider for IndexDistance<'_> {
    fn distance(&self, pose: &Pose2D) -> Result<f64> {
        let i = self.grid.nearest(pose).ok_or(Error::FootprintOutOfBounds)?;
        Ok(self.index.distance(i, self.query))
    }
}

/// Fixed distances per particle; handy for tests and replays.
pub struct TableDistance<'a> {
    pub poses: &'a [Pose2D],
    pub distances: &'a [f64],
}

impl DistanceProvider for TableDistance<'_> {
    fn distance(&self, pose: &Pose2D) -> Result<f64> {
        self.poses
            .iter()
            .position(|p| p == pose)
            .map(|i| self.distances[i])
            .ok_or_else(|| Error::input("pose not in distance table"))
    }
}

/// Distances of every particle; provider failures become `+∞`.
pub fn particle_distances(set: &ParticleSet, provider: &dyn DistanceProvider) -> Vec<f64> {
    set.particles
        .par_iter()
        .map(|p| match provider.distance(&p.pose) {
            Ok(d) if d >= 0.0 => d,
            _ => f64::INFINITY,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateOutcome {
    /// Every weight underflowed (or every distance was infinite); weights
    /// were reset to uniform.
    pub reset: bool,
}

/// `w_i ← α·e^{−α d_i}·w_i`, normalized. The common factor `α·e^{−α d_min}`
/// is divided out before exponentiating, which leaves the normalized result
/// unchanged and avoids spurious underflow.
pub fn reweight(set: &mut ParticleSet, distances: &[f64], alpha: f64) -> Result<UpdateOutcome> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
    }
    if distances.len() != set.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} distances", set.len()),
            found: format!("{}", distances.len()),
        });
    }
    let d_min = set
        .particles
        .iter()
        .zip(distances)
        .filter(|(p, d)| p.weight > 0.0 && d.is_finite())
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    if d_min.is_finite() {
        for (p, d) in set.particles.iter_mut().zip(distances) {
            p.weight *= (-alpha * (d - d_min)).exp();
            total += p.weight;
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        log::warn!("all particle weights vanished at step {}; resetting to uniform", set.step);
        let w = 1.0 / set.len() as f64;
        set.particles.iter_mut().for_each(|p| p.weight = w);
        return Ok(UpdateOutcome { reset: true });
    }
    set.particles.iter_mut().for_each(|p| p.weight /= total);
    Ok(UpdateOutcome { reset: false })
}

pub fn measurement_update(
    set: &ParticleSet,
    provider: &dyn DistanceProvider,
    alpha: f64,
) -> Result<(ParticleSet, UpdateOutcome)> {
    let d = particle_distances(set, provider);
    let mut out = set.clone();
    let outcome = reweight(&mut out, &d, alpha)?;
    Ok((out, outcome))
}

/// `1 / Σ w²`.
pub fn effective_n(set: &ParticleSet) -> f64 {
    1.0 / set.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
}

/// Indices selected by systematic resampling with offset `u0 ∈ [0, 1/N)`:
/// the particle whose cumulative-weight interval contains `u0 + i/N`.
/// Computed in units of `1/N` so integer-valued `N·w_i` stay exact.
pub fn systematic_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let nf = n as f64;
    let last_live = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    let start = u0 * nf;
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    let mut cum = weights[0] * nf;
    for i in 0..n {
        let pos = start + i as f64;
        while pos >= cum && k < last_live {
            k += 1;
            cum += weights[k] * nf;
        }
        out.push(k);
    }
    out
}

pub fn systematic_resample(set: &ParticleSet, stream_seed: u64) -> ParticleSet {
    let n = set.len();
    let mut rng = seeds::rng(stream_seed);
    let u0 = rng.random::<f64>() / n as f64;
    let w = 1.0 / n as f64;
    let particles = systematic_indices(&set.weights(), u0)
        .into_iter()
        .map(|i| Particle {
            pose: set.particles[i].pose,
            weight: w,
        })
        .collect();
    ParticleSet {
        particles,
        step: set.step,
    }
}

/// Weighted mean position, circular-mean heading, and the root weighted
/// mean squared distance to the mean position.
pub fn estimate(set: &ParticleSet) -> (Pose2D, f64) {
    let (mut mx, mut my, mut sx, mut cy) = (0.0, 0.0, 0.0, 0.0);
    for p in &set.particles {
        mx += p.weight * p.pose.x;
        my += p.weight * p.pose.y;
        sx += p.weight * p.pose.theta.sin();
        cy += p.weight * p.pose.theta.cos();
    }
    let var: f64 = set
        .particles
        .iter()
        .map(|p| p.weight * ((p.pose.x - mx).powi(2) + (p.pose.y - my).powi(2)))
        .sum();
    (Pose2D::new(mx, my, wrap_angle(sx.atan2(cy))), var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub mean: Pose2D,
    pub pos_std: f64,
    pub neff: f64,
    pub resampled: bool,
    pub converged: bool,
    pub weight_reset: bool,
}

/// Motion input for one step; `None` on the first step (measurement only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub control: Control,
    pub dt: f64,
}

/// predict → measurement update → resample when `N_eff < neff_frac·N`.
/// The reported estimate is taken after the update, before resampling.
pub fn step(
    set: &ParticleSet,
    motion: Option<&Motion>,
    provider: &dyn DistanceProvider,
    alpha: f64,
    cfg: &FilterConfig,
) -> Result<(ParticleSet, StepReport)> {
    let predicted = match motion {
        Some(m) => {
            let stream = seeds::derive_index(seeds::derive(cfg.seed, "predict"), set.step as u64);
            predict(set, &m.control, m.dt, &cfg.motion, stream)?
        }
        None => set.clone(),
    };
    let (updated, outcome) = measurement_update(&predicted, provider, alpha)?;
    let neff = effective_n(&updated);
    let (mean, pos_std) = estimate(&updated);
    let resampled = neff < cfg.neff_frac * updated.len() as f64;
    let next = if resampled {
        let stream = seeds::derive_index(seeds::derive(cfg.seed, "resample"), updated.step as u64);
        systematic_resample(&updated, stream)
    } else {
        updated
    };
    let report = StepReport {
        step: next.step,
        mean,
        pos_std,
        neff,
        resampled,
        converged: pos_std < cfg.conv_std,
        weight_reset: outcome.reset,
    };
    Ok((next, report))
}

/// Median-based likelihood rate: `1 / median(d)` over a calibration batch.
pub fn calibrate_alpha(distances: &[f64]) -> Result<f64> {
    let mut d: Vec<f64> = distances.iter().copied().filter(|v| v.is_finite()).collect();
    if d.is_empty() {
        return Err(Error::input("no finite calibration distances"));
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len().is_multiple_of(2) { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if !(median > 0.0) {
        return Err(Error::input("median calibration distance is zero"));
    }
    Ok(1.0 / median)
}

/// One row of the localization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_theta: f64,
    pub pos_std: f64,
    pub neff: f64,
    pub resampled: bool,
    pub converged: bool,
    pub truth_x: f64,
    pub truth_y: f64,
    pub err_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRun {
    pub trace: Vec<TraceRow>,
    pub alpha: f64,
    /// First step whose position std fell below `conv_std`.
    pub convergence_step: Option<usize>,
    pub final_error: f64,
    pub final_std: f64,
    pub weight_resets: usize,
    pub final_set: ParticleSet,
}

/// Run the filter along a trajectory. `truth[t]` is the true pose at step
/// `t`, `motions[t]` the odometry from `t` to `t + 1`, and
/// `provider_for(t)` the distance provider for the observation at `t`.
/// `on_step` sees the particle set after every step.
pub fn run_localization<'p, F>(
    cfg: &FilterConfig,
    init: ParticleSet,
    truth: &[Pose2D],
    motions: &[Motion],
    alpha: f64,
    mut provider_for: F,
    mut on_step: impl FnMut(&ParticleSet),
) -> Result<LocalizationRun>
where
    F: FnMut(usize) -> Result<Box<dyn DistanceProvider + 'p>>,
{
    cfg.validate()?;
    if truth.is_empty() {
        return Err(Error::input("localization needs at least one observation"));
    }
    if motions.len() + 1 < truth.len() {
        return Err(Error::input(format!(
            "{} observations need {} motions, got {}",
            truth.len(),
            truth.len() - 1,
            motions.len()
        )));
    }
    let mut set = init;
    let mut trace = Vec::with_capacity(truth.len());
    let mut convergence_step = None;
    let mut weight_resets = 0;
    for (t, tp) in truth.iter().enumerate() {
        let provider = provider_for(t)?;
        let motion = if t == 0 { None } else { Some(&motions[t - 1]) };
        let (next, rep) = step(&set, motion, provider.as_ref(), alpha, cfg)?;
        set = next;
        on_step(&set);
        if rep.converged && convergence_step.is_none() {
            convergence_step = Some(t);
        }
        weight_resets += usize::from(rep.weight_reset);
        trace.push(TraceRow {
            step: t,
            mean_x: rep.mean.x,
            mean_y: rep.mean.y,
            mean_theta: rep.mean.theta,
            pos_std: rep.pos_std,
            neff: rep.neff,
            resampled: rep.resampled,
            converged: rep.converged,
            truth_x: tp.x,
            truth_y: tp.y,
            err_m: (rep.mean.x - tp.x).hypot(rep.mean.y - tp.y),
        });
    }
    let last = trace.last().expect("at least one step");
    Ok(LocalizationRun {
        alpha,
        convergence_step,
        final_error: last.err_m,
        final_std: last.pos_std,
        weight_resets,
        trace,
        final_set: set,
    })
}
