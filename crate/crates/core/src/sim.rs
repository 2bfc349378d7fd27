//! Synthetic worlds, trajectories with noisy odometry, and ground-level views.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{wrap_angle, angle_diff, Bounds, GeoRaster, GeoTransform, Pose2D, ViewTensor};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    /// Pixels per side.
    pub size: usize,
    pub channels: usize,
    /// Gaussian bumps per channel.
    pub n_bumps: usize,
    /// Bump standard deviation range, pixels.
    pub bump_sigma_range: (f64, f64),
    /// Meters per pixel.
    pub pixel_size: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            size: 512,
            channels: 3,
            n_bumps: 600,
            bump_sigma_range: (6.0, 16.0),
            pixel_size: 0.25,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::config("world size must be >= 64 pixels"));
        }
        if self.channels < 2 {
            return Err(Error::config("world needs at least 2 channels"));
        }
        let (lo, hi) = self.bump_sigma_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("bump sigmas must be positive with min <= max"));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::config("pixel_size must be positive"));
        }
        Ok(())
    }

    /// Transform for a world generated from this spec: north-up, pixel
    /// (0, 0) centered at (pixel_size/2, (size − 1/2)·pixel_size).
    pub fn transform(&self) -> Result<GeoTransform> {
        let ps = self.pixel_size;
        GeoTransform::north_up(0.5 * ps, (self.size as f64 - 0.5) * ps, ps)
    }
}

/// Sum of random Gaussian bumps per channel, standardized per channel.
pub fn generate_world(spec: &WorldSpec) -> Result<GeoRaster> {
    spec.validate()?;
    let n = spec.size;
    let ch = spec.channels;
    let mut rng = seeds::rng(seeds::derive(spec.seed, "world"));
    let mut planes = vec![vec![0f64; n * n]; ch];
    let (lo, hi) = spec.bump_sigma_range;
    for plane in planes.iter_mut() {
        for _ in 0..spec.n_bumps {
            let cx: f64 = rng.random::<f64>() * n as f64;
            let cy: f64 = rng.random::<f64>() * n as f64;
            let sigma = lo + (hi - lo) * rng.random::<f64>();
            let amp = 2.0 * rng.random::<f64>() - 1.0;
            add_bump(plane, n, cx, cy, sigma, amp);
        }
    }
    for plane in planes.iter_mut() {
        standardize(plane);
    }
    let mut data = vec![0f32; n * n * ch];
    for (k, plane) in planes.iter().enumerate() {
        for (i, v) in plane.iter().enumerate() {
            data[i * ch + k] = *v as f32;
        }
    }
    GeoRaster::new(n, n, ch, data, spec.transform()?)
}

fn add_bump(plane: &mut [f64], n: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let reach = 4.0 * sigma;
    let c0 = (cx - reach).floor().max(0.0) as usize;
    let c1 = ((cx + reach).ceil() as usize).min(n - 1);
    let r0 = (cy - reach).floor().max(0.0) as usize;
    let r1 = ((cy + reach).ceil() as usize).min(n - 1);
    if c0 > c1 || r0 > r1 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gx: Vec<f64> = (c0..=c1)
        .map(|c| (-(c as f64 - cx).powi(2) * inv).exp())
        .collect();
    for r in r0..=r1 {
        let gy = amp * (-(r as f64 - cy).powi(2) * inv).exp();
        let row = &mut plane[r * n + c0..=r * n + c1];
        for (v, g) in row.iter_mut().zip(&gx) {
            *v += gy * g;
        }
    }
}

fn standardize(plane: &mut [f64]) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return;
    }
    for v in plane.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Forward velocity and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub n_steps: usize,
    /// Seconds per step.
    pub dt: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub yawrate_std: f64,
    /// Relative std of odometry speed.
    pub odom_v_noise: f64,
    /// Absolute std of odometry yaw rate, rad/s.
    pub odom_w_noise: f64,
    /// Minimum distance kept from the region border, meters.
    pub margin: f64,
    /// Region to drive in; the whole world when absent.
    pub region: Option<Bounds>,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            n_steps: 100,
            dt: 1.0,
            speed_mean: 1.0,
            speed_std: 0.2,
            yawrate_std: 0.15,
            odom_v_noise: 0.01,
            odom_w_noise: 0.01,
            margin: 8.0,
            region: None,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_steps < 2 || !(self.speed_mean > 0.0) {
            return Err(Error::config("trajectory needs dt > 0, n_steps >= 2, speed_mean > 0"));
        }
        let stds = [self.speed_std, self.yawrate_std, self.odom_v_noise, self.odom_w_noise, self.margin];
        if stds.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("trajectory noise levels and margin must be >= 0"));
        }
        Ok(())
    }
}

/// One trajectory sample: the true pose at time `t`, and the control applied
/// from `t` to `t + dt` (true and as measured by odometry).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: f64,
    pub pose: Pose2D,
    pub control: Control,
    pub noisy: Control,
}

/// One unicycle step.
pub fn unicycle(pose: &Pose2D, control: &Control, dt: f64) -> Pose2D {
    let (c, s) = pose.heading();
    Pose2D::new(
        pose.x + control.v * c * dt,
        pose.y + control.v * s * dt,
        pose.theta + control.omega * dt,
    )
}

/// Drive a unicycle through `world` (or `spec.region`), reflecting the
/// heading whenever the next step would leave the inner region.
pub fn generate_trajectory(world: &GeoRaster, spec: &TrajectorySpec) -> Result<Vec<TrajectoryStep>> {
    spec.validate()?;
    let region = spec.region.unwrap_or_else(|| world.bounds());
    let inner = region.inset(spec.margin).map_err(|_| {
        Error::config(format!(
            "region {:?} too small for margin {} m",
            region, spec.margin
        ))
    })?;
    let mut rng = seeds::rng(seeds::derive(spec.seed, "trajectory"));
    let n = spec.n_steps;
    let speeds: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (spec.speed_mean + spec.speed_std * z).max(0.0)
        })
        .collect();

    let x0 = inner.min_x + rng.random::<f64>() * inner.width();
    let y0 = inner.min_y + rng.random::<f64>() * inner.height();
    let th0 = wrap_angle((2.0 * rng.random::<f64>() - 1.0) * std::f64::consts::PI);
    let mut pose = Pose2D::new(x0, y0, steer_inside(&inner, x0, y0, th0, speeds[0] * spec.dt));

    let mut steps = Vec::with_capacity(n);
    for t in 0..n {
        let v = speeds[t];
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut omega = spec.yawrate_std * z;
        if t + 1 < n {
            let next = unicycle(&pose, &Control { v, omega }, spec.dt);
            let theta = steer_inside(&inner, next.x, next.y, next.theta, speeds[t + 1] * spec.dt);
            if theta != next.theta {
                omega = angle_diff(theta, pose.theta) / spec.dt;
            }
        }
        let control = Control { v, omega };
        let zv: f64 = StandardNormal.sample(&mut rng);
        let zw: f64 = StandardNormal.sample(&mut rng);
        let noisy = Control {
            v: v * (1.0 + spec.odom_v_noise * zv),
            omega: omega + spec.odom_w_noise * zw,
        };
        steps.push(TrajectoryStep {
            t: t as f64 * spec.dt,
            pose,
            control,
            noisy,
        });
        pose = unicycle(&pose, &control, spec.dt);
    }
    Ok(steps)
}

/// Heading for a step of length `step` from (x, y) that stays inside
/// `inner`: reflected off the violated walls, or aimed at the center when
/// reflection is not enough.
fn steer_inside(inner: &Bounds, x: f64, y: f64, theta: f64, step: f64) -> f64 {
    let fits = |th: f64| inner.contains(x + step * th.cos(), y + step * th.sin());
    if fits(theta) {
        return theta;
    }
    let (mut c, mut s) = (theta.cos(), theta.sin());
    let nx = x + step * c;
    let ny = y + step * s;
    if nx < inner.min_x || nx > inner.max_x {
        c = -c;
    }
    if ny < inner.min_y || ny > inner.max_y {
        s = -s;
    }
    let reflected = s.atan2(c);
    if fits(reflected) {
        return wrap_angle(reflected);
    }
    let (cx, cy) = inner.center();
    wrap_angle((cy - y).atan2(cx - x))
}

/// Controls from a timestamped pose log by finite differences: speed from
/// the position step, yaw rate from the wrapped heading step. The last
/// control repeats the penultimate one.
pub fn derive_controls_from_poses(times: &[f64], poses: &[Pose2D]) -> Result<Vec<Control>> {
    if poses.len() < 2 || times.len() != poses.len() {
        return Err(Error::input("≥2 poses required, with one timestamp each"));
    }
    let mut out = Vec::with_capacity(poses.len());
    for i in 0..poses.len() - 1 {
        let dt = times[i + 1] - times[i];
        if !(dt > 0.0) {
            return Err(Error::input(format!(
                "timestamps must be strictly increasing (index {} -> {})",
                i,
                i + 1
            )));
        }
        out.push(Control {
            v: poses[i + 1].distance(&poses[i]) / dt,
            omega: angle_diff(poses[i + 1].theta, poses[i].theta) / dt,
        });
    }
    out.push(*out.last().expect("at least one control"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundViewSpec {
    /// Bearings across the field of view (view rows).
    pub n_rays: usize,
    /// Ranges along each ray (view columns).
    pub n_ranges: usize,
    /// Full field of view, radians.
    pub fov: f64,
    pub max_range: f64,
    pub channel_mix_seed: u64,
    /// Off-diagonal strength of the channel mixing matrix; 0 is identity.
    pub mix_strength: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub gamma: f64,
}

impl Default for GroundViewSpec {
    fn default() -> Self {
        Self {
            n_rays: 16,
            n_ranges: 24,
            fov: std::f64::consts::FRAC_PI_2,
            max_range: 6.0,
            channel_mix_seed: 1,
            mix_strength: 0.6,
            noise_std: 0.1,
            noise_seed: 2,
            gamma: 0.8,
        }
    }
}

impl GroundViewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rays == 0 || self.n_ranges == 0 {
            return Err(Error::config("ground view needs n_rays, n_ranges > 0"));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::config("ground view fov must be in (0, π)"));
        }
        if !(self.max_range > 0.0 && self.gamma > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::config("ground view needs max_range > 0, gamma > 0, noise_std >= 0"));
        }
        Ok(())
    }

    /// Bearing of ray `k`; row 0 is the left edge of the field of view.
    pub fn bearing(&self, k: usize) -> f64 {
        if self.n_rays == 1 {
            0.0
        } else {
            0.5 * self.fov - self.fov * k as f64 / (self.n_rays - 1) as f64
        }
    }

    pub fn range(&self, j: usize) -> f64 {
        self.max_range * (j + 1) as f64 / self.n_ranges as f64
    }

    /// Channel mixing matrix, row-major `channels × channels`.
    pub fn mixing_matrix(&self, channels: usize) -> Vec<f64> {
        let mut rng = seeds::rng(seeds::derive(self.channel_mix_seed, "channel-mix"));
        let scale = self.mix_strength / (channels as f64).sqrt();
        let mut m = vec![0.0; channels * channels];
        for i in 0..channels {
            for j in 0..channels {
                let z: f64 = StandardNormal.sample(&mut rng);
                m[i * channels + j] = if i == j { 1.0 } else { 0.0 } + scale * z;
            }
        }
        m
    }
}

/// Ground-level observation: `n_rays × n_ranges × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundObservation {
    pub view: ViewTensor,
    /// Carried for evaluation only.
    pub pose_truth: Pose2D,
}

/// Raw forward-wedge samples of `world` at `pose`, before mixing and noise.
pub fn sample_wedge(world: &GeoRaster, pose: &Pose2D, spec: &GroundViewSpec) -> Result<ViewTensor> {
    spec.validate()?;
    let ch = world.channels();
    let mut view = ViewTensor::zeros(spec.n_rays, spec.n_ranges, ch);
    let mut any = false;
    for k in 0..spec.n_rays {
        let phi = pose.theta + spec.bearing(k);
        let (c, s) = (phi.cos(), phi.sin());
        for j in 0..spec.n_ranges {
            let r = spec.range(j);
            let idx = (k * spec.n_ranges + j) * ch;
            any |= world.sample_world(pose.x + r * c, pose.y + r * s, &mut view.data[idx..idx + ch]);
        }
    }
    if !any {
        return Err(Error::FootprintOutOfBounds);
    }
    Ok(view)
}

/// Render the ground view: wedge sampling, channel mixing, signed power,
/// then additive Gaussian noise seeded by `(noise_seed, pose)`.
pub fn render_ground_view(world: &GeoRaster, pose: &Pose2D, spec: &GroundViewSpec) -> Result<GroundObservation> {
    let mut view = sample_wedge(world, pose, spec)?;
    let ch = view.channels;
    let mix = spec.mixing_matrix(ch);
    let mut rng = seeds::rng(seeds::derive_index(
        seeds::derive(spec.noise_seed, "ground-noise"),
        pose_key(pose),
    ));
    let mut mixed = vec![0.0; ch];
    for px in view.data.chunks_mut(ch) {
        for (i, m) in mixed.iter_mut().enumerate() {
            *m = (0..ch).map(|j| mix[i * ch + j] * px[j]).sum();
        }
        for (o, m) in px.iter_mut().zip(&mixed) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o = m.signum() * m.abs().powf(spec.gamma) + spec.noise_std * z;
        }
    }
    Ok(GroundObservation {
        view,
        pose_truth: *pose,
    })
}

/// Render views for many poses; output order follows input order.
pub fn render_ground_views(world: &GeoRaster, poses: &[Pose2D], spec: &GroundViewSpec) -> Result<Vec<GroundObservation>> {
    poses
        .par_iter()
        .map(|p| render_ground_view(world, p, spec))
        .collect()
}

fn pose_key(pose: &Pose2D) -> u64 {
    seeds::mix64(pose.x.to_bits()) ^ seeds::mix64(pose.y.to_bits().rotate_left(21)) ^ pose.theta.to_bits().rotate_left(42)
}
