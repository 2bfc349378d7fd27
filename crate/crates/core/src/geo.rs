//! Planar poses, georeferenced rasters and pose-conditioned rotated crops.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let a = (theta + PI).rem_euclid(TAU) - PI;
    if a <= -PI {
        a + TAU
    } else {
        a
    }
}

/// Shortest signed arc from `b` to `a`, in (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Planar vehicle pose. `theta` is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn heading(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Compose with a motion expressed in this pose's frame.
    pub fn compose(&self, forward: f64, left: f64, dtheta: f64) -> Pose2D {
        let (c, s) = self.heading();
        Pose2D::new(
            self.x + forward * c - left * s,
            self.y + forward * s + left * c,
            self.theta + dtheta,
        )
    }

    /// Lexicographic (x, y, theta) order.
    pub fn lex_cmp(&self, other: &Pose2D) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.theta.total_cmp(&other.theta))
    }
}

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let all_finite = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite());
        if !all_finite || min_x > max_x || min_y > max_y {
            return Err(Error::config(format!(
                "bounds must be finite with min <= max, got [{min_x}, {max_x}] x [{min_y}, {max_y}]"
            )));
        }
        Ok(Self {
            min_x,
            min_y,
            max_x,
            max_y,
        })
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    /// Shrink by `margin` on every side. Fails if nothing is left.
    pub fn inset(&self, margin: f64) -> Result<Bounds> {
        Bounds::new(
            self.min_x + margin,
            self.min_y + margin,
            self.max_x - margin,
            self.max_y - margin,
        )
    }
}

/// Affine pixel → world map in world-file form:
///
/// ```text
/// x = a·col + b·row + c
/// y = d·col + e·row + f
/// ```
///
/// `(col, row) = (0, 0)` is the center of the upper-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct GeoTransform {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    e: f64,
    f: f64,
    // inverse of the linear part
    ia: f64,
    ib: f64,
    id: f64,
    ie: f64,
}

impl GeoTransform {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<Self> {
        let det = a * e - b * d;
        if !det.is_finite() || det == 0.0 || ![a, b, c, d, e, f].iter().all(|v| v.is_finite()) {
            return Err(Error::SingularTransform(det));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            e,
            f,
            ia: e / det,
            ib: -b / det,
            id: -d / det,
            ie: a / det,
        })
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0).expect("identity is invertible")
    }

    /// North-up raster: square pixels of `pixel_size` meters, pixel (0,0)
    /// centered at `(x0, y0)`, rows increasing southward.
    pub fn north_up(x0: f64, y0: f64, pixel_size: f64) -> Result<Self> {
        Self::new(pixel_size, 0.0, x0, 0.0, -pixel_size, y0)
    }

    /// Coefficients in (a, b, c, d, e, f) order.
    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.a * col + self.b * row + self.c,
            self.d * col + self.e * row + self.f,
        )
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        self.offset_to_pixel(x - self.c, y - self.f)
    }

    /// Apply the inverse linear part to a world-frame vector.
    pub fn offset_to_pixel(&self, dx: f64, dy: f64) -> (f64, f64) {
        (self.ia * dx + self.ib * dy, self.id * dx + self.ie * dy)
    }

    /// Geometric mean pixel size in meters.
    pub fn pixel_size(&self) -> f64 {
        (self.a * self.e - self.b * self.d).abs().sqrt()
    }

    /// Same transform shifted by a world vector.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.a, self.b, self.c + dx, self.d, self.e, self.f + dy)
            .expect("translation preserves invertibility")
    }

    /// Six-line world file text: a, d, b, e, c, f.
    pub fn to_world_file(&self) -> String {
        [self.a, self.d, self.b, self.e, self.c, self.f]
            .iter()
            .map(|v| format!("{v:?}\n"))
            .collect()
    }

    pub fn from_world_file(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|e| Error::input(format!("world file value {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 6 {
            return Err(Error::input(format!(
                "world file must have 6 values, found {}",
                values.len()
            )));
        }
        let [a, d, b, e, c, f] = [
            values[0], values[1], values[2], values[3], values[4], values[5],
        ];
        Self::new(a, b, c, d, e, f)
    }
}

impl TryFrom<[f64; 6]> for GeoTransform {
    type Error = Error;

    fn try_from(v: [f64; 6]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

impl From<GeoTransform> for [f64; 6] {
    fn from(t: GeoTransform) -> Self {
        t.coefficients()
    }
}

/// Multi-channel georeferenced raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    transform: GeoTransform,
}

impl GeoRaster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        transform: GeoTransform,
    ) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::input("raster dimensions must be nonzero"));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} samples"),
                found: format!("{} samples", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("raster samples must be finite"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            transform,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn with_transform(mut self, transform: GeoTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn get(&self, col: usize, row: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// World-space rectangle covered by pixel centers.
    pub fn bounds(&self) -> Bounds {
        let w = (self.width - 1) as f64;
        let h = (self.height - 1) as f64;
        let corners = [
            self.transform.pixel_to_world(0.0, 0.0),
            self.transform.pixel_to_world(w, 0.0),
            self.transform.pixel_to_world(0.0, h),
            self.transform.pixel_to_world(w, h),
        ];
        let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        Bounds {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    /// Bilinear sample at continuous pixel coordinates, writing one value per
    /// channel into `out`. Returns false (and leaves `out` zeroed) outside the
    /// pixel-center hull.
    pub fn sample_pixel(&self, col: f64, row: f64, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        let w = self.width;
        let h = self.height;
        let inside = col >= 0.0 && row >= 0.0 && col <= (w - 1) as f64 && row <= (h - 1) as f64;
        if !inside {
            out.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let (c0, tc) = split_coord(col, w);
        let (r0, tr) = split_coord(row, h);
        let c1 = (c0 + 1).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let ch = self.channels;
        let i00 = (r0 * w + c0) * ch;
        let i01 = (r0 * w + c1) * ch;
        let i10 = (r1 * w + c0) * ch;
        let i11 = (r1 * w + c1) * ch;
        for (k, o) in out.iter_mut().enumerate() {
            let top = (1.0 - tc) * f64::from(self.data[i00 + k]) + tc * f64::from(self.data[i01 + k]);
            let bottom =
                (1.0 - tc) * f64::from(self.data[i10 + k]) + tc * f64::from(self.data[i11 + k]);
            *o = (1.0 - tr) * top + tr * bottom;
        }
        true
    }

    pub fn sample_world(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        let (col, row) = self.transform.world_to_pixel(x, y);
        self.sample_pixel(col, row, out)
    }
}

fn split_coord(v: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i = (v.floor() as usize).min(n - 2);
    (i, v - i as f64)
}

/// Dense view tensor, `rows × cols × channels`, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTensor {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ViewTensor {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.cols + col) * self.channels + channel]
    }
}

/// Satellite crop footprint. Rows span the across-track axis, columns the
/// along-track (heading) axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    /// Samples along the heading axis (patch columns).
    pub out_width: usize,
    /// Samples across the heading axis (patch rows).
    pub out_height: usize,
    pub extent_across: f64,
    pub extent_along: f64,
    /// Distance from the pose to the patch center, along the heading.
    pub lookahead: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            out_width: 40,
            out_height: 27,
            extent_across: 5.3,
            extent_along: 7.8,
            lookahead: 0.5,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self.out_width > 0
            && self.out_height > 0
            && self.extent_across > 0.0
            && self.extent_along > 0.0
            && self.lookahead > 0.0;
        if !positive {
            return Err(Error::config("crop dimensions, extents and lookahead must be positive"));
        }
        if self.extent_along < self.extent_across {
            return Err(Error::config("crop extent_along must be >= extent_across"));
        }
        Ok(())
    }

    /// Half-diagonal of the footprint plus the lookahead: the farthest any
    /// sample lands from the pose.
    pub fn reach(&self) -> f64 {
        self.lookahead + 0.5 * self.extent_along.hypot(self.extent_across)
    }

    /// Sample offsets (along, across) in meters relative to the patch center,
    /// for `(row, col)`. Row 0 is the left-most across-track line.
    pub fn offset(&self, row: usize, col: usize) -> (f64, f64) {
        let s_al = self.extent_along / self.out_width as f64;
        let s_ac = self.extent_across / self.out_height as f64;
        let along = (col as f64 + 0.5 - 0.5 * self.out_width as f64) * s_al;
        let across = (0.5 * self.out_height as f64 - row as f64 - 0.5) * s_ac;
        (along, across)
    }
}

/// A cropped patch plus per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub view: ViewTensor,
    pub mask: Vec<bool>,
}

/// Rotated bilinear crop of `raster` centered `lookahead` meters ahead of
/// `pose`, long axis along the heading. Samples off the raster are zero with
/// `mask = false`.
pub fn crop_at_pose(raster: &GeoRaster, pose: &Pose2D, spec: &CropSpec) -> Result<Patch> {
    let t = raster.transform();
    let coeffs = t.coefficients();
    let (cos, sin) = pose.heading();
    // all pixel-space quantities derived from (pose - origin) so that a common
    // translation of raster and pose leaves the arithmetic unchanged
    let (pc, pr) = t.offset_to_pixel(pose.x - coeffs[2], pose.y - coeffs[5]);
    let (al_c, al_r) = t.offset_to_pixel(cos, sin);
    let (ac_c, ac_r) = t.offset_to_pixel(-sin, cos);
    let center_c = pc + spec.lookahead * al_c;
    let center_r = pr + spec.lookahead * al_r;

    let ch = raster.channels();
    let mut view = ViewTensor::zeros(spec.out_height, spec.out_width, ch);
    let mut mask = vec![false; spec.out_height * spec.out_width];
    let mut any = false;
    for row in 0..spec.out_height {
        for col in 0..spec.out_width {
            let (along, across) = spec.offset(row, col);
            let c = center_c + along * al_c + across * ac_c;
            let r = center_r + along * al_r + across * ac_r;
            let idx = row * spec.out_width + col;
            let ok = raster.sample_pixel(c, r, &mut view.data[idx * ch..(idx + 1) * ch]);
            mask[idx] = ok;
            any |= ok;
        }
    }
    if !any {
        return Err(Error::FootprintOutOfBounds);
    }
    Ok(Patch { view, mask })
}

/// Pair label under the distance / heading thresholds used for mining and
/// retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative,
    Excluded,
}

/// Correspondence thresholds. Positive iff within `pos_dist` and `pos_angle`;
/// Negative iff farther than `neg_dist`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    pub pos_dist: f64,
    pub pos_angle: f64,
    pub neg_dist: f64,
}

impl Default for PairThresholds {
    /// 0.4 m / 30° / 8 m.
    fn default() -> Self {
        Self {
            pos_dist: 0.4,
            pos_angle: 30f64.to_radians(),
            neg_dist: 8.0,
        }
    }
}

impl PairThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_dist >= 0.0 && self.pos_dist < self.neg_dist && self.pos_angle >= 0.0) {
            return Err(Error::config("pair thresholds require 0 <= pos_dist < neg_dist"));
        }
        Ok(())
    }

    pub fn label(&self, ground: &Pose2D, sat: &Pose2D) -> PairLabel {
        label_pair(ground, sat, self.pos_dist, self.pos_angle, self.neg_dist)
    }
}

pub fn label_pair(
    ground_pose: &Pose2D,
    sat_patch_pose: &Pose2D,
    pos_dist: f64,
    pos_angle: f64,
    neg_dist: f64,
) -> PairLabel {
    let dist = ground_pose.distance(sat_patch_pose);
    if dist > neg_dist {
        return PairLabel::Negative;
    }
    let dtheta = angle_diff(ground_pose.theta, sat_patch_pose.theta).abs();
    if dist <= pos_dist && dtheta <= pos_angle {
        PairLabel::Positive
    } else {
        PairLabel::Excluded
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn wrap_angle_range_and_tie() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5 - TAU), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            angle_diff((-179f64).to_radians(), 179f64.to_radians()),
            2f64.to_radians(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn identity_transform() {
        let t = GeoTransform::identity();
        assert_eq!(t.world_to_pixel(3.0, 4.0), (3.0, 4.0));
    }

    #[test]
    fn north_up_half_meter() {
        let t = GeoTransform::north_up(0.0, 0.0, 0.5).unwrap();
        let (c, r) = t.world_to_pixel(10.0, 10.0);
        assert_abs_diff_eq!(c, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r, -20.0, epsilon = 1e-12);
    }

    #[test]
    fn footprint_pixel_size() {
        // 270 px across spanning 53 m
        let ps = 53.0 / 270.0;
        assert_abs_diff_eq!(ps, 0.1963, epsilon = 1e-4);
        let t = GeoTransform::north_up(0.0, 0.0, ps).unwrap();
        assert_abs_diff_eq!(t.pixel_size(), ps, epsilon = 1e-15);
    }

    #[test]
    fn singular_transform_rejected() {
        assert!(matches!(
            GeoTransform::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0),
            Err(Error::SingularTransform(_))
        ));
    }

    #[test]
    fn world_file_round_trip() {
        let t = GeoTransform::new(0.25, 0.01, 12.5, -0.02, -0.25, 128.125).unwrap();
        let text = t.to_world_file();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap(), "0.25");
        assert_eq!(text.lines().nth(1).unwrap(), "-0.02");
        assert_eq!(GeoTransform::from_world_file(&text).unwrap(), t);
    }

    fn constant_raster(w: usize, h: usize, value: f32) -> GeoRaster {
        GeoRaster::new(
            w,
            h,
            2,
            vec![value; w * h * 2],
            GeoTransform::north_up(0.0, (h - 1) as f64 * 0.25, 0.25).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_raster_crops_constant() {
        let r = constant_raster(64, 64, 1.5);
        let p = crop_at_pose(&r, &Pose2D::new(8.0, 8.0, 0.7), &CropSpec::default()).unwrap();
        assert!(p.mask.iter().all(|&m| m));
        assert!(p.view.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn footprint_fully_outside_is_error() {
        let r = constant_raster(32, 32, 1.0);
        let err = crop_at_pose(&r, &Pose2D::new(500.0, 500.0, 0.0), &CropSpec::default());
        assert!(matches!(err, Err(Error::FootprintOutOfBounds)));
        assert_eq!(Error::FootprintOutOfBounds.to_string(), "footprint out of bounds");
    }

    #[test]
    fn partial_footprint_masks_outside() {
        let r = constant_raster(32, 32, 1.0);
        let p = crop_at_pose(&r, &Pose2D::new(0.0, 4.0, 0.0), &CropSpec::default()).unwrap();
        assert!(p.mask.iter().any(|&m| m));
        assert!(p.mask.iter().any(|&m| !m));
        for (i, &m) in p.mask.iter().enumerate() {
            if !m {
                assert!(p.view.data[i * 2..i * 2 + 2].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn heading_reversal_rotates_patch() {
        // radially symmetric field about the shared patch center
        let (w, h) = (80, 80);
        let t = GeoTransform::north_up(0.0, 19.75, 0.25).unwrap();
        let (cx, cy) = (10.0, 10.0);
        let mut data = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let (x, y) = t.pixel_to_world(col as f64, row as f64);
                data.push((-((x - cx).powi(2) + (y - cy).powi(2)) / 8.0).exp() as f32);
            }
        }
        let r = GeoRaster::new(w, h, 1, data, t).unwrap();
        let spec = CropSpec {
            out_width: 9,
            out_height: 5,
            extent_across: 1.0,
            extent_along: 2.0,
            lookahead: 0.5,
        };
        let a = crop_at_pose(&r, &Pose2D::new(cx - 0.5, cy, 0.0), &spec).unwrap();
        let b = crop_at_pose(&r, &Pose2D::new(cx + 0.5, cy, PI), &spec).unwrap();
        for row in 0..spec.out_height {
            for col in 0..spec.out_width {
                let va = a.view.at(row, col, 0);
                let vb = b.view.at(spec.out_height - 1 - row, spec.out_width - 1 - col, 0);
                assert_abs_diff_eq!(va, vb, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn bright_pixel_lands_at_patch_center() {
        let (w, h) = (64, 64);
        let t = GeoTransform::north_up(0.0, 15.75, 0.25).unwrap();
        let pose = Pose2D::new(7.0, 7.0, 0.9);
        let spec = CropSpec {
            out_width: 21,
            out_height: 13,
            extent_across: 3.0,
            extent_along: 5.0,
            lookahead: 1.0,
        };
        let (tx, ty) = (pose.x + spec.lookahead * pose.theta.cos(), pose.y + spec.lookahead * pose.theta.sin());
        let (tc, tr) = t.world_to_pixel(tx, ty);
        let (bc, br) = (tc.round() as usize, tr.round() as usize);
        let mut data = vec![0f32; w * h];
        data[br * w + bc] = 1.0;
        let r = GeoRaster::new(w, h, 1, data, t).unwrap();
        let p = crop_at_pose(&r, &pose, &spec).unwrap();
        let (mut best, mut best_idx) = (f64::NEG_INFINITY, 0);
        for (i, &v) in p.view.data.iter().enumerate() {
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        // brute force: the output sample whose world point is nearest the bright pixel
        let (bx, by) = t.pixel_to_world(bc as f64, br as f64);
        let mut nearest = (f64::INFINITY, 0);
        for row in 0..spec.out_height {
            for col in 0..spec.out_width {
                let (al, ac) = spec.offset(row, col);
                let x = tx + al * pose.theta.cos() - ac * pose.theta.sin();
                let y = ty + al * pose.theta.sin() + ac * pose.theta.cos();
                let d = (x - bx).hypot(y - by);
                if d < nearest.0 {
                    nearest = (d, row * spec.out_width + col);
                }
            }
        }
        let (row, col) = (best_idx / spec.out_width, best_idx % spec.out_width);
        let (nrow, ncol) = (nearest.1 / spec.out_width, nearest.1 % spec.out_width);
        assert!(row.abs_diff(nrow) <= 1 && col.abs_diff(ncol) <= 1);
        assert!(row.abs_diff(spec.out_height / 2) <= 1 && col.abs_diff(spec.out_width / 2) <= 1);
    }

    #[test]
    fn label_pair_examples() {
        let th = PairThresholds {
            pos_dist: 4.0,
            pos_angle: 30f64.to_radians(),
            neg_dist: 80.0,
        };
        let g = Pose2D::new(0.0, 0.0, 0.0);
        assert_eq!(th.label(&g, &Pose2D::new(3.0, 0.0, 20f64.to_radians())), PairLabel::Positive);
        assert_eq!(th.label(&g, &Pose2D::new(100.0, 0.0, 2.0)), PairLabel::Negative);
        assert_eq!(th.label(&g, &Pose2D::new(10.0, 0.0, 0.0)), PairLabel::Excluded);
        // wraparound: -179° vs +179° is a 2° difference
        let a = Pose2D::new(0.0, 0.0, (-179f64).to_radians());
        let b = Pose2D::new(1.0, 0.0, 179f64.to_radians());
        assert_eq!(th.label(&a, &b), PairLabel::Positive);
    }

    #[test]
    fn bilinear_exact_at_centers() {
        let t = GeoTransform::identity();
        let data: Vec<f32> = (0..5 * 4 * 2).map(|i| (i as f32 * 0.37).sin()).collect();
        let r = GeoRaster::new(5, 4, 2, data, t).unwrap();
        let mut out = [0.0; 2];
        for row in 0..4 {
            for col in 0..5 {
                assert!(r.sample_pixel(col as f64, row as f64, &mut out));
                for (k, v) in out.iter().enumerate() {
                    assert_eq!(*v, f64::from(r.get(col, row, k)));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn transform_round_trip(
            a in 0.05f64..5.0, b in -1.0f64..1.0, d in -1.0f64..1.0, e in -5.0f64..-0.05,
            c in -1e4f64..1e4, f in -1e4f64..1e4, x in -1e4f64..1e4, y in -1e4f64..1e4,
        ) {
            prop_assume!((a * e - b * d).abs() > 1e-3);
            let t = GeoTransform::new(a, b, c, d, e, f).unwrap();
            let (col, row) = t.world_to_pixel(x, y);
            let (x2, y2) = t.pixel_to_world(col, row);
            prop_assert!((x2 - x).abs() <= 1e-9 && (y2 - y).abs() <= 1e-9);
        }

        #[test]
        fn crop_translation_equivariant(
            px in 0i32..256, py in 0i32..256, th in -200i32..200,
            vx in -4096i32..4096, vy in -4096i32..4096,
        ) {
            let (w, h) = (48, 40);
            let data: Vec<f32> = (0..w * h).map(|i| ((i * 7919) % 113) as f32 / 113.0).collect();
            let t = GeoTransform::north_up(0.0, 9.75, 0.25).unwrap();
            let r = GeoRaster::new(w, h, 1, data.clone(), t).unwrap();
            let pose = Pose2D::new(2.0 + px as f64 / 32.0, 2.0 + py as f64 / 32.0, th as f64 / 64.0);
            let (vx, vy) = (vx as f64, vy as f64);
            let r2 = r.clone().with_transform(t.translated(vx, vy));
            let pose2 = Pose2D { x: pose.x + vx, y: pose.y + vy, theta: pose.theta };
            let spec = CropSpec { out_width: 8, out_height: 6, extent_across: 1.5, extent_along: 2.0, lookahead: 0.5 };
            let a = crop_at_pose(&r, &pose, &spec);
            let b = crop_at_pose(&r2, &pose2, &spec);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one crop failed"),
            }
        }
    }
}
