//! Embedding index over a discrete grid of satellite-patch poses, exact k-NN,
//! and retrieval evaluation (precision–recall, top-X%).

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{SiameseModel, ViewKind};
use crate::error::{Error, Result};
use crate::geo::{angle_diff, crop_at_pose, wrap_angle, Bounds, CropSpec, GeoRaster, PairLabel, PairThresholds, Pose2D};

/// Regular product grid of poses: x × y × heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    bounds: Bounds,
    spacing_x: f64,
    spacing_y: f64,
    headings: Vec<f64>,
    nx: usize,
    ny: usize,
}

impl PoseGrid {
    pub fn new(bounds: Bounds, spacing_x: f64, spacing_y: f64, headings: Vec<f64>) -> Result<Self> {
        if !(spacing_x > 0.0 && spacing_y > 0.0) {
            return Err(Error::config("grid spacing must be > 0"));
        }
        if headings.is_empty() {
            return Err(Error::config("grid needs at least one heading"));
        }
        let headings: Vec<f64> = headings.into_iter().map(wrap_angle).collect();
        for (i, a) in headings.iter().enumerate() {
            for b in &headings[..i] {
                if angle_diff(*a, *b).abs() < 1e-9 {
                    return Err(Error::config(format!("duplicate grid heading {a} rad (mod 2π)")));
                }
            }
        }
        let nx = (bounds.width() / spacing_x + 1e-9).floor() as usize + 1;
        let ny = (bounds.height() / spacing_y + 1e-9).floor() as usize + 1;
        Ok(Self {
            bounds,
            spacing_x,
            spacing_y,
            headings,
            nx,
            ny,
        })
    }

    /// `n` evenly spaced headings starting at 0.
    pub fn uniform_headings(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| wrap_angle(std::f64::consts::TAU * i as f64 / n as f64))
            .collect()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.spacing_x, self.spacing_y)
    }

    pub fn headings(&self) -> &[f64] {
        &self.headings
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.headings.len())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.headings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn flat(&self, ix: usize, iy: usize, ih: usize) -> usize {
        (ix * self.ny + iy) * self.headings.len() + ih
    }

    pub fn pose(&self, i: usize) -> Pose2D {
        let nh = self.headings.len();
        let ih = i % nh;
        let iy = (i / nh) % self.ny;
        let ix = i / (nh * self.ny);
        Pose2D::new(
            self.bounds.min_x + ix as f64 * self.spacing_x,
            self.bounds.min_y + iy as f64 * self.spacing_y,
            self.headings[ih],
        )
    }

    pub fn poses(&self) -> impl Iterator<Item = Pose2D> + '_ {
        (0..self.len()).map(|i| self.pose(i))
    }

    fn axis_range(v: f64, min: f64, spacing: f64, n: usize, radius: f64) -> std::ops::Range<usize> {
        let lo = ((v - radius - min) / spacing).ceil().max(0.0);
        let hi = ((v + radius - min) / spacing).floor();
        if hi < 0.0 || lo > (n - 1) as f64 {
            return 0..0;
        }
        lo as usize..(hi as usize).min(n - 1) + 1
    }

    /// All grid indices labeled Positive relative to `pose`.
    pub fn positive_candidates(&self, pose: &Pose2D, thresholds: &PairThresholds) -> Vec<usize> {
        let r = thresholds.pos_dist;
        let mut out = Vec::new();
        for ix in Self::axis_range(pose.x, self.bounds.min_x, self.spacing_x, self.nx, r) {
            for iy in Self::axis_range(pose.y, self.bounds.min_y, self.spacing_y, self.ny, r) {
                for ih in 0..self.headings.len() {
                    let i = self.flat(ix, iy, ih);
                    if thresholds.label(pose, &self.pose(i)) == PairLabel::Positive {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    /// Grid index nearest to `pose` (per axis, heading by shortest arc), or
    /// `None` when the pose lies more than half a spacing outside the grid.
    pub fn nearest(&self, pose: &Pose2D) -> Option<usize> {
        let fx = (pose.x - self.bounds.min_x) / self.spacing_x;
        let fy = (pose.y - self.bounds.min_y) / self.spacing_y;
        if !(fx >= -0.5 && fy >= -0.5 && fx <= self.nx as f64 - 0.5 && fy <= self.ny as f64 - 0.5) {
            return None;
        }
        let ix = (fx.round() as usize).min(self.nx - 1);
        let iy = (fy.round() as usize).min(self.ny - 1);
        let ih = self
            .headings
            .iter()
            .enumerate()
            .min_by(|a, b| {
                angle_diff(pose.theta, *a.1)
                    .abs()
                    .total_cmp(&angle_diff(pose.theta, *b.1).abs())
            })
            .map(|(i, _)| i)
            .expect("headings non-empty");
        Some(self.flat(ix, iy, ih))
    }
}

/// Anything that maps a satellite-side pose to an embedding.
pub trait PoseEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed_pose(&self, pose: &Pose2D) -> Result<Vec<f64>>;
}

/// Crop the satellite raster at a pose and run the satellite encoder.
pub struct SatEmbedder<'a> {
    pub model: &'a SiameseModel,
    pub raster: &'a GeoRaster,
    pub crop: CropSpec,
}

impl PoseEmbedder for SatEmbedder<'_> {
    fn dim(&self) -> usize {
        self.model.config.embed_dim
    }

    fn embed_pose(&self, pose: &Pose2D) -> Result<Vec<f64>> {
        let patch = crop_at_pose(self.raster, pose, &self.crop)?;
        self.model.embed(ViewKind::Sat, &patch.view)
    }
}

/// Ideal features: the pose itself, `(x, y, w·cos θ, w·sin θ)`. Euclidean
/// distance between two oracle embeddings is the position offset combined
/// with `w` times the heading chord.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEmbedder {
    pub heading_weight: f64,
}

impl OracleEmbedder {
    pub fn features(&self, pose: &Pose2D) -> Vec<f64> {
        vec![
            pose.x,
            pose.y,
            self.heading_weight * pose.theta.cos(),
            self.heading_weight * pose.theta.sin(),
        ]
    }
}

impl PoseEmbedder for OracleEmbedder {
    fn dim(&self) -> usize {
        4
    }

    fn embed_pose(&self, pose: &Pose2D) -> Result<Vec<f64>> {
        Ok(self.features(pose))
    }
}

/// Precomputed embeddings for a set of unique poses.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    poses: Vec<Pose2D>,
    /// Row-major `len × dim`.
    embeddings: Vec<f32>,
    dim: usize,
    fingerprint: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub pose: Pose2D,
    pub distance: f64,
}

impl EmbeddingIndex {
    pub fn new(poses: Vec<Pose2D>, embeddings: Vec<f32>, dim: usize, fingerprint: u32) -> Result<Self> {
        if dim == 0 || embeddings.len() != poses.len() * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {dim} embedding values", poses.len()),
                found: format!("{}", embeddings.len()),
            });
        }
        let mut seen = HashSet::with_capacity(poses.len());
        for p in &poses {
            if !seen.insert((p.x.to_bits(), p.y.to_bits(), p.theta.to_bits())) {
                return Err(Error::input(format!("duplicate index pose {p:?}")));
            }
        }
        Ok(Self {
            poses,
            embeddings,
            dim,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    pub fn poses(&self) -> &[Pose2D] {
        &self.poses
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distance(&self, i: usize, query: &[f64]) -> f64 {
        self.embedding(i)
            .iter()
            .zip(query)
            .map(|(e, q)| {
                let d = q - f64::from(*e);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn distances(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.distance(i, query)).collect()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("query of length {}", self.dim),
                found: format!("{}", query.len()),
            });
        }
        Ok(())
    }

    /// Order by distance, then pose lexicographically.
    fn rank_cmp(&self, a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
        a.1.total_cmp(&b.1).then_with(|| self.poses[a.0].lex_cmp(&self.poses[b.0]))
    }

    /// Exact k nearest entries, ascending by distance.
    pub fn query(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        if k == 0 || k > self.len() {
            return Err(Error::input(format!("k = {k} outside 1..={}", self.len())));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, self.distance(i, query))).collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| self.rank_cmp(*a, *b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| self.rank_cmp(*a, *b));
        Ok(scored
            .into_iter()
            .map(|(index, distance)| Neighbor {
                index,
                pose: self.poses[index],
                distance,
            })
            .collect())
    }
}

/// Embed every grid pose. Entries follow grid order.
pub fn build_index(embedder: &dyn PoseEmbedder, grid: &PoseGrid, fingerprint: u32) -> Result<EmbeddingIndex> {
    if grid.is_empty() {
        return Err(Error::input("pose grid is empty"));
    }
    let poses: Vec<Pose2D> = grid.poses().collect();
    let dim = embedder.dim();
    let rows = poses
        .par_iter()
        .map(|p| embedder.embed_pose(p))
        .collect::<Result<Vec<_>>>()?;
    let mut flat = Vec::with_capacity(poses.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding of length {dim}"),
                found: format!("{}", r.len()),
            });
        }
        flat.extend(r.iter().map(|v| *v as f32));
    }
    EmbeddingIndex::new(poses, flat, dim, fingerprint)
}

/// Index of satellite-encoder embeddings of crops at every grid pose.
pub fn build_model_index(
    model: &SiameseModel,
    raster: &GeoRaster,
    grid: &PoseGrid,
    crop: &CropSpec,
    fingerprint: u32,
) -> Result<EmbeddingIndex> {
    let embedder = SatEmbedder {
        model,
        raster,
        crop: *crop,
    };
    build_index(&embedder, grid, fingerprint)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// Precision–recall sweep over ascending distance thresholds (a pair is
/// predicted to match iff its distance ≤ τ). Tied distances share one
/// threshold. AP is the step sum Σ (R_i − R_{i−1})·P_i.
pub fn pr_curve(scored: &[(f64, bool)]) -> Result<PrCurve> {
    let total_pos = scored.iter().filter(|s| s.1).count();
    if total_pos == 0 {
        return Err(Error::input("precision-recall needs at least one positive"));
    }
    if scored.iter().any(|s| s.0.is_nan()) {
        return Err(Error::input("NaN distance in scored pairs"));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == tau {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold: tau,
            precision,
            recall,
        });
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

/// Score every (query, entry) pair, labeling by pose thresholds and dropping
/// Excluded pairs.
pub fn scored_pairs(index: &EmbeddingIndex, queries: &[(Vec<f64>, Pose2D)], thresholds: &PairThresholds) -> Result<Vec<(f64, bool)>> {
    for (q, _) in queries {
        index.check_query(q)?;
    }
    let per_query: Vec<Vec<(f64, bool)>> = queries
        .par_iter()
        .map(|(q, truth)| {
            (0..index.len())
                .filter_map(|i| match thresholds.label(truth, &index.poses[i]) {
                    PairLabel::Positive => Some((index.distance(i, q), true)),
                    PairLabel::Negative => Some((index.distance(i, q), false)),
                    PairLabel::Excluded => None,
                })
                .collect()
        })
        .collect();
    Ok(per_query.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopXResult {
    /// Candidate-set sizes, percent of the index.
    pub x_percent: Vec<f64>,
    /// Fraction of evaluated queries whose best-ranked positive entry falls
    /// within the top ⌈X%·len⌉ results.
    pub fraction: Vec<f64>,
    pub evaluated: usize,
    /// Queries without any positive entry in the index.
    pub excluded: usize,
}

/// Rank (0-based) of the best-ranked Positive entry for each query, or
/// `None` when the query has no Positive entry.
pub fn best_positive_ranks(
    index: &EmbeddingIndex,
    queries: &[(Vec<f64>, Pose2D)],
    thresholds: &PairThresholds,
) -> Result<Vec<Option<usize>>> {
    for (q, _) in queries {
        index.check_query(q)?;
    }
    Ok(queries
        .par_iter()
        .map(|(q, truth)| {
            let dists = index.distances(q);
            let best = (0..index.len())
                .filter(|&i| thresholds.label(truth, &index.poses[i]) == PairLabel::Positive)
                .min_by(|&a, &b| index.rank_cmp((a, dists[a]), (b, dists[b])))?;
            let rank = (0..index.len())
                .filter(|&i| index.rank_cmp((i, dists[i]), (best, dists[best])).is_lt())
                .count();
            Some(rank)
        })
        .collect())
}

pub fn topx_retrieval(
    index: &EmbeddingIndex,
    queries: &[(Vec<f64>, Pose2D)],
    thresholds: &PairThresholds,
    x_percent: &[f64],
) -> Result<TopXResult> {
    if index.is_empty() {
        return Err(Error::input("empty index"));
    }
    let ranks = best_positive_ranks(index, queries, thresholds)?;
    let found: Vec<usize> = ranks.iter().flatten().copied().collect();
    let excluded = ranks.len() - found.len();
    let fraction = x_percent
        .iter()
        .map(|x| {
            let cutoff = ((x / 100.0) * index.len() as f64).ceil() as usize;
            if found.is_empty() {
                0.0
            } else {
                found.iter().filter(|&&r| r < cutoff).count() as f64 / found.len() as f64
            }
        })
        .collect();
    Ok(TopXResult {
        x_percent: x_percent.to_vec(),
        fraction,
        evaluated: found.len(),
        excluded,
    })
}
