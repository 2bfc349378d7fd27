//! Pair mining and minibatch Adam training on the contrastive loss.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PairGrads, SiameseModel, ViewKind, ViewStats};
use crate::error::{Error, Result};
use crate::geo::{crop_at_pose, CropSpec, GeoRaster, PairLabel, PairThresholds, Pose2D, ViewTensor};
use crate::matching::PoseGrid;
use crate::seeds;

/// Samples per parallel work unit inside a minibatch. Fixed so the reduction
/// order never depends on the worker count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Negatives mined per positive.
    pub neg_per_pos: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 8.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 6,
            neg_per_pos: 9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::config("margin must be > 0"));
        }
        let betas_ok = self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0;
        if !betas_ok {
            return Err(Error::config("Adam betas must lie in (0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !(self.adam_eps > 0.0) || self.batch_size == 0 {
            return Err(Error::config("learning_rate >= 0, adam_eps > 0, batch_size > 0 required"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut off = 0;
        for (p, g) in params.into_iter().zip(grads) {
            let len = p.len();
            let m = &mut self.m[off..off + len];
            let v = &mut self.v[off..off + len];
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            off += len;
        }
    }
}

/// One mined pair: ground observation index, satellite patch pose, label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ground: usize,
    pub sat_pose: Pose2D,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineReport {
    pub pairs: Vec<PairRecord>,
    /// Observations with no positive grid pose.
    pub skipped: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// For every ground pose: all Positive grid poses become matching pairs,
/// plus `neg_per_pos` Negative grid poses per positive, sampled uniformly
/// without replacement. Excluded poses never appear.
pub fn mine_pairs(
    ground_poses: &[Pose2D],
    grid: &PoseGrid,
    thresholds: &PairThresholds,
    neg_per_pos: usize,
    seed: u64,
) -> Result<MineReport> {
    thresholds.validate()?;
    if grid.is_empty() {
        return Err(Error::input("pose grid is empty"));
    }
    let mut rng = seeds::rng(seeds::derive(seed, "mine"));
    let mut pairs = Vec::new();
    let (mut skipped, mut positives, mut negatives) = (0, 0, 0);
    for (gi, gp) in ground_poses.iter().enumerate() {
        let pos = grid.positive_candidates(gp, thresholds);
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        for &i in &pos {
            pairs.push(PairRecord {
                ground: gi,
                sat_pose: grid.pose(i),
                label: true,
            });
        }
        positives += pos.len();
        let want = neg_per_pos * pos.len();
        let negs = sample_negatives(grid, gp, thresholds, want, &mut rng);
        negatives += negs.len();
        for i in negs {
            pairs.push(PairRecord {
                ground: gi,
                sat_pose: grid.pose(i),
                label: false,
            });
        }
    }
    Ok(MineReport {
        pairs,
        skipped,
        positives,
        negatives,
    })
}

fn sample_negatives(
    grid: &PoseGrid,
    ground: &Pose2D,
    thresholds: &PairThresholds,
    want: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = grid.len();
    let mut chosen = Vec::with_capacity(want);
    let mut seen = HashSet::with_capacity(want);
    let mut attempts = 0;
    while chosen.len() < want && attempts < 50 * want.max(1) {
        attempts += 1;
        let i = rng.random_range(0..n);
        if thresholds.label(ground, &grid.pose(i)) == PairLabel::Negative && seen.insert(i) {
            chosen.push(i);
        }
    }
    if chosen.len() < want {
        // sparse negatives: enumerate and draw from what is left
        let mut rest: Vec<usize> = (0..n)
            .filter(|i| !seen.contains(i) && thresholds.label(ground, &grid.pose(*i)) == PairLabel::Negative)
            .collect();
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(want - chosen.len()));
    }
    chosen
}

/// Mined pairs together with the data needed to materialize them. Satellite
/// patches are cropped on demand.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub grounds: Vec<ViewTensor>,
    pub raster: GeoRaster,
    pub crop: CropSpec,
    pub pairs: Vec<PairRecord>,
}

/// A materialized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair<'a> {
    pub ground: &'a ViewTensor,
    pub sat: ViewTensor,
    pub label: bool,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> Result<LabeledPair<'_>> {
        let rec = &self.pairs[i];
        let ground = self
            .grounds
            .get(rec.ground)
            .ok_or_else(|| Error::input(format!("pair {i} references missing observation {}", rec.ground)))?;
        Ok(LabeledPair {
            ground,
            sat: crop_at_pose(&self.raster, &rec.sat_pose, &self.crop)?.view,
            label: rec.label,
        })
    }

    /// Per-channel statistics of the ground views and of up to `max_sat`
    /// satellite crops (evenly strided over the pair list).
    pub fn fit_stats(&self, max_sat: usize) -> Result<(ViewStats, ViewStats)> {
        let ground = compute_view_stats(self.grounds.iter())?;
        let stride = (self.pairs.len() / max_sat.max(1)).max(1);
        let crops = self
            .pairs
            .iter()
            .step_by(stride)
            .map(|p| crop_at_pose(&self.raster, &p.sat_pose, &self.crop).map(|c| c.view))
            .collect::<Result<Vec<_>>>()?;
        let sat = compute_view_stats(crops.iter())?;
        Ok((ground, sat))
    }
}

/// Per-channel mean and standard deviation over a set of views. Channels
/// with zero spread get std 1.
pub fn compute_view_stats<'a>(views: impl Iterator<Item = &'a ViewTensor>) -> Result<ViewStats> {
    let mut sum = Vec::new();
    let mut sq = Vec::new();
    let mut count = 0usize;
    for v in views {
        if sum.is_empty() {
            sum = vec![0.0; v.channels];
            sq = vec![0.0; v.channels];
        } else if sum.len() != v.channels {
            return Err(Error::input("views disagree on channel count"));
        }
        for px in v.data.chunks(v.channels) {
            for (k, x) in px.iter().enumerate() {
                sum[k] += x;
                sq[k] += x * x;
            }
        }
        count += v.rows * v.cols;
    }
    if count == 0 {
        return Err(Error::input("no views to compute statistics from"));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let s = (q / n - m * m).max(0.0).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(ViewStats { mean, std })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean validation loss per epoch, when a validation set was given.
    pub val_loss: Vec<f64>,
    /// Mean loss of every minibatch.
    pub step_loss: Vec<f64>,
    /// Epoch whose parameters were returned (1-based; 0 = initial model).
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SiameseModel,
    pub report: TrainReport,
}

/// Minibatch Adam on the mean contrastive loss. With a validation set, the
/// parameters of the epoch with the lowest validation loss are returned;
/// otherwise those of the final epoch. Returned parameters are rounded to f32.
pub fn train(
    data: &PairDataset,
    model_init: SiameseModel,
    cfg: &TrainConfig,
    validation: Option<&PairDataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_pos = data.pairs.iter().filter(|p| p.label).count();
    if n_pos == 0 || n_pos == data.len() {
        return Err(Error::input("training needs at least one positive and one negative pair"));
    }
    let mut model = model_init;
    let ground_inputs = prepare_grounds(&model, data)?;
    let n_params = model.ground.num_params() + model.sat.num_params();
    let mut adam = Adam::new(n_params, cfg);
    let mut rng = seeds::rng(seeds::derive(cfg.seed, "train-shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, SiameseModel)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss_sum, mut grads) = batch_grads(&model, data, &ground_inputs, batch, cfg.margin)?;
            let mean = loss_sum / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: mean,
                    epoch,
                    step,
                    learning_rate: cfg.learning_rate,
                });
            }
            epoch_sum += loss_sum;
            report.step_loss.push(mean);
            grads.scale(1.0 / batch.len() as f64);
            let mut params = model.ground.tensors_mut();
            params.extend(model.sat.tensors_mut());
            let mut g = grads.ground.tensors();
            g.extend(grads.sat.tensors());
            adam.step(params, g);
        }
        report.epoch_loss.push(epoch_sum / data.len() as f64);
        log::info!("epoch {} loss {:.5}", epoch + 1, report.epoch_loss[epoch]);
        if let Some(val) = validation {
            let v = mean_loss(&model, val, cfg.margin)?;
            report.val_loss.push(v);
            log::info!("epoch {} validation loss {:.5}", epoch + 1, v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
                report.best_epoch = epoch + 1;
            }
        }
    }
    let mut model = match best {
        Some((_, m)) => m,
        None => {
            report.best_epoch = cfg.epochs;
            model
        }
    };
    model.quantize_f32();
    Ok(TrainOutcome { model, report })
}

fn prepare_grounds(model: &SiameseModel, data: &PairDataset) -> Result<Vec<Vec<f64>>> {
    data.grounds
        .par_iter()
        .map(|g| model.prepare(ViewKind::Ground, g))
        .collect()
}

fn batch_grads(
    model: &SiameseModel,
    data: &PairDataset,
    ground_inputs: &[Vec<f64>],
    batch: &[usize],
    margin: f64,
) -> Result<(f64, PairGrads)> {
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc: Option<(f64, PairGrads)> = None;
            for &i in chunk {
                let rec = &data.pairs[i];
                let sat = crop_at_pose(&data.raster, &rec.sat_pose, &data.crop)?.view;
                let s = model.prepare(ViewKind::Sat, &sat)?;
                let (loss, g) = model.loss_and_grads(&ground_inputs[rec.ground], &s, rec.label, margin)?;
                match acc.as_mut() {
                    Some((l, a)) => {
                        *l += loss;
                        a.add_assign(&g);
                    }
                    None => acc = Some((loss, g)),
                }
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = partials.into_iter();
    let (mut loss, mut grads) = it.next().expect("batch is non-empty");
    for (l, g) in it {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Mean contrastive loss of `model` over a dataset.
pub fn mean_loss(model: &SiameseModel, data: &PairDataset, margin: f64) -> Result<f64> {
    let ground_inputs = prepare_grounds(model, data)?;
    let losses = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let rec = &data.pairs[i];
            let sat = crop_at_pose(&data.raster, &rec.sat_pose, &data.crop)?.view;
            let s = model.prepare(ViewKind::Sat, &sat)?;
            model.pair_loss(&ground_inputs[rec.ground], &s, rec.label, margin)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
