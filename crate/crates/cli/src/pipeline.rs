//! Pipeline stages. Each stage reads the artifacts of earlier stages from
//! the output directory and writes its own; all randomness derives from the
//! resolved config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use cvmcl::embed::{self, PairDataset, SiameseModel, TrainReport};
use cvmcl::filter::{
    calibrate_alpha, init_particles, run_localization, DistanceProvider, EmbedderDistance, IndexDistance, Motion,
    RoadMask,
};
use cvmcl::geo::{Bounds, GeoRaster, Pose2D, ViewTensor};
use cvmcl::io::{self, MetricsReport, TopXRow};
use cvmcl::matching::{
    build_index, pr_curve, scored_pairs, topx_retrieval, EmbeddingIndex, OracleEmbedder, PoseEmbedder, PoseGrid,
    SatEmbedder,
};
use cvmcl::seeds;
use cvmcl::sim::{generate_trajectory, generate_world, render_ground_views, TrajectorySpec, TrajectoryStep};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AlphaCalibration, RunConfig};

/// Refusal to pair a model with an index built from a different model.
#[derive(Debug, thiserror::Error)]
#[error("model fingerprint {model:#010x} does not match index fingerprint {index:#010x}; rebuild the index with this model")]
pub struct FingerprintMismatch {
    pub model: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Region {
    Train,
    Eval,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Train => "train",
            Region::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EmbedderKind {
    Model,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProviderKind {
    Oracle,
    Model,
    Index,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Oracle => "oracle",
            ProviderKind::Model => "model",
            ProviderKind::Index => "index",
        })
    }
}

/// Trajectory sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajSet {
    Train,
    Val,
    Eval,
}

impl TrajSet {
    fn name(self) -> &'static str {
        match self {
            TrajSet::Train => "train",
            TrajSet::Val => "val",
            TrajSet::Eval => "eval",
        }
    }
}

/// Which embedder (and, for the model, which checkpoint) a stage uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderChoice {
    pub kind: EmbedderKind,
    /// Checkpoint path; `model.cvsm` in the output directory when absent.
    pub model: Option<PathBuf>,
}

impl EmbedderChoice {
    pub fn model() -> Self {
        Self {
            kind: EmbedderKind::Model,
            model: None,
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: EmbedderKind::Oracle,
            model: None,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: EmbedderKind::Model,
            model: Some(path.into()),
        }
    }

    /// Short name used in artifact file names.
    pub fn tag(&self) -> String {
        match (self.kind, &self.model) {
            (EmbedderKind::Oracle, _) => "oracle".into(),
            (EmbedderKind::Model, None) => "model".into(),
            (EmbedderKind::Model, Some(p)) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into()),
        }
    }
}

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn world(&self, region: Region) -> PathBuf {
        self.root.join(format!("world_{region}.cvrt"))
    }

    pub fn trajectory(&self, set: TrajSet, k: usize) -> PathBuf {
        self.root.join(format!("traj_{}_{k:03}.csv", set.name()))
    }

    pub fn pairs(&self, set: TrajSet) -> PathBuf {
        self.root.join(format!("pairs_{}.csv", set.name()))
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.cvsm")
    }

    pub fn model_init(&self) -> PathBuf {
        self.root.join("model_init.cvsm")
    }

    pub fn index(&self, region: Region, embedder: &EmbedderChoice) -> PathBuf {
        self.root.join(format!("index_{region}_{}.cvix", embedder.tag()))
    }

    pub fn retrieval_dir(&self) -> PathBuf {
        self.root.join("retrieval")
    }

    pub fn localize_dir(&self, tag: &str) -> PathBuf {
        self.root.join("localize").join(tag)
    }

    pub fn timings(&self, stage: &str) -> PathBuf {
        self.root.join("timings").join(format!("{stage}.json"))
    }
}

/// Resolved config plus output location.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: RunConfig,
    pub paths: Paths,
    pub config_hash: String,
}

impl Workspace {
    /// Create the output directory and write the resolved config into it.
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let paths = Paths::new(out);
        std::fs::create_dir_all(&paths.root).with_context(|| format!("creating {}", paths.root.display()))?;
        io::write_atomic(&paths.config(), cfg.to_toml()?.as_bytes())?;
        let config_hash = cfg.hash()?;
        Ok(Self {
            cfg,
            paths,
            config_hash,
        })
    }

    fn world_seed(&self, region: Region) -> u64 {
        seeds::derive(self.cfg.world.seed, &region.to_string())
    }

    pub fn region(&self, region: Region) -> Bounds {
        match region {
            Region::Train => self.cfg.grid.train_region,
            Region::Eval => self.cfg.grid.eval_region,
        }
    }

    pub fn grid(&self, region: Region) -> Result<PoseGrid> {
        let g = &self.cfg.grid;
        Ok(PoseGrid::new(
            self.region(region),
            g.spacing,
            g.spacing,
            PoseGrid::uniform_headings(g.headings),
        )?)
    }

    fn traj_count(&self, set: TrajSet) -> usize {
        match set {
            TrajSet::Train => self.cfg.train.trajectories,
            TrajSet::Val => self.cfg.train.validation_trajectories,
            TrajSet::Eval => self.cfg.eval.runs,
        }
    }

    fn traj_region(set: TrajSet) -> Region {
        match set {
            TrajSet::Train | TrajSet::Val => Region::Train,
            TrajSet::Eval => Region::Eval,
        }
    }

    pub fn load_world(&self, region: Region) -> Result<GeoRaster> {
        let p = self.paths.world(region);
        io::load_raster(&p).with_context(|| format!("loading {} (run simgen first)", p.display()))
    }

    pub fn load_trajectories(&self, set: TrajSet) -> Result<Vec<Vec<TrajectoryStep>>> {
        (0..self.traj_count(set))
            .map(|k| {
                let p = self.paths.trajectory(set, k);
                io::load_trajectory(&p).with_context(|| format!("loading {}", p.display()))
            })
            .collect()
    }

    pub fn load_model(&self, choice: &EmbedderChoice) -> Result<(SiameseModel, u32)> {
        let p = choice.model.clone().unwrap_or_else(|| self.paths.model());
        io::load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))
    }

    fn oracle(&self) -> OracleEmbedder {
        OracleEmbedder {
            heading_weight: self.cfg.filter.oracle_heading_weight,
        }
    }

    fn ground_views(&self, world: &GeoRaster, poses: &[Pose2D]) -> Result<Vec<ViewTensor>> {
        Ok(render_ground_views(world, poses, &self.cfg.groundview)?
            .into_iter()
            .map(|o| o.view)
            .collect())
    }

    fn write_timing(&self, stage: &str, start: Instant) -> Result<()> {
        let p = self.paths.timings(stage);
        std::fs::create_dir_all(p.parent().expect("timings dir"))?;
        let mut t = BTreeMap::new();
        t.insert("wall_time_s", start.elapsed().as_secs_f64());
        io::save_json(&p, &t)?;
        Ok(())
    }
}

fn poses_of(trajs: &[Vec<TrajectoryStep>]) -> Vec<Pose2D> {
    trajs.iter().flatten().map(|s| s.pose).collect()
}

// ------------------------------------------------------------------ simgen

pub fn simgen(ctx: &Workspace) -> Result<()> {
    let start = Instant::now();
    for region in [Region::Train, Region::Eval] {
        let spec = cvmcl::sim::WorldSpec {
            seed: ctx.world_seed(region),
            ..ctx.cfg.world.clone()
        };
        let world = generate_world(&spec)?;
        let wb = world.bounds();
        let r = ctx.region(region);
        ensure!(
            wb.contains(r.min_x, r.min_y) && wb.contains(r.max_x, r.max_y),
            "grid.{region}_region {r:?} is not inside the world {wb:?}"
        );
        io::save_raster(&ctx.paths.world(region), &world)?;
        for set in [TrajSet::Train, TrajSet::Val, TrajSet::Eval] {
            if Workspace::traj_region(set) != region {
                continue;
            }
            for k in 0..ctx.traj_count(set) {
                let spec = TrajectorySpec {
                    region: Some(r),
                    seed: seeds::derive_index(seeds::derive(ctx.cfg.trajectory.seed, set.name()), k as u64),
                    ..ctx.cfg.trajectory.clone()
                };
                let steps = generate_trajectory(&world, &spec)?;
                io::save_trajectory(&ctx.paths.trajectory(set, k), &steps)?;
            }
        }
    }
    ctx.write_timing("simgen", start)
}

// ------------------------------------------------------------------ mine

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub positives: usize,
    pub negatives: usize,
    pub skipped: usize,
    pub val_positives: usize,
    pub val_negatives: usize,
}

pub fn mine(ctx: &Workspace) -> Result<MineSummary> {
    let start = Instant::now();
    let grid = ctx.grid(Region::Train)?;
    let th = ctx.cfg.grid.thresholds();
    let mut counts = Vec::new();
    for set in [TrajSet::Train, TrajSet::Val] {
        let poses = poses_of(&ctx.load_trajectories(set)?);
        let seed = seeds::derive(ctx.cfg.train.seed, &format!("mine-{}", set.name()));
        let r = embed::mine_pairs(&poses, &grid, &th, ctx.cfg.train.neg_per_pos, seed)?;
        io::save_pairs(&ctx.paths.pairs(set), &r.pairs)?;
        counts.push(r);
    }
    let summary = MineSummary {
        positives: counts[0].positives,
        negatives: counts[0].negatives,
        skipped: counts[0].skipped + counts[1].skipped,
        val_positives: counts[1].positives,
        val_negatives: counts[1].negatives,
    };
    io::save_json(&ctx.paths.root.join("mine.json"), &summary)?;
    ctx.write_timing("mine", start)?;
    Ok(summary)
}

// ------------------------------------------------------------------ train

fn dataset(ctx: &Workspace, world: &GeoRaster, set: TrajSet) -> Result<Option<PairDataset>> {
    let pairs = io::load_pairs(&ctx.paths.pairs(set)).with_context(|| "loading pairs (run mine first)")?;
    if pairs.is_empty() {
        return Ok(None);
    }
    let poses = poses_of(&ctx.load_trajectories(set)?);
    Ok(Some(PairDataset {
        grounds: ctx.ground_views(world, &poses)?,
        raster: world.clone(),
        crop: ctx.cfg.crop,
        pairs,
    }))
}

pub fn train(ctx: &Workspace) -> Result<TrainReport> {
    let start = Instant::now();
    let world = ctx.load_world(Region::Train)?;
    let data = dataset(ctx, &world, TrajSet::Train)?.context("no training pairs were mined")?;
    let val = if ctx.cfg.train.validation_trajectories > 0 {
        dataset(ctx, &world, TrajSet::Val)?
    } else {
        None
    };
    let mut model = SiameseModel::new(ctx.cfg.encoder.clone())?;
    let (gs, ss) = data.fit_stats(ctx.cfg.train.stats_samples)?;
    model.ground_stats = gs;
    model.sat_stats = ss;
    io::save_checkpoint(&ctx.paths.model_init(), &model)?;
    log::info!(
        "training on {} pairs ({} ground views), {} parameters",
        data.len(),
        data.grounds.len(),
        model.ground.num_params() + model.sat.num_params()
    );
    let out = embed::train(&data, model, &ctx.cfg.train.train_config(), val.as_ref())?;
    io::save_checkpoint(&ctx.paths.model(), &out.model)?;
    io::save_json(&ctx.paths.root.join("train_report.json"), &out.report)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for (e, l) in out.report.epoch_loss.iter().enumerate() {
        let v = out.report.val_loss.get(e).map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{l},{v}\n", e + 1));
    }
    io::write_atomic(&ctx.paths.root.join("train_loss.csv"), csv.as_bytes())?;
    ctx.write_timing("train", start)?;
    Ok(out.report)
}

// ------------------------------------------------------------------ index

pub fn index(ctx: &Workspace, region: Region, choice: &EmbedderChoice) -> Result<EmbeddingIndex> {
    let start = Instant::now();
    let grid = ctx.grid(region)?;
    let idx = match choice.kind {
        EmbedderKind::Oracle => build_index(&ctx.oracle(), &grid, 0)?,
        EmbedderKind::Model => {
            let (model, fp) = ctx.load_model(choice)?;
            let world = ctx.load_world(region)?;
            let e = SatEmbedder {
                model: &model,
                raster: &world,
                crop: ctx.cfg.crop,
            };
            build_index(&e, &grid, fp)?
        }
    };
    io::save_index(&ctx.paths.index(region, choice), &idx)?;
    ctx.write_timing(&format!("index_{region}_{}", choice.tag()), start)?;
    Ok(idx)
}

fn load_index_checked(ctx: &Workspace, region: Region, choice: &EmbedderChoice, fingerprint: u32) -> Result<EmbeddingIndex> {
    let p = ctx.paths.index(region, choice);
    let idx = io::load_index(&p).with_context(|| format!("loading {} (run index first)", p.display()))?;
    if idx.fingerprint() != fingerprint {
        return Err(FingerprintMismatch {
            model: fingerprint,
            index: idx.fingerprint(),
        }
        .into());
    }
    let grid = ctx.grid(region)?;
    ensure!(
        idx.len() == grid.len(),
        "index has {} entries but the configured grid has {}",
        idx.len(),
        grid.len()
    );
    Ok(idx)
}

/// Query embeddings for trajectory poses: the ground encoder applied to the
/// rendered views, or oracle features of the true poses.
fn query_embeddings(
    ctx: &Workspace,
    choice: &EmbedderChoice,
    model: Option<&SiameseModel>,
    world: &GeoRaster,
    poses: &[Pose2D],
) -> Result<Vec<Vec<f64>>> {
    match choice.kind {
        EmbedderKind::Oracle => Ok(poses.iter().map(|p| ctx.oracle().features(p)).collect()),
        EmbedderKind::Model => {
            let model = model.expect("model embedder needs a model");
            let views = ctx.ground_views(world, poses)?;
            Ok(views
                .par_iter()
                .map(|v| model.embed_ground(v))
                .collect::<cvmcl::Result<Vec<_>>>()?)
        }
    }
}

// ------------------------------------------------------------------ eval-retrieval

/// Distances of evaluation pairs mined exactly like training pairs: every
/// Positive grid pose of each query plus `neg_per_pos` sampled Negatives.
fn mined_scores(
    ctx: &Workspace,
    idx: &EmbeddingIndex,
    grid: &PoseGrid,
    queries: &[(Vec<f64>, Pose2D)],
) -> Result<Vec<(f64, bool)>> {
    let poses: Vec<Pose2D> = queries.iter().map(|q| q.1).collect();
    let seed = seeds::derive(ctx.cfg.train.seed, "mine-eval");
    let mined = embed::mine_pairs(&poses, grid, &ctx.cfg.grid.thresholds(), ctx.cfg.train.neg_per_pos, seed)?;
    mined
        .pairs
        .iter()
        .map(|p| {
            let i = grid.nearest(&p.sat_pose).context("mined pose outside the grid")?;
            Ok((idx.distance(i, &queries[p.ground].0), p.label))
        })
        .collect()
}

pub fn eval_retrieval(ctx: &Workspace, region: Region, choice: &EmbedderChoice) -> Result<MetricsReport> {
    let start = Instant::now();
    let (model, fp) = match choice.kind {
        EmbedderKind::Model => {
            let (m, fp) = ctx.load_model(choice)?;
            (Some(m), fp)
        }
        EmbedderKind::Oracle => (None, 0),
    };
    let idx = load_index_checked(ctx, region, choice, fp)?;
    let world = ctx.load_world(region)?;
    let set = match region {
        Region::Train => TrajSet::Train,
        Region::Eval => TrajSet::Eval,
    };
    let all = poses_of(&ctx.load_trajectories(set)?);
    let stride = all.len().div_ceil(ctx.cfg.eval.max_queries.max(1)).max(1);
    let poses: Vec<Pose2D> = all.into_iter().step_by(stride).collect();
    let embeddings = query_embeddings(ctx, choice, model.as_ref(), &world, &poses)?;
    let queries: Vec<(Vec<f64>, Pose2D)> = embeddings.into_iter().zip(poses).collect();
    let th = ctx.cfg.grid.thresholds();

    let grid = ctx.grid(region)?;
    let scored = mined_scores(ctx, &idx, &grid, &queries)?;
    let n_pos = scored.iter().filter(|s| s.1).count();
    let curve = pr_curve(&scored)?;
    let all_pairs = pr_curve(&scored_pairs(&idx, &queries, &th)?)?;
    let topx = topx_retrieval(&idx, &queries, &th, &ctx.cfg.eval.topx)?;

    let tag = format!("{region}_{}", choice.tag());
    let dir = ctx.paths.retrieval_dir();
    std::fs::create_dir_all(&dir)?;
    let keep = ctx.cfg.eval.pr_points.max(2);
    let step = curve.points.len().div_ceil(keep).max(1);
    let mut pr = String::from("threshold,precision,recall\n");
    for (i, p) in curve.points.iter().enumerate() {
        if i % step == 0 || i + 1 == curve.points.len() {
            pr.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
    }
    io::write_atomic(&dir.join(format!("pr_{tag}.csv")), pr.as_bytes())?;
    let mut tx = String::from("x_percent,fraction\n");
    for (x, f) in topx.x_percent.iter().zip(&topx.fraction) {
        tx.push_str(&format!("{x},{f}\n"));
    }
    io::write_atomic(&dir.join(format!("topx_{tag}.csv")), tx.as_bytes())?;

    let mut report = MetricsReport::new("retrieval", &ctx.config_hash);
    report.average_precision = Some(curve.average_precision);
    report.topx = topx
        .x_percent
        .iter()
        .zip(&topx.fraction)
        .map(|(x, f)| TopXRow {
            x_percent: *x,
            fraction: *f,
        })
        .collect();
    report.extra.insert("queries".into(), queries.len() as f64);
    report.extra.insert("queries_excluded".into(), topx.excluded as f64);
    report.extra.insert("index_entries".into(), idx.len() as f64);
    report.extra.insert("scored_pairs".into(), scored.len() as f64);
    report.extra.insert("all_pairs_average_precision".into(), all_pairs.average_precision);
    report.extra.insert("positive_pairs".into(), n_pos as f64);
    io::save_report(&dir.join(format!("{tag}.json")), &report)?;
    ctx.write_timing(&format!("retrieval_{tag}"), start)?;
    Ok(report)
}

// ------------------------------------------------------------------ localize

#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub provider: ProviderKind,
    pub embedder: EmbedderChoice,
    /// Number of runs (evaluation trajectories), each with its own seed.
    pub runs: usize,
    /// Output subdirectory name; derived from provider and embedder when
    /// absent.
    pub tag: Option<String>,
    pub dump_clouds: bool,
}

impl LocalizeOptions {
    pub fn tag(&self) -> String {
        self.tag.clone().unwrap_or_else(|| match self.provider {
            ProviderKind::Oracle => "oracle".into(),
            p => format!("{p}-{}", self.embedder.tag()),
        })
    }
}

/// Distances between a few query embeddings and random index entries (or
/// random on-the-fly embeddings), for the median rule.
fn calibration_distances(
    ctx: &Workspace,
    queries: &[Vec<f64>],
    idx: Option<&EmbeddingIndex>,
    embedder: &dyn PoseEmbedder,
    region: &Bounds,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeds::rng(seeds::derive(seed, "alpha-calibration"));
    let n = ctx.cfg.filter.calibration_samples.max(1);
    let mut out = Vec::with_capacity(n);
    let qs = &queries[..queries.len().min(5)];
    match idx {
        Some(idx) => {
            for i in 0..n {
                let e = rng.random_range(0..idx.len());
                out.push(idx.distance(e, &qs[i % qs.len()]));
            }
        }
        None => {
            let poses: Vec<Pose2D> = (0..n.min(400))
                .map(|_| {
                    Pose2D::new(
                        region.min_x + rng.random::<f64>() * region.width(),
                        region.min_y + rng.random::<f64>() * region.height(),
                        std::f64::consts::PI - std::f64::consts::TAU * rng.random::<f64>(),
                    )
                })
                .collect();
            let embs = poses
                .par_iter()
                .map(|p| embedder.embed_pose(p))
                .collect::<cvmcl::Result<Vec<_>>>()?;
            for (i, e) in embs.iter().enumerate() {
                out.push(embed::euclidean(e, &qs[i % qs.len()]));
            }
        }
    }
    Ok(out)
}

/// `1 / mean(d)` over positive validation pairs rendered in the training
/// world.
fn validation_positive_alpha(ctx: &Workspace, model: &SiameseModel) -> Result<f64> {
    let world = ctx.load_world(Region::Train)?;
    let set = if ctx.cfg.train.validation_trajectories > 0 {
        TrajSet::Val
    } else {
        TrajSet::Train
    };
    let data = dataset(ctx, &world, set)?.context("no validation pairs to calibrate alpha")?;
    let positives: Vec<usize> = (0..data.len()).filter(|&i| data.pairs[i].label).collect();
    ensure!(!positives.is_empty(), "no positive validation pairs to calibrate alpha");
    let d = positives
        .par_iter()
        .map(|&i| -> Result<f64> {
            let p = data.pair(i)?;
            Ok(embed::euclidean(&model.embed_ground(p.ground)?, &model.embed_sat(&p.sat)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    ensure!(mean > 0.0 && mean.is_finite(), "degenerate positive distances (mean {mean})");
    Ok(1.0 / mean)
}

pub fn localize(ctx: &Workspace, opts: &LocalizeOptions) -> Result<Vec<MetricsReport>> {
    let start = Instant::now();
    ensure!(opts.runs >= 1, "need at least one run");
    ensure!(
        opts.runs <= ctx.cfg.eval.runs,
        "{} runs requested but only {} evaluation trajectories exist (eval.runs)",
        opts.runs,
        ctx.cfg.eval.runs
    );
    let embedder_kind = match opts.provider {
        ProviderKind::Oracle => EmbedderKind::Oracle,
        _ => opts.embedder.kind,
    };
    let choice = EmbedderChoice {
        kind: embedder_kind,
        model: opts.embedder.model.clone(),
    };
    let (model, fp) = match embedder_kind {
        EmbedderKind::Model => {
            let (m, fp) = ctx.load_model(&choice)?;
            (Some(m), fp)
        }
        EmbedderKind::Oracle => (None, 0),
    };
    let idx = match opts.provider {
        ProviderKind::Index => Some(load_index_checked(ctx, Region::Eval, &choice, fp)?),
        _ => None,
    };
    let world = ctx.load_world(Region::Eval)?;
    let region = ctx.region(Region::Eval);
    let grid = ctx.grid(Region::Eval)?;
    let trajs = ctx.load_trajectories(TrajSet::Eval)?;
    let oracle = ctx.oracle();
    let sat_embedder = model.as_ref().map(|m| SatEmbedder {
        model: m,
        raster: &world,
        crop: ctx.cfg.crop,
    });
    let embedder: &dyn PoseEmbedder = match &sat_embedder {
        Some(e) => e,
        None => &oracle,
    };
    let fixed_alpha = match (&model, ctx.cfg.filter.alpha, ctx.cfg.filter.alpha_calibration) {
        (None, _, _) => Some(ctx.cfg.filter.oracle_alpha),
        (Some(_), Some(a), _) => Some(a),
        (Some(m), None, AlphaCalibration::ValidationPositives) => Some(validation_positive_alpha(ctx, m)?),
        (Some(_), None, AlphaCalibration::IndexMedian) => None,
    };
    let dir = ctx.paths.localize_dir(&opts.tag());
    std::fs::create_dir_all(&dir)?;

    let reports = (0..opts.runs)
        .into_par_iter()
        .map(|k| -> Result<MetricsReport> {
            let steps = &trajs[k];
            let truth: Vec<Pose2D> = steps.iter().map(|s| s.pose).collect();
            let motions: Vec<Motion> = steps
                .windows(2)
                .map(|w| Motion {
                    control: w[0].noisy,
                    dt: w[1].t - w[0].t,
                })
                .collect();
            let queries = query_embeddings(ctx, &choice, model.as_ref(), &world, &truth)?;
            let seed = seeds::derive_index(ctx.cfg.filter.seed, k as u64);
            let cfg = ctx.cfg.filter.filter_config(seed);
            let alpha = match fixed_alpha {
                Some(a) => a,
                None => {
                    let d = calibration_distances(ctx, &queries, idx.as_ref(), embedder, &region, seed)?;
                    calibrate_alpha(&d)?
                }
            };
            let mask = RoadMask::from_path(&world, &truth, ctx.cfg.filter.road_half_width);
            let init = init_particles(&region, Some(&mask), cfg.on_road_prob, cfg.n_particles, seed)?;
            let mut clouds = Vec::new();
            let run = run_localization(
                &cfg,
                init.set,
                &truth,
                &motions,
                alpha,
                |t| -> cvmcl::Result<Box<dyn DistanceProvider + '_>> {
                    Ok(match &idx {
                        Some(idx) => Box::new(IndexDistance::new(idx, &grid, &queries[t])?),
                        None => Box::new(EmbedderDistance {
                            embedder,
                            query: &queries[t],
                        }),
                    })
                },
                |set| {
                    if opts.dump_clouds {
                        clouds.push(io::encode_cloud(set));
                    }
                },
            )?;
            io::save_trace(&dir.join(format!("trace_{k:03}.csv")), &run.trace)?;
            for (t, c) in clouds.into_iter().enumerate() {
                io::write_atomic(&dir.join(format!("cloud_{k:03}_{t:04}.cvpc")), &c?)?;
            }
            let mut r = MetricsReport::new("localization", &ctx.config_hash);
            r.convergence_step = run.convergence_step;
            r.final_mean_error_m = Some(run.final_error);
            r.final_std_m = Some(run.final_std);
            r.extra.insert("run".into(), k as f64);
            r.extra.insert("alpha".into(), alpha);
            r.extra.insert("converged".into(), f64::from(u8::from(run.convergence_step.is_some())));
            r.extra.insert("weight_resets".into(), run.weight_resets as f64);
            r.extra.insert("n_particles".into(), cfg.n_particles as f64);
            r.extra.insert("on_road_draws".into(), init.on_road_draws as f64);
            io::save_report(&dir.join(format!("run_{k:03}.json")), &r)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.write_timing(&format!("localize_{}", opts.tag()), start)?;
    Ok(reports)
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub runs: usize,
    pub converged_runs: usize,
    /// Mean and standard deviation over runs of the final position error.
    pub final_error_mean_m: f64,
    pub final_error_std_m: f64,
    /// Mean over runs of the final particle-cloud position spread.
    pub final_spread_mean_m: f64,
    /// Mean first-converged step over converged runs.
    pub convergence_step_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub average_precision: f64,
    pub topx: Vec<TopXRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub localization: BTreeMap<String, LocalizationSummary>,
    pub retrieval: BTreeMap<String, RetrievalSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

pub fn summarize_runs(reports: &[MetricsReport]) -> Result<LocalizationSummary> {
    ensure!(!reports.is_empty(), "no localization runs to summarize");
    let errs: Vec<f64> = reports.iter().filter_map(|r| r.final_mean_error_m).collect();
    let spreads: Vec<f64> = reports.iter().filter_map(|r| r.final_std_m).collect();
    ensure!(errs.len() == reports.len(), "localization report without final error");
    let conv: Vec<f64> = reports.iter().filter_map(|r| r.convergence_step).map(|s| s as f64).collect();
    let (em, es) = mean_std(&errs);
    Ok(LocalizationSummary {
        runs: reports.len(),
        converged_runs: conv.len(),
        final_error_mean_m: em,
        final_error_std_m: es,
        final_spread_mean_m: mean_std(&spreads).0,
        convergence_step_mean: (!conv.is_empty()).then(|| mean_std(&conv).0),
    })
}

pub fn report(ctx: &Workspace) -> Result<Summary> {
    let start = Instant::now();
    let mut localization = BTreeMap::new();
    for dir in sorted_entries(&ctx.paths.root.join("localize"))? {
        if !dir.is_dir() {
            continue;
        }
        let runs = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                name.starts_with("run_") && name.ends_with(".json")
            })
            .map(|p| io::load_report(&p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        if runs.is_empty() {
            continue;
        }
        let tag = dir.file_name().expect("dir name").to_string_lossy().into_owned();
        localization.insert(tag, summarize_runs(&runs)?);
    }
    let mut retrieval = BTreeMap::new();
    for p in sorted_entries(&ctx.paths.retrieval_dir())? {
        if p.extension().is_some_and(|e| e == "json") {
            let r = io::load_report(&p)?;
            let tag = p.file_stem().expect("stem").to_string_lossy().into_owned();
            retrieval.insert(
                tag,
                RetrievalSummary {
                    average_precision: r.average_precision.unwrap_or(f64::NAN),
                    topx: r.topx,
                },
            );
        }
    }
    if localization.is_empty() && retrieval.is_empty() {
        bail!("nothing to report: run eval-retrieval or localize first");
    }
    let summary = Summary {
        config_hash: ctx.config_hash.clone(),
        localization,
        retrieval,
    };
    io::save_json(&ctx.paths.root.join("report.json"), &summary)?;
    let mut table = String::from(
        "tag,runs,converged_runs,final_error_mean_m,final_error_std_m,final_spread_mean_m,convergence_step_mean\n",
    );
    for (tag, s) in &summary.localization {
        table.push_str(&format!(
            "{tag},{},{},{},{},{},{}\n",
            s.runs,
            s.converged_runs,
            s.final_error_mean_m,
            s.final_error_std_m,
            s.final_spread_mean_m,
            s.convergence_step_mean.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    io::write_atomic(&ctx.paths.root.join("table.csv"), table.as_bytes())?;
    ctx.write_timing("report", start)?;
    Ok(summary)
}
