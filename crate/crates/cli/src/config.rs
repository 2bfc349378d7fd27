//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Section `seed` fields are derived from the top-level seed during
//! resolution, so one number reproduces a whole run.

use anyhow::{bail, Context, Result};
use cvmcl::embed::{EncoderConfig, TrainConfig};
use cvmcl::filter::{FilterConfig, MotionNoise};
use cvmcl::geo::{Bounds, CropSpec, PairThresholds};
use cvmcl::seeds;
use cvmcl::sim::{GroundViewSpec, TrajectorySpec, WorldSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub margin: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub neg_per_pos: usize,
    /// Training trajectories driven in the training region.
    pub trajectories: usize,
    /// Held-out trajectories (same world) used for early stopping.
    pub validation_trajectories: usize,
    /// Satellite crops sampled to fit standardization statistics.
    pub stats_samples: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            margin: t.margin,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            neg_per_pos: t.neg_per_pos,
            trajectories: 4,
            validation_trajectories: 1,
            stats_samples: 2000,
            seed: 0,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            neg_per_pos: self.neg_per_pos,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Grid spacing in x and y, meters.
    pub spacing: f64,
    pub headings: usize,
    pub pos_dist: f64,
    pub pos_angle_deg: f64,
    pub neg_dist: f64,
    /// Region of the training world used for trajectories, mining and the
    /// training-side index.
    pub train_region: Bounds,
    /// Region of the evaluation world used for retrieval and localization.
    pub eval_region: Bounds,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            spacing: 0.5,
            headings: 8,
            pos_dist: 0.4,
            pos_angle_deg: 30.0,
            neg_dist: 8.0,
            train_region: Bounds {
                min_x: 4.0,
                min_y: 4.0,
                max_x: 60.0,
                max_y: 60.0,
            },
            eval_region: Bounds {
                min_x: 68.0,
                min_y: 68.0,
                max_x: 108.0,
                max_y: 108.0,
            },
        }
    }
}

impl GridSection {
    pub fn thresholds(&self) -> PairThresholds {
        PairThresholds {
            pos_dist: self.pos_dist,
            pos_angle: self.pos_angle_deg.to_radians(),
            neg_dist: self.neg_dist,
        }
    }
}

/// How the likelihood rate is chosen when `filter.alpha` is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaCalibration {
    /// `1 / median(d)` over observation-to-index distances.
    #[default]
    IndexMedian,
    /// `1 / mean(d)` over the positive validation pairs of the training
    /// world: the maximum-likelihood rate of an exponential fitted to
    /// matching-pair distances.
    ValidationPositives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub n_particles: usize,
    /// Likelihood rate for learned embedders; calibrated when absent.
    pub alpha: Option<f64>,
    pub alpha_calibration: AlphaCalibration,
    /// Likelihood rate whenever the oracle embedder is used.
    pub oracle_alpha: f64,
    pub neff_frac: f64,
    pub motion: MotionNoise,
    pub conv_std: f64,
    pub on_road_prob: f64,
    /// Half width of the road band around the driven path, meters.
    pub road_half_width: f64,
    /// Oracle heading weight, meters per unit heading chord.
    pub oracle_heading_weight: f64,
    /// Index entries sampled per observation for alpha calibration.
    pub calibration_samples: usize,
    pub seed: u64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            n_particles: f.n_particles,
            alpha: None,
            alpha_calibration: AlphaCalibration::IndexMedian,
            oracle_alpha: 2.0,
            neff_frac: f.neff_frac,
            motion: f.motion,
            conv_std: f.conv_std,
            on_road_prob: f.on_road_prob,
            road_half_width: 2.0,
            oracle_heading_weight: 2.0,
            calibration_samples: 2000,
            seed: 0,
        }
    }
}

impl FilterSection {
    pub fn filter_config(&self, seed: u64) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            alpha: self.alpha,
            neff_frac: self.neff_frac,
            motion: self.motion,
            conv_std: self.conv_std,
            on_road_prob: self.on_road_prob,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluation trajectories, one per localization run.
    pub runs: usize,
    /// Ground observations used as retrieval queries (evenly strided).
    pub max_queries: usize,
    /// Candidate-set sizes for top-X retrieval, percent.
    pub topx: Vec<f64>,
    /// Points kept in the precision-recall CSV.
    pub pr_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            runs: 5,
            max_queries: 200,
            topx: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            pr_points: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub groundview: GroundViewSpec,
    pub crop: CropSpec,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
    pub grid: GridSection,
    pub filter: FilterSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldSpec::default(),
            trajectory: TrajectorySpec::default(),
            groundview: GroundViewSpec::default(),
            crop: CropSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainSection::default(),
            grid: GridSection::default(),
            filter: FilterSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// TOML integers are signed 64-bit; derived seeds are kept below 2^63.
fn stage_seed(top: u64, label: &str) -> u64 {
    seeds::derive(top, label) & (i64::MAX as u64)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Apply an optional seed override, derive every stage seed from the
    /// top-level seed, and validate.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if self.seed > i64::MAX as u64 {
            bail!("seed must be below 2^63");
        }
        let top = self.seed;
        self.world.seed = stage_seed(top, "world");
        self.trajectory.seed = stage_seed(top, "trajectory");
        self.trajectory.region = None;
        self.encoder.seed = stage_seed(top, "encoder");
        self.train.seed = stage_seed(top, "train");
        self.filter.seed = stage_seed(top, "filter");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.trajectory.validate()?;
        self.groundview.validate()?;
        self.crop.validate()?;
        self.train.train_config().validate()?;
        self.filter.filter_config(0).validate()?;
        self.grid.thresholds().validate()?;
        if !(self.grid.spacing > 0.0) || self.grid.headings == 0 {
            bail!("grid needs spacing > 0 and at least one heading");
        }
        if self.train.trajectories == 0 || self.eval.runs == 0 {
            bail!("need at least one training and one evaluation trajectory");
        }
        if !(self.filter.oracle_alpha > 0.0) {
            bail!("oracle_alpha must be > 0");
        }
        if self.eval.topx.iter().any(|x| !(*x > 0.0 && *x <= 100.0)) {
            bail!("topx values must lie in (0, 100]");
        }
        for (name, r) in [("train_region", &self.grid.train_region), ("eval_region", &self.grid.eval_region)] {
            if !(r.width() > 0.0 && r.height() > 0.0) {
                bail!("grid.{name} is empty");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the resolved TOML, hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default().resolve(None).unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[world]\nsize = 64\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("colour = 3\n").is_err());
        let c = RunConfig::parse("seed = 9\n[world]\nsize = 64\n").unwrap();
        assert_eq!(c.world.size, 64);
        assert_eq!(c.world.n_bumps, WorldSpec::default().n_bumps);
    }

    #[test]
    fn seeds_fan_out_from_top_seed() {
        let a = RunConfig::default().resolve(Some(3)).unwrap();
        let b = RunConfig::default().resolve(Some(3)).unwrap();
        let c = RunConfig::default().resolve(Some(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.world.seed, c.world.seed);
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}
