//! Run configuration: a JSON file plus command-line overrides. Every knob has
//! a default so a minimal config is just `{}`.

use std::path::{Path, PathBuf};

use ddc_core::consistency::DPS_DEFAULT_ZETA;
use ddc_core::ddc_train::{DdcTrainConfig, LossWeights, TaskKind, TaskPool};
use ddc_core::denoiser::{DenoiserTrainConfig, VarianceMode};
use ddc_core::error::{Error, Result};
use ddc_core::nn::NetConfig;
use ddc_core::operators::DownsampleKernel;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { t: 200, beta_start: 5e-4, beta_end: 0.1 }
    }
}

/// Network shape without the channel counts, which each model fixes itself.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_embed_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { widths: vec![16, 32, 64], blocks_per_level: 1, groups: 8, time_embed_dim: 32 }
    }
}

impl NetSpec {
    pub fn to_net_config(&self) -> NetConfig {
        NetConfig {
            widths: self.widths.clone(),
            blocks_per_level: self.blocks_per_level,
            groups: self.groups,
            time_embed_dim: self.time_embed_dim,
            ..NetConfig::default()
        }
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    Ddc,
    Dps,
    Ddnm,
    None,
}

impl StrategyChoice {
    pub fn label(self) -> &'static str {
        match self {
            StrategyChoice::Ddc => "ddc",
            StrategyChoice::Dps => "dps",
            StrategyChoice::Ddnm => "ddnm",
            StrategyChoice::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub schedule: ScheduleSpec,
    /// Sampler steps used by solve, diagnose-kurtosis, and the sigma sweep.
    pub solve_steps: usize,
    pub task: TaskKind,
    pub sigma_y: f64,
    /// Training task pool for train-ddc; defaults to the single configured
    /// task at `sigma_y`.
    pub pool: Option<TaskPool>,
    pub strategy: StrategyChoice,
    pub zeta: f64,
    /// DDNM correction scale; when absent it follows the noise level.
    pub ddnm_scale: Option<f64>,
    pub weights: LossWeights,
    pub feature_seed: u64,
    pub denoiser_net: NetSpec,
    pub denoiser_variance: VarianceMode,
    pub consistency_net: NetSpec,
    pub train_denoiser: DenoiserTrainConfig,
    pub train_ddc: DdcTrainConfig,
    pub eval_images: usize,
    pub save_measurements: bool,
    /// When positive, train-ddc reports a Monte Carlo cross-check of the KL
    /// term with this many draws per element.
    pub empirical_kl_samples: usize,
    pub dataset: Option<PathBuf>,
    /// Generate this many procedural images instead of reading `dataset`.
    pub synthetic: Option<usize>,
    pub denoiser_checkpoint: Option<PathBuf>,
    pub ddc_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 32,
            schedule: ScheduleSpec::default(),
            solve_steps: 5,
            task: TaskKind::SuperRes { factor: 4, kernel: DownsampleKernel::AveragePool },
            sigma_y: 0.0,
            pool: None,
            strategy: StrategyChoice::Ddc,
            zeta: DPS_DEFAULT_ZETA,
            ddnm_scale: None,
            weights: LossWeights::default(),
            feature_seed: 7,
            denoiser_net: NetSpec::default(),
            denoiser_variance: VarianceMode::Fixed,
            consistency_net: NetSpec::default(),
            train_denoiser: DenoiserTrainConfig::default(),
            train_ddc: DdcTrainConfig::default(),
            eval_images: 4,
            save_measurements: true,
            empirical_kl_samples: 0,
            dataset: None,
            synthetic: None,
            denoiser_checkpoint: None,
            ddc_checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Flag overrides shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// RNG seed; replaces the config value.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Guidance strategy for solve and sweeps.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyChoice>,
    /// Sampler steps (solve/diagnose/sweep) or training steps (train commands).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Measurement noise level.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Use N generated images instead of the dataset directory.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Which meaning `--steps` takes for the current subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsTarget {
    TrainDenoiser,
    TrainDdc,
    Sampler,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides, steps_target: StepsTarget) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(strategy) = o.strategy {
            self.strategy = strategy;
        }
        if let Some(steps) = o.steps {
            match steps_target {
                StepsTarget::TrainDenoiser => self.train_denoiser.steps = steps,
                StepsTarget::TrainDdc => self.train_ddc.steps = steps,
                StepsTarget::Sampler => self.solve_steps = steps,
            }
        }
        if let Some(sigma) = o.sigma {
            self.sigma_y = sigma;
        }
        if let Some(n) = o.synthetic {
            self.synthetic = Some(n);
        }
        if let Some(dir) = &o.out {
            self.out_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        for (name, spec) in
            [("denoiser_net", &self.denoiser_net), ("consistency_net", &self.consistency_net)]
        {
            spec.to_net_config().validate()?;
            if self.image_size % spec.spatial_divisor() != 0 {
                return Err(Error::invalid(format!(
                    "image_size {} is not divisible by the {name} downsampling factor {}",
                    self.image_size,
                    spec.spatial_divisor()
                )));
            }
        }
        if self.solve_steps == 0 || self.solve_steps > self.schedule.t {
            return Err(Error::invalid(format!(
                "solve_steps must lie in 1..={}",
                self.schedule.t
            )));
        }
        if self.sigma_y < 0.0 {
            return Err(Error::invalid("sigma_y must be non-negative"));
        }
        if self.zeta <= 0.0 {
            return Err(Error::invalid("zeta must be positive"));
        }
        if self.eval_images == 0 {
            return Err(Error::invalid("eval_images must be positive"));
        }
        LossWeights::new(self.weights.w1, self.weights.w2, self.weights.w3)?;
        if let Some(pool) = &self.pool {
            TaskPool::new(pool.tasks.clone(), pool.sigma_min, pool.sigma_max)?;
        }
        if self.synthetic == Some(0) {
            return Err(Error::invalid("synthetic must be positive when set"));
        }
        Ok(())
    }

    /// The training pool: the explicit one, or the configured task at the
    /// configured noise level.
    pub fn effective_pool(&self) -> Result<TaskPool> {
        match &self.pool {
            Some(pool) => TaskPool::new(pool.tasks.clone(), pool.sigma_min, pool.sigma_max),
            None => TaskPool::single(self.task.clone(), self.sigma_y),
        }
    }

    pub fn effective_ddnm_scale(&self, sigma_y: f64) -> f64 {
        self.ddnm_scale
            .unwrap_or_else(|| ddc_core::consistency::default_ddnm_scale(sigma_y))
    }
}

/// FNV-1a over the effective config's JSON form; stored in checkpoints so a
/// file can be traced back to the settings that produced it.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.solve_steps, 5);
        assert_eq!(cfg.schedule.t, 200);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut cfg = RunConfig::default();
        let o = Overrides {
            seed: Some(9),
            strategy: Some(StrategyChoice::Ddnm),
            steps: Some(12),
            sigma: Some(0.05),
            synthetic: Some(3),
            out: Some(PathBuf::from("elsewhere")),
        };
        cfg.apply(&o, StepsTarget::Sampler);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.strategy, StrategyChoice::Ddnm);
        assert_eq!(cfg.solve_steps, 12);
        assert_eq!(cfg.sigma_y, 0.05);
        assert_eq!(cfg.synthetic, Some(3));
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));

        let mut cfg = RunConfig::default();
        cfg.apply(&o, StepsTarget::TrainDdc);
        assert_eq!(cfg.train_ddc.steps, 12);
        assert_eq!(cfg.solve_steps, 5);
    }

    #[test]
    fn validation_catches_bad_sizes() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err(), "30 is not divisible by the net factor 4");
        cfg.image_size = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.solve_steps = 500;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let cfg = RunConfig::default();
        let a = config_hash(&cfg);
        assert_eq!(a, config_hash(&cfg.clone()));
        let mut other = cfg;
        other.seed = 1;
        assert_ne!(a, config_hash(&other));
    }

    #[test]
    fn effective_pool_falls_back_to_the_single_task() {
        let cfg = RunConfig { sigma_y: 0.05, ..RunConfig::default() };
        let pool = cfg.effective_pool().unwrap();
        assert_eq!(pool.tasks.len(), 1);
        assert_eq!((pool.sigma_min, pool.sigma_max), (0.05, 0.05));
        let six = RunConfig { pool: Some(TaskPool::generalized()), ..RunConfig::default() };
        assert_eq!(six.effective_pool().unwrap().tasks.len(), 6);
    }
}
