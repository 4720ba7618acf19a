//! Run configuration: one declarative TOML file drives every command.
//!
//! All randomness flows from the single root `seed` through named
//! substreams (`data`, `train`, `sample`, `ranker`), so re-running any
//! command with the same file reproduces its outputs byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::net::NetConfig;
use crate::error::{Error, Result};
use crate::ranker::{RankerConfig, RankerTrainConfig};
use crate::sampler::Variant;
use crate::scene::{DynamicsParams, MaskSpec};
use crate::schedule::{build_step_plan, NoiseSchedule, StepPlan};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub s: usize,
    pub beta0: f64,
    pub beta_s: f64,
    pub skip: usize,
    pub var_delay: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { s: 50, beta0: 1e-4, beta_s: 0.5, skip: 10, var_delay: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub variant: Variant,
    pub k: usize,
    pub sv_clamp: f64,
    pub condition_replace: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { variant: Variant::U2Diffine, k: 20, sv_clamp: 100.0, condition_replace: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_scenes: usize,
    pub t: usize,
    pub n_agents: usize,
    /// Load scenes from this JSONL file instead of generating them.
    pub file: Option<String>,
    pub dynamics: DynamicsParams,
    pub mask: MaskSpec,
    /// Per-scene mask seeds derive from the root seed plus this offset.
    pub mask_seed_offset: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            t: 24,
            n_agents: 4,
            file: None,
            dynamics: DynamicsParams::default(),
            mask: MaskSpec::Forecast { t_obs: 8 },
            mask_seed_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub level: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5, 10, 20], level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: "out".into() }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub ranker: RankerConfig,
    pub ranker_train: RankerTrainConfig,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            schedule: ScheduleSection::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            ranker: RankerConfig::default(),
            ranker_train: RankerTrainConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![format!("TOML parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate every cross-field constraint, reporting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schedule.s < 2 {
            problems.push(format!("schedule.s must be >= 2, got {}", self.schedule.s));
        }
        if !(self.schedule.beta0 > 0.0 && self.schedule.beta0 < self.schedule.beta_s && self.schedule.beta_s < 1.0) {
            problems.push(format!(
                "schedule endpoints must satisfy 0 < beta0 < beta_s < 1, got ({}, {})",
                self.schedule.beta0, self.schedule.beta_s
            ));
        }
        if self.schedule.skip == 0 || self.schedule.skip >= self.schedule.s {
            problems.push(format!(
                "schedule.skip must be in [1, s), got {} with s = {}",
                self.schedule.skip, self.schedule.s
            ));
        }
        if self.schedule.var_delay > self.schedule.s {
            problems.push(format!(
                "schedule.var_delay must be <= s, got {} with s = {}",
                self.schedule.var_delay, self.schedule.s
            ));
        }
        if self.net.s_max != self.schedule.s {
            problems.push(format!(
                "net.s_max ({}) must equal schedule.s ({})",
                self.net.s_max, self.schedule.s
            ));
        }
        if let Err(e) = self.net.validate() {
            problems.push(format!("net: {e}"));
        }
        if self.train.lambda < 0.0 {
            problems.push(format!("train.lambda must be >= 0, got {}", self.train.lambda));
        }
        if self.train.lr0 <= 0.0 && self.train.epochs > 0 {
            problems.push(format!("train.lr0 must be > 0, got {}", self.train.lr0));
        }
        if self.sampler.k == 0 {
            problems.push("sampler.k must be >= 1".into());
        }
        if self.data.t < 2 || self.data.n_agents < 1 {
            problems.push(format!(
                "data shape must have t >= 2 and n_agents >= 1, got ({}, {})",
                self.data.t, self.data.n_agents
            ));
        }
        if self.data.dynamics.include_ball && self.data.n_agents < 2 {
            problems.push("data.dynamics.include_ball requires n_agents >= 2".into());
        }
        if self.data.file.is_none() && self.data.n_scenes == 0 {
            problems.push("data.n_scenes must be >= 1 when generating scenes".into());
        }
        if let Some(file) = &self.data.file {
            if !Path::new(file).exists() {
                problems.push(format!("data.file '{file}' does not exist"));
            }
        }
        if let MaskSpec::File { path } = &self.data.mask {
            if !Path::new(path).exists() {
                problems.push(format!("mask file '{path}' does not exist"));
            }
        }
        if self.eval.ks.is_empty() {
            problems.push("eval.ks must not be empty".into());
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            problems.push(format!("eval.level must be in (0, 1), got {}", self.eval.level));
        }
        if self.ranker_train.k < 2 {
            problems.push(format!("ranker_train.k must be >= 2, got {}", self.ranker_train.k));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::quadratic(self.schedule.s, self.schedule.beta0, self.schedule.beta_s)
    }

    pub fn build_plan(&self) -> Result<StepPlan> {
        build_step_plan(self.schedule.s, self.schedule.skip, self.schedule.var_delay)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.paths.out_dir).join(name)
    }

    /// Named substream seeds for the pipeline stages.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        crate::rng::subseed(self.seed, stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg = RunConfig::from_toml("seed = 42\n[schedule]\ns = 20\nskip = 5\nvar_delay = 12\n\n[net]\ns_max = 20\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.schedule.s, 20);
        assert_eq!(cfg.schedule.beta0, 1e-4);
        assert_eq!(cfg.sampler.k, 20);
    }

    #[test]
    fn all_violations_reported_together() {
        let bad = RunConfig::from_toml(
            "[schedule]\ns = 50\nskip = 60\nvar_delay = 99\n\n[sampler]\nk = 0\n\n[eval]\nlevel = 1.5\n",
        );
        match bad {
            Err(Error::Config(problems)) => {
                assert!(problems.len() >= 4, "expected several problems, got {problems:?}");
                assert!(problems.iter().any(|p| p.contains("skip")));
                assert!(problems.iter().any(|p| p.contains("var_delay")));
                assert!(problems.iter().any(|p| p.contains("sampler.k")));
                assert!(problems.iter().any(|p| p.contains("eval.level")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = RunConfig::default();
        let a = cfg.stage_seed("data");
        let b = cfg.stage_seed("train");
        let c = cfg.stage_seed("sample");
        assert_ne!(a, b);
        assert_ne!(b, c);
    }
}
