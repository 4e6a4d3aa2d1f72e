use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bevkit::pipeline::{FitConfig, PipelineConfig, VtMode};
use bevkit::scene::SceneConfig;
use serde::{Deserialize, Serialize};

/// Top-level JSON document shared by `run` and `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    /// One scene is generated per seed.
    pub seeds: Vec<u64>,
    /// Seeds the model parameters.
    pub model_seed: u64,
    /// Used when `--out` is not given.
    pub out_dir: Option<PathBuf>,
    pub bench: BenchConfig,
    /// Fit the model on separate training scenes before running.
    pub fit: Option<FitSection>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            scene: SceneConfig::default(),
            seeds: vec![0],
            model_seed: 0,
            out_dir: None,
            bench: BenchConfig::default(),
            fit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub modes: Vec<VtMode>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reps: 3,
            warmup: 1,
            modes: VtMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub train_seeds: Vec<u64>,
    #[serde(default)]
    pub config: FitConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pipeline.validate()?;
        self.scene.validate()?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.bench.reps < 3 {
            bail!("bench.reps must be at least 3, got {}", self.bench.reps);
        }
        if self.bench.modes.is_empty() {
            bail!("bench.modes must not be empty");
        }
        if let Some(fit) = &self.fit {
            if fit.train_seeds.is_empty() {
                bail!("fit.train_seeds must not be empty");
            }
            if let Some(s) = fit.train_seeds.iter().find(|s| self.seeds.contains(s)) {
                bail!("seed {s} is used for both training and evaluation");
            }
            fit.config.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: CliConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, CliConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<CliConfig>(r#"{"seed": 3}"#).is_err());
        assert!(serde_json::from_str::<CliConfig>(r#"{"pipeline": {"vt_mod": "asap"}}"#).is_err());
        assert!(serde_json::from_str::<CliConfig>(r#"{"pipeline": {"vt_mode": "asap_only"}}"#).is_err());
    }

    #[test]
    fn too_few_reps_fail_validation() {
        let cfg: CliConfig = serde_json::from_str(r#"{"bench": {"reps": 2}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overlapping_seeds_fail_validation() {
        let cfg: CliConfig = serde_json::from_str(r#"{"seeds": [1, 2], "fit": {"train_seeds": [2]}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
