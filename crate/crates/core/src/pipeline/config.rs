//! The single JSON document that drives a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{ProbeConfig, ProbeTask, ScalingConfig};
use crate::chartgen::GeneratorConfig;
use crate::dualenc::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::MetricConfig;
use crate::negcap::NegativeSynthesisConfig;
use crate::numerics::hex_digest;
use crate::trainer::TrainConfig;

/// Overrides the digest-named run directory.
pub const RUN_DIR_ENV: &str = "CHARTLAB_RUN_DIR";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const CONFIG_DIGEST_FILE: &str = "config_digest.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Charts in the held-out split.
    pub eval_charts: usize,
    /// Hard negatives per retrieval instance; candidates are `k + 1`.
    pub k: usize,
    /// Retrieval instances sampled from the held-out split; 0 keeps all.
    pub instances: usize,
    pub metric: MetricConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { eval_charts: 500, k: 3, instances: 1000, metric: MetricConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub probe: ProbeConfig,
    /// QA-derived probe tasks. The parity task is always added.
    pub tasks: Vec<ProbeTask>,
    pub scaling: ScalingConfig,
    pub run_scaling: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            probe: ProbeConfig::default(),
            tasks: vec![
                ProbeTask::count(g.category_count.0, g.category_count.1),
                ProbeTask::value_lookup(g.value_range),
                ProbeTask::title(),
            ],
            scaling: ScalingConfig::default(),
            run_scaling: true,
        }
    }
}

/// Section seeds are overwritten by the root `seed` when the config is
/// resolved, so one number pins the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub negatives: NegativeSynthesisConfig,
    pub encoder: EncoderConfig,
    /// Shared by both trained variants. `k_train` must stay 0: the plain
    /// variant trains without negatives and the hard-negative variant uses
    /// every synthesized negative.
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig { charts: 2000, ..GeneratorConfig::default() },
            negatives: NegativeSynthesisConfig::default(),
            encoder: EncoderConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
        .resolved()
    }
}

impl RunConfig {
    /// 200 training charts for 2 epochs: a quick end-to-end run.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.generator.charts = 200;
        c.training.epochs = 2;
        c.training.batch_size = 16;
        c.training.learning_rate = 1e-3;
        c.training.checkpoint_every = 5;
        c.evaluation.eval_charts = 100;
        c.evaluation.instances = 0;
        c.analysis.probe.epochs = 200;
        c.analysis.scaling.seeds = vec![0, 1];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected default or smoke"))),
        }
    }

    /// Copy the root seed into every section.
    pub fn resolved(mut self) -> Self {
        self.generator.seed = self.seed;
        self.negatives.seed = self.seed;
        self.training.seed = self.seed;
        self.analysis.probe.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |key: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            other => other,
        };
        self.generator.validate().map_err(|e| ctx("generator", e))?;
        self.negatives.validate().map_err(|e| ctx("negatives", e))?;
        self.encoder.validate().map_err(|e| ctx("encoder", e))?;
        self.training.validate().map_err(|e| ctx("training", e))?;
        self.evaluation.metric.validate().map_err(|e| ctx("evaluation.metric", e))?;
        self.analysis.probe.validate().map_err(|e| ctx("analysis.probe", e))?;
        for t in &self.analysis.tasks {
            t.validate().map_err(|e| ctx("analysis.tasks", e))?;
        }
        if self.generator.resolution != self.encoder.image_resolution {
            return Err(Error::Config(format!(
                "encoder.image_resolution {} differs from generator.resolution {}",
                self.encoder.image_resolution, self.generator.resolution
            )));
        }
        if self.training.k_train != 0 {
            return Err(Error::Config(
                "training.k_train: set per variant; change negatives.negatives_per_positive instead".into(),
            ));
        }
        if self.evaluation.eval_charts == 0 {
            return Err(Error::Config("evaluation.eval_charts must be positive".into()));
        }
        if self.evaluation.k == 0 || self.evaluation.k > self.negatives.negatives_per_positive {
            return Err(Error::Config(format!(
                "evaluation.k {} must be in 1..={} (negatives.negatives_per_positive)",
                self.evaluation.k, self.negatives.negatives_per_positive
            )));
        }
        if self.generator.charts < self.training.batch_size {
            return Err(Error::Config(format!(
                "generator.charts {} is less than one batch of {}",
                self.generator.charts, self.training.batch_size
            )));
        }
        if self.analysis.run_scaling {
            crate::analysis::nested_subset_sizes(
                self.generator.charts,
                &self.analysis.scaling.fractions,
                self.training.batch_size,
            )
            .map_err(|e| ctx("analysis.scaling", e))?;
            if self.analysis.scaling.seeds.is_empty() || self.analysis.scaling.k_variants.is_empty() {
                return Err(Error::Config("analysis.scaling: seeds and k_variants must be non-empty".into()));
            }
            if let Some(&k) =
                self.analysis.scaling.k_variants.iter().find(|&&k| k > self.negatives.negatives_per_positive)
            {
                return Err(Error::Config(format!(
                    "analysis.scaling.k_variants: {k} exceeds negatives.negatives_per_positive"
                )));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }

    /// `runs_root/run-<digest prefix>`, unless the environment names the
    /// run directory explicitly.
    pub fn run_dir(&self, runs_root: &Path) -> PathBuf {
        match std::env::var_os(RUN_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => runs_root.join(format!("run-{}", &self.digest()[..12])),
        }
    }

    /// Write the resolved config and its digest into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::chartgen::dataset::write_json(&dir.join(RESOLVED_CONFIG_FILE), self)?;
        let path = dir.join(CONFIG_DIGEST_FILE);
        std::fs::write(&path, format!("{}\n", self.digest())).map_err(|e| Error::io(&path, e))
    }
}

/// Parse a config document. Empty text means all defaults. The result is
/// resolved and validated.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = if text.trim().is_empty() {
        RunConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?
    };
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}
