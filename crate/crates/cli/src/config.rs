//! Experiment configuration file schema.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quatro_core::metrics::{SimilarityMetric, DEFAULT_FLIP_BINS, DEFAULT_THRESHOLD};
use quatro_core::trainer::initial_policies;
use quatro_core::{EnvKind, QueryId, SyntheticEnv, TabularPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

/// Synthetic task family: one environment per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub queries: u32,
    pub vocab_size: usize,
    pub horizon: usize,
    pub targets_per_query: usize,
    pub noise_prob: f64,
    /// Seed for target placement; independent of the training seed.
    pub seed: u64,
    /// Standard deviation of the random initial logits.
    pub init_std: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::MultiMode,
            queries: 8,
            vocab_size: 3,
            horizon: 3,
            targets_per_query: 4,
            noise_prob: 0.0,
            seed: 0,
            init_std: 0.5,
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<Vec<SyntheticEnv>> {
        if self.queries == 0 {
            bail!("env.queries must be >= 1");
        }
        (0..self.queries)
            .map(|q| {
                SyntheticEnv::with_random_targets(
                    QueryId(q),
                    self.vocab_size,
                    self.horizon,
                    self.kind,
                    self.targets_per_query,
                    self.noise_prob,
                    self.seed,
                )
                .with_context(|| format!("building environment for query {q}"))
            })
            .collect()
    }

    pub fn initial_policies(&self, envs: &[SyntheticEnv], master_seed: u64) -> Result<Vec<TabularPolicy>> {
        Ok(initial_policies(envs, self.init_std, master_seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub k: Vec<usize>,
    pub metric: SimilarityMetric,
    pub threshold: f64,
    pub flip_bins: Vec<usize>,
    /// Samples per query drawn from the initial and final policies; 0 disables.
    pub eval_samples: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            k: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            metric: SimilarityMetric::TfidfCosine,
            threshold: DEFAULT_THRESHOLD,
            flip_bins: DEFAULT_FLIP_BINS.to_vec(),
            eval_samples: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub train: TrainConfig,
    pub metrics: MetricSpec,
    /// Not written to `config.resolved.json`.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; copied into `train.seed` on resolution.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies command-line overrides and checks the result.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.out_dir = out;
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            bail!("metrics.threshold must lie in [0, 1]");
        }
        if self.metrics.k.contains(&0) {
            bail!("metrics.k entries must be >= 1");
        }
        self.env.build()?;
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .context("no output directory: pass --out or set out_dir in the config")
    }
}
