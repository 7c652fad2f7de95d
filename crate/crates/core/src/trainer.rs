//! Outer training loop: snapshot the sampling policy, collect rollouts,
//! compute advantages once, then take `K` gradient steps on the frozen batch.
//!
//! Every query owns its own policy table and optimizer state, so queries are
//! processed in parallel and merged in query order; results do not depend on
//! the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{solve_dual, DualSolution, RewardGroup, TrustRegionConfig};
use crate::env::SyntheticEnv;
use crate::error::{validation, Error, Result};
use crate::objectives::{
    exact_kl_penalty, gspo_loss, grpo_loss, kl_penalty, quatro_loss, Batch, ClipConfig, KlEstimator,
    LossReport, QuatroConfig,
};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::policy::{exact_kl, mean_token_entropy, QueryId, SamplingConfig, TabularPolicy, Trajectory};
use crate::seed;

/// Mean `|logit|` above which a run is stopped as diverged.
pub const DIVERGENCE_LOGIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Quatro,
    Grpo,
    Gspo,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Quatro => "quatro",
            Algorithm::Grpo => "grpo",
            Algorithm::Gspo => "gspo",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quatro" => Ok(Algorithm::Quatro),
            "grpo" => Ok(Algorithm::Grpo),
            "gspo" => Ok(Algorithm::Gspo),
            other => Err(validation(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// KL budget (QUATRO only).
    pub delta: f64,
    /// Clip range (GRPO/GSPO only).
    pub epsilon: f64,
    /// Rollouts per query.
    #[serde(alias = "N")]
    pub rollouts: usize,
    /// Gradient steps per frozen batch.
    #[serde(alias = "K")]
    pub inner_updates: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    /// Weight of the KL-to-pretrained penalty.
    pub beta: f64,
    /// Outer iterations.
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Replace sampling with full enumeration weighted by `π_old`.
    pub exact_expectation: bool,
    pub sampling: SamplingConfig,
    pub lambda_min: f64,
    pub log_ratio_clamp: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Quatro,
            delta: 0.01,
            epsilon: 0.2,
            rollouts: 8,
            inner_updates: 1,
            learning_rate: 1e-2,
            beta: 1e-3,
            steps: 100,
            optimizer: OptimizerKind::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            exact_expectation: false,
            sampling: SamplingConfig::train(),
            lambda_min: 1e-3,
            log_ratio_clamp: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.exact_expectation && self.rollouts < 2 {
            return Err(validation("at least 2 rollouts per query are required"));
        }
        if self.inner_updates == 0 {
            return Err(validation("inner_updates (K) must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(validation("learning_rate must be > 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(validation("beta must be >= 0"));
        }
        match self.algorithm {
            Algorithm::Quatro => self.trust_region().validate()?,
            Algorithm::Grpo | Algorithm::Gspo => {
                if !(self.epsilon > 0.0) {
                    return Err(validation("epsilon must be > 0"));
                }
            }
        }
        self.sampling.validate()
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            delta: self.delta,
            lambda_min: self.lambda_min,
            ..TrustRegionConfig::default()
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            eps: self.adam_eps,
        }
    }

    fn kl_estimator(&self) -> KlEstimator {
        if self.exact_expectation {
            KlEstimator::Exact
        } else {
            KlEstimator::SampleK3
        }
    }
}

/// Condensed dual solution for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSummary {
    pub query_id: QueryId,
    pub lambda_star: f64,
    pub mu_star: f64,
    pub degenerate: bool,
    pub interior: bool,
}

impl From<&DualSolution> for DualSummary {
    fn from(s: &DualSolution) -> Self {
        Self {
            query_id: s.query_id,
            lambda_star: s.lambda_star,
            mu_star: s.mu_star,
            degenerate: s.degenerate,
            interior: s.interior,
        }
    }
}

/// One outer iteration, averaged over queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    /// Exact expected reward under the updated policy.
    pub mean_reward: f64,
    /// Exact expected per-token entropy under the updated policy.
    pub mean_entropy: f64,
    /// Mean `λ*` over non-degenerate queries (QUATRO only).
    pub mean_lambda: Option<f64>,
    /// Exact `KL(π_θ ‖ π_old)` after the inner updates.
    pub kl_to_old: f64,
    /// Mean clip fraction over the inner updates (GRPO/GSPO only).
    pub clip_fraction: Option<f64>,
    /// Clip fraction at each inner update, averaged over queries.
    pub inner_clip_fractions: Vec<f64>,
    pub duals: Vec<DualSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Mean `|logit|` exceeded [`DIVERGENCE_LOGIT`].
    Diverged { step: usize },
    /// A loss or gradient became non-finite.
    NonFinite { step: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&StepRow> {
        self.rows.last()
    }
}

/// Everything produced for one query during one outer iteration.
#[derive(Debug, Clone)]
pub struct QueryStep {
    pub query_id: QueryId,
    pub old_policy: TabularPolicy,
    pub rollouts: Vec<Trajectory>,
    /// Sample measure (`π_old` probabilities in exact mode).
    pub weights: Option<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub dual: Option<DualSolution>,
    pub inner_clip_fractions: Vec<f64>,
    pub losses: Vec<f64>,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub kl_to_old: f64,
}

pub struct Trainer {
    envs: Vec<SyntheticEnv>,
    config: TrainConfig,
    policies: Vec<TabularPolicy>,
    pre: Vec<TabularPolicy>,
    opt: Vec<OptimizerState>,
}

impl Trainer {
    /// `initial[i]` is both the starting and the pretrained policy of `envs[i]`.
    pub fn new(envs: Vec<SyntheticEnv>, initial: Vec<TabularPolicy>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if envs.is_empty() {
            return Err(validation("no queries"));
        }
        if envs.len() != initial.len() {
            return Err(validation("one initial policy per query required"));
        }
        for (env, p) in envs.iter().zip(&initial) {
            env.validate()?;
            if env.vocab_size != p.vocab_size() || env.horizon != p.horizon() {
                return Err(validation(format!("policy shape does not match query {}", env.query_id)));
            }
        }
        let opt = initial.iter().map(|p| OptimizerState::new(p.param_count())).collect();
        Ok(Self {
            envs,
            config,
            pre: initial.clone(),
            policies: initial,
            opt,
        })
    }

    /// Random `N(0, init_std²)` initial logits drawn from the config seed.
    pub fn with_random_init(envs: Vec<SyntheticEnv>, init_std: f64, config: TrainConfig) -> Result<Self> {
        let initial = initial_policies(&envs, init_std, config.seed)?;
        Self::new(envs, initial, config)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn envs(&self) -> &[SyntheticEnv] {
        &self.envs
    }

    pub fn policies(&self) -> &[TabularPolicy] {
        &self.policies
    }

    pub fn pretrained(&self) -> &[TabularPolicy] {
        &self.pre
    }

    pub fn run(&mut self) -> RunRecord {
        self.run_with(|_, _| {})
    }

    /// Runs all outer steps, handing each step's per-query details to `observe`.
    pub fn run_with(&mut self, mut observe: impl FnMut(usize, &[QueryStep])) -> RunRecord {
        let mut rows = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let outcome = self.step(step);
            let details = match outcome {
                Ok(d) => d,
                Err(e) => {
                    return RunRecord {
                        rows,
                        status: RunStatus::NonFinite {
                            step,
                            detail: e.to_string(),
                        },
                    }
                }
            };
            observe(step, &details);
            rows.push(summarize(step, &details, self.config.algorithm));
            let mean_abs = self.policies.iter().map(|p| p.mean_abs_logit()).sum::<f64>()
                / self.policies.len() as f64;
            if !mean_abs.is_finite() || mean_abs > DIVERGENCE_LOGIT {
                return RunRecord {
                    rows,
                    status: RunStatus::Diverged { step },
                };
            }
        }
        RunRecord {
            rows,
            status: RunStatus::Completed,
        }
    }

    /// One outer iteration over all queries.
    pub fn step(&mut self, step: usize) -> Result<Vec<QueryStep>> {
        let config = &self.config;
        self.envs
            .par_iter()
            .zip(self.policies.par_iter_mut())
            .zip(self.opt.par_iter_mut())
            .zip(self.pre.par_iter())
            .map(|(((env, policy), opt), pre)| query_step(env, policy, opt, pre, config, step))
            .collect()
    }
}

pub fn initial_policies(envs: &[SyntheticEnv], init_std: f64, master_seed: u64) -> Result<Vec<TabularPolicy>> {
    envs.iter()
        .map(|env| {
            let mut rng = seed::tagged_stream(master_seed, 0x696E_6974, env.query_id.0);
            TabularPolicy::random(env.vocab_size, env.horizon, init_std, &mut rng)
        })
        .collect()
}

/// Runs a fresh trainer to completion.
pub fn run_training(envs: Vec<SyntheticEnv>, initial: Vec<TabularPolicy>, config: TrainConfig) -> Result<RunRecord> {
    Ok(Trainer::new(envs, initial, config)?.run())
}

/// Population-normalised advantages under an arbitrary sample measure.
fn weighted_group_norm(rewards: &[f64], weights: &[f64]) -> Vec<f64> {
    let mean: f64 = rewards.iter().zip(weights).map(|(r, w)| r * w).sum();
    let var: f64 = rewards.iter().zip(weights).map(|(r, w)| w * (r - mean).powi(2)).sum();
    let std = var.sqrt();
    if std < 1e-9 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

fn collect_rollouts(
    env: &SyntheticEnv,
    old: &TabularPolicy,
    config: &TrainConfig,
    step: usize,
) -> Result<(Vec<Trajectory>, Option<Vec<f64>>)> {
    if config.exact_expectation {
        let mut trajs = Vec::new();
        let mut weights = Vec::new();
        for (tokens, lp) in old.enumerate_log_probs()? {
            let mut t = Trajectory::unscored(env.query_id, tokens, lp);
            env.score(&mut t)?;
            weights.push(lp.exp());
            trajs.push(t);
        }
        // Enumerated probabilities can drift from 1 by a few ulps per entry.
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok((trajs, Some(weights)))
    } else {
        let mut rng = seed::stream(config.seed, env.query_id.0, step as u64);
        let trajs = (0..config.rollouts)
            .map(|_| {
                let mut t = old.sample(env.query_id, &config.sampling, &mut rng)?;
                env.score(&mut t)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((trajs, None))
    }
}

fn loss_for(
    theta: &TabularPolicy,
    batch: &Batch<'_>,
    config: &TrainConfig,
) -> Result<LossReport> {
    let kl = config.kl_estimator();
    match config.algorithm {
        Algorithm::Quatro => quatro_loss(
            theta,
            batch,
            &QuatroConfig {
                beta: config.beta,
                kl,
                log_ratio_clamp: config.log_ratio_clamp,
            },
        ),
        Algorithm::Grpo | Algorithm::Gspo => {
            let clip = ClipConfig {
                epsilon: config.epsilon,
            };
            let mut rep = if config.algorithm == Algorithm::Grpo {
                grpo_loss(theta, batch, &clip)?
            } else {
                gspo_loss(theta, batch, &clip)?
            };
            if config.beta != 0.0 {
                let pre = batch.pre.ok_or_else(|| validation("missing pretrained policy"))?;
                let (value, grad) = match kl {
                    KlEstimator::SampleK3 => kl_penalty(theta, pre, batch)?,
                    KlEstimator::Exact => exact_kl_penalty(theta, pre)?,
                };
                rep.loss += config.beta * value;
                rep.aux.kl_penalty_value = value;
                rep.gradient
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(g, k)| *g += config.beta * k);
            }
            Ok(rep)
        }
    }
}

fn query_step(
    env: &SyntheticEnv,
    policy: &mut TabularPolicy,
    opt: &mut OptimizerState,
    pre: &TabularPolicy,
    config: &TrainConfig,
    step: usize,
) -> Result<QueryStep> {
    let old = policy.clone();
    let (rollouts, weights) = collect_rollouts(env, &old, config, step)?;
    let rewards: Vec<f64> = rollouts.iter().map(|t| t.reward).collect();

    let (advantages, dual) = match config.algorithm {
        Algorithm::Quatro => {
            let group = match &weights {
                Some(w) => RewardGroup::weighted(env.query_id, rewards, w.clone())?,
                None => RewardGroup::new(env.query_id, rewards)?,
            };
            let sol = solve_dual(&group, &config.trust_region())?;
            (sol.advantages.clone(), Some(sol))
        }
        Algorithm::Grpo | Algorithm::Gspo => {
            let adv = match &weights {
                Some(w) => weighted_group_norm(&rewards, w),
                None => crate::objectives::group_norm_advantage(&rewards)?,
            };
            (adv, None)
        }
    };

    let opt_cfg = config.optimizer_config();
    let mut inner_clip_fractions = Vec::with_capacity(config.inner_updates);
    let mut losses = Vec::with_capacity(config.inner_updates);
    {
        let mut batch = Batch::new(env.query_id, &rollouts, &advantages, &old)?.with_pre(pre);
        if let Some(w) = &weights {
            batch = batch.with_weights(w)?;
        }
        for _ in 0..config.inner_updates {
            let rep = loss_for(policy, &batch, config)?;
            if !rep.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss/gradient for query {} at step {step}",
                    env.query_id
                )));
            }
            if let Some(c) = rep.aux.clip_fraction {
                inner_clip_fractions.push(c);
            }
            losses.push(rep.loss);
            optimizer_step(policy.logits_mut(), &rep.gradient, opt, &opt_cfg)?;
        }
    }

    Ok(QueryStep {
        query_id: env.query_id,
        mean_reward: env.expected_reward(policy)?,
        mean_entropy: mean_token_entropy(policy),
        kl_to_old: exact_kl(policy, &old)?,
        old_policy: old,
        rollouts,
        weights,
        advantages,
        dual,
        inner_clip_fractions,
        losses,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(step: usize, details: &[QueryStep], algorithm: Algorithm) -> StepRow {
    let q = details.len() as f64;
    let k = details.first().map_or(0, |d| d.inner_clip_fractions.len());
    let inner_clip_fractions: Vec<f64> = (0..k)
        .map(|j| details.iter().map(|d| d.inner_clip_fractions[j]).sum::<f64>() / q)
        .collect();
    let clip_fraction = match algorithm {
        Algorithm::Quatro => None,
        _ => mean(inner_clip_fractions.iter().copied()),
    };
    let duals: Vec<DualSummary> = details.iter().filter_map(|d| d.dual.as_ref().map(DualSummary::from)).collect();
    StepRow {
        step,
        mean_reward: details.iter().map(|d| d.mean_reward).sum::<f64>() / q,
        mean_entropy: details.iter().map(|d| d.mean_entropy).sum::<f64>() / q,
        mean_lambda: mean(duals.iter().filter(|d| !d.degenerate).map(|d| d.lambda_star)),
        kl_to_old: details.iter().map(|d| d.kl_to_old).sum::<f64>() / q,
        clip_fraction,
        inner_clip_fractions,
        duals,
    }
}

/// One run of a staleness sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub algorithm: Algorithm,
    pub inner_updates: usize,
    pub learning_rate: f64,
    pub record: RunRecord,
}

/// Cartesian sweep over algorithm × K × learning rate, sharing seeds and
/// initial policies across all runs.
pub fn staleness_sweep(
    envs: &[SyntheticEnv],
    initial: &[TabularPolicy],
    base: &TrainConfig,
    algorithms: &[Algorithm],
    k_values: &[usize],
    lr_values: &[f64],
) -> Result<Vec<SweepRun>> {
    let mut out = Vec::new();
    for &algorithm in algorithms {
        for &k in k_values {
            for &lr in lr_values {
                let config = TrainConfig {
                    algorithm,
                    inner_updates: k,
                    learning_rate: lr,
                    ..base.clone()
                };
                let record = run_training(envs.to_vec(), initial.to_vec(), config)?;
                out.push(SweepRun {
                    algorithm,
                    inner_updates: k,
                    learning_rate: lr,
                    record,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;

    fn envs(n: u32) -> Vec<SyntheticEnv> {
        (0..n)
            .map(|q| SyntheticEnv::with_random_targets(QueryId(q), 3, 3, EnvKind::MultiMode, 4, 0.0, 17).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_is_empty() {
        let e = envs(2);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let mut t = Trainer::with_random_init(e, 0.5, cfg).unwrap();
        let before = t.policies().to_vec();
        let rec = t.run();
        assert!(rec.rows.is_empty());
        assert_eq!(rec.status, RunStatus::Completed);
        assert_eq!(t.policies(), &before[..]);
    }

    #[test]
    fn config_validation() {
        let e = envs(1);
        for bad in [
            TrainConfig { rollouts: 1, ..Default::default() },
            TrainConfig { inner_updates: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { delta: 0.0, ..Default::default() },
        ] {
            assert!(Trainer::with_random_init(e.clone(), 0.0, bad).is_err());
        }
    }

    #[test]
    fn runs_are_deterministic() {
        for algorithm in [Algorithm::Quatro, Algorithm::Grpo, Algorithm::Gspo] {
            let cfg = TrainConfig { algorithm, steps: 5, inner_updates: 2, seed: 9, ..Default::default() };
            let a = Trainer::with_random_init(envs(3), 0.5, cfg.clone()).unwrap().run();
            let b = Trainer::with_random_init(envs(3), 0.5, cfg).unwrap().run();
            assert_eq!(a, b);
            assert_eq!(a.rows.len(), 5);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = TrainConfig { steps: 4, inner_updates: 2, seed: 3, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| Trainer::with_random_init(envs(4), 0.5, cfg.clone()).unwrap().run())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn quatro_rows_report_lambda_not_clipping() {
        let cfg = TrainConfig { steps: 3, seed: 1, ..Default::default() };
        let rec = Trainer::with_random_init(envs(2), 0.5, cfg).unwrap().run();
        for row in &rec.rows {
            assert_eq!(row.clip_fraction, None);
            assert!(row.inner_clip_fractions.is_empty());
            assert_eq!(row.duals.len(), 2);
        }
        let cfg = TrainConfig { algorithm: Algorithm::Gspo, steps: 3, seed: 1, ..Default::default() };
        let rec = Trainer::with_random_init(envs(2), 0.5, cfg).unwrap().run();
        for row in &rec.rows {
            assert_eq!(row.mean_lambda, None);
            assert_eq!(row.clip_fraction, Some(0.0));
        }
    }

    #[test]
    fn divergence_stops_early() {
        let cfg = TrainConfig {
            algorithm: Algorithm::Grpo,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e7,
            steps: 50,
            inner_updates: 3,
            beta: 0.0,
            seed: 2,
            ..Default::default()
        };
        let e = vec![SyntheticEnv::with_random_targets(QueryId(0), 3, 2, EnvKind::MultiMode, 3, 0.0, 1).unwrap()];
        let rec = Trainer::with_random_init(e, 0.0, cfg).unwrap().run();
        assert!(matches!(rec.status, RunStatus::Diverged { .. }), "{:?}", rec.status);
        assert!(rec.rows.len() < 50);
    }

    #[test]
    fn algorithm_parsing() {
        assert_eq!("GSPO".parse::<Algorithm>().unwrap(), Algorithm::Gspo);
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn sweep_shapes() {
        let e = envs(1);
        let init = initial_policies(&e, 0.5, 0).unwrap();
        let base = TrainConfig { steps: 2, ..Default::default() };
        let runs = staleness_sweep(&e, &init, &base, &[Algorithm::Quatro, Algorithm::Gspo], &[1, 2], &[1e-2]).unwrap();
        assert_eq!(runs.len(), 4);
        assert!(runs.iter().all(|r| r.record.rows.len() == 2));
    }
}
