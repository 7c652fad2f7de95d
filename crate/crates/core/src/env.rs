//! Synthetic sequence-reward tasks with enumerable trajectory spaces.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::policy::{QueryId, SamplingConfig, TabularPolicy, Trajectory, DEFAULT_ENUMERATION_CAP};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Reward 1 iff the sequence equals the single target.
    SingleTarget,
    /// Reward 1 iff the sequence is one of several targets.
    MultiMode,
    /// Reward `1 − hamming(o, nearest target) / T`.
    Graded,
    /// Target-membership reward flipped with probability `noise_prob`.
    Noisy,
}

/// One query: a reward function over length-`T` sequences of `V` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    pub query_id: QueryId,
    pub vocab_size: usize,
    pub horizon: usize,
    pub kind: EnvKind,
    pub targets: Vec<Vec<usize>>,
    #[serde(default)]
    pub noise_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticEnv {
    pub fn new(
        query_id: QueryId,
        vocab_size: usize,
        horizon: usize,
        kind: EnvKind,
        targets: Vec<Vec<usize>>,
        noise_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        let env = Self {
            query_id,
            vocab_size,
            horizon,
            kind,
            targets,
            noise_prob,
            seed,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn single_target(query_id: QueryId, vocab_size: usize, target: Vec<usize>) -> Result<Self> {
        let horizon = target.len();
        Self::new(query_id, vocab_size, horizon, EnvKind::SingleTarget, vec![target], 0.0, 0)
    }

    pub fn multi_mode(query_id: QueryId, vocab_size: usize, targets: Vec<Vec<usize>>) -> Result<Self> {
        let horizon = targets.first().map_or(0, Vec::len);
        Self::new(query_id, vocab_size, horizon, EnvKind::MultiMode, targets, 0.0, 0)
    }

    /// `count` distinct targets drawn deterministically from `seed`.
    pub fn with_random_targets(
        query_id: QueryId,
        vocab_size: usize,
        horizon: usize,
        kind: EnvKind,
        count: usize,
        noise_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        let space = (vocab_size as u128).saturating_pow(horizon as u32);
        if count == 0 || count as u128 > space {
            return Err(validation(format!(
                "cannot draw {count} distinct targets from {space} sequences"
            )));
        }
        let mut rng = seed::tagged_stream(seed, 0x7461_7267, query_id.0);
        let mut chosen = BTreeSet::new();
        let mut targets = Vec::with_capacity(count);
        while targets.len() < count {
            let t: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..vocab_size)).collect();
            if chosen.insert(t.clone()) {
                targets.push(t);
            }
        }
        Self::new(query_id, vocab_size, horizon, kind, targets, noise_prob, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.horizon < 1 {
            return Err(validation("environment needs V >= 2 and T >= 1"));
        }
        let size = (self.vocab_size as u128).saturating_pow(self.horizon as u32);
        if size > DEFAULT_ENUMERATION_CAP as u128 {
            return Err(Error::Size {
                size,
                cap: DEFAULT_ENUMERATION_CAP,
            });
        }
        if self.targets.is_empty() {
            return Err(validation("environment needs at least one target"));
        }
        for t in &self.targets {
            if t.len() != self.horizon || t.iter().any(|&x| x >= self.vocab_size) {
                return Err(validation(format!("target {t:?} is not a length-{} sequence over V={}", self.horizon, self.vocab_size)));
            }
        }
        if self.kind == EnvKind::SingleTarget && self.targets.len() != 1 {
            return Err(validation("single_target environments take exactly one target"));
        }
        if !(0.0..1.0).contains(&self.noise_prob) {
            return Err(validation("noise_prob must be in [0, 1)"));
        }
        Ok(())
    }

    fn min_hamming(&self, tokens: &[usize]) -> usize {
        self.targets
            .iter()
            .map(|t| t.iter().zip(tokens).filter(|(a, b)| a != b).count())
            .min()
            .unwrap_or(self.horizon)
    }

    /// Deterministic uniform draw in `[0, 1)` keyed on `(seed, tokens)`.
    fn noise_draw(&self, tokens: &[usize]) -> f64 {
        let key = seed::hash_words(
            std::iter::once(self.seed)
                .chain(std::iter::once(u64::from(self.query_id.0)))
                .chain(tokens.iter().map(|&t| t as u64)),
        );
        (key >> 11) as f64 / (1u64 << 53) as f64
    }

    /// `(reward, correct)` for a full sequence.
    pub fn reward(&self, tokens: &[usize]) -> Result<(f64, bool)> {
        if tokens.len() != self.horizon {
            return Err(validation(format!(
                "sequence has {} tokens, environment horizon is {}",
                tokens.len(),
                self.horizon
            )));
        }
        if tokens.iter().any(|&t| t >= self.vocab_size) {
            return Err(validation("token outside vocabulary"));
        }
        let hits = self.min_hamming(tokens) == 0;
        Ok(match self.kind {
            EnvKind::SingleTarget | EnvKind::MultiMode => (if hits { 1.0 } else { 0.0 }, hits),
            EnvKind::Graded => {
                let d = self.min_hamming(tokens);
                (1.0 - d as f64 / self.horizon as f64, d == 0)
            }
            EnvKind::Noisy => {
                let flipped = self.noise_draw(tokens) < self.noise_prob;
                let base = hits != flipped;
                (if base { 1.0 } else { 0.0 }, hits)
            }
        })
    }

    /// Fills in reward and correctness.
    pub fn score(&self, traj: &mut Trajectory) -> Result<()> {
        let (r, c) = self.reward(&traj.tokens)?;
        traj.reward = r;
        traj.correct = c;
        Ok(())
    }

    /// Exact expected reward of `policy`.
    pub fn expected_reward(&self, policy: &TabularPolicy) -> Result<f64> {
        policy
            .enumerate_distribution()?
            .iter()
            .map(|(s, p)| Ok(p * self.reward(s)?.0))
            .sum()
    }
}

/// Number of correct samples out of `n` per query. Stream per query is
/// derived from `master_seed`, so the result does not depend on ordering.
pub fn base_solve_counts(
    envs: &[SyntheticEnv],
    policies: &[TabularPolicy],
    n: usize,
    sampling: &SamplingConfig,
    master_seed: u64,
) -> Result<BTreeMap<QueryId, usize>> {
    if envs.len() != policies.len() {
        return Err(validation("one policy per environment required"));
    }
    let mut out = BTreeMap::new();
    for (env, policy) in envs.iter().zip(policies) {
        let mut rng = seed::tagged_stream(master_seed, 0x6261_7365, env.query_id.0);
        let mut c = 0;
        for _ in 0..n {
            let t = policy.sample(env.query_id, sampling, &mut rng)?;
            if env.reward(&t.tokens)?.1 {
                c += 1;
            }
        }
        out.insert(env.query_id, c);
    }
    Ok(out)
}
