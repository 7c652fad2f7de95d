//! Enumerable tabular autoregressive softmax policy.
//!
//! A policy over `V` tokens and fixed horizon `T` stores one row of `V`
//! logits for every prefix of length `< T`. Prefix rows are laid out level
//! by level: the empty prefix is row 0, the `V` one-token prefixes follow,
//! and so on, with each prefix encoded base `V` (first token most
//! significant) inside its level.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Largest trajectory space (`V^T`) that may be enumerated by default.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

/// Opaque query identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A sampled token sequence with its sampling-time log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: QueryId,
    pub tokens: Vec<usize>,
    /// Log-probability under the distribution actually sampled from.
    pub logprob_old: f64,
    pub reward: f64,
    pub correct: bool,
}

impl Trajectory {
    /// Unscored trajectory; reward and correctness are filled in by an environment.
    pub fn unscored(query_id: QueryId, tokens: Vec<usize>, logprob_old: f64) -> Self {
        Self {
            query_id,
            tokens,
            logprob_old,
            reward: 0.0,
            correct: false,
        }
    }

    /// Space-joined token indices, the text form used by similarity metrics.
    pub fn render(&self) -> String {
        render_tokens(&self.tokens)
    }
}

pub fn render_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::train()
    }
}

impl SamplingConfig {
    /// Rollout settings: temperature 1, no nucleus truncation.
    pub fn train() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }

    /// Evaluation settings: temperature 1, top-p 0.7.
    pub fn eval() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(validation("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(validation("top_p must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    vocab: usize,
    horizon: usize,
    logits: Vec<f64>,
    /// Enumerability guard on `V^T`.
    cap: usize,
}

fn trajectory_count(vocab: usize, horizon: usize) -> u128 {
    (vocab as u128).saturating_pow(horizon as u32)
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(vocab: usize, horizon: usize) -> Result<Self> {
        Self::check_shape(vocab, horizon, DEFAULT_ENUMERATION_CAP)?;
        let rows = Self::rows_for(vocab, horizon);
        Ok(Self {
            vocab,
            horizon,
            logits: vec![0.0; rows * vocab],
            cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn from_logits(vocab: usize, horizon: usize, logits: Vec<f64>) -> Result<Self> {
        Self::from_logits_with_cap(vocab, horizon, logits, DEFAULT_ENUMERATION_CAP)
    }

    pub fn from_logits_with_cap(
        vocab: usize,
        horizon: usize,
        logits: Vec<f64>,
        cap: usize,
    ) -> Result<Self> {
        Self::check_shape(vocab, horizon, cap)?;
        let expected = Self::rows_for(vocab, horizon) * vocab;
        if logits.len() != expected {
            return Err(validation(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(validation("logits must be finite"));
        }
        Ok(Self {
            vocab,
            horizon,
            logits,
            cap,
        })
    }

    /// Logits drawn i.i.d. from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, horizon: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut policy = Self::uniform(vocab, horizon)?;
        for l in &mut policy.logits {
            let z: f64 = StandardNormal.sample(rng);
            *l = std * z;
        }
        Ok(policy)
    }

    /// Policy whose sequence distribution equals `probs`, given in
    /// lexicographic sequence order. Conditionals of unreachable prefixes
    /// are uniform; zero-probability tokens get a logit of -700.
    pub fn from_distribution(vocab: usize, horizon: usize, probs: &[f64]) -> Result<Self> {
        let mut policy = Self::uniform(vocab, horizon)?;
        let n = policy.trajectory_count()?;
        if probs.len() != n {
            return Err(validation(format!("expected {n} probabilities, got {}", probs.len())));
        }
        // Marginal mass of every prefix, deepest level first.
        let mut level: Vec<f64> = probs.to_vec();
        for depth in (0..horizon).rev() {
            let parents = vocab.pow(depth as u32);
            let offset = Self::level_offset(vocab, depth);
            let mut next = vec![0.0; parents];
            for code in 0..parents {
                let children = &level[code * vocab..(code + 1) * vocab];
                let mass: f64 = children.iter().sum();
                next[code] = mass;
                let row = &mut policy.logits[(offset + code) * vocab..(offset + code + 1) * vocab];
                if mass > 0.0 {
                    for (l, &c) in row.iter_mut().zip(children) {
                        *l = if c > 0.0 { (c / mass).ln().max(-700.0) } else { -700.0 };
                    }
                }
            }
            level = next;
        }
        Ok(policy)
    }

    fn check_shape(vocab: usize, horizon: usize, cap: usize) -> Result<()> {
        if vocab < 2 {
            return Err(validation("vocab_size must be at least 2"));
        }
        if horizon < 1 {
            return Err(validation("horizon must be at least 1"));
        }
        let size = trajectory_count(vocab, horizon);
        if size > cap as u128 {
            return Err(Error::Size { size, cap });
        }
        Ok(())
    }

    fn rows_for(vocab: usize, horizon: usize) -> usize {
        Self::level_offset(vocab, horizon)
    }

    /// Number of prefix rows of length `< depth`.
    fn level_offset(vocab: usize, depth: usize) -> usize {
        (0..depth).map(|t| vocab.pow(t as u32)).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// `V^T`.
    pub fn trajectory_count(&self) -> Result<usize> {
        let size = trajectory_count(self.vocab, self.horizon);
        usize::try_from(size).map_err(|_| Error::Size {
            size,
            cap: usize::MAX,
        })
    }

    pub fn mean_abs_logit(&self) -> f64 {
        self.logits.iter().map(|l| l.abs()).sum::<f64>() / self.logits.len() as f64
    }

    /// Row index of the state reached after `prefix`.
    pub fn row_index(&self, prefix: &[usize]) -> usize {
        let code = prefix.iter().fold(0usize, |acc, &t| acc * self.vocab + t);
        Self::level_offset(self.vocab, prefix.len()) + code
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Next-token distribution at a prefix row.
    pub fn probs(&self, row: usize) -> Vec<f64> {
        softmax(self.row(row), 1.0)
    }

    /// Next-token distribution after `prefix`.
    pub fn next_token_probs(&self, prefix: &[usize]) -> Vec<f64> {
        self.probs(self.row_index(prefix))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.horizon {
            return Err(validation(format!(
                "trajectory has {} tokens, horizon is {}",
                tokens.len(),
                self.horizon
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(validation(format!("token {t} outside vocabulary of {}", self.vocab)));
        }
        Ok(())
    }

    /// `log π(o_t | o_<t)` at every position, with the row each token was emitted from.
    fn token_terms(&self, tokens: &[usize]) -> Result<Vec<(usize, f64)>> {
        self.check_tokens(tokens)?;
        let mut row_code = 0usize;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let row = Self::level_offset(self.vocab, t) + row_code;
            out.push((row, log_softmax_at(self.row(row), tok)));
            row_code = row_code * self.vocab + tok;
        }
        Ok(out)
    }

    pub fn token_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.token_terms(tokens)?.into_iter().map(|(_, lp)| lp).collect())
    }

    /// `Σ_t log softmax(logits[prefix_t])[o_t]`.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.token_log_probs(tokens)?.iter().sum())
    }

    /// Adds `coeff · ∂ log π(tokens) / ∂ logits` into `grad`.
    pub fn accumulate_score(&self, tokens: &[usize], coeff: f64, grad: &mut [f64]) -> Result<()> {
        for ((row, _), &tok) in self.token_terms(tokens)?.into_iter().zip(tokens) {
            self.accumulate_token_score(row, tok, coeff, grad);
        }
        Ok(())
    }

    /// Adds `coeff · ∂ log π(token | row) / ∂ logits` into `grad`.
    pub fn accumulate_token_score(&self, row: usize, token: usize, coeff: f64, grad: &mut [f64]) {
        let probs = self.probs(row);
        let base = row * self.vocab;
        for (v, p) in probs.iter().enumerate() {
            let indicator = if v == token { 1.0 } else { 0.0 };
            grad[base + v] += coeff * (indicator - p);
        }
    }

    /// Rows visited by `tokens`, one per position.
    pub fn rows_along(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        Ok(self.token_terms(tokens)?.into_iter().map(|(r, _)| r).collect())
    }

    /// Ancestral sampling under temperature and nucleus truncation. The
    /// recorded log-probability is that of the truncated distribution.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        query_id: QueryId,
        config: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Trajectory> {
        config.validate()?;
        let mut tokens = Vec::with_capacity(self.horizon);
        let mut logprob = 0.0;
        for _ in 0..self.horizon {
            let row = self.row_index(&tokens);
            let probs = nucleus(&softmax(self.row(row), config.temperature), config.top_p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = None;
            for (v, &p) in probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                choice = Some(v);
                if u < acc {
                    break;
                }
            }
            let tok = choice.expect("nucleus keeps at least one token");
            logprob += probs[tok].ln();
            tokens.push(tok);
        }
        Ok(Trajectory::unscored(query_id, tokens, logprob))
    }

    /// Every sequence with its probability, in lexicographic order.
    pub fn enumerate_distribution(&self) -> Result<Vec<(Vec<usize>, f64)>> {
        Ok(self
            .enumerate_log_probs()?
            .into_iter()
            .map(|(s, lp)| (s, lp.exp()))
            .collect())
    }

    /// Every sequence with its log-probability, in lexicographic order.
    pub fn enumerate_log_probs(&self) -> Result<Vec<(Vec<usize>, f64)>> {
        let n = self.trajectory_count()?;
        if n > self.cap {
            return Err(Error::Size {
                size: n as u128,
                cap: self.cap,
            });
        }
        let row_lsm: Vec<Vec<f64>> = (0..self.num_rows()).map(|r| log_softmax(self.row(r))).collect();
        let mut out = Vec::with_capacity(n);
        let mut tokens = vec![0usize; self.horizon];
        for idx in 0..n {
            let mut rem = idx;
            for t in (0..self.horizon).rev() {
                tokens[t] = rem % self.vocab;
                rem /= self.vocab;
            }
            let mut lp = 0.0;
            let mut code = 0;
            for (t, &tok) in tokens.iter().enumerate() {
                lp += row_lsm[Self::level_offset(self.vocab, t) + code][tok];
                code = code * self.vocab + tok;
            }
            out.push((tokens.clone(), lp));
        }
        Ok(out)
    }

    /// Probability vector in lexicographic sequence order.
    pub fn sequence_probs(&self) -> Result<Vec<f64>> {
        Ok(self.enumerate_distribution()?.into_iter().map(|(_, p)| p).collect())
    }

    /// Index of `tokens` in lexicographic order.
    pub fn sequence_index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }

    fn check_compatible(&self, other: &TabularPolicy) -> Result<()> {
        if self.vocab != other.vocab || self.horizon != other.horizon {
            return Err(validation(format!(
                "policy shapes differ: V={},T={} vs V={},T={}",
                self.vocab, self.horizon, other.vocab, other.horizon
            )));
        }
        Ok(())
    }
}

/// Temperature-scaled softmax with a max shift.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lz).collect()
}

fn log_softmax_at(logits: &[f64], token: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[token] - lz
}

/// Keeps the smallest high-probability set with mass `≥ top_p`, renormalised.
/// Ties are broken by token index.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &v in &order {
        kept[v] = probs[v];
        mass += probs[v];
        if mass >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|p| *p /= mass);
    kept
}

/// Ratio of two trajectory probabilities, kept in log space as well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRatio {
    pub log: f64,
    pub value: f64,
}

impl LogRatio {
    fn from_log(log: f64) -> Self {
        Self { log, value: log.exp() }
    }
}

/// `π_θ(o) / π_old(o)` for the whole trajectory.
pub fn trajectory_ratio(theta: &TabularPolicy, old: &TabularPolicy, tokens: &[usize]) -> Result<LogRatio> {
    theta.check_compatible(old)?;
    Ok(LogRatio::from_log(theta.log_prob(tokens)? - old.log_prob(tokens)?))
}

/// Length-normalised sequence ratio `(π_θ(o)/π_old(o))^{1/|o|}`.
pub fn sequence_ratio_gspo(theta: &TabularPolicy, old: &TabularPolicy, tokens: &[usize]) -> Result<LogRatio> {
    let r = trajectory_ratio(theta, old, tokens)?;
    Ok(LogRatio::from_log(r.log / tokens.len() as f64))
}

/// Per-position ratios `π_θ(o_t|o_<t) / π_old(o_t|o_<t)`.
pub fn token_ratios(theta: &TabularPolicy, old: &TabularPolicy, tokens: &[usize]) -> Result<Vec<f64>> {
    theta.check_compatible(old)?;
    let a = theta.token_log_probs(tokens)?;
    let b = old.token_log_probs(tokens)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).exp()).collect())
}

/// `KL(p ‖ r)` over the full trajectory space.
pub fn exact_kl(p: &TabularPolicy, r: &TabularPolicy) -> Result<f64> {
    p.check_compatible(r)?;
    let lp = p.enumerate_log_probs()?;
    let lr = r.enumerate_log_probs()?;
    let kl: f64 = lp
        .iter()
        .zip(&lr)
        .map(|((_, a), (_, b))| {
            let pa = a.exp();
            if pa > 0.0 {
                pa * (a - b)
            } else {
                0.0
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Total-variation distance between the two sequence distributions.
pub fn total_variation(p: &TabularPolicy, r: &TabularPolicy) -> Result<f64> {
    p.check_compatible(r)?;
    let a = p.sequence_probs()?;
    let b = r.sequence_probs()?;
    Ok(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Shannon entropy (nats) of the next-token distribution at each step of `tokens`.
pub fn token_entropy(policy: &TabularPolicy, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(policy
        .rows_along(tokens)?
        .into_iter()
        .map(|row| entropy_of(&policy.probs(row)))
        .collect())
}

/// `E_{o∼π}[(1/T) Σ_t H_t(o)]`, computed level by level over prefix reach probabilities.
pub fn mean_token_entropy(policy: &TabularPolicy) -> f64 {
    let v = policy.vocab;
    let mut reach = vec![1.0];
    let mut total = 0.0;
    for depth in 0..policy.horizon {
        let offset = TabularPolicy::level_offset(v, depth);
        let mut next = Vec::with_capacity(reach.len() * v);
        for (code, &mass) in reach.iter().enumerate() {
            let probs = policy.probs(offset + code);
            total += mass * entropy_of(&probs);
            next.extend(probs.iter().map(|p| mass * p));
        }
        reach = next;
    }
    total / policy.horizon as f64
}

/// `E_{o∼π}[f(o)]` by enumeration.
pub fn expectation(policy: &TabularPolicy, mut f: impl FnMut(&[usize]) -> f64) -> Result<f64> {
    Ok(policy
        .enumerate_distribution()?
        .iter()
        .map(|(s, p)| p * f(s))
        .sum())
}
