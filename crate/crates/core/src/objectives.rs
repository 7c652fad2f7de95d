//! Surrogate losses and their analytic gradients with respect to the
//! tabular logits.
//!
//! Every loss is a weighted sum over the trajectories of a [`Batch`]. With
//! the default uniform weights `1/N` this is the empirical mean over
//! rollouts; with weights equal to `π_old(o)` over the full enumerated
//! trajectory space it is the exact expectation under the sampling policy.
//!
//! All gradients are built from the softmax score
//! `∂ log π(o_t|s) / ∂ logit(s, v) = 1[v = o_t] − π(v|s)`.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::policy::{QueryId, TabularPolicy, Trajectory};

/// One query's rollouts with their (frozen) advantages.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub query_id: QueryId,
    pub trajectories: &'a [Trajectory],
    pub advantages: &'a [f64],
    /// Per-sample measure; `None` means uniform `1/N`.
    pub weights: Option<&'a [f64]>,
    pub old: &'a TabularPolicy,
    pub pre: Option<&'a TabularPolicy>,
}

impl<'a> Batch<'a> {
    pub fn new(
        query_id: QueryId,
        trajectories: &'a [Trajectory],
        advantages: &'a [f64],
        old: &'a TabularPolicy,
    ) -> Result<Self> {
        let batch = Self {
            query_id,
            trajectories,
            advantages,
            weights: None,
            old,
            pre: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_weights(mut self, weights: &'a [f64]) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn with_pre(mut self, pre: &'a TabularPolicy) -> Self {
        self.pre = Some(pre);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(validation("batch has no trajectories"));
        }
        if self.advantages.len() != self.trajectories.len() {
            return Err(validation(format!(
                "{} advantages for {} trajectories",
                self.advantages.len(),
                self.trajectories.len()
            )));
        }
        if self.advantages.iter().any(|a| !a.is_finite()) {
            return Err(validation("advantages must be finite"));
        }
        if let Some(w) = self.weights {
            if w.len() != self.trajectories.len() {
                return Err(validation("weights length differs from trajectories"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        match self.weights {
            Some(w) => w[i],
            None => 1.0 / self.trajectories.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossAux {
    /// Fraction of ratios outside `[1 − ε, 1 + ε]`; `None` for unclipped losses.
    pub clip_fraction: Option<f64>,
    pub mean_ratio: f64,
    pub kl_penalty_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub aux: LossAux,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub epsilon: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: 0.2 }
    }
}

impl ClipConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(validation("clip epsilon must be > 0"));
        }
        Ok(())
    }
}

/// How the KL-to-pretrained penalty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `k3 = ρ − log ρ − 1` on the batch samples, `ρ = π_pre/π_θ`.
    #[default]
    SampleK3,
    /// Exact `KL(π_θ ‖ π_pre)` over the enumerated trajectory space.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuatroConfig {
    /// Weight of the KL-to-pretrained penalty.
    pub beta: f64,
    pub kl: KlEstimator,
    /// Optional bound on `|log w|`; off by default.
    pub log_ratio_clamp: Option<f64>,
}

impl Default for QuatroConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            kl: KlEstimator::SampleK3,
            log_ratio_clamp: None,
        }
    }
}

fn log_ratio(theta: &TabularPolicy, old: &TabularPolicy, tokens: &[usize]) -> Result<f64> {
    Ok(theta.log_prob(tokens)? - old.log_prob(tokens)?)
}

/// `log π_θ(o_i)/π_old(o_i)` for each trajectory, clamped if configured.
/// These are the values held constant (detached) in the QUATRO loss.
pub fn detached_log_ratios(theta: &TabularPolicy, batch: &Batch<'_>, cfg: &QuatroConfig) -> Result<Vec<f64>> {
    batch
        .trajectories
        .iter()
        .map(|t| {
            let lr = log_ratio(theta, batch.old, &t.tokens)?;
            Ok(match cfg.log_ratio_clamp {
                Some(c) => lr.clamp(-c, c),
                None => lr,
            })
        })
        .collect()
}

/// Per-sample coefficients `A_i − log w̄_i`. A positive coefficient means
/// the loss raises `π_θ(o_i)`; a negative one lowers it.
pub fn quatro_coefficients(theta: &TabularPolicy, batch: &Batch<'_>, cfg: &QuatroConfig) -> Result<Vec<f64>> {
    let detached = detached_log_ratios(theta, batch, cfg)?;
    Ok(batch.advantages.iter().zip(&detached).map(|(a, d)| a - d).collect())
}

/// QUATRO loss `−Σ_i ω_i w_i (A_i − log w̄_i) + β · KL penalty`, where
/// `w_i = π_θ(o_i)/π_old(o_i)` and `w̄_i` is its detached value.
pub fn quatro_loss(theta: &TabularPolicy, batch: &Batch<'_>, cfg: &QuatroConfig) -> Result<LossReport> {
    let detached = detached_log_ratios(theta, batch, cfg)?;
    quatro_loss_detached(theta, batch, cfg, &detached)
}

/// QUATRO loss with the detached log-ratios supplied by the caller, so the
/// loss can be differentiated numerically while `w̄` stays fixed.
pub fn quatro_loss_detached(
    theta: &TabularPolicy,
    batch: &Batch<'_>,
    cfg: &QuatroConfig,
    detached: &[f64],
) -> Result<LossReport> {
    batch.validate()?;
    if detached.len() != batch.len() {
        return Err(validation("one detached log-ratio per trajectory required"));
    }
    let mut grad = vec![0.0; theta.param_count()];
    let mut loss = 0.0;
    let mut ratio_sum = 0.0;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let raw = log_ratio(theta, batch.old, &traj.tokens)?;
        let (lr, live) = match cfg.log_ratio_clamp {
            Some(c) if raw.abs() > c => (raw.clamp(-c, c), false),
            _ => (raw, true),
        };
        let w = lr.exp();
        let coeff = batch.advantages[i] - detached[i];
        let omega = batch.weight(i);
        loss -= omega * w * coeff;
        ratio_sum += w;
        if live {
            theta.accumulate_score(&traj.tokens, -omega * coeff * w, &mut grad)?;
        }
    }
    let mut kl_value = 0.0;
    if cfg.beta != 0.0 {
        let pre = batch
            .pre
            .ok_or_else(|| validation("beta > 0 requires a pretrained policy in the batch"))?;
        let (value, kl_grad) = match cfg.kl {
            KlEstimator::SampleK3 => kl_penalty(theta, pre, batch)?,
            KlEstimator::Exact => exact_kl_penalty(theta, pre)?,
        };
        kl_value = value;
        loss += cfg.beta * value;
        grad.iter_mut().zip(&kl_grad).for_each(|(g, k)| *g += cfg.beta * k);
    }
    Ok(LossReport {
        loss,
        gradient: grad,
        aux: LossAux {
            clip_fraction: None,
            mean_ratio: ratio_sum / batch.len() as f64,
            kl_penalty_value: kl_value,
        },
    })
}

fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// Whether `min(r A, clip(r) A)` takes the unclipped branch (gradient flows).
fn unclipped_branch(r: f64, a: f64, eps: f64) -> bool {
    r * a <= clip(r, eps) * a
}

fn outside(r: f64, eps: f64) -> bool {
    r < 1.0 - eps || r > 1.0 + eps
}

/// GRPO loss with token-level ratios:
/// `−Σ_i ω_i (1/T) Σ_t min(r_t A_i, clip(r_t, 1−ε, 1+ε) A_i)`.
pub fn grpo_loss(theta: &TabularPolicy, batch: &Batch<'_>, clip_cfg: &ClipConfig) -> Result<LossReport> {
    batch.validate()?;
    clip_cfg.validate()?;
    let eps = clip_cfg.epsilon;
    let mut grad = vec![0.0; theta.param_count()];
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut tokens_seen = 0usize;
    let mut ratio_sum = 0.0;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let a = batch.advantages[i];
        let omega = batch.weight(i);
        let rows = theta.rows_along(&traj.tokens)?;
        let lp_theta = theta.token_log_probs(&traj.tokens)?;
        let lp_old = batch.old.token_log_probs(&traj.tokens)?;
        let t_len = traj.tokens.len() as f64;
        for (t, &tok) in traj.tokens.iter().enumerate() {
            let r = (lp_theta[t] - lp_old[t]).exp();
            let term = (r * a).min(clip(r, eps) * a);
            loss -= omega * term / t_len;
            ratio_sum += r;
            tokens_seen += 1;
            if outside(r, eps) {
                clipped += 1;
            }
            if unclipped_branch(r, a, eps) {
                theta.accumulate_token_score(rows[t], tok, -omega * a * r / t_len, &mut grad);
            }
        }
    }
    Ok(LossReport {
        loss,
        gradient: grad,
        aux: LossAux {
            clip_fraction: Some(clipped as f64 / tokens_seen as f64),
            mean_ratio: ratio_sum / tokens_seen as f64,
            kl_penalty_value: 0.0,
        },
    })
}

/// GSPO loss with the length-normalised sequence ratio `s_i`:
/// `−Σ_i ω_i min(s_i A_i, clip(s_i, 1−ε, 1+ε) A_i)`.
pub fn gspo_loss(theta: &TabularPolicy, batch: &Batch<'_>, clip_cfg: &ClipConfig) -> Result<LossReport> {
    batch.validate()?;
    clip_cfg.validate()?;
    let eps = clip_cfg.epsilon;
    let mut grad = vec![0.0; theta.param_count()];
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let a = batch.advantages[i];
        let omega = batch.weight(i);
        let t_len = traj.tokens.len() as f64;
        let s = (log_ratio(theta, batch.old, &traj.tokens)? / t_len).exp();
        loss -= omega * (s * a).min(clip(s, eps) * a);
        ratio_sum += s;
        if outside(s, eps) {
            clipped += 1;
        }
        if unclipped_branch(s, a, eps) {
            theta.accumulate_score(&traj.tokens, -omega * a * s / t_len, &mut grad)?;
        }
    }
    Ok(LossReport {
        loss,
        gradient: grad,
        aux: LossAux {
            clip_fraction: Some(clipped as f64 / batch.len() as f64),
            mean_ratio: ratio_sum / batch.len() as f64,
            kl_penalty_value: 0.0,
        },
    })
}

/// Group-normalised advantages `(R_i − mean)/std` with the population
/// standard deviation; all zeros when `std < 1e-9`.
pub fn group_norm_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(validation("no rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(validation("rewards must be finite"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-9 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Sample-based `k3` estimate of `KL(π_θ ‖ π_pre)` on the batch and the
/// gradient of that estimate with the samples held fixed:
/// `∂k3/∂θ = (1 − ρ) ∂ log π_θ(o)/∂θ`.
pub fn kl_penalty(theta: &TabularPolicy, pre: &TabularPolicy, batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; theta.param_count()];
    let mut value = 0.0;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let log_rho = pre.log_prob(&traj.tokens)? - theta.log_prob(&traj.tokens)?;
        let rho = log_rho.exp();
        let omega = batch.weight(i);
        value += omega * (rho - log_rho - 1.0);
        theta.accumulate_score(&traj.tokens, omega * (1.0 - rho), &mut grad)?;
    }
    Ok((value, grad))
}

/// Exact `KL(π_θ ‖ π_pre)` and its gradient
/// `Σ_o π_θ(o) log(π_θ(o)/π_pre(o)) ∂ log π_θ(o)/∂θ`.
pub fn exact_kl_penalty(theta: &TabularPolicy, pre: &TabularPolicy) -> Result<(f64, Vec<f64>)> {
    if theta.vocab_size() != pre.vocab_size() || theta.horizon() != pre.horizon() {
        return Err(validation("policy shapes differ"));
    }
    let a = theta.enumerate_log_probs()?;
    let b = pre.enumerate_log_probs()?;
    let mut grad = vec![0.0; theta.param_count()];
    let mut value = 0.0;
    for ((tokens, lp), (_, lq)) in a.iter().zip(&b) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        value += p * (lp - lq);
        theta.accumulate_score(tokens, p * (lp - lq), &mut grad)?;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("exact KL penalty".into()));
    }
    Ok((value.max(0.0), grad))
}
