//! Cross-module invariant suite: dual convexity, normalization and KKT
//! conditions, closed-form KL on the full policy space, gradient checks
//! against central differences, convergence of exact training to the
//! closed-form optimum, and estimator oracles.
//!
//! Checks are addressed as `group/name`; a filter selects every check whose
//! address starts with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::{dual_objective, solve_dual, DualSolution, RewardGroup, TrustRegionConfig};
use crate::env::SyntheticEnv;
use crate::error::Result;
use crate::metrics::{pass_at_k, ucc_at_k};
use crate::objectives::{
    exact_kl_penalty, gspo_loss, grpo_loss, kl_penalty, quatro_loss_detached, detached_log_ratios, Batch,
    ClipConfig, KlEstimator, QuatroConfig,
};
use crate::policy::{exact_kl, total_variation, QueryId, TabularPolicy, Trajectory};
use crate::trainer::{Algorithm, TrainConfig, Trainer};

/// Deliberate corruption used to confirm that the suite detects mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate every dual-derived advantage.
    FlipAdvantageSign,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub filter: Option<String>,
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(&VerifyOptions) -> Result<(bool, String)>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("dual/convexity", dual_convexity),
    ("dual/normalization", dual_normalization),
    ("dual/kkt", dual_kkt),
    ("dual/lambda_monotone_in_delta", dual_monotone),
    ("policy/closed_form_kl", closed_form_kl),
    ("gradient/quatro", |o| gradient_check(o, LossKind::Quatro)),
    ("gradient/grpo", |o| gradient_check(o, LossKind::Grpo)),
    ("gradient/gspo", |o| gradient_check(o, LossKind::Gspo)),
    ("gradient/kl_penalty", |o| gradient_check(o, LossKind::KlPenalty)),
    ("convergence/closed_form", |o| convergence_check(o, 0.0)),
    ("convergence/geometric_interpolation", |o| convergence_check(o, 1.0)),
    ("metrics/estimators", estimator_check),
];

pub fn check_ids() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|(id, _)| *id)
}

/// Runs every selected check. Errors inside a check count as failures.
pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|(id, _)| opts.filter.as_deref().map_or(true, |f| id.starts_with(f)))
        .map(|(id, check)| {
            let (passed, detail) = check(opts).unwrap_or_else(|e| (false, e.to_string()));
            CheckOutcome {
                id: (*id).to_owned(),
                passed,
                detail,
            }
        })
        .collect()
}

fn advantages(sol: &DualSolution, opts: &VerifyOptions) -> Vec<f64> {
    match opts.fault {
        Some(Fault::FlipAdvantageSign) => sol.advantages.iter().map(|a| -a).collect(),
        None => sol.advantages.clone(),
    }
}

fn rng(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::seed::hash_words([opts.seed, salt]))
}

const DELTAS: [f64; 3] = [0.1, 0.01, 0.001];

fn random_groups(opts: &VerifyOptions, salt: u64, count: usize) -> Result<Vec<RewardGroup>> {
    let mut r = rng(opts, salt);
    (0..count)
        .map(|i| {
            let n = [4, 8, 16][i % 3];
            let rewards = (0..n).map(|_| r.random::<f64>()).collect();
            RewardGroup::new(QueryId(i as u32), rewards)
        })
        .collect()
}

fn dual_convexity(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst = f64::INFINITY;
    for g in random_groups(opts, 1, 30)? {
        for delta in DELTAS {
            let cfg = TrustRegionConfig::with_delta(delta);
            for k in 1..200 {
                let (lam, h) = (k as f64 * 0.05, 0.01);
                let second = dual_objective(&g, lam + h, &cfg)? - 2.0 * dual_objective(&g, lam, &cfg)?
                    + dual_objective(&g, lam - h, &cfg)?;
                worst = worst.min(second);
            }
        }
    }
    Ok((worst >= -1e-9, format!("min second difference {worst:.3e}")))
}

fn dual_normalization(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for g in random_groups(opts, 2, 60)? {
        for delta in DELTAS {
            let sol = solve_dual(&g, &TrustRegionConfig::with_delta(delta))?;
            let a = advantages(&sol, opts);
            let s: f64 = a.iter().zip(g.weights_iter()).map(|(a, w)| w * a.exp()).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok((worst < 1e-8, format!("max |Σ w e^A − 1| = {worst:.3e}")))
}

fn dual_kkt(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut interior = 0;
    for g in random_groups(opts, 3, 60)? {
        for delta in DELTAS {
            let sol = solve_dual(&g, &TrustRegionConfig::with_delta(delta))?;
            if !sol.interior {
                continue;
            }
            interior += 1;
            let a = advantages(&sol, opts);
            let kl: f64 = a.iter().zip(g.weights_iter()).map(|(a, w)| w * a.exp() * a).sum();
            worst = worst.max((kl - delta).abs());
        }
    }
    Ok((
        interior > 0 && worst < 1e-6,
        format!("{interior} interior solutions, max |Σ p A − δ| = {worst:.3e}"),
    ))
}

fn dual_monotone(opts: &VerifyOptions) -> Result<(bool, String)> {
    let groups = random_groups(opts, 4, 30)?;
    let mut means = Vec::new();
    for delta in DELTAS {
        let mut sum = 0.0;
        for g in &groups {
            sum += solve_dual(g, &TrustRegionConfig::with_delta(delta))?.lambda_star;
        }
        means.push(sum / groups.len() as f64);
    }
    let ok = means.windows(2).all(|w| w[0] < w[1]);
    Ok((ok, format!("mean λ* over δ = 0.1, 0.01, 0.001: {means:?}")))
}

/// Sequence distribution proportional to `old · exp(A)` over the enumeration order.
pub fn tilted_distribution(old: &TabularPolicy, advantages: &[f64]) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = old
        .sequence_probs()?
        .iter()
        .zip(advantages)
        .map(|(q, a)| q * a.exp())
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// `∝ target^{1/(β+1)} · pre^{β/(β+1)}`, the optimum once a β-weighted
/// KL-to-pretrained penalty is added.
pub fn geometric_interpolation(target: &[f64], pre: &[f64], beta: f64) -> Vec<f64> {
    let a = 1.0 / (beta + 1.0);
    let mut p: Vec<f64> = target
        .iter()
        .zip(pre)
        .map(|(t, q)| (a * t.ln() + (1.0 - a) * q.ln()).exp())
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

fn closed_form_kl(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 5);
    let mut worst = 0.0f64;
    let mut interior = 0;
    for _ in 0..20 {
        let old = TabularPolicy::random(3, 3, 1.0, &mut r)?;
        let dist = old.enumerate_distribution()?;
        let rewards: Vec<f64> = dist.iter().map(|_| r.random::<f64>()).collect();
        let weights: Vec<f64> = dist.iter().map(|(_, p)| *p).collect();
        let group = RewardGroup::weighted(QueryId(0), rewards, normalized(weights))?;
        for delta in DELTAS {
            let sol = solve_dual(&group, &TrustRegionConfig::with_delta(delta))?;
            if !sol.interior {
                continue;
            }
            interior += 1;
            let a = advantages(&sol, opts);
            let unnormalized: Vec<f64> = old.sequence_probs()?.iter().zip(&a).map(|(q, a)| q * a.exp()).collect();
            let star = TabularPolicy::from_distribution(3, 3, &unnormalized)?;
            worst = worst.max((exact_kl(&star, &old)? - delta).abs());
        }
    }
    Ok((
        interior > 0 && worst < 1e-6,
        format!("{interior} interior solutions, max |KL(π*‖π_old) − δ| = {worst:.3e}"),
    ))
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Quatro,
    Grpo,
    Gspo,
    KlPenalty,
}

/// Central differences of `f` over every logit.
pub fn central_difference(theta: &TabularPolicy, h: f64, f: impl Fn(&TabularPolicy) -> f64) -> Vec<f64> {
    (0..theta.param_count())
        .map(|k| {
            let mut plus = theta.clone();
            plus.logits_mut()[k] += h;
            let mut minus = theta.clone();
            minus.logits_mut()[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `max_k |a_k − b_k| / max(max_k |b_k|, 1e-6)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

fn gradient_check(opts: &VerifyOptions, kind: LossKind) -> Result<(bool, String)> {
    let mut r = rng(opts, 6 + kind as u64);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let v = r.random_range(2..=3);
        let t = r.random_range(1..=3);
        let old = TabularPolicy::random(v, t, 1.0, &mut r)?;
        let mut theta = old.clone();
        theta.logits_mut().iter_mut().for_each(|x| *x += 0.3 * (r.random::<f64>() - 0.5));
        let pre = TabularPolicy::random(v, t, 1.0, &mut r)?;
        let trajs: Vec<Trajectory> = (0..6)
            .map(|_| old.sample(QueryId(0), &Default::default(), &mut r))
            .collect::<Result<_>>()?;
        let adv: Vec<f64> = (0..6).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
        let batch = Batch::new(QueryId(0), &trajs, &adv, &old)?.with_pre(&pre);
        let clip = ClipConfig { epsilon: 0.2 };
        let (analytic, numeric) = match kind {
            LossKind::Quatro => {
                let cfg = QuatroConfig { beta: 0.1, kl: KlEstimator::Exact, log_ratio_clamp: None };
                let detached = detached_log_ratios(&theta, &batch, &cfg)?;
                let g = quatro_loss_detached(&theta, &batch, &cfg, &detached)?.gradient;
                let fd = central_difference(&theta, 1e-5, |p| {
                    quatro_loss_detached(p, &batch, &cfg, &detached).map_or(f64::NAN, |r| r.loss)
                });
                (g, fd)
            }
            LossKind::Grpo => {
                let g = grpo_loss(&theta, &batch, &clip)?.gradient;
                let fd = central_difference(&theta, 1e-5, |p| grpo_loss(p, &batch, &clip).map_or(f64::NAN, |r| r.loss));
                (g, fd)
            }
            LossKind::Gspo => {
                let g = gspo_loss(&theta, &batch, &clip)?.gradient;
                let fd = central_difference(&theta, 1e-5, |p| gspo_loss(p, &batch, &clip).map_or(f64::NAN, |r| r.loss));
                (g, fd)
            }
            LossKind::KlPenalty => {
                let g = kl_penalty(&theta, &pre, &batch)?.1;
                let fd = central_difference(&theta, 1e-5, |p| kl_penalty(p, &pre, &batch).map_or(f64::NAN, |r| r.0));
                let ge = exact_kl_penalty(&theta, &pre)?.1;
                let fde = central_difference(&theta, 1e-5, |p| exact_kl_penalty(p, &pre).map_or(f64::NAN, |r| r.0));
                worst = worst.max(max_relative_error(&ge, &fde));
                (g, fd)
            }
        };
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    // Random instances may land on a clip kink.
    let tol = if matches!(kind, LossKind::Grpo | LossKind::Gspo) { 1e-2 } else { 1e-4 };
    Ok((worst < tol, format!("max relative error {worst:.3e}")))
}

/// Result of training a single query to its closed-form optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub inner_updates: usize,
    pub tv: f64,
    pub target: Vec<f64>,
    pub final_policy: TabularPolicy,
}

/// Runs one outer QUATRO step in exact-expectation mode with `inner_updates`
/// gradient steps and measures the total-variation distance to the
/// closed-form optimum (geometrically interpolated toward the initial policy
/// when `beta > 0`).
pub fn converge_to_closed_form(
    env: SyntheticEnv,
    initial: TabularPolicy,
    mut config: TrainConfig,
    fault: Option<Fault>,
) -> Result<ConvergenceReport> {
    config.algorithm = Algorithm::Quatro;
    config.exact_expectation = true;
    config.steps = 1;
    let beta = config.beta;
    let inner_updates = config.inner_updates;
    let pre = initial.clone();
    let mut trainer = Trainer::new(vec![env], vec![initial], config)?;
    let mut target = None;
    let record = trainer.run_with(|_, details| {
        let d = &details[0];
        if let Some(sol) = &d.dual {
            let opts = VerifyOptions { fault, ..Default::default() };
            target = Some(tilted_distribution(&d.old_policy, &advantages(sol, &opts)));
        }
    });
    if let crate::trainer::RunStatus::NonFinite { detail, .. } = record.status {
        return Err(crate::error::Error::NonFinite(detail));
    }
    let mut target = target.ok_or_else(|| crate::error::validation("no dual solution recorded"))??;
    if beta > 0.0 {
        target = geometric_interpolation(&target, &pre.sequence_probs()?, beta);
    }
    let final_policy = trainer.policies()[0].clone();
    let probs = final_policy.sequence_probs()?;
    let tv = 0.5 * probs.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(ConvergenceReport {
        inner_updates,
        tv,
        target,
        final_policy,
    })
}

fn convergence_check(opts: &VerifyOptions, beta: f64) -> Result<(bool, String)> {
    let mut r = rng(opts, 20 + beta as u64);
    let env = SyntheticEnv::with_random_targets(QueryId(0), 3, 2, crate::env::EnvKind::Graded, 2, 0.0, r.random())?;
    let initial = TabularPolicy::random(3, 2, 0.5, &mut r)?;
    let config = TrainConfig {
        delta: 0.1,
        beta,
        inner_updates: 2000,
        learning_rate: 2e-2,
        ..TrainConfig::default()
    };
    let report = converge_to_closed_form(env, initial.clone(), config, opts.fault)?;
    // A target equal to the start point would pass trivially.
    let moved = total_variation(&report.final_policy, &initial)?;
    Ok((
        report.tv < 1e-3 && moved > 1e-2,
        format!("TV to target {:.3e} after {} updates (moved {moved:.3e})", report.tv, report.inner_updates),
    ))
}

fn estimator_check(opts: &VerifyOptions) -> Result<(bool, String)> {
    let _ = opts;
    let mut worst = 0.0f64;
    for n in 1..=9usize {
        for c in 0..=n {
            for k in 1..=n {
                let (mut subsets, mut hits, mut clusters) = (0u32, 0u32, 0u32);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != k {
                        continue;
                    }
                    subsets += 1;
                    // Correct items 0..c form two clusters: [0, c/2) and [c/2, c).
                    let half = c / 2;
                    let lo = mask & ((1 << half) - 1) != 0;
                    let hi = (mask >> half) & ((1 << (c - half)) - 1) != 0;
                    hits += u32::from(lo || hi);
                    clusters += u32::from(lo) + u32::from(hi);
                }
                let sizes: Vec<usize> = [c / 2, c - c / 2].into_iter().filter(|&s| s > 0).collect();
                let p = pass_at_k(n, c, k)?;
                let u = ucc_at_k(n, &sizes, k)?;
                worst = worst
                    .max((p - hits as f64 / subsets as f64).abs())
                    .max((u - clusters as f64 / subsets as f64).abs());
            }
        }
    }
    Ok((worst < 1e-12, format!("max deviation from subset enumeration {worst:.3e}")))
}
