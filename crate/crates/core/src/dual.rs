//! Per-query dual solve for the KL-constrained trust-region update.
//!
//! For one query with rollout rewards `R_i` and sampling weights `w_i`
//! (uniform `1/N` for Monte Carlo groups, exact probabilities when the
//! trajectory space is enumerated), the dual objective is
//!
//! ```text
//! f(λ) = λ · (δ + log Σ_i w_i exp(R_i / λ))
//! ```
//!
//! `f` is the perspective of log-sum-exp and therefore convex on `λ > 0`.
//! Its minimiser `λ*` sets the temperature of the exponential tilting, the
//! normaliser is `μ* = λ* (log Σ w_i exp(R_i/λ*) − 1)`, and the advantages
//! are `A_i = (R_i − μ*)/λ* − 1`.
//!
//! Everything is evaluated around the weighted reward mean `R̄`, i.e.
//! `f(λ) = R̄ + λδ + λ·L(λ)` with `L(λ) = log Σ w_i exp((R_i − R̄)/λ) ≥ 0`.
//! The constant `R̄` drops out of the minimisation.

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};
use crate::policy::QueryId;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// The N scalar rollout rewards for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub query_id: QueryId,
    pub rewards: Vec<f64>,
    /// Probability vector over the entries; `None` means uniform `1/N`.
    pub weights: Option<Vec<f64>>,
}

impl RewardGroup {
    /// Empirical group with uniform weights.
    pub fn new(query_id: QueryId, rewards: Vec<f64>) -> Result<Self> {
        let group = Self {
            query_id,
            rewards,
            weights: None,
        };
        group.validate()?;
        Ok(group)
    }

    /// Exact-expectation group: `weights[i]` is the probability of entry `i`.
    pub fn weighted(query_id: QueryId, rewards: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let group = Self {
            query_id,
            rewards,
            weights: Some(weights),
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rewards.is_empty() {
            return Err(validation("reward group is empty"));
        }
        if let Some(i) = self.rewards.iter().position(|r| !r.is_finite()) {
            return Err(validation(format!(
                "reward {i} is not finite ({})",
                self.rewards[i]
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.rewards.len() {
                return Err(validation(format!(
                    "{} weights for {} rewards",
                    w.len(),
                    self.rewards.len()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(validation("weights must be finite and non-negative"));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(validation(format!("weights sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Weight of entry `i`.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.rewards.len() as f64,
        }
    }

    pub fn weights_iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.rewards.len()).map(|i| self.weight(i))
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards
            .iter()
            .zip(self.weights_iter())
            .map(|(r, w)| r * w)
            .sum()
    }

    /// `max − min` over entries with positive weight.
    pub fn spread(&self) -> f64 {
        let (lo, hi) = self
            .rewards
            .iter()
            .zip(self.weights_iter())
            .filter(|(_, w)| *w > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&r, _)| {
                (lo.min(r), hi.max(r))
            });
        hi - lo
    }
}

/// Solver settings and the KL budget `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionConfig {
    /// KL budget in nats.
    pub delta: f64,
    /// Floor for `λ`. Bounds `|A|` as `λ → 0`.
    pub lambda_min: f64,
    /// Additive pad on the upper end of the search bracket.
    pub bracket_pad: f64,
    /// Interval tolerance of the golden-section search.
    pub tol: f64,
    pub max_iters: usize,
    /// Groups with reward spread below this are treated as constant.
    pub degenerate_eps: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            lambda_min: 1e-3,
            bracket_pad: 1.0,
            tol: 1e-9,
            max_iters: 200,
            degenerate_eps: 1e-9,
        }
    }
}

impl TrustRegionConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(validation(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda_min > 0.0) {
            return Err(validation("lambda_min must be > 0"));
        }
        if !(self.tol > 0.0) {
            return Err(validation("tol must be > 0"));
        }
        if !(self.bracket_pad >= 0.0) || !(self.degenerate_eps >= 0.0) {
            return Err(validation("bracket_pad and degenerate_eps must be >= 0"));
        }
        if self.max_iters == 0 {
            return Err(validation("max_iters must be positive"));
        }
        Ok(())
    }
}

/// Exact trust-region calibration for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub query_id: QueryId,
    pub lambda_star: f64,
    pub mu_star: f64,
    /// Dual objective at `λ*`.
    pub f_value: f64,
    pub advantages: Vec<f64>,
    /// All rewards within `degenerate_eps` of each other.
    pub degenerate: bool,
    /// `λ*` strictly inside the search bracket.
    pub interior: bool,
    /// Upper end of the search bracket actually used.
    pub bracket_upper: f64,
}

impl DualSolution {
    /// `Σ_i p_i A_i` with `p_i = w_i exp(A_i)`: the KL of the tilted measure
    /// from the sampling measure. Equals `δ` at an interior optimum.
    pub fn tilted_kl(&self, group: &RewardGroup) -> f64 {
        self.advantages
            .iter()
            .zip(group.weights_iter())
            .filter(|(_, w)| *w > 0.0)
            .map(|(a, w)| w * a.exp() * a)
            .sum()
    }

    /// `Σ_i w_i exp(A_i)`; one whenever `μ` is the normalising multiplier.
    pub fn normalization(&self, group: &RewardGroup) -> f64 {
        self.advantages
            .iter()
            .zip(group.weights_iter())
            .map(|(a, w)| w * a.exp())
            .sum()
    }
}

/// `L(λ) = log Σ w_i exp((R_i − R̄)/λ)`. Non-negative by Jensen.
fn centered_log_mean_exp(group: &RewardGroup, mean: f64, lambda: f64) -> f64 {
    let xs = group.rewards.iter().map(|r| (r - mean) / lambda);
    let max_abs = xs.clone().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max_abs < 0.5 {
        // Σ w (e^x − 1 − x) with Σ w x = 0, fed to ln_1p.
        let s: f64 = xs
            .zip(group.weights_iter())
            .map(|(x, w)| w * (x.exp_m1() - x))
            .sum();
        s.ln_1p()
    } else {
        let x_max = xs
            .clone()
            .zip(group.weights_iter())
            .filter(|(_, w)| *w > 0.0)
            .fold(f64::NEG_INFINITY, |m, (x, _)| m.max(x));
        let s: f64 = xs
            .zip(group.weights_iter())
            .map(|(x, w)| w * (x - x_max).exp())
            .sum();
        x_max + s.ln()
    }
}

/// `log Σ w_i exp(R_i / λ)` evaluated with a max shift.
pub fn log_mean_exp(group: &RewardGroup, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    group.validate()?;
    let mean = group.mean_reward();
    Ok(mean / lambda + centered_log_mean_exp(group, mean, lambda))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(domain(format!("lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

/// `f(λ) = λ(δ + log Σ w_i e^{R_i/λ})` with `δ` taken from `config`.
pub fn dual_objective(group: &RewardGroup, lambda: f64, config: &TrustRegionConfig) -> Result<f64> {
    check_lambda(lambda)?;
    group.validate()?;
    let mean = group.mean_reward();
    Ok(mean + lambda * config.delta + lambda * centered_log_mean_exp(group, mean, lambda))
}

/// Minimises `f` and recovers `(λ*, μ*, A)`.
pub fn solve_dual(group: &RewardGroup, config: &TrustRegionConfig) -> Result<DualSolution> {
    group.validate()?;
    config.validate()?;
    let mean = group.mean_reward();
    let spread = group.spread();
    let lo = config.lambda_min;
    let hi = spread / config.delta + config.bracket_pad;

    if spread < config.degenerate_eps {
        let lambda = lo;
        return Ok(DualSolution {
            query_id: group.query_id,
            lambda_star: lambda,
            mu_star: mean - lambda,
            f_value: mean + lambda * config.delta,
            advantages: vec![0.0; group.len()],
            degenerate: true,
            interior: false,
            bracket_upper: hi,
        });
    }

    // R̄ is constant in λ and left out of the search.
    let shifted = |lambda: f64| {
        lambda * config.delta + lambda * centered_log_mean_exp(group, mean, lambda)
    };

    let lambda = if hi <= lo {
        lo
    } else {
        golden_section(shifted, lo, hi, config.tol, config.max_iters)
    };
    let interior = hi > lo && lambda - lo > config.tol && hi - lambda > config.tol;

    let centered = centered_log_mean_exp(group, mean, lambda);
    let mu_star = mean + lambda * centered - lambda;
    let advantages = group
        .rewards
        .iter()
        .map(|r| (r - mean) / lambda - centered)
        .collect();

    Ok(DualSolution {
        query_id: group.query_id,
        lambda_star: lambda,
        mu_star,
        f_value: mean + shifted(lambda),
        advantages,
        degenerate: false,
        interior,
        bracket_upper: hi,
    })
}

/// Recomputes `A_i = (R_i − μ*)/λ* − 1` from a solution's multipliers.
pub fn advantages_of(solution: &DualSolution, group: &RewardGroup) -> Result<Vec<f64>> {
    if solution.advantages.len() != group.len() {
        return Err(validation(format!(
            "solution has {} advantages, group has {} rewards",
            solution.advantages.len(),
            group.len()
        )));
    }
    if solution.degenerate {
        return Ok(vec![0.0; group.len()]);
    }
    let lambda = solution.lambda_star;
    Ok(group
        .rewards
        .iter()
        .map(|r| (r - solution.mu_star) / lambda - 1.0)
        .collect())
}

/// `μ(λ) = λ(log Σ w e^{R/λ} − 1)`, the normalising multiplier at any `λ`.
pub fn mu_for_lambda(group: &RewardGroup, lambda: f64) -> Result<f64> {
    Ok(lambda * (log_mean_exp(group, lambda)? - 1.0))
}

/// Minimiser of a unimodal `f` on `[a, b]`.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64, max_iters: usize) -> f64 {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..max_iters {
        if b - a <= tol {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let (best, best_f) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let mid = 0.5 * (a + b);
    if f(mid) < best_f {
        mid
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(c: usize, n: usize) -> RewardGroup {
        let rewards = (0..n).map(|i| if i < c { 1.0 } else { 0.0 }).collect();
        RewardGroup::new(QueryId(0), rewards).unwrap()
    }

    // High-precision reference values (50-digit root of the stationarity
    // condition for the N=8, c=4 group).
    const LAMBDA_STAR_BINARY_8_4: [(f64, f64, f64, f64); 3] = [
        (0.1, 1.059_947_315_708_187_8, 0.364_357_831_456_344_85, -0.579_085_286_121_499_2),
        (0.01, 3.517_791_919_574_393, 0.132_067_319_370_742_77, -0.152_201_910_550_334_25),
        (0.001, 11.174_747_697_375_074, 0.043_743_072_214_960_31, -0.045_744_406_794_064_47),
    ];

    #[test]
    fn objective_of_constant_rewards() {
        let g = RewardGroup::new(QueryId(0), vec![0.3; 5]).unwrap();
        for &lambda in &[1e-3, 0.5, 2.0, 1e3] {
            let cfg = TrustRegionConfig::with_delta(0.05);
            let f = dual_objective(&g, lambda, &cfg).unwrap();
            assert!((f - (lambda * 0.05 + 0.3)).abs() < 1e-12, "{lambda}: {f}");
        }
    }

    #[test]
    fn objective_golden_value() {
        let cfg = TrustRegionConfig::with_delta(0.01);
        let f = dual_objective(&binary(4, 8), 1.0, &cfg).unwrap();
        let direct = 0.01 + ((4.0 * 1f64.exp() + 4.0) / 8.0).ln();
        assert!((f - direct).abs() < 1e-12);
        assert!((f - 0.630_114_506_958_277_5).abs() < 1e-12);
    }

    #[test]
    fn objective_large_lambda_series() {
        // f ≈ λδ + mean + Var/(2λ) + O(λ^-2).
        let g = binary(4, 8);
        let cfg = TrustRegionConfig::with_delta(0.01);
        for &lambda in &[50.0, 200.0, 1000.0] {
            let f = dual_objective(&g, lambda, &cfg).unwrap();
            let series = lambda * 0.01 + 0.5 + 0.25 / (2.0 * lambda);
            // Next term is the third cumulant (zero here) over 6λ², then κ4/(24λ³).
            assert!((f - series).abs() < 1.0 / (lambda * lambda * lambda), "{lambda}");
        }
    }

    #[test]
    fn objective_rejects_bad_lambda() {
        let cfg = TrustRegionConfig::default();
        assert!(matches!(
            dual_objective(&binary(1, 2), 0.0, &cfg),
            Err(crate::Error::Domain(_))
        ));
        assert!(dual_objective(&binary(1, 2), -1.0, &cfg).is_err());
    }

    #[test]
    fn nan_reward_is_validation_error() {
        let err = RewardGroup::new(QueryId(0), vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, crate::Error::Validation(_)));
        assert!(RewardGroup::new(QueryId(0), vec![]).is_err());
        assert!(RewardGroup::weighted(QueryId(0), vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn equal_rewards_give_zero_advantages() {
        let g = RewardGroup::new(QueryId(3), vec![0.5, 0.5, 0.5]).unwrap();
        for &delta in &[0.1, 0.001] {
            let sol = solve_dual(&g, &TrustRegionConfig::with_delta(delta)).unwrap();
            assert!(sol.degenerate);
            assert!(!sol.interior);
            assert_eq!(sol.advantages, vec![0.0; 3]);
            assert!((sol.mu_star - (0.5 - sol.lambda_star)).abs() < 1e-15);
            assert_eq!(advantages_of(&sol, &g).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn binary_group_matches_reference() {
        let g = binary(4, 8);
        for &(delta, lambda, a_pos, a_neg) in &LAMBDA_STAR_BINARY_8_4 {
            let sol = solve_dual(&g, &TrustRegionConfig::with_delta(delta)).unwrap();
            assert!(sol.interior);
            assert!(
                (sol.lambda_star - lambda).abs() < 1e-6,
                "δ={delta}: {} vs {lambda}",
                sol.lambda_star
            );
            assert!((sol.advantages[0] - a_pos).abs() < 1e-8);
            assert!((sol.advantages[7] - a_neg).abs() < 1e-8);
            assert!((sol.tilted_kl(&g) - delta).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_advantages_match_tilted_weights() {
        // p_i = e^{R_i/λ*} / (N g(λ*)), A_i = log(N p_i).
        let g = binary(4, 8);
        let sol = solve_dual(&g, &TrustRegionConfig::with_delta(0.01)).unwrap();
        let lambda = sol.lambda_star;
        let z: f64 = g.rewards.iter().map(|r| (r / lambda).exp()).sum::<f64>() / 8.0;
        for (r, a) in g.rewards.iter().zip(&sol.advantages) {
            let p = (r / lambda).exp() / (8.0 * z);
            assert!((a - (8.0 * p).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn smaller_delta_gives_larger_lambda() {
        let g = binary(3, 8);
        let l = |d| solve_dual(&g, &TrustRegionConfig::with_delta(d)).unwrap().lambda_star;
        assert!(l(0.1) < l(0.01));
        assert!(l(0.01) < l(0.001));
    }

    #[test]
    fn advantages_of_checks_lengths() {
        let g = binary(2, 4);
        let sol = solve_dual(&g, &TrustRegionConfig::default()).unwrap();
        let again = advantages_of(&sol, &g).unwrap();
        for (a, b) in again.iter().zip(&sol.advantages) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(advantages_of(&sol, &binary(2, 5)).is_err());
    }

    #[test]
    fn huge_delta_pins_lambda_at_floor() {
        // KL of the tilted measure is at most log 2 here, so δ=5 is never active.
        let g = binary(1, 2);
        let sol = solve_dual(&g, &TrustRegionConfig::with_delta(5.0)).unwrap();
        assert!(!sol.interior);
        assert!((sol.lambda_star - 1e-3).abs() < 1e-6);
        assert!((sol.normalization(&g) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn bracket_below_floor_is_boundary() {
        let g = RewardGroup::new(QueryId(0), vec![0.0, 1e-6]).unwrap();
        let cfg = TrustRegionConfig {
            delta: 1.0,
            lambda_min: 2.0,
            bracket_pad: 0.0,
            degenerate_eps: 1e-12,
            ..TrustRegionConfig::default()
        };
        let sol = solve_dual(&g, &cfg).unwrap();
        assert!(!sol.interior);
        assert_eq!(sol.lambda_star, 2.0);
    }

    #[test]
    fn weighted_group_uses_weights() {
        // Two entries with weight (0.25, 0.75) equal four uniform entries 1,0,0,0.
        let w = RewardGroup::weighted(QueryId(0), vec![1.0, 0.0], vec![0.25, 0.75]).unwrap();
        let u = binary(1, 4);
        let cfg = TrustRegionConfig::with_delta(0.02);
        let a = solve_dual(&w, &cfg).unwrap();
        let b = solve_dual(&u, &cfg).unwrap();
        assert!((a.lambda_star - b.lambda_star).abs() < 1e-7);
        assert!((a.advantages[0] - b.advantages[0]).abs() < 1e-7);
    }

    fn group_strategy() -> impl Strategy<Value = RewardGroup> {
        prop::collection::vec(0.0f64..1.0, 2..16)
            .prop_filter("needs spread", |r| {
                let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                hi - lo > 1e-3
            })
            .prop_map(|r| RewardGroup::new(QueryId(0), r).unwrap())
    }

    proptest! {
        #[test]
        fn objective_is_convex(g in group_strategy(), delta in prop::sample::select(vec![0.1, 0.01, 0.001])) {
            let cfg = TrustRegionConfig::with_delta(delta);
            let grid: Vec<f64> = (0..60).map(|i| 1e-3 * 10f64.powf(i as f64 * 5.0 / 59.0)).collect();
            let fs: Vec<f64> = grid.iter().map(|&l| dual_objective(&g, l, &cfg).unwrap()).collect();
            for i in 1..grid.len() - 1 {
                let (h1, h2) = (grid[i] - grid[i - 1], grid[i + 1] - grid[i]);
                let d1 = (fs[i] - fs[i - 1]) / h1;
                let d2 = (fs[i + 1] - fs[i]) / h2;
                // Rounding in f alone can move the divided difference by about this much.
                let noise = 8.0 * f64::EPSILON * fs[i - 1..=i + 1].iter().fold(0.0f64, |m, f| m.max(f.abs())) / (h1 * (h1 + h2));
                prop_assert!((d2 - d1) / (h1 + h2) >= -1e-9 - noise);
            }
        }

        #[test]
        fn mu_formula_normalizes_at_any_lambda(g in group_strategy(), lambda in 1e-2f64..50.0) {
            let mu = mu_for_lambda(&g, lambda).unwrap();
            let total: f64 = g.rewards.iter().zip(g.weights_iter())
                .map(|(r, w)| w * ((r - mu) / lambda - 1.0).exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn solution_invariants(g in group_strategy(), delta in prop::sample::select(vec![0.1, 0.01, 0.001])) {
            let sol = solve_dual(&g, &TrustRegionConfig::with_delta(delta)).unwrap();
            prop_assert!(sol.lambda_star >= 1e-3);
            prop_assert!((sol.normalization(&g) - 1.0).abs() < 1e-8);
            if sol.interior {
                prop_assert!((sol.tilted_kl(&g) - delta).abs() < 1e-6);
            }
        }

        #[test]
        fn lambda_non_increasing_in_delta(g in group_strategy()) {
            let l: Vec<f64> = [0.1, 0.01, 0.001].iter()
                .map(|&d| solve_dual(&g, &TrustRegionConfig::with_delta(d)).unwrap().lambda_star)
                .collect();
            prop_assert!(l[0] <= l[1] && l[1] <= l[2]);
        }

        #[test]
        fn shift_equivariance(g in group_strategy(), c in -5.0f64..5.0) {
            let cfg = TrustRegionConfig::with_delta(0.01);
            let a = solve_dual(&g, &cfg).unwrap();
            let shifted = RewardGroup::new(QueryId(0), g.rewards.iter().map(|r| r + c).collect()).unwrap();
            let b = solve_dual(&shifted, &cfg).unwrap();
            prop_assert!((a.lambda_star - b.lambda_star).abs() < 1e-6 * a.lambda_star.max(1.0));
            prop_assert!((b.mu_star - a.mu_star - c).abs() < 1e-6 * (1.0 + a.mu_star.abs()));
            for (x, y) in a.advantages.iter().zip(&b.advantages) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
