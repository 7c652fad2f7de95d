use crate::error::{domain, Result};

/// `C(n−c, k) / C(n, k)` as the telescoping product `Π_{i=n−c+1..n} (1 − k/i)`,
/// each factor formed as the integer ratio `(i − k)/i`.
fn miss_probability(n: usize, c: usize, k: usize) -> f64 {
    if n - c < k {
        return 0.0;
    }
    ((n - c + 1)..=n).map(|i| (i - k) as f64 / i as f64).product()
}

/// Unbiased estimate of the probability that `k` samples drawn without
/// replacement from `n` (of which `c` are correct) contain a correct one.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(domain(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(domain(format!("k = {k} must lie in 1..={n}")));
    }
    Ok(1.0 - miss_probability(n, c, k))
}

/// Expected number of distinct clusters hit by `k` samples drawn without
/// replacement from `n`.
pub fn ucc_at_k(n: usize, cluster_sizes: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(domain(format!("k = {k} must lie in 1..={n}")));
    }
    let mut total = 0usize;
    for &s in cluster_sizes {
        if s == 0 || s > n {
            return Err(domain(format!("cluster size {s} must lie in 1..={n}")));
        }
        total += s;
    }
    if total > n {
        return Err(domain(format!("cluster sizes sum to {total} > n = {n}")));
    }
    Ok(cluster_sizes.iter().map(|&s| 1.0 - miss_probability(n, s, k)).sum())
}
