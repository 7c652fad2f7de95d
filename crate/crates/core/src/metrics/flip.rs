use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::policy::QueryId;

/// Bucket edges over base-policy correct counts out of 256 rollouts.
pub const DEFAULT_FLIP_BINS: [usize; 5] = [0, 8, 32, 128, 256];

/// Flip statistics for queries whose base correct count lies in `[lo, hi)`
/// (`[lo, hi]` for the last bucket).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipBucket {
    pub lo: usize,
    pub hi: usize,
    pub queries: usize,
    pub flips: usize,
    /// `None` when the bucket holds no queries.
    pub rate: Option<f64>,
}

/// Fraction of queries per base-difficulty bucket that go from zero correct
/// samples before training to at least one after.
pub fn flip_rate(
    before: &BTreeMap<QueryId, usize>,
    after: &BTreeMap<QueryId, usize>,
    bins: &[usize],
) -> Result<Vec<FlipBucket>> {
    if bins.len() < 2 || bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(validation("flip-rate bins must be at least two strictly increasing edges"));
    }
    let last = bins.len() - 2;
    let mut buckets: Vec<FlipBucket> = bins
        .windows(2)
        .map(|w| FlipBucket {
            lo: w[0],
            hi: w[1],
            queries: 0,
            flips: 0,
            rate: None,
        })
        .collect();
    for (q, &c0) in before {
        let c1 = *after
            .get(q)
            .ok_or_else(|| validation(format!("query {q} missing from post-training counts")))?;
        let idx = buckets
            .iter()
            .enumerate()
            .position(|(i, b)| c0 >= b.lo && (c0 < b.hi || (i == last && c0 == b.hi)))
            .ok_or_else(|| validation(format!("count {c0} for query {q} outside bins")))?;
        buckets[idx].queries += 1;
        if c0 == 0 && c1 > 0 {
            buckets[idx].flips += 1;
        }
    }
    for b in &mut buckets {
        b.rate = (b.queries > 0).then(|| b.flips as f64 / b.queries as f64);
    }
    Ok(buckets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(v: &[usize]) -> BTreeMap<QueryId, usize> {
        v.iter().enumerate().map(|(i, &c)| (QueryId(i as u32), c)).collect()
    }

    #[test]
    fn all_hard_queries_flip() {
        let out = flip_rate(&counts(&[0, 0, 0]), &counts(&[1, 5, 256]), &DEFAULT_FLIP_BINS).unwrap();
        assert_eq!(out[0].rate, Some(1.0));
        assert!(out[1..].iter().all(|b| b.rate.is_none()));
    }

    #[test]
    fn unchanged_counts_never_flip() {
        let c = counts(&[0, 3, 10, 50, 200, 256]);
        let out = flip_rate(&c, &c, &DEFAULT_FLIP_BINS).unwrap();
        assert!(out.iter().all(|b| b.rate == Some(0.0)));
        let q: Vec<usize> = out.iter().map(|b| b.queries).collect();
        assert_eq!(q, vec![2, 1, 1, 2]);
    }

    #[test]
    fn mixed_fixture() {
        // Bucket [0,8): queries 0,1,2,3 with before 0,0,0,5; flips: 0 and 2.
        // Bucket [8,32): query 4. Bucket [32,128): queries 5,6. Bucket [128,256]: query 7.
        let before = counts(&[0, 0, 0, 5, 9, 40, 100, 256]);
        let after = counts(&[3, 0, 1, 0, 0, 60, 20, 256]);
        let out = flip_rate(&before, &after, &DEFAULT_FLIP_BINS).unwrap();
        let q: Vec<usize> = out.iter().map(|b| b.queries).collect();
        assert_eq!(q, vec![4, 1, 2, 1]);
        assert_eq!(out[0].flips, 2);
        assert_eq!(out[0].rate, Some(0.5));
        assert!(out[1..].iter().all(|b| b.rate == Some(0.0)));
    }

    #[test]
    fn errors() {
        let c = counts(&[0]);
        assert!(flip_rate(&c, &BTreeMap::new(), &DEFAULT_FLIP_BINS).is_err());
        assert!(flip_rate(&c, &c, &[0]).is_err());
        assert!(flip_rate(&c, &c, &[0, 8, 8]).is_err());
        assert!(flip_rate(&counts(&[300]), &counts(&[300]), &DEFAULT_FLIP_BINS).is_err());
    }
}
