//! Pass@k, UCC@k, unique-correct ratio and flip rate over rollout logs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use quatro_core::metrics::{
    cluster_correct, flip_rate, pass_at_k, ucc_at_k, SampleItem, SampleSet, SimilarityMetric,
};
use quatro_core::policy::render_tokens;
use quatro_core::QueryId;

use crate::output::{create_out_dir, csv_writer, float, opt_float, read_rollouts, RolloutLogLine};

pub struct EvalOptions<'a> {
    pub rollouts: &'a Path,
    pub baseline: Option<&'a Path>,
    pub out: &'a Path,
    pub k: Vec<usize>,
    pub metric: SimilarityMetric,
    pub threshold: f64,
    pub bins: Vec<usize>,
}

/// Groups log lines by query, keeping only each query's latest step.
pub fn sample_sets(lines: &[RolloutLogLine]) -> Result<Vec<SampleSet>> {
    let mut last_step: BTreeMap<QueryId, usize> = BTreeMap::new();
    for l in lines {
        let s = last_step.entry(l.query_id).or_insert(l.step);
        *s = (*s).max(l.step);
    }
    let mut items: BTreeMap<QueryId, Vec<SampleItem>> = BTreeMap::new();
    for l in lines.iter().filter(|l| last_step[&l.query_id] == l.step) {
        items.entry(l.query_id).or_default().push(SampleItem {
            text: render_tokens(&l.tokens),
            correct: l.correct,
        });
    }
    items
        .into_iter()
        .map(|(q, items)| Ok(SampleSet::new(q, items)?))
        .collect()
}

fn correct_counts(sets: &[SampleSet]) -> BTreeMap<QueryId, usize> {
    sets.iter().map(|s| (s.query_id, s.num_correct())).collect()
}

pub fn eval(opts: &EvalOptions<'_>) -> Result<()> {
    let sets = sample_sets(&read_rollouts(opts.rollouts)?)?;
    let baseline = match opts.baseline {
        Some(p) => Some(sample_sets(&read_rollouts(p)?)?),
        None => None,
    };
    let clusters = sets
        .iter()
        .map(|s| cluster_correct(s, opts.metric, opts.threshold))
        .collect::<quatro_core::Result<Vec<_>>>()?;
    let flips = match &baseline {
        Some(base) => Some(flip_rate(&correct_counts(base), &correct_counts(&sets), &opts.bins)?),
        None => None,
    };

    create_out_dir(opts.out)?;
    let mut w = csv_writer(&opts.out.join("metrics.csv"))?;
    w.write_record([
        "query_id",
        "n",
        "num_correct",
        "num_clusters",
        "k",
        "pass_at_k",
        "ucc_at_k",
        "unique_correct_ratio",
    ])?;
    for &k in &opts.k {
        let mut sums = (0usize, 0.0, 0.0, 0.0);
        for (set, c) in sets.iter().zip(&clusters) {
            let n = set.n();
            if k > n {
                continue;
            }
            let p = pass_at_k(n, set.num_correct(), k)?;
            let u = ucc_at_k(n, &c.sizes, k)?;
            let ucr = c.num_clusters() as f64 / n as f64;
            sums = (sums.0 + 1, sums.1 + p, sums.2 + u, sums.3 + ucr);
            w.write_record([
                set.query_id.to_string(),
                n.to_string(),
                set.num_correct().to_string(),
                c.num_clusters().to_string(),
                k.to_string(),
                float(p),
                float(u),
                float(ucr),
            ])?;
        }
        if sums.0 > 0 {
            let m = sums.0 as f64;
            w.write_record([
                "mean".to_owned(),
                String::new(),
                String::new(),
                String::new(),
                k.to_string(),
                float(sums.1 / m),
                float(sums.2 / m),
                float(sums.3 / m),
            ])?;
        }
    }
    w.flush()?;

    if let Some(buckets) = flips {
        let mut w = csv_writer(&opts.out.join("flip_rate.csv"))?;
        w.write_record(["bucket_lo", "bucket_hi", "queries", "flips", "flip_rate"])?;
        for b in buckets {
            w.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.queries.to_string(),
                b.flips.to_string(),
                opt_float(b.rate),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
