use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::similarity::{similarity_in_corpus, SimilarityMetric, TfIdf};
use super::SampleSet;
use crate::error::{validation, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Partition of the correct items of a [`SampleSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster sizes, largest first.
    pub sizes: Vec<usize>,
    /// Item indices per cluster, each sorted, clusters ordered by first index.
    pub members: Vec<Vec<usize>>,
    pub metric: SimilarityMetric,
    pub threshold: f64,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage clustering of correct items, joining any pair whose
/// similarity reaches `threshold`.
pub fn cluster_correct(samples: &SampleSet, metric: SimilarityMetric, threshold: f64) -> Result<ClusterAssignment> {
    cluster_correct_with(samples, metric, threshold, |s| s.to_owned())
}

/// As [`cluster_correct`], comparing `extract(text)` instead of the full text.
pub fn cluster_correct_with(
    samples: &SampleSet,
    metric: SimilarityMetric,
    threshold: f64,
    extract: impl Fn(&str) -> String,
) -> Result<ClusterAssignment> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(validation(format!("threshold {threshold} outside [0, 1]")));
    }
    let texts: Vec<String> = samples.items.iter().map(|i| extract(&i.text)).collect();
    let tfidf = (metric == SimilarityMetric::TfidfCosine).then(|| TfIdf::fit(&texts));
    let correct: Vec<usize> = (0..texts.len()).filter(|&i| samples.items[i].correct).collect();

    let edges: Vec<(usize, usize)> = (0..correct.len())
        .into_par_iter()
        .flat_map_iter(|a| {
            let texts = &texts;
            let tfidf = tfidf.as_ref();
            let correct = &correct;
            ((a + 1)..correct.len()).filter_map(move |b| {
                let s = similarity_in_corpus(texts, tfidf, correct[a], correct[b], metric);
                (s >= threshold).then_some((a, b))
            })
        })
        .collect();

    let mut parent: Vec<usize> = (0..correct.len()).collect();
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; correct.len()];
    for (a, &item) in correct.iter().enumerate() {
        let r = find(&mut parent, a);
        if slot[r] == usize::MAX {
            slot[r] = members.len();
            members.push(Vec::new());
        }
        members[slot[r]].push(item);
    }
    let mut sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(ClusterAssignment {
        sizes,
        members,
        metric,
        threshold,
    })
}

/// Number of correct-answer clusters divided by the number of samples.
pub fn unique_correct_ratio(samples: &SampleSet, metric: SimilarityMetric, threshold: f64) -> Result<f64> {
    let clusters = cluster_correct(samples, metric, threshold)?;
    Ok(clusters.num_clusters() as f64 / samples.n() as f64)
}
