use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    TfidfCosine,
    Jaccard,
    RougeL,
    Edit,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 4] = [
        SimilarityMetric::TfidfCosine,
        SimilarityMetric::Jaccard,
        SimilarityMetric::RougeL,
        SimilarityMetric::Edit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SimilarityMetric::TfidfCosine => "tfidf_cosine",
            SimilarityMetric::Jaccard => "jaccard",
            SimilarityMetric::RougeL => "rouge_l",
            SimilarityMetric::Edit => "edit",
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "tfidf_cosine" | "tfidf" => Ok(SimilarityMetric::TfidfCosine),
            "jaccard" => Ok(SimilarityMetric::Jaccard),
            "rouge_l" | "rougel" => Ok(SimilarityMetric::RougeL),
            "edit" | "levenshtein" => Ok(SimilarityMetric::Edit),
            other => Err(validation(format!("unknown similarity metric `{other}`"))),
        }
    }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Shared handling of empty inputs: two empties are identical, one empty
/// shares nothing with the other.
fn empty_convention(a_empty: bool, b_empty: bool) -> Option<f64> {
    match (a_empty, b_empty) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        _ => None,
    }
}

fn jaccard(a: &[&str], b: &[&str]) -> f64 {
    if let Some(v) = empty_convention(a.is_empty(), b.is_empty()) {
        return v;
    }
    let sa: BTreeSet<&str> = a.iter().copied().collect();
    let sb: BTreeSet<&str> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 of LCS precision and recall, which reduces to `2·LCS / (|a| + |b|)`.
fn rouge_l(a: &[&str], b: &[&str]) -> f64 {
    if let Some(v) = empty_convention(a.is_empty(), b.is_empty()) {
        return v;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn edit_similarity(a: &str, b: &str) -> f64 {
    let ca: Vec<char> = a.chars().collect();
    let cb: Vec<char> = b.chars().collect();
    if let Some(v) = empty_convention(ca.is_empty(), cb.is_empty()) {
        return v;
    }
    1.0 - levenshtein(&ca, &cb) as f64 / ca.len().max(cb.len()) as f64
}

/// TF-IDF vectors over a fixed corpus, with smoothed IDF
/// `ln((1 + D) / (1 + df)) + 1` and raw term counts.
#[derive(Debug, Clone)]
pub struct TfIdf {
    vectors: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Self {
        let d = docs.len() as f64;
        let counts: Vec<BTreeMap<String, f64>> = docs
            .iter()
            .map(|doc| {
                let mut tf = BTreeMap::new();
                for t in tokens(doc.as_ref()) {
                    *tf.entry(t.to_owned()).or_insert(0.0) += 1.0;
                }
                tf
            })
            .collect();
        let mut df: HashMap<&str, f64> = HashMap::new();
        for tf in &counts {
            for term in tf.keys() {
                *df.entry(term.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let idf: HashMap<&str, f64> = df
            .iter()
            .map(|(t, n)| (*t, ((1.0 + d) / (1.0 + n)).ln() + 1.0))
            .collect();
        let vectors: Vec<BTreeMap<String, f64>> = counts
            .iter()
            .map(|tf| tf.iter().map(|(t, c)| (t.clone(), c * idf[t.as_str()])).collect())
            .collect();
        let norms = vectors
            .iter()
            .map(|v| v.values().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self { vectors, norms }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Cosine similarity of documents `i` and `j`.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.vectors[i], &self.vectors[j]);
        if let Some(v) = empty_convention(a.is_empty(), b.is_empty()) {
            return v;
        }
        if a == b {
            return 1.0;
        }
        // Iterate the smaller map in term order so the sum is symmetric in (i, j).
        let (small, large) = if a.len() < b.len() || (a.len() == b.len() && i <= j) { (a, b) } else { (b, a) };
        let dot: f64 = small
            .iter()
            .filter_map(|(t, x)| large.get(t).map(|y| x * y))
            .sum();
        (dot / (self.norms[i] * self.norms[j])).clamp(0.0, 1.0)
    }
}

/// Pairwise similarity in `[0, 1]`. For TF-IDF the corpus is `{a, b}`.
pub fn similarity(a: &str, b: &str, metric: SimilarityMetric) -> f64 {
    if a == b {
        return 1.0;
    }
    match metric {
        SimilarityMetric::TfidfCosine => TfIdf::fit(&[a, b]).cosine(0, 1),
        SimilarityMetric::Jaccard => jaccard(&tokens(a), &tokens(b)),
        SimilarityMetric::RougeL => rouge_l(&tokens(a), &tokens(b)),
        SimilarityMetric::Edit => edit_similarity(a, b),
    }
}

/// Similarity of two texts where TF-IDF weights come from a shared corpus.
pub(crate) fn similarity_in_corpus(
    texts: &[String],
    tfidf: Option<&TfIdf>,
    i: usize,
    j: usize,
    metric: SimilarityMetric,
) -> f64 {
    if texts[i] == texts[j] {
        return 1.0;
    }
    match (metric, tfidf) {
        (SimilarityMetric::TfidfCosine, Some(model)) => model.cosine(i, j),
        _ => similarity(&texts[i], &texts[j], metric),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// LCS by exhaustive subsequence search, for tiny inputs.
    fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn hand_examples() {
        assert!((similarity("a b c", "a c", SimilarityMetric::Jaccard) - 2.0 / 3.0).abs() < 1e-15);
        assert!((similarity("a b c", "a c", SimilarityMetric::RougeL) - 0.8).abs() < 1e-15);
        assert_eq!(similarity("a b", "c d", SimilarityMetric::Jaccard), 0.0);
        assert_eq!(similarity("a b", "c d", SimilarityMetric::TfidfCosine), 0.0);
        assert!((similarity("kitten", "sitting", SimilarityMetric::Edit) - (1.0 - 3.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn identity_and_empty_conventions() {
        for m in SimilarityMetric::ALL {
            assert_eq!(similarity("3 1 4 1", "3 1 4 1", m), 1.0);
            assert_eq!(similarity("", "", m), 1.0);
            assert_eq!(similarity("", "x", m), 0.0);
            assert_eq!(similarity("x", "", m), 0.0);
        }
    }

    #[test]
    fn tfidf_two_doc_value() {
        // Corpus {"a b", "a c"}: idf(a) = 1, idf(b) = idf(c) = ln(3/2) + 1.
        let w = (1.5f64).ln() + 1.0;
        let expected = 1.0 / (1.0 + w * w);
        assert!((similarity("a b", "a c", SimilarityMetric::TfidfCosine) - expected).abs() < 1e-15);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in SimilarityMetric::ALL {
            assert_eq!(m.as_str().parse::<SimilarityMetric>().unwrap(), m);
        }
        assert!("bleu".parse::<SimilarityMetric>().is_err());
    }

    fn text() -> impl Strategy<Value = String> {
        proptest::collection::vec(0u8..4, 0..6)
            .prop_map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in text(), b in text()) {
            for m in SimilarityMetric::ALL {
                let s = similarity(&a, &b, m);
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert_eq!(s, similarity(&b, &a, m));
            }
        }

        #[test]
        fn lcs_matches_brute_force(a in text(), b in text()) {
            let (ta, tb) = (tokens(&a), tokens(&b));
            prop_assert_eq!(lcs_len(&ta, &tb), brute_lcs(&ta, &tb));
        }
    }
}
