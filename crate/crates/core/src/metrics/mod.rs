//! Evaluation metrics over sampled rollouts: Pass@k, UCC@k, similarity
//! clustering of correct answers, unique-correct ratio and flip rate.

mod cluster;
mod estimators;
mod flip;
mod similarity;

pub use cluster::{cluster_correct, cluster_correct_with, unique_correct_ratio, ClusterAssignment, DEFAULT_THRESHOLD};
pub use estimators::{pass_at_k, ucc_at_k};
pub use flip::{flip_rate, FlipBucket, DEFAULT_FLIP_BINS};
pub use similarity::{similarity, SimilarityMetric, TfIdf};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::policy::{QueryId, Trajectory};

/// One sampled response and whether it was judged correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleItem {
    pub text: String,
    pub correct: bool,
}

/// All samples drawn for a single query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub query_id: QueryId,
    pub items: Vec<SampleItem>,
}

impl SampleSet {
    pub fn new(query_id: QueryId, items: Vec<SampleItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(validation(format!("sample set for query {query_id} is empty")));
        }
        Ok(Self { query_id, items })
    }

    /// Renders each trajectory as its space-joined token indices.
    pub fn from_trajectories(query_id: QueryId, trajectories: &[Trajectory]) -> Result<Self> {
        Self::new(
            query_id,
            trajectories
                .iter()
                .map(|t| SampleItem {
                    text: t.render(),
                    correct: t.correct,
                })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn num_correct(&self) -> usize {
        self.items.iter().filter(|i| i.correct).count()
    }
}
