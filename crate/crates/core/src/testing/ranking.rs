use crate::error::{LabError, Result};
use crate::nn::TrainLog;

/// Training samples ordered by accumulated gradient score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedTestSet {
    pub indices: Vec<usize>,
    /// Non-increasing.
    pub scores: Vec<f64>,
}

/// The `k` samples with the largest summed `‖softmax − onehot‖` scores;
/// equal scores keep the lower index first.
pub fn rank_tests(log: &TrainLog, k: usize) -> Result<RankedTestSet> {
    rank_scores(&log.sample_scores, k)
}

pub fn rank_scores(scores: &[f64], k: usize) -> Result<RankedTestSet> {
    if k > scores.len() {
        return Err(LabError::RankOutOfRange { k, n: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable, so ties stay in index order
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    let scores = idx.iter().map(|&i| scores[i]).collect();
    Ok(RankedTestSet { indices: idx, scores })
}
