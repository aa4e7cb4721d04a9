//! Independent brute-force implementations of the evaluation metrics,
//! deliberately written with different looping/aggregation structure than
//! the library so agreement is evidence, not tautology.

use joule_core::eval::ScoredPrediction;

/// ECE by iterating buckets on the outside and rescanning all predictions
/// for membership, using the same half-open boundaries as the library.
pub fn ece_oracle(preds: &[ScoredPrediction], buckets: usize) -> f64 {
    let n = preds.len() as f64;
    let mut total = 0.0;
    for m in 1..=buckets {
        let lo = (m - 1) as f64 / buckets as f64;
        let hi = m as f64 / buckets as f64;
        let members: Vec<&ScoredPrediction> = preds
            .iter()
            .filter(|p| (m == 1 || p.confidence > lo) && p.confidence <= hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let count = members.len() as f64;
        let acc = members.iter().filter(|p| p.predicted == p.truth).count() as f64 / count;
        let conf = members.iter().map(|p| p.confidence).sum::<f64>() / count;
        total += (count / n) * (acc - conf).abs();
    }
    total
}

/// AUROC by comparing every (in, out) pair directly: win 1, tie ½.
pub fn auroc_oracle(scores_in: &[f64], scores_out: &[f64]) -> f64 {
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &a in scores_in {
        for &b in scores_out {
            if a > b {
                wins += 1;
            } else if a == b {
                ties += 1;
            }
        }
    }
    (wins as f64 + 0.5 * ties as f64) / (scores_in.len() as f64 * scores_out.len() as f64)
}
