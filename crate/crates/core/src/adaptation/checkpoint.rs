use serde::{Deserialize, Serialize};

use super::IterationRecord;
use crate::clip_score::argmax_lowest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStrategy {
    /// Highest student alignment score among evaluated iterations.
    #[default]
    MaxClipScore,
    /// The last iteration.
    Final,
    /// Lowest training loss.
    BestLoss,
}

/// Index into `records` chosen by `strategy`; earliest wins ties. `None` when
/// no record qualifies.
pub fn select_checkpoint(records: &[IterationRecord], strategy: CheckpointStrategy) -> Option<usize> {
    match strategy {
        CheckpointStrategy::Final => records.len().checked_sub(1),
        CheckpointStrategy::MaxClipScore => {
            let scored: Vec<(usize, f64)> = records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.student_score.map(|s| (i, s)))
                .collect();
            argmax_lowest(scored.iter().map(|p| p.1)).map(|k| scored[k].0)
        }
        CheckpointStrategy::BestLoss => {
            let losses: Vec<(usize, f64)> = records
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.loss.map(|l| (i, l)))
                .collect();
            argmax_lowest(losses.iter().map(|p| -p.1)).map(|k| losses[k].0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, loss: f64, score: Option<f64>) -> IterationRecord {
        IterationRecord {
            iteration: i,
            loss: Some(loss),
            pseudo_label: None,
            pseudo_label_score: None,
            student_caption: score.map(|_| "x".into()),
            student_score: score,
            lr: 0.0,
            candidates_refreshed: false,
        }
    }

    #[test]
    fn examples() {
        let recs: Vec<_> = [5.0, 9.0, 7.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| rec(i, 1.0, Some(s)))
            .collect();
        assert_eq!(select_checkpoint(&recs, CheckpointStrategy::MaxClipScore), Some(1));
        assert_eq!(select_checkpoint(&recs, CheckpointStrategy::Final), Some(2));
        assert_eq!(select_checkpoint(&recs, CheckpointStrategy::BestLoss), Some(0));

        let rising: Vec<_> = (0..6).map(|i| rec(i, 1.0 / (i + 1) as f64, Some(i as f64))).collect();
        assert_eq!(select_checkpoint(&rising, CheckpointStrategy::MaxClipScore), Some(5));
        assert_eq!(select_checkpoint(&rising, CheckpointStrategy::BestLoss), Some(5));

        let sparse = vec![rec(0, 2.0, Some(0.3)), rec(1, 1.0, None), rec(2, 3.0, Some(0.3))];
        assert_eq!(select_checkpoint(&sparse, CheckpointStrategy::MaxClipScore), Some(0));
        assert_eq!(select_checkpoint(&sparse, CheckpointStrategy::BestLoss), Some(1));
        assert_eq!(select_checkpoint(&[], CheckpointStrategy::Final), None);
    }
}
