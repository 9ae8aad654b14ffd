use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine annealing from `lr0` at the first iteration to 0 at the last.
    #[default]
    Cosine,
    Constant,
}

/// Learning rate for `iteration` in a run of `iterations` steps.
pub fn lr_at(schedule: LrSchedule, lr0: f64, iterations: usize, iteration: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => lr0,
        LrSchedule::Cosine => {
            if iterations <= 1 {
                return lr0;
            }
            let frac = iteration.min(iterations - 1) as f64 / (iterations - 1) as f64;
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(lr_at(LrSchedule::Cosine, 5e-5, 70, 0), 5e-5);
        assert!(lr_at(LrSchedule::Cosine, 5e-5, 70, 69).abs() < 1e-20);
        let mid = lr_at(LrSchedule::Cosine, 5e-5, 71, 35);
        assert!((mid - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(LrSchedule::Constant, 0.3, 70, 50), 0.3);
        assert_eq!(lr_at(LrSchedule::Cosine, 0.3, 1, 0), 0.3);
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..70).map(|i| lr_at(LrSchedule::Cosine, 1.0, 70, i)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
