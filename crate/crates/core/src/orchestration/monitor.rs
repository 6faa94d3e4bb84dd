//! Convergence diagnostic: the squared norm of the equivalent-gradient
//! series `g_t = (global_t - global_{t+1}) / zeta`, where zeta is the
//! equivalent step size (learning rate times local epochs). A descending
//! running average indicates the federated optimization is settling; no
//! claim is made about theoretical constants.

use crate::error::{Error, Result};
use crate::orchestration::RoundReport;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceSeries {
    /// `||g_t||^2` per consecutive round pair.
    pub per_round: Vec<f64>,
    /// Running mean of `per_round`.
    pub running_average: Vec<f64>,
}

pub fn convergence_monitor<F: Scalar>(reports: &[RoundReport<F>]) -> Result<ConvergenceSeries> {
    if reports.len() < 2 {
        return Err(Error::Config("convergence monitor needs at least 2 rounds".into()));
    }
    let mut per_round = Vec::with_capacity(reports.len() - 1);
    for pair in reports.windows(2) {
        let zeta = pair[1].zeta;
        let sq: f64 = pair[0]
            .global_after
            .values()
            .iter()
            .zip(pair[1].global_after.values())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64_c() / zeta;
                d * d
            })
            .sum();
        per_round.push(sq);
    }
    let mut running_average = Vec::with_capacity(per_round.len());
    let mut acc = 0.0;
    for (i, &v) in per_round.iter().enumerate() {
        acc += v;
        running_average.push(acc / (i + 1) as f64);
    }
    Ok(ConvergenceSeries {
        per_round,
        running_average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlatVector, LayoutEntry};
    use approx::assert_abs_diff_eq;

    fn report_with_global(round: usize, zeta: f64, values: Vec<f64>) -> RoundReport<f64> {
        let cols = values.len();
        RoundReport {
            round,
            zeta,
            clients: Vec::new(),
            aggregation: None,
            global_after: FlatVector::new(
                values,
                vec![LayoutEntry { layer: 0, rows: 1, cols }],
            )
            .unwrap(),
            grad_norm_sq: 0.0,
        }
    }

    #[test]
    fn identical_globals_give_zero_gradient() {
        let reports = vec![
            report_with_global(0, 0.1, vec![1.0, 2.0]),
            report_with_global(1, 0.1, vec![1.0, 2.0]),
        ];
        let series = convergence_monitor(&reports).expect("series");
        assert_eq!(series.per_round, vec![0.0]);
    }

    #[test]
    fn hand_built_one_dimensional_trace() {
        // globals 3 -> 1 with zeta = 0.5: g = (3 - 1) / 0.5 = 4, squared 16.
        let reports = vec![
            report_with_global(0, 0.5, vec![3.0]),
            report_with_global(1, 0.5, vec![1.0]),
            report_with_global(2, 0.5, vec![1.0]),
        ];
        let series = convergence_monitor(&reports).expect("series");
        assert_abs_diff_eq!(series.per_round[0], 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(series.per_round[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(series.running_average[1], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn single_round_is_rejected() {
        let reports = vec![report_with_global(0, 0.1, vec![1.0])];
        assert!(convergence_monitor(&reports).is_err());
    }
}
