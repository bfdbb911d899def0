use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Forecast quality. `r2` is `None` when the targets are constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub trend_f1: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

/// Metrics over a `timesteps × series` prediction matrix.
///
/// Trend F1 binarizes each consecutive step as "increase" (Δ > 0) or not and
/// scores predictions against targets with "increase" as the positive class.
/// When neither side ever increases the score is 1.
pub fn compute_metrics(predictions: &Mat, targets: &Mat) -> Result<MetricsReport> {
    if predictions.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let (rows, cols) = targets.shape();
    if rows < 2 || cols == 0 {
        return Err(Error::ShapeMismatch(format!("need at least 2 rows and 1 column, got {rows}x{cols}")));
    }
    let count = (rows * cols) as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, y) in predictions.data.iter().zip(&targets.data) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
    }
    let mae = abs / count;
    let mse = sq / count;

    let mean = targets.data.iter().sum::<f64>() / count;
    let ss_tot: f64 = targets.data.iter().map(|y| (y - mean) * (y - mean)).sum();
    let first = targets.data[0];
    let constant = targets.data.iter().all(|&y| y == first);
    let r2 = if constant || ss_tot == 0.0 { None } else { Some(1.0 - sq / ss_tot) };

    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for r in 1..rows {
        for c in 0..cols {
            let up_pred = predictions.get(r, c) - predictions.get(r - 1, c) > 0.0;
            let up_true = targets.get(r, c) - targets.get(r - 1, c) > 0.0;
            match (up_pred, up_true) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let trend_f1 = if tp + fp + fneg == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };

    Ok(MetricsReport { mae, mse, rmse: mse.sqrt(), r2, trend_f1, wall_clock_seconds: BTreeMap::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn col(v: &[f64]) -> Mat {
        Mat::from_vec(v.len(), 1, v.to_vec())
    }

    #[test]
    fn hand_arithmetic() {
        let m = compute_metrics(&col(&[1.0, 2.0]), &col(&[1.0, 4.0])).unwrap();
        assert_eq!(m.mae, 1.0);
        assert_eq!(m.mse, 2.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity() {
        let y = col(&[0.5, 1.5, -1.0, 2.0]);
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!((m.mae, m.mse, m.rmse), (0.0, 0.0, 0.0));
        assert_eq!(m.r2, Some(1.0));
        assert_eq!(m.trend_f1, 1.0);
    }

    #[test]
    fn constant_targets_give_sentinel() {
        let m = compute_metrics(&col(&[1.0, 2.0, 3.0]), &col(&[2.0, 2.0, 2.0])).unwrap();
        assert_eq!(m.r2, None);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"r2\":null"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(
            compute_metrics(&col(&[1.0, 2.0]), &col(&[1.0, 2.0, 3.0])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Straightforward reference implementation written independently.
    fn reference(p: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64, f64, f64, f64) {
        let flat_p: Vec<f64> = p.iter().flatten().copied().collect();
        let flat_y: Vec<f64> = y.iter().flatten().copied().collect();
        let n = flat_y.len() as f64;
        let mae = flat_p.iter().zip(&flat_y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let mse = flat_p.iter().zip(&flat_y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let ybar = flat_y.iter().sum::<f64>() / n;
        let r2 = 1.0 - flat_p.iter().zip(&flat_y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / flat_y.iter().map(|b| (b - ybar).powi(2)).sum::<f64>();
        let mut labels = Vec::new();
        for r in 1..y.len() {
            for c in 0..y[0].len() {
                labels.push((p[r][c] > p[r - 1][c], y[r][c] > y[r - 1][c]));
            }
        }
        let tp = labels.iter().filter(|l| l.0 && l.1).count() as f64;
        let precision = tp / labels.iter().filter(|l| l.0).count() as f64;
        let recall = tp / labels.iter().filter(|l| l.1).count() as f64;
        let f1 = 2.0 * precision * recall / (precision + recall);
        (mae, mse, mse.sqrt(), r2, f1)
    }

    #[test]
    fn matches_reference_on_random_pair() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let m = compute_metrics(&Mat::from_rows(&p), &Mat::from_rows(&y)).unwrap();
        let (mae, mse, rmse, r2, f1) = reference(&p, &y);
        for (a, b) in [(m.mae, mae), (m.mse, mse), (m.rmse, rmse), (m.r2.unwrap(), r2), (m.trend_f1, f1)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn self_comparison_is_zero_error(vals in prop::collection::vec(-1e6f64..1e6, 2..40)) {
            let y = col(&vals);
            let m = compute_metrics(&y, &y).unwrap();
            prop_assert_eq!(m.mae, 0.0);
            prop_assert_eq!(m.mse, 0.0);
            prop_assert_eq!(m.rmse, 0.0);
            prop_assert!((0.0..=1.0).contains(&m.trend_f1));
        }
    }
}
