//! Estimation accuracy: RMSE between parameter fields, Otsu thresholding of
//! an estimated field, and the Dice coefficient between node sets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::epsim::ParamField;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub dice: f64,
    pub threshold: f64,
    pub true_set_size: usize,
    pub est_set_size: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "rmse,dice,threshold,true_set_size,est_set_size";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.rmse, self.dice, self.threshold, self.true_set_size, self.est_set_size
        )
    }
}

/// Root mean square difference between two equal-length fields.
pub fn rmse(truth: &ParamField, estimate: &ParamField) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(CoreError::DimensionMismatch {
            context: "rmse fields",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let n = truth.len() as f64;
    let ss: f64 = truth
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// Threshold minimizing the weighted within-class variance, searched
/// exhaustively over `n_bins` histogram bin edges; ties resolved toward the
/// lower threshold. Nodes with value >= threshold form the high class.
pub fn otsu_threshold(field: &ParamField, n_bins: usize) -> Result<f64> {
    let values = field.values();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n_bins < 2 {
        return Err(CoreError::invalid("otsu needs at least 2 bins"));
    }
    if hi - lo < 1e-300 {
        return Err(CoreError::NoThreshold { rmse: f64::NAN });
    }
    let width = (hi - lo) / n_bins as f64;
    // exact per-bin statistics: count, sum, sum of squares
    let mut count = vec![0usize; n_bins];
    let mut sum = vec![0.0f64; n_bins];
    let mut sum2 = vec![0.0f64; n_bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        count[b] += 1;
        sum[b] += v;
        sum2[b] += v * v;
    }
    let total_n = values.len() as f64;
    let total_sum: f64 = sum.iter().sum();
    let total_sum2: f64 = sum2.iter().sum();

    let mut best_edge = f64::NAN;
    let mut best_within = f64::INFINITY;
    let mut lo_n = 0.0;
    let mut lo_sum = 0.0;
    let mut lo_sum2 = 0.0;
    // candidate edges sit between bins: edge i splits values < edge vs >= edge
    for i in 1..n_bins {
        lo_n += count[i - 1] as f64;
        lo_sum += sum[i - 1];
        lo_sum2 += sum2[i - 1];
        let hi_n = total_n - lo_n;
        if lo_n == 0.0 || hi_n == 0.0 {
            continue;
        }
        let lo_var = lo_sum2 / lo_n - (lo_sum / lo_n).powi(2);
        let hi_sum = total_sum - lo_sum;
        let hi_sum2 = total_sum2 - lo_sum2;
        let hi_var = hi_sum2 / hi_n - (hi_sum / hi_n).powi(2);
        let within = (lo_n * lo_var.max(0.0) + hi_n * hi_var.max(0.0)) / total_n;
        if within < best_within {
            best_within = within;
            best_edge = lo + i as f64 * width;
        }
    }
    if best_edge.is_nan() {
        return Err(CoreError::NoThreshold { rmse: f64::NAN });
    }
    Ok(best_edge)
}

/// Dice coefficient `2|A ∩ B| / (|A| + |B|)`; errors when both sets are empty.
pub fn dice(true_set: &[usize], est_set: &[usize]) -> Result<f64> {
    if true_set.is_empty() && est_set.is_empty() {
        return Err(CoreError::invalid("dice undefined for two empty sets"));
    }
    let a: HashSet<usize> = true_set.iter().copied().collect();
    let inter = est_set.iter().filter(|i| a.contains(i)).count();
    Ok(2.0 * inter as f64 / (a.len() + est_set.len()) as f64)
}

/// Node indices at or above the threshold.
pub fn nodes_above(field: &ParamField, threshold: f64) -> Vec<usize> {
    field
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Infarct node set of a two-valued truth field: nodes carrying the larger
/// of its distinct values. A constant field yields the empty set.
pub fn true_infarct_set(truth: &ParamField) -> Vec<usize> {
    let lo = truth.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = truth
        .values()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Vec::new();
    }
    truth
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == hi)
        .map(|(i, _)| i)
        .collect()
}

/// RMSE plus Otsu-thresholded Dice against the exact infarct set of a
/// two-valued truth field. A constant estimate surfaces the no-threshold
/// error with the RMSE still attached.
pub fn evaluate(truth: &ParamField, estimate: &ParamField) -> Result<EvalReport> {
    evaluate_with_bins(truth, estimate, 64)
}

pub fn evaluate_with_bins(
    truth: &ParamField,
    estimate: &ParamField,
    n_bins: usize,
) -> Result<EvalReport> {
    let rmse_val = rmse(truth, estimate)?;
    let threshold = match otsu_threshold(estimate, n_bins) {
        Ok(t) => t,
        Err(CoreError::NoThreshold { .. }) => {
            return Err(CoreError::NoThreshold { rmse: rmse_val })
        }
        Err(e) => return Err(e),
    };
    let true_set = true_infarct_set(truth);
    let est_set = nodes_above(estimate, threshold);
    let dice_val = dice(&true_set, &est_set)?;
    Ok(EvalReport {
        rmse: rmse_val,
        dice: dice_val,
        threshold,
        true_set_size: true_set.len(),
        est_set_size: est_set.len(),
    })
}
