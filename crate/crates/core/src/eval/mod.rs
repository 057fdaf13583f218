//! Metrics, per-window evaluation, and the experiment drivers.

mod report;
mod suite;

pub use report::{MetricRow, MetricsReport};
pub use suite::{
    evaluate_scorer, run_ablation_suite, run_comparison, run_models, run_sensitivity_sweep,
    train_model, ModelSpec, Plan, SeriesPoint, SweepAxis, SweepReport, ABLATION_NAMES,
};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::model::{self, MlpParams};
use crate::tasking::{original_label, TimeWindows};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "scores",
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted half. Sort-based, and exact: concordant and tied pair counts are
/// accumulated as integers.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut concordant: u128 = 0;
    let mut tied: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        let (mut pos, mut neg) = (0u128, 0u128);
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            if labels[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        concordant += pos * negatives_below;
        tied += pos * neg;
        negatives_below += neg;
        start = end;
    }
    let numerator = (2 * concordant + tied) as f64;
    let denominator = (2 * positives as u128 * negatives as u128) as f64;
    Ok(numerator / denominator)
}

/// Fraction of positives scored at or above `threshold`.
pub fn recall_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives: labels.len(),
        });
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &y)| y && s >= threshold)
        .count();
    Ok(hits as f64 / positives as f64)
}

/// Records of `cohort` whose outcome in window `j` is known, with their
/// occurrence labels.
pub fn window_test_set(cohort: &Cohort, windows: &TimeWindows, j: usize) -> (Vec<usize>, Vec<bool>) {
    cohort
        .records()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| original_label(r, windows, j).map(|y| (i, y)))
        .unzip()
}

/// Scores every row of a precomputed test set.
pub fn score_row(
    model: &str,
    window: &str,
    scores: &[f64],
    labels: &[bool],
    seed: u64,
    threshold: f64,
) -> Result<MetricRow> {
    Ok(MetricRow {
        model: model.to_string(),
        window: window.to_string(),
        auroc: auroc(scores, labels)?,
        recall: recall_at(scores, labels, threshold)?,
        n_test: labels.len(),
        n_positive: labels.iter().filter(|&&y| y).count(),
        seed,
    })
}

/// Evaluates single-head parameters on window `j` of a held-out cohort.
pub fn evaluate(
    params: &MlpParams,
    cohort_test: &Cohort,
    windows: &TimeWindows,
    j: usize,
    model_name: &str,
    seed: u64,
    threshold: f64,
) -> Result<MetricRow> {
    let (idx, labels) = window_test_set(cohort_test, windows, j);
    let scores = model::forward(params, &cohort_test.feature_matrix(&idx), 0)?;
    score_row(model_name, &windows.label(j), &scores, &labels, seed, threshold)
}
