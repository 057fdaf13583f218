use crate::autodiff::{sigmoid, Tensor};
use crate::cohort::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::meta::derive_seed;
use crate::model::{self, init_params, MlpParams};
use crate::tasking::TimeWindows;

use super::{masked_heads_loss, minibatch_train, BaselineConfig, WindowScorer};

/// Discrete-time logistic hazard network with one hazard head per window.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalModel {
    pub params: MlpParams,
}

impl SurvivalModel {
    /// Per record: the probability that the event starts in each window,
    /// `h_j * prod_{l<j} (1 - h_l)`, followed by the survival tail
    /// `prod_l (1 - h_l)`.
    pub fn window_probabilities(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = model::forward_logits(&self.params, x)?;
        let (n, m) = logits.dims2().expect("matrix logits");
        Ok((0..n)
            .map(|i| {
                let mut alive = 1.0;
                let mut out = Vec::with_capacity(m + 1);
                for &z in &logits.data()[i * m..(i + 1) * m] {
                    let h = sigmoid(z);
                    out.push(alive * h);
                    alive *= 1.0 - h;
                }
                out.push(alive);
                out
            })
            .collect())
    }
}

impl WindowScorer for SurvivalModel {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>> {
        let n_windows = self.params.config().n_heads;
        if j >= n_windows {
            return Err(Error::Config(format!("window {j} out of range for {n_windows} windows")));
        }
        Ok(self.window_probabilities(x)?.into_iter().map(|p| p[j]).collect())
    }
}

/// Per-bin `(label, mask)` targets. Bins after the event bin, and bins not
/// fully observed before censoring, are masked out. Records whose event
/// starts before the first window carry no targets.
fn hazard_targets(r: &PatientRecord, windows: &TimeWindows) -> Vec<(f64, f64)> {
    let n = windows.n_windows();
    let (start, _) = windows.horizon();
    match r.event.start {
        Some(s) if s < start => vec![(0.0, 0.0); n],
        Some(s) => (0..n)
            .map(|j| {
                let (lo, hi) = windows.bounds(j);
                if s >= hi {
                    (0.0, 1.0)
                } else if s >= lo {
                    (1.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect(),
        None => (0..n)
            .map(|j| {
                let (_, hi) = windows.bounds(j);
                if r.event.observed_until >= hi {
                    (0.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect(),
    }
}

/// Likelihood: the product over observed bins of Bernoulli hazards, i.e.
/// the summed masked cross-entropy divided by the number of observed bins.
pub fn train_survival_discrete(
    cohort: &Cohort,
    windows: &TimeWindows,
    cfg: &BaselineConfig,
) -> Result<SurvivalModel> {
    cfg.validate()?;
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (i, r) in cohort.records().iter().enumerate() {
        let t = hazard_targets(r, windows);
        if t.iter().any(|&(_, m)| m > 0.0) {
            idx.push(i);
            targets.push(t);
        }
    }
    if idx.is_empty() {
        return Err(Error::Config(
            "no record is observed through any window; the hazard model has nothing to fit".into(),
        ));
    }
    let x = cohort.feature_matrix(&idx);
    let net = cfg.network(cohort.n_features()).with_heads(windows.n_windows());
    let init = init_params(&net, derive_seed(cfg.seed, 40, 0))?;
    let params = minibatch_train(init, idx.len(), cfg.epochs, cfg.batch_size, cfg.lr, derive_seed(cfg.seed, 41, 0), |g, ids, batch| {
        let xb = g.constant(x.select_rows(batch))?;
        let logits = model::logits_node(g, &net, ids, xb)?;
        let rows: Vec<&[(f64, f64)]> = batch.iter().map(|&b| targets[b].as_slice()).collect();
        let total: f64 = rows.iter().flat_map(|r| r.iter()).map(|&(_, m)| m).sum();
        Ok(masked_heads_loss(g, logits, &rows, |_, mass| mass / total)?.map(|(l, _)| l))
    })?;
    Ok(SurvivalModel { params })
}
