//! Comparison systems trained on the same cohorts, splits, and windows as
//! the meta-learner.

mod protonet;
mod survival;

pub use protonet::{train_protonet, ProtoNet, PrototypeSet};
pub use survival::{train_survival_discrete, SurvivalModel};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Op, Tensor};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::eval::window_test_set;
use crate::meta::{self, derive_seed, MetaModel, TamlHyper};
use crate::model::{self, init_params, Activation, Adam, MlpConfig, MlpParams};
use crate::tasking::{original_label, TaskSpec, TimeWindows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    DnnPerWindow,
    Multitask,
    PretrainFinetune,
    SurvivalDiscrete,
    Protonet,
    Maml,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::DnnPerWindow,
        BaselineKind::Multitask,
        BaselineKind::PretrainFinetune,
        BaselineKind::SurvivalDiscrete,
        BaselineKind::Protonet,
        BaselineKind::Maml,
    ];

    /// Row label in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            BaselineKind::DnnPerWindow => "DNN",
            BaselineKind::Multitask => "Multitask",
            BaselineKind::PretrainFinetune => "Pretrain-Finetune",
            BaselineKind::SurvivalDiscrete => "Survival",
            BaselineKind::Protonet => "ProtoNet",
            BaselineKind::Maml => "MAML",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            BaselineKind::DnnPerWindow => "dnn_per_window",
            BaselineKind::Multitask => "multitask",
            BaselineKind::PretrainFinetune => "pretrain_finetune",
            BaselineKind::SurvivalDiscrete => "survival_discrete",
            BaselineKind::Protonet => "protonet",
            BaselineKind::Maml => "maml",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|k| k.key()).collect();
                Error::Config(format!("unknown baseline {s:?}; expected one of {}", valid.join(", ")))
            })
    }
}

/// Training settings shared by the supervised baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden_dims: [usize; 3],
    pub activation: Activation,
    /// Epochs over the pooled task data before per-window fine-tuning.
    pub pretrain_epochs: usize,
    /// Per-window fine-tuning epochs after pretraining.
    pub finetune_epochs: usize,
    pub embedding_dim: usize,
    /// Training episodes of the prototypical network.
    pub episodes: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::DnnPerWindow,
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            hidden_dims: [64, 64, 32],
            activation: Activation::Tanh,
            pretrain_epochs: 3,
            finetune_epochs: 5,
            embedding_dim: 16,
            episodes: 300,
            shots: 10,
            queries: 10,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("shots", self.shots),
            ("queries", self.queries),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be positive".into()));
        }
        Ok(())
    }

    pub fn with_kind(&self, kind: BaselineKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    pub fn network(&self, input_dim: usize) -> MlpConfig {
        MlpConfig::new(input_dim)
            .with_hidden(self.hidden_dims)
            .with_activation(self.activation)
    }
}

/// A trained model that scores records for any window.
pub trait WindowScorer: Send + Sync {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>>;
}

/// One single-head network per window.
#[derive(Clone, Debug, PartialEq)]
pub struct PerWindow {
    pub params: Vec<MlpParams>,
}

impl WindowScorer for PerWindow {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>> {
        let p = self.params.get(j).ok_or_else(|| window_range(j, self.params.len()))?;
        model::forward(p, x, 0)
    }
}

fn window_range(j: usize, n: usize) -> Error {
    Error::Config(format!("window {j} out of range for {n} windows"))
}

/// Mini-batch Adam. `loss` builds the batch loss from the parameter ids and
/// batch row positions, or returns `None` to skip a batch.
pub(crate) fn minibatch_train(
    init: MlpParams,
    n_rows: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    mut loss: impl FnMut(&mut Graph, &[NodeId], &[usize]) -> Result<Option<NodeId>>,
) -> Result<MlpParams> {
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_rows).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let mut graph = Graph::new();
            let ids = params.to_graph(&mut graph)?;
            let Some(l) = loss(&mut graph, &ids, batch)? else {
                continue;
            };
            let grads = graph.grad(l, &ids)?;
            params = adam.step(&params, &grads, lr)?;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("baseline parameters".into()));
    }
    Ok(params)
}

/// Binary classifier on fixed rows of `x`, starting from `init`.
pub(crate) fn fit_binary(
    init: MlpParams,
    x: &Tensor,
    labels: &[f64],
    cfg: &BaselineConfig,
    epochs: usize,
    seed: u64,
) -> Result<MlpParams> {
    let config = init.config().clone();
    minibatch_train(init, labels.len(), epochs, cfg.batch_size, cfg.lr, seed, |g, ids, batch| {
        let xb = g.constant(x.select_rows(batch))?;
        let probs = model::prob_node(g, &config, ids, xb, 0)?;
        let y: Vec<f64> = batch.iter().map(|&b| labels[b]).collect();
        Ok(Some(model::bce_node(g, probs, &y, &vec![1.0; y.len()])?))
    })
}

fn window_training_rows(cohort: &Cohort, windows: &TimeWindows, j: usize) -> Result<(Tensor, Vec<f64>)> {
    let (idx, labels) = window_test_set(cohort, windows, j);
    if !labels.iter().any(|&y| y) {
        return Err(Error::NoPositives(TaskSpec::TimeAssociated(j).to_string()));
    }
    let y = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Ok((cohort.feature_matrix(&idx), y))
}

/// A separate network per window on occurrence labels.
pub fn train_dnn_per_window(
    cohort: &Cohort,
    windows: &TimeWindows,
    cfg: &BaselineConfig,
) -> Result<PerWindow> {
    cfg.validate()?;
    let net = cfg.network(cohort.n_features());
    let mut params = Vec::with_capacity(windows.n_windows());
    for j in 0..windows.n_windows() {
        let (x, y) = window_training_rows(cohort, windows, j)?;
        let init = init_params(&net, derive_seed(cfg.seed, 10, j as u64))?;
        params.push(fit_binary(init, &x, &y, cfg, cfg.epochs, derive_seed(cfg.seed, 11, j as u64))?);
    }
    Ok(PerWindow { params })
}

/// Shared trunk with one output head per window.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskModel {
    pub params: MlpParams,
    /// Mean loss of each head per epoch; `NaN` when a head saw no rows.
    pub head_losses: Vec<Vec<f64>>,
}

impl WindowScorer for MultitaskModel {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>> {
        model::forward(&self.params, x, j)
    }
}

/// `(labels, mask)` per head for every record with at least one known
/// window outcome.
fn occurrence_matrix(cohort: &Cohort, windows: &TimeWindows) -> (Vec<usize>, Vec<Vec<(f64, f64)>>) {
    let n_windows = windows.n_windows();
    let mut idx = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in cohort.records().iter().enumerate() {
        let row: Vec<(f64, f64)> = (0..n_windows)
            .map(|j| match original_label(r, windows, j) {
                Some(y) => (if y { 1.0 } else { 0.0 }, 1.0),
                None => (0.0, 0.0),
            })
            .collect();
        if row.iter().any(|&(_, m)| m > 0.0) {
            idx.push(i);
            rows.push(row);
        }
    }
    (idx, rows)
}

/// Sum over heads of `scale(head) * BCE(head)` with masked rows; heads
/// without rows in the batch are skipped. Returns the loss and per-head
/// values.
pub(crate) fn masked_heads_loss(
    graph: &mut Graph,
    logits: NodeId,
    targets: &[&[(f64, f64)]],
    scale: impl Fn(usize, f64) -> f64,
) -> Result<Option<(NodeId, Vec<Option<f64>>)>> {
    let n_heads = targets.first().map_or(0, |t| t.len());
    let mut total: Option<NodeId> = None;
    let mut per_head = vec![None; n_heads];
    for (j, slot) in per_head.iter_mut().enumerate() {
        let labels: Vec<f64> = targets.iter().map(|t| t[j].0).collect();
        let mask: Vec<f64> = targets.iter().map(|t| t[j].1).collect();
        let mass: f64 = mask.iter().sum();
        if mass == 0.0 {
            continue;
        }
        let column = graph.forward_op(Op::Column(j), &[logits])?;
        let probs = graph.forward_op(Op::Sigmoid, &[column])?;
        let bce = model::bce_node(graph, probs, &labels, &mask)?;
        *slot = Some(graph.value(bce).item().expect("scalar loss"));
        let scaled = graph.forward_op(Op::Scale(scale(j, mass)), &[bce])?;
        total = Some(match total {
            None => scaled,
            Some(t) => graph.forward_op(Op::Add, &[t, scaled])?,
        });
    }
    Ok(total.map(|t| (t, per_head)))
}

/// Joint loss: mean over heads of each head's BCE on its known rows.
pub fn train_multitask(cohort: &Cohort, windows: &TimeWindows, cfg: &BaselineConfig) -> Result<MultitaskModel> {
    cfg.validate()?;
    let n_windows = windows.n_windows();
    let (idx, targets) = occurrence_matrix(cohort, windows);
    for j in 0..n_windows {
        if !targets.iter().any(|t| t[j] == (1.0, 1.0)) {
            return Err(Error::NoPositives(TaskSpec::TimeAssociated(j).to_string()));
        }
    }
    let x = cohort.feature_matrix(&idx);
    let net = cfg.network(cohort.n_features()).with_heads(n_windows);
    let init = init_params(&net, derive_seed(cfg.seed, 20, 0))?;

    let batches_per_epoch = idx.len().div_ceil(cfg.batch_size);
    let mut sums = vec![(0.0, 0usize); n_windows];
    let mut head_losses = Vec::with_capacity(cfg.epochs);
    let mut seen = 0usize;
    let params = minibatch_train(init, idx.len(), cfg.epochs, cfg.batch_size, cfg.lr, derive_seed(cfg.seed, 21, 0), |g, ids, batch| {
        let xb = g.constant(x.select_rows(batch))?;
        let logits = model::logits_node(g, &net, ids, xb)?;
        let rows: Vec<&[(f64, f64)]> = batch.iter().map(|&b| targets[b].as_slice()).collect();
        let heads_present = (0..n_windows).filter(|&j| rows.iter().any(|r| r[j].1 > 0.0)).count();
        let out = masked_heads_loss(g, logits, &rows, |_, _| 1.0 / heads_present as f64)?;
        seen += 1;
        if let Some((_, per_head)) = &out {
            for (s, v) in sums.iter_mut().zip(per_head) {
                if let Some(v) = v {
                    s.0 += v;
                    s.1 += 1;
                }
            }
        }
        if seen % batches_per_epoch == 0 {
            head_losses.push(sums.iter().map(|&(s, n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect());
            sums = vec![(0.0, 0); n_windows];
        }
        Ok(out.map(|(l, _)| l))
    })?;
    Ok(MultitaskModel {
        params,
        head_losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainFinetune {
    pub pretrained: MlpParams,
    pub per_window: PerWindow,
}

impl WindowScorer for PretrainFinetune {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>> {
        self.per_window.window_scores(x, j)
    }
}

/// Pretrains one single-head network on the pooled examples of every
/// reference and window task, then fine-tunes a copy per window.
pub fn pretrain_finetune(cohort: &Cohort, windows: &TimeWindows, cfg: &BaselineConfig) -> Result<PretrainFinetune> {
    cfg.validate()?;
    let mut pooled_rows = Vec::new();
    let mut pooled_labels = Vec::new();
    for (i, r) in cohort.records().iter().enumerate() {
        for &y in &r.ref_labels {
            pooled_rows.push(i);
            pooled_labels.push(if y { 1.0 } else { 0.0 });
        }
        for j in 0..windows.n_windows() {
            if let Some(y) = original_label(r, windows, j) {
                pooled_rows.push(i);
                pooled_labels.push(if y { 1.0 } else { 0.0 });
            }
        }
    }
    if pooled_rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let net = cfg.network(cohort.n_features());
    let init = init_params(&net, derive_seed(cfg.seed, 30, 0))?;
    let x = cohort.feature_matrix(&pooled_rows);
    let pretrained = fit_binary(init, &x, &pooled_labels, cfg, cfg.pretrain_epochs, derive_seed(cfg.seed, 31, 0))?;

    let mut params = Vec::with_capacity(windows.n_windows());
    for j in 0..windows.n_windows() {
        let (x, y) = window_training_rows(cohort, windows, j)?;
        params.push(fit_binary(
            pretrained.clone(),
            &x,
            &y,
            cfg,
            cfg.finetune_epochs,
            derive_seed(cfg.seed, 32, j as u64),
        )?);
    }
    Ok(PretrainFinetune {
        pretrained,
        per_window: PerWindow { params },
    })
}

/// Plain MAML: the meta-learner with neutral weights and no persistence
/// labels.
pub fn run_maml_baseline(cohort: &Cohort, windows: &TimeWindows, hyper: &TamlHyper) -> Result<MetaModel> {
    meta::train(&hyper.as_maml(), cohort, windows)
}

/// Fine-tunes a meta-initialization once per window.
pub fn finetune_all_windows(model: &MetaModel, cohort: &Cohort, windows: &TimeWindows) -> Result<PerWindow> {
    let params = (0..windows.n_windows())
        .map(|j| {
            meta::meta_test_finetune(
                model,
                cohort,
                windows,
                j,
                model.hyper.finetune_steps,
                model.hyper.finetune_lr,
            )
        })
        .collect::<Result<_>>()?;
    Ok(PerWindow { params })
}

/// Trains the baseline `cfg.kind` and returns its scorer.
pub fn train_baseline(
    cohort: &Cohort,
    windows: &TimeWindows,
    cfg: &BaselineConfig,
    hyper: &TamlHyper,
) -> Result<Box<dyn WindowScorer>> {
    Ok(match cfg.kind {
        BaselineKind::DnnPerWindow => Box::new(train_dnn_per_window(cohort, windows, cfg)?),
        BaselineKind::Multitask => Box::new(train_multitask(cohort, windows, cfg)?),
        BaselineKind::PretrainFinetune => Box::new(pretrain_finetune(cohort, windows, cfg)?),
        BaselineKind::SurvivalDiscrete => Box::new(train_survival_discrete(cohort, windows, cfg)?),
        BaselineKind::Protonet => Box::new(train_protonet(cohort, windows, cfg)?),
        BaselineKind::Maml => {
            let m = run_maml_baseline(cohort, windows, hyper)?;
            Box::new(finetune_all_windows(&m, cohort, windows)?)
        }
    })
}
