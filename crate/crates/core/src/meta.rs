//! The time-associated meta-learner: task-category step sizes for the inner
//! adaptation, task-category weights on the outer loss, and persistence
//! relabeling of support sets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, StepMode, Tensor};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::model::{self, init_params, Activation, Adam, MlpConfig, MlpParams};
use crate::tasking::{
    classify_situation, decompose, sample_episode, tiss_label, Episode, EpisodeConfig, Situation,
    TaskSpec, TimeWindows,
};

/// Meta-learner hyperparameters, including the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamlHyper {
    /// Inner step size for window tasks.
    pub alpha_s: f64,
    /// Inner step size for reference tasks; `alpha_s / weight_ratio` when
    /// unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_r: Option<f64>,
    /// Outer (Adam) step size.
    pub beta: f64,
    /// Outer-loss weight of window tasks relative to reference tasks.
    pub weight_ratio: f64,
    /// Augmentation ratio: support weight of S1/S3 relative to S2/S4.
    pub rho: f64,
    pub pseudo_duration_hours: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub outer_iterations: usize,
    pub first_order: bool,
    pub use_tiss_train: bool,
    pub use_tiss_test: bool,
    pub use_task_weights: bool,
    /// Keep persistence labels but give every support example weight 1.
    pub use_situation_weights: bool,
    /// Reference tasks left out of meta-training.
    pub excluded_refs: Vec<usize>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub hidden_dims: [usize; 3],
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TamlHyper {
    fn default() -> Self {
        Self {
            alpha_s: 0.1,
            alpha_r: None,
            beta: 1e-3,
            weight_ratio: 1.3,
            rho: 1.5,
            pseudo_duration_hours: 30.0 * 24.0,
            inner_steps: 1,
            tasks_per_batch: 8,
            support_size: 15,
            query_size: 30,
            outer_iterations: 300,
            first_order: false,
            use_tiss_train: true,
            use_tiss_test: true,
            use_task_weights: true,
            use_situation_weights: true,
            excluded_refs: Vec::new(),
            finetune_steps: 60,
            finetune_lr: 1e-3,
            hidden_dims: [64, 64, 32],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl TamlHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_s", self.alpha_s),
            ("alpha_r", self.alpha_r()),
            ("beta", self.beta),
            ("rho", self.rho),
            ("pseudo_duration_hours", self.pseudo_duration_hours),
            ("finetune_lr", self.finetune_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_ratio >= 1.0) || !self.weight_ratio.is_finite() {
            return Err(Error::Config(format!(
                "weight_ratio must be at least 1, got {}",
                self.weight_ratio
            )));
        }
        for (name, v) in [
            ("inner_steps", self.inner_steps),
            ("tasks_per_batch", self.tasks_per_batch),
            ("support_size", self.support_size),
            ("query_size", self.query_size),
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

    pub fn alpha_r(&self) -> f64 {
        self.alpha_r.unwrap_or(self.alpha_s / self.weight_ratio)
    }

    pub fn step_mode(&self) -> StepMode {
        if self.first_order {
            StepMode::FirstOrder
        } else {
            StepMode::Exact
        }
    }

    pub fn alpha_for(&self, task: TaskSpec) -> f64 {
        match task {
            TaskSpec::TimeAssociated(_) => self.alpha_s,
            TaskSpec::Reference(_) => self.alpha_r(),
        }
    }

    /// `w_k`: `weight_ratio` for window tasks, 1 for reference tasks.
    pub fn task_weight(&self, task: TaskSpec) -> f64 {
        if self.use_task_weights && task.is_time_associated() {
            self.weight_ratio
        } else {
            1.0
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            support_size: self.support_size,
            query_size: self.query_size,
            rho: self.rho,
            pseudo_duration: self.pseudo_duration_hours,
            tiss: self.use_tiss_train,
            situation_weights: self.use_situation_weights,
        }
    }

    /// Plain MAML: equal task weights and step sizes, no persistence labels.
    pub fn as_maml(&self) -> Self {
        Self {
            weight_ratio: 1.0,
            rho: 1.0,
            alpha_r: Some(self.alpha_s),
            use_tiss_train: false,
            use_tiss_test: false,
            ..self.clone()
        }
    }

    pub fn network(&self, input_dim: usize) -> MlpConfig {
        MlpConfig::new(input_dim)
            .with_hidden(self.hidden_dims)
            .with_activation(self.activation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub mean_outer_loss: f64,
    /// Mean weighted query loss over window tasks in the batch.
    pub time_loss: Option<f64>,
    pub reference_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaModel {
    pub theta: MlpParams,
    pub hyper: TamlHyper,
    pub log: Vec<LossRecord>,
    optimizer: Adam,
}

impl MetaModel {
    pub fn new(input_dim: usize, hyper: TamlHyper) -> Result<Self> {
        hyper.validate()?;
        let theta = init_params(&hyper.network(input_dim), hyper.seed)?;
        Ok(Self::from_params(theta, hyper))
    }

    pub fn from_params(theta: MlpParams, hyper: TamlHyper) -> Self {
        let optimizer = Adam::new(&theta);
        Self {
            theta,
            hyper,
            log: Vec::new(),
            optimizer,
        }
    }

    /// Loss log as CSV: `iteration,mean_outer_loss,time_loss,reference_loss`.
    pub fn log_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut out = String::from("iteration,mean_outer_loss,time_loss,reference_loss\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{:?},{},{}\n",
                r.iteration,
                r.mean_outer_loss,
                opt(r.time_loss),
                opt(r.reference_loss)
            ));
        }
        out
    }
}

struct SupportBatch {
    x: Tensor,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

fn batch(cohort: &Cohort, examples: &[crate::tasking::Example]) -> SupportBatch {
    let idx: Vec<usize> = examples.iter().map(|e| e.index).collect();
    SupportBatch {
        x: cohort.feature_matrix(&idx),
        labels: examples.iter().map(|e| e.label).collect(),
        weights: examples.iter().map(|e| e.weight).collect(),
    }
}

/// Records `steps` gradient steps of the weighted support loss on `graph`
/// and returns the adapted parameter ids.
fn adapt_on_graph(
    graph: &mut Graph,
    config: &MlpConfig,
    theta: &[NodeId],
    support: &SupportBatch,
    alpha: f64,
    steps: usize,
    mode: StepMode,
) -> Result<Vec<NodeId>> {
    let x = graph.constant(support.x.clone())?;
    let mut current = theta.to_vec();
    for _ in 0..steps {
        let probs = model::prob_node(graph, config, &current, x, 0)?;
        let loss = model::bce_node(graph, probs, &support.labels, &support.weights)?;
        current = graph.gradient_step(loss, &current, alpha, mode)?;
    }
    Ok(current)
}

fn query_loss_on_graph(
    graph: &mut Graph,
    config: &MlpConfig,
    params: &[NodeId],
    query: &SupportBatch,
    task_weight: f64,
) -> Result<NodeId> {
    let x = graph.constant(query.x.clone())?;
    let probs = model::prob_node(graph, config, params, x, 0)?;
    let ones = vec![1.0; query.labels.len()];
    let loss = model::bce_node(graph, probs, &query.labels, &ones)?;
    Ok(graph.forward_op(crate::autodiff::Op::Scale(task_weight), &[loss])?)
}

/// `theta'_k = theta - alpha * grad L(support, theta)`, repeated `steps`
/// times, evaluated to values.
pub fn inner_adapt(
    theta: &MlpParams,
    cohort: &Cohort,
    episode: &Episode,
    alpha: f64,
    steps: usize,
) -> Result<MlpParams> {
    if episode.support.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut graph = Graph::new();
    let ids = theta.to_graph(&mut graph)?;
    let support = batch(cohort, &episode.support);
    let adapted = adapt_on_graph(
        &mut graph,
        theta.config(),
        &ids,
        &support,
        alpha,
        steps,
        StepMode::FirstOrder,
    )
    .map_err(|e| with_task(e, episode.task))?;
    theta.from_graph(&graph, &adapted)
}

/// `w_k * BCE(query, theta')` with uniform example weights.
pub fn outer_task_loss(
    adapted: &MlpParams,
    cohort: &Cohort,
    episode: &Episode,
    task_weight: f64,
) -> Result<f64> {
    if episode.query.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let idx = episode.query_indices();
    let probs = model::forward(adapted, &cohort.feature_matrix(&idx), 0)?;
    let labels: Vec<f64> = episode.query.iter().map(|e| e.label).collect();
    let ones = vec![1.0; labels.len()];
    Ok(task_weight * model::weighted_bce(&probs, &labels, &ones)?)
}

fn with_task(e: Error, task: TaskSpec) -> Error {
    match e {
        Error::Autodiff(inner) => Error::NonFinite(format!("task {task}: {inner}")),
        other => other,
    }
}

/// Outer loss of one task and its gradient with respect to `theta`,
/// differentiating through the inner adaptation.
pub fn task_outer_gradient(
    theta: &MlpParams,
    hyper: &TamlHyper,
    cohort: &Cohort,
    episode: &Episode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let ids = theta.to_graph(&mut graph)?;
    let support = batch(cohort, &episode.support);
    let query = batch(cohort, &episode.query);
    let run = |graph: &mut Graph| -> Result<(f64, Vec<Tensor>)> {
        let adapted = adapt_on_graph(
            graph,
            theta.config(),
            &ids,
            &support,
            hyper.alpha_for(episode.task),
            hyper.inner_steps,
            hyper.step_mode(),
        )?;
        let loss = query_loss_on_graph(
            graph,
            theta.config(),
            &adapted,
            &query,
            hyper.task_weight(episode.task),
        )?;
        let value = graph.value(loss).item().expect("scalar loss");
        Ok((value, graph.grad(loss, &ids)?))
    };
    run(&mut graph).map_err(|e| with_task(e, episode.task))
}

/// One outer update from a batch of episodes.
///
/// Task gradients are computed independently and summed in task order, so
/// the result does not depend on scheduling.
pub fn meta_train_step(model: &mut MetaModel, cohort: &Cohort, episodes: &[Episode]) -> Result<()> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by_key(|&i| episodes[i].task);
    let results: Vec<Result<(f64, Vec<Tensor>)>> = order
        .par_iter()
        .map(|&i| task_outer_gradient(&model.theta, &model.hyper, cohort, &episodes[i]))
        .collect();

    let mut total: Vec<Tensor> = model
        .theta
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut time = (0.0, 0usize);
    let mut reference = (0.0, 0usize);
    for (&i, result) in order.iter().zip(results) {
        let (loss, grads) = result?;
        let task = episodes[i].task;
        if grads.iter().any(|g| !g.is_finite()) || !loss.is_finite() {
            return Err(Error::NonFinite(format!("outer gradient of task {task}")));
        }
        for (acc, g) in total.iter_mut().zip(&grads) {
            *acc = acc.zip_map(g, |a, b| a + b);
        }
        let slot = if task.is_time_associated() {
            &mut time
        } else {
            &mut reference
        };
        slot.0 += loss;
        slot.1 += 1;
    }

    let beta = model.hyper.beta;
    model.theta = model.optimizer.step(&model.theta, &total, beta)?;
    if !model.theta.is_finite() {
        return Err(Error::NonFinite("meta parameters".into()));
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let n = time.1 + reference.1;
    model.log.push(LossRecord {
        iteration: model.log.len(),
        mean_outer_loss: if n > 0 { (time.0 + reference.0) / n as f64 } else { 0.0 },
        time_loss: mean(time),
        reference_loss: mean(reference),
    });
    Ok(())
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub(crate) fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tasks used for meta-training after reference exclusions.
pub fn training_tasks(hyper: &TamlHyper, cohort: &Cohort, windows: &TimeWindows) -> Vec<TaskSpec> {
    decompose(windows, cohort.n_ref())
        .into_iter()
        .filter(|t| match t {
            TaskSpec::Reference(i) => !hyper.excluded_refs.contains(i),
            TaskSpec::TimeAssociated(_) => true,
        })
        .collect()
}

/// `hyper` with the `k` reference tasks of lowest mutual information with
/// the event (on `cohort`) added to the exclusions.
pub fn exclude_low_mi(hyper: &TamlHyper, cohort: &Cohort, windows: &TimeWindows, k: usize) -> TamlHyper {
    let mut h = hyper.clone();
    let ranked = crate::tasking::rank_reference_tasks_mi(cohort, windows);
    let keep = ranked.len().saturating_sub(k);
    h.excluded_refs.extend(ranked[keep..].iter().map(|&(i, _)| i));
    h.excluded_refs.sort_unstable();
    h.excluded_refs.dedup();
    h
}

/// Samples the episodes of outer iteration `iteration`: a uniform draw of
/// distinct tasks, each with its own episode seed.
pub fn sample_batch(
    hyper: &TamlHyper,
    cohort: &Cohort,
    windows: &TimeWindows,
    tasks: &[TaskSpec],
    iteration: usize,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, 1, iteration as u64));
    let k = hyper.tasks_per_batch.min(tasks.len());
    let mut picked = index::sample(&mut rng, tasks.len(), k).into_vec();
    picked.sort_unstable();
    let cfg = hyper.episode_config();
    picked
        .iter()
        .map(|&t| {
            let seed = derive_seed(hyper.seed, 2 + t as u64, iteration as u64);
            sample_episode(cohort, windows, tasks[t], &cfg, seed)
        })
        .collect()
}

/// Runs `n_iterations` outer updates with freshly sampled episodes.
pub fn meta_train(
    model: &mut MetaModel,
    cohort: &Cohort,
    windows: &TimeWindows,
    n_iterations: usize,
) -> Result<()> {
    if cohort.n_features() != model.theta.config().input_dim {
        return Err(Error::Dimension {
            what: "cohort features",
            expected: model.theta.config().input_dim,
            found: cohort.n_features(),
        });
    }
    let tasks = training_tasks(&model.hyper, cohort, windows);
    if !tasks.iter().any(TaskSpec::is_time_associated) {
        return Err(Error::Config("no time-associated tasks to train on".into()));
    }
    for _ in 0..n_iterations {
        let iteration = model.log.len();
        let episodes = sample_batch(&model.hyper, cohort, windows, &tasks, iteration)?;
        meta_train_step(model, cohort, &episodes)?;
    }
    Ok(())
}

/// Builds a fresh model and meta-trains it for `hyper.outer_iterations`.
pub fn train(hyper: &TamlHyper, cohort: &Cohort, windows: &TimeWindows) -> Result<MetaModel> {
    let mut model = MetaModel::new(cohort.n_features(), hyper.clone())?;
    meta_train(&mut model, cohort, windows, hyper.outer_iterations)?;
    Ok(model)
}

/// Labels and weights of every eligible record of window `j`, using
/// persistence labels when `tiss` is set.
pub fn window_training_set(
    cohort: &Cohort,
    windows: &TimeWindows,
    j: usize,
    hyper: &TamlHyper,
    tiss: bool,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for (i, r) in cohort.records().iter().enumerate() {
        let Some(sit) = classify_situation(r, windows, j, hyper.pseudo_duration_hours).situation()
        else {
            continue;
        };
        let (y, w) = if tiss {
            let t = tiss_label(sit, hyper.rho);
            let w = if hyper.use_situation_weights { t.weight } else { 1.0 };
            (t.y, w)
        } else {
            (sit == Situation::S1, 1.0)
        };
        idx.push(i);
        labels.push(if y { 1.0 } else { 0.0 });
        weights.push(w);
    }
    (idx, labels, weights)
}

/// Full-batch Adam on a fixed labeled set, starting from `init`.
pub(crate) fn fit_full_batch(
    init: &MlpParams,
    x: &Tensor,
    labels: &[f64],
    weights: &[f64],
    steps: usize,
    lr: f64,
) -> Result<MlpParams> {
    let mut params = init.clone();
    let mut adam = Adam::new(&params);
    for _ in 0..steps {
        let mut graph = Graph::new();
        let ids = params.to_graph(&mut graph)?;
        let xn = graph.constant(x.clone())?;
        let probs = model::prob_node(&mut graph, params.config(), &ids, xn, 0)?;
        let loss = model::bce_node(&mut graph, probs, labels, weights)?;
        let grads = graph.grad(loss, &ids)?;
        params = adam.step(&params, &grads, lr)?;
    }
    Ok(params)
}

/// Adapts the meta-initialization to window `j` on the training cohort.
pub fn meta_test_finetune(
    model: &MetaModel,
    cohort: &Cohort,
    windows: &TimeWindows,
    j: usize,
    steps: usize,
    lr: f64,
) -> Result<MlpParams> {
    if j >= windows.n_windows() {
        return Err(Error::Config(format!(
            "window {j} out of range for {} windows",
            windows.n_windows()
        )));
    }
    let (idx, labels, weights) =
        window_training_set(cohort, windows, j, &model.hyper, model.hyper.use_tiss_test);
    if !labels.iter().any(|&y| y > 0.5) {
        return Err(Error::NoPositives(TaskSpec::TimeAssociated(j).to_string()));
    }
    if steps == 0 {
        return Ok(model.theta.clone());
    }
    fit_full_batch(&model.theta, &cohort.feature_matrix(&idx), &labels, &weights, steps, lr)
}
