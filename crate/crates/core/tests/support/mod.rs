//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taml::autodiff::{Graph, NodeId, Op, StepMode, Tensor};
use taml::cohort::{EventInterval, PatientRecord};
use taml::model::{self, init_params, Activation, MlpConfig, MlpParams};
use taml::tasking::{Situation, TimeWindows};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator, so entries whose true
/// value is near zero are judged on absolute error `floor * tol`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Batch {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push((0..d).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>());
    }
    let labels = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let weights = (0..n).map(|_| if rng.gen_bool(0.5) { 1.5 } else { 1.0 }).collect();
    Batch {
        x: Tensor::from_rows(&rows).unwrap(),
        labels,
        weights,
    }
}

/// A small full-depth network with random (non-zero) biases.
pub fn random_mlp(seed: u64, input_dim: usize) -> MlpParams {
    let cfg = MlpConfig::new(input_dim)
        .with_hidden([6, 5, 4])
        .with_activation(Activation::Tanh);
    let p = init_params(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|v| v + rng.gen_range(-0.2..0.2))
        .collect();
    MlpParams::unflatten(cfg, &flat).unwrap()
}

/// Weighted BCE of a full MLP evaluated without the graph engine's
/// gradients: forward values only.
pub fn mlp_loss(params: &MlpParams, batch: &Batch) -> f64 {
    let p = model::forward(params, &batch.x, 0).unwrap();
    model::weighted_bce(&p, &batch.labels, &batch.weights).unwrap()
}

pub fn engine_mlp_grad(params: &MlpParams, batch: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let ids = params.to_graph(&mut g).unwrap();
    let x = g.constant(batch.x.clone()).unwrap();
    let probs = model::prob_node(&mut g, params.config(), &ids, x, 0).unwrap();
    let loss = model::bce_node(&mut g, probs, &batch.labels, &batch.weights).unwrap();
    g.grad(loss, &ids)
        .unwrap()
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect()
}

/// A 2-4-1 network: `p = sigmoid(w2 . tanh(W1 x + b1) + b2)`, parameters
/// flattened as `[W1 (2x4 row-major), b1 (4), w2 (4), b2 (1)]`.
pub const NET241_LEN: usize = 8 + 4 + 4 + 1;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn net241_forward(theta: &[f64], x: &[f64]) -> ([f64; 4], f64) {
    let mut h = [0.0; 4];
    for (k, hk) in h.iter_mut().enumerate() {
        *hk = (theta[k] * x[0] + theta[4 + k] * x[1] + theta[8 + k]).tanh();
    }
    let z = (0..4).map(|k| theta[12 + k] * h[k]).sum::<f64>() + theta[16];
    (h, sigmoid(z))
}

/// Weighted BCE of the 2-4-1 network.
pub fn net241_loss(theta: &[f64], xs: &[[f64; 2]], y: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    xs.iter()
        .zip(y)
        .zip(w)
        .map(|((x, &y), &w)| {
            let (_, p) = net241_forward(theta, x);
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / total
}

/// Hand-derived backpropagation for the 2-4-1 network.
pub fn net241_grad(theta: &[f64], xs: &[[f64; 2]], y: &[f64], w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut g = vec![0.0; NET241_LEN];
    for ((x, &y), &w) in xs.iter().zip(y).zip(w) {
        let (h, p) = net241_forward(theta, x);
        let dz = w * (p - y) / total;
        for k in 0..4 {
            g[12 + k] += dz * h[k];
            let da = dz * theta[12 + k] * (1.0 - h[k] * h[k]);
            g[k] += da * x[0];
            g[4 + k] += da * x[1];
            g[8 + k] += da;
        }
        g[16] += dz;
    }
    g
}

pub struct Task241 {
    pub support_x: Vec<[f64; 2]>,
    pub support_y: Vec<f64>,
    pub support_w: Vec<f64>,
    pub query_x: Vec<[f64; 2]>,
    pub query_y: Vec<f64>,
    pub alpha: f64,
    pub task_weight: f64,
}

pub fn random_task241(rng: &mut ChaCha8Rng) -> (Vec<f64>, Task241) {
    let theta: Vec<f64> = (0..NET241_LEN).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mut pts = |n: usize| -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
            .collect()
    };
    let support_x = pts(6);
    let query_x = pts(8);
    let task = Task241 {
        support_y: (0..6).map(|i| (i % 2) as f64).collect(),
        support_w: (0..6).map(|i| if i < 3 { 1.5 } else { 1.0 }).collect(),
        query_y: (0..8).map(|i| ((i + 1) % 2) as f64).collect(),
        support_x,
        query_x,
        alpha: rng.gen_range(0.05..0.5),
        task_weight: if rng.gen_bool(0.5) { 1.3 } else { 1.0 },
    };
    (theta, task)
}

/// `w * L_query(theta - alpha * grad L_support(theta))`, with the inner
/// gradient from the hand-derived backpropagation.
pub fn net241_outer_objective(theta: &[f64], t: &Task241) -> f64 {
    let g = net241_grad(theta, &t.support_x, &t.support_y, &t.support_w);
    let adapted: Vec<f64> = theta.iter().zip(&g).map(|(p, g)| p - t.alpha * g).collect();
    let ones = vec![1.0; t.query_y.len()];
    t.task_weight * net241_loss(&adapted, &t.query_x, &t.query_y, &ones)
}

fn rows(xs: &[[f64; 2]]) -> Tensor {
    Tensor::from_rows(&xs.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn net241_graph_loss(g: &mut Graph, p: &[NodeId], xs: &[[f64; 2]], y: &[f64], w: &[f64]) -> NodeId {
    let x = g.constant(rows(xs)).unwrap();
    let h = g.forward_op(Op::MatMul, &[x, p[0]]).unwrap();
    let h = g.forward_op(Op::AddBias, &[h, p[1]]).unwrap();
    let h = g.forward_op(Op::Tanh, &[h]).unwrap();
    let z = g.forward_op(Op::MatMul, &[h, p[2]]).unwrap();
    let z = g.forward_op(Op::AddBias, &[z, p[3]]).unwrap();
    let z = g.forward_op(Op::Column(0), &[z]).unwrap();
    let prob = g.forward_op(Op::Sigmoid, &[z]).unwrap();
    model::bce_node(g, prob, y, w).unwrap()
}

/// Outer gradient from the graph engine, differentiating through the inner
/// step in `mode`.
pub fn engine_outer_grad(theta: &[f64], t: &Task241, mode: StepMode) -> Vec<f64> {
    let mut g = Graph::new();
    let tensors = [
        Tensor::new(vec![2, 4], theta[0..8].to_vec()).unwrap(),
        Tensor::vector(theta[8..12].to_vec()),
        Tensor::new(vec![4, 1], theta[12..16].to_vec()).unwrap(),
        Tensor::vector(theta[16..17].to_vec()),
    ];
    let ids: Vec<NodeId> = tensors.into_iter().map(|t| g.param(t).unwrap()).collect();
    let inner = net241_graph_loss(&mut g, &ids, &t.support_x, &t.support_y, &t.support_w);
    let ones = vec![1.0; t.query_y.len()];
    let weight = t.task_weight;
    let grads = g
        .grad_through_step(inner, &ids, t.alpha, mode, |g, adapted| {
            let l = net241_graph_loss(g, adapted, &t.query_x, &t.query_y, &ones);
            g.forward_op(Op::Scale(weight), &[l])
        })
        .unwrap();
    grads.into_iter().flat_map(Tensor::into_data).collect()
}

/// Situation by direct reading of the definitions, for cross-checking.
pub fn reference_situation(r: &PatientRecord, lo: f64, hi: f64, pseudo: f64) -> Option<Situation> {
    match r.event.start {
        Some(s) if s >= lo && s < hi => Some(Situation::S1),
        Some(s) if s < lo && s + r.event.duration.unwrap_or(pseudo) > lo => Some(Situation::S2),
        Some(_) => Some(Situation::S4),
        None if r.event.observed_until >= hi => Some(Situation::S3),
        None => None,
    }
}

/// Every combination of event start, duration, and censoring time over a
/// grid that straddles each boundary of `windows`.
pub fn geometry_grid(windows: &TimeWindows) -> Vec<PatientRecord> {
    let mut points = vec![0.0];
    for &b in windows.boundaries_hours() {
        points.extend([b - 1.0, b, b + 1.0]);
    }
    points.retain(|&p| p >= 0.0);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let horizon = *windows.boundaries_hours().last().unwrap();
    let durations = [None, Some(0.5), Some(1.0), Some(24.0), Some(200.0), Some(horizon * 2.0)];
    let mut out = Vec::new();
    let mut k = 0;
    let mut push = |event: EventInterval| {
        out.push(PatientRecord {
            id: format!("g{k}"),
            features: vec![],
            event,
            ref_labels: vec![],
        });
        k += 1;
    };
    for &s in &points {
        for &d in &durations {
            for &obs in &points {
                push(EventInterval {
                    start: Some(s),
                    duration: d,
                    observed_until: obs.max(s),
                });
            }
        }
    }
    for &obs in &points {
        push(EventInterval::none(obs));
    }
    out
}

/// O(n^2) pair count: `(concordant + ties / 2) / (n_pos * n_neg)`.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut concordant = 0u64;
    let mut ties = 0u64;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                concordant += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
    }
    (concordant as f64 + 0.5 * ties as f64) / pairs as f64
}

/// A small cohort with frequent events, fast enough for many outer
/// iterations.
pub fn small_cohort(seed: u64) -> (taml::cohort::Cohort, TimeWindows) {
    let mut s = taml::cohort::SynthSpec::benchmark(seed);
    s.n_patients = 600;
    s.n_features = 4;
    s.hazard_weights = vec![0.8, -0.5, 0.3, 0.0];
    s.event_base_rate = 0.4;
    (
        taml::cohort::generate_synthetic(&s).unwrap(),
        "0,7,19,31,91d".parse().unwrap(),
    )
}

pub fn small_hyper(seed: u64) -> taml::meta::TamlHyper {
    taml::meta::TamlHyper {
        hidden_dims: [6, 5, 4],
        tasks_per_batch: 4,
        support_size: 8,
        query_size: 10,
        outer_iterations: 200,
        seed,
        ..Default::default()
    }
}

/// TAML with every time-associated knob neutralized.
pub fn neutral_taml(seed: u64) -> taml::meta::TamlHyper {
    let h = small_hyper(seed);
    taml::meta::TamlHyper {
        weight_ratio: 1.0,
        rho: 1.0,
        alpha_r: Some(h.alpha_s),
        use_tiss_train: false,
        use_tiss_test: false,
        ..h
    }
}

/// Bitwise equality of the parameter trajectories and loss logs.
pub fn same_trajectory(a: &taml::meta::MetaModel, b: &taml::meta::MetaModel) -> bool {
    let bits = |m: &taml::meta::MetaModel| m.theta.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(a) == bits(b) && a.log_csv() == b.log_csv() && a.log.len() == b.log.len()
}

/// Rho of one with situation weights, against rho 1.5 without them.
pub fn uniform_weight_pair(seed: u64) -> (taml::meta::TamlHyper, taml::meta::TamlHyper) {
    let base = small_hyper(seed);
    let rho_one = taml::meta::TamlHyper { rho: 1.0, ..base.clone() };
    let unweighted = taml::meta::TamlHyper {
        rho: 1.5,
        use_situation_weights: false,
        ..base
    };
    (rho_one, unweighted)
}

/// A fast experiment plan over [`small_cohort`].
pub fn small_plan(seeds: Vec<u64>) -> taml::eval::Plan {
    taml::eval::Plan {
        windows: "0,7,19,31,91d".parse().unwrap(),
        hyper: taml::meta::TamlHyper {
            outer_iterations: 20,
            finetune_steps: 10,
            ..small_hyper(0)
        },
        baseline: taml::baselines::BaselineConfig {
            epochs: 2,
            hidden_dims: [6, 5, 4],
            pretrain_epochs: 1,
            finetune_epochs: 1,
            episodes: 10,
            embedding_dim: 4,
            ..Default::default()
        },
        seeds,
        test_fraction: 0.3,
        threshold: 0.5,
    }
}
