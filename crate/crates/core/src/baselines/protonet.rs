use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Op, Tensor};
use crate::cohort::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::meta::derive_seed;
use crate::model::{self, init_params, Adam, MlpConfig, MlpParams};
use crate::tasking::{TaskSpec, TimeWindows};

use super::{BaselineConfig, WindowScorer};

/// Class centroids in embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub centroids: Vec<Vec<f64>>,
}

impl PrototypeSet {
    /// Mean embedding of each class `0..n_classes`.
    pub fn from_embeddings(embeddings: &Tensor, classes: &[usize], n_classes: usize) -> Result<Self> {
        let (n, d) = embeddings.dims2().ok_or(Error::Dimension {
            what: "embedding rank",
            expected: 2,
            found: embeddings.rank(),
        })?;
        if classes.len() != n {
            return Err(Error::Dimension {
                what: "class labels",
                expected: n,
                found: classes.len(),
            });
        }
        let mut sums = vec![vec![0.0; d]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (i, &k) in classes.iter().enumerate() {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("class {k} has no examples for its prototype")));
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(Self { centroids })
    }

    /// Row-wise softmax over negative squared Euclidean distances.
    pub fn class_probabilities(&self, embeddings: &Tensor) -> Vec<Vec<f64>> {
        let (n, _) = embeddings.dims2().expect("matrix embeddings");
        (0..n)
            .map(|i| {
                let e = embeddings.row(i);
                let neg: Vec<f64> = self
                    .centroids
                    .iter()
                    .map(|c| -c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = neg.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }
}

/// Embedding network plus one prototype per window and one for "no event
/// within the horizon".
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNet {
    pub embedding: MlpParams,
    pub prototypes: PrototypeSet,
}

impl WindowScorer for ProtoNet {
    fn window_scores(&self, x: &Tensor, j: usize) -> Result<Vec<f64>> {
        if j + 1 >= self.prototypes.centroids.len() {
            return Err(Error::Config(format!("window {j} has no prototype")));
        }
        let emb = model::forward_logits(&self.embedding, x)?;
        Ok(self.prototypes.class_probabilities(&emb).into_iter().map(|p| p[j]).collect())
    }
}

/// Window of the event start, `J` for no event within the horizon, `None`
/// when censored before the horizon closes or the event precedes it.
fn class_of(r: &PatientRecord, windows: &TimeWindows) -> Option<usize> {
    let (lo, hi) = windows.horizon();
    match r.event.start {
        Some(s) if s < lo => None,
        Some(s) if s >= hi => Some(windows.n_windows()),
        Some(s) => (0..windows.n_windows()).find(|&j| {
            let (a, b) = windows.bounds(j);
            s >= a && s < b
        }),
        None if r.event.observed_until >= hi => Some(windows.n_windows()),
        None => None,
    }
}

/// Episode loss: cross-entropy of the softmax over negative squared
/// distances from each query embedding to the support-mean prototypes.
fn episode_loss(
    graph: &mut Graph,
    config: &MlpConfig,
    params: &[NodeId],
    x: Tensor,
    support_of: &[Vec<usize>],
    query_rows: &[(usize, usize)],
) -> Result<NodeId> {
    let n_rows = x.dims2().expect("matrix").0;
    let k = support_of.len();
    let nq = query_rows.len();
    let xn = graph.constant(x)?;
    let emb = model::logits_node(graph, config, params, xn)?;

    let mut avg = vec![0.0; k * n_rows];
    for (c, rows) in support_of.iter().enumerate() {
        for &r in rows {
            avg[c * n_rows + r] = 1.0 / rows.len() as f64;
        }
    }
    let mut pick = vec![0.0; nq * n_rows];
    let mut onehot = vec![0.0; nq * k];
    for (q, &(r, c)) in query_rows.iter().enumerate() {
        pick[q * n_rows + r] = 1.0;
        onehot[q * k + c] = -1.0 / nq as f64;
    }
    let avg = graph.constant(Tensor::new(vec![k, n_rows], avg)?)?;
    let pick = graph.constant(Tensor::new(vec![nq, n_rows], pick)?)?;
    let protos = graph.forward_op(Op::MatMul, &[avg, emb])?;
    let queries = graph.forward_op(Op::MatMul, &[pick, emb])?;

    let qq = graph.forward_op(Op::Mul, &[queries, queries])?;
    let qq = graph.forward_op(Op::SumCols, &[qq])?;
    let qq = graph.forward_op(Op::BroadcastCols(k), &[qq])?;
    let cc = graph.forward_op(Op::Mul, &[protos, protos])?;
    let cc = graph.forward_op(Op::SumCols, &[cc])?;
    let cc = graph.forward_op(Op::BroadcastRows(nq), &[cc])?;
    let pt = graph.forward_op(Op::Transpose, &[protos])?;
    let cross = graph.forward_op(Op::MatMul, &[queries, pt])?;
    let cross = graph.forward_op(Op::Scale(2.0), &[cross])?;
    let logits = graph.forward_op(Op::Sub, &[cross, qq])?;
    let logits = graph.forward_op(Op::Sub, &[logits, cc])?;
    let logp = graph.forward_op(Op::LogSoftmaxRows, &[logits])?;
    let picked = graph.forward_op(Op::MulConst(Arc::new(Tensor::new(vec![nq, k], onehot)?)), &[logp])?;
    Ok(graph.forward_op(Op::Sum, &[picked])?)
}

/// Episodic training over `J + 1` classes, then prototypes from the class
/// means of the whole training cohort.
pub fn train_protonet(cohort: &Cohort, windows: &TimeWindows, cfg: &BaselineConfig) -> Result<ProtoNet> {
    cfg.validate()?;
    let n_classes = windows.n_windows() + 1;
    let mut members = vec![Vec::new(); n_classes];
    for (i, r) in cohort.records().iter().enumerate() {
        if let Some(k) = class_of(r, windows) {
            members[k].push(i);
        }
    }
    for (k, m) in members.iter().enumerate().take(windows.n_windows()) {
        if m.len() < 2 {
            return Err(Error::NoPositives(TaskSpec::TimeAssociated(k).to_string()));
        }
    }
    if members[n_classes - 1].len() < 2 {
        return Err(Error::Config("fewer than two records without an event in the horizon".into()));
    }

    let net = cfg
        .network(cohort.n_features())
        .with_heads(cfg.embedding_dim);
    let mut params = init_params(&net, derive_seed(cfg.seed, 50, 0))?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 51, 0));
    for _ in 0..cfg.episodes {
        let mut rows = Vec::new();
        let mut support_of = Vec::with_capacity(n_classes);
        let mut query_rows = Vec::new();
        for (c, m) in members.iter().enumerate() {
            let shots = cfg.shots.min(m.len() - 1);
            let queries = cfg.queries.min(m.len() - shots);
            let drawn: Vec<usize> = m.choose_multiple(&mut rng, shots + queries).copied().collect();
            let mut s = Vec::with_capacity(shots);
            for (t, &record) in drawn.iter().enumerate() {
                rows.push(record);
                if t < shots {
                    s.push(rows.len() - 1);
                } else {
                    query_rows.push((rows.len() - 1, c));
                }
            }
            support_of.push(s);
        }
        let mut graph = Graph::new();
        let ids = params.to_graph(&mut graph)?;
        let loss = episode_loss(&mut graph, &net, &ids, cohort.feature_matrix(&rows), &support_of, &query_rows)?;
        let grads = graph.grad(loss, &ids)?;
        params = adam.step(&params, &grads, cfg.lr)?;
    }

    let labeled: Vec<(usize, usize)> = members
        .iter()
        .enumerate()
        .flat_map(|(c, m)| m.iter().map(move |&i| (i, c)))
        .collect();
    let idx: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let classes: Vec<usize> = labeled.iter().map(|&(_, c)| c).collect();
    let emb = model::forward_logits(&params, &cohort.feature_matrix(&idx))?;
    let prototypes = PrototypeSet::from_embeddings(&emb, &classes, n_classes)?;
    Ok(ProtoNet {
        embedding: params,
        prototypes,
    })
}
