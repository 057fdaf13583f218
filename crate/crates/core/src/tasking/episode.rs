use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{classify_situation, tiss_label, Situation, TaskSpec, TimeWindows, WindowStatus};
use crate::cohort::Cohort;
use crate::error::{Error, Result};

/// A labeled record reference inside an episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example {
    /// Position of the record in the cohort the episode was drawn from.
    pub index: usize,
    pub label: f64,
    pub weight: f64,
}

/// Support and query sets drawn from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskSpec,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    pub fn support_indices(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.index).collect()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.index).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub support_size: usize,
    pub query_size: usize,
    /// Augmentation ratio: weight of S1/S3 relative to S2/S4.
    pub rho: f64,
    pub pseudo_duration: f64,
    /// Label the support set of window tasks by situation.
    pub tiss: bool,
    /// When false, situation labels are kept but every weight is 1.
    pub situation_weights: bool,
}

/// `(support label, query label)` for every eligible record of `task`.
fn task_labels(
    cohort: &Cohort,
    windows: &TimeWindows,
    task: TaskSpec,
    cfg: &EpisodeConfig,
) -> Vec<(usize, Example, f64)> {
    let mut out = Vec::with_capacity(cohort.len());
    for (i, r) in cohort.records().iter().enumerate() {
        match task {
            TaskSpec::Reference(k) => {
                let y = if r.ref_labels[k] { 1.0 } else { 0.0 };
                out.push((i, Example { index: i, label: y, weight: 1.0 }, y));
            }
            TaskSpec::TimeAssociated(j) => {
                let WindowStatus::Known(sit) = classify_situation(r, windows, j, cfg.pseudo_duration)
                else {
                    continue;
                };
                let original = if sit == Situation::S1 { 1.0 } else { 0.0 };
                let support = if cfg.tiss {
                    let t = tiss_label(sit, cfg.rho);
                    Example {
                        index: i,
                        label: if t.y { 1.0 } else { 0.0 },
                        weight: if cfg.situation_weights { t.weight } else { 1.0 },
                    }
                } else {
                    Example { index: i, label: original, weight: 1.0 }
                };
                out.push((i, support, original));
            }
        }
    }
    out
}

/// Takes `size` items, half from `pos` where possible, topping up from the
/// other class when one runs short.
fn take_balanced<T: Copy>(pos: &[T], neg: &[T], size: usize) -> (Vec<T>, usize, usize) {
    let mut n_pos = size.div_ceil(2).min(pos.len());
    let n_neg = (size - n_pos).min(neg.len());
    n_pos = (size - n_neg).min(pos.len());
    let mut out = Vec::with_capacity(n_pos + n_neg);
    out.extend_from_slice(&pos[..n_pos]);
    out.extend_from_slice(&neg[..n_neg]);
    (out, n_pos, n_neg)
}

/// Draws a support set (persistence-labeled for window tasks when
/// `cfg.tiss`) and a disjoint query set (occurrence-labeled). Both sets are
/// class-balanced where the task allows.
pub fn sample_episode(
    cohort: &Cohort,
    windows: &TimeWindows,
    task: TaskSpec,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    if cfg.support_size == 0 || cfg.query_size == 0 {
        return Err(Error::Config("support and query sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = task_labels(cohort, windows, task, cfg);
    let needed = cfg.support_size + cfg.query_size;
    if labels.len() < needed {
        return Err(Error::NotEnoughRecords {
            task: task.to_string(),
            needed,
            available: labels.len(),
        });
    }

    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&k| labels[k].1.label > 0.5);
    if pos.is_empty() {
        return Err(Error::NoPositives(task.to_string()));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let (support_rows, n_pos, n_neg) = take_balanced(&pos, &neg, cfg.support_size);

    let (mut qpos, mut qneg): (Vec<usize>, Vec<usize>) = pos[n_pos..]
        .iter()
        .chain(&neg[n_neg..])
        .copied()
        .partition(|&k| labels[k].2 > 0.5);
    qpos.sort_unstable();
    qneg.sort_unstable();
    qpos.shuffle(&mut rng);
    qneg.shuffle(&mut rng);
    let (query_rows, _, _) = take_balanced(&qpos, &qneg, cfg.query_size);

    Ok(Episode {
        task,
        support: support_rows.iter().map(|&k| labels[k].1).collect(),
        query: query_rows
            .iter()
            .map(|&k| Example {
                index: labels[k].0,
                label: labels[k].2,
                weight: 1.0,
            })
            .collect(),
    })
}
