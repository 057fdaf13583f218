use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::{score_row, window_test_set, MetricRow, MetricsReport};
use crate::baselines::{finetune_all_windows, train_baseline, BaselineConfig, BaselineKind, WindowScorer};
use crate::cohort::{split, Cohort};
use crate::error::{Error, Result};
use crate::meta::{self, TamlHyper};
use crate::tasking::TimeWindows;

/// Everything an experiment shares across the models it compares.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub windows: TimeWindows,
    pub hyper: TamlHyper,
    pub baseline: BaselineConfig,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub threshold: f64,
}

impl Plan {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.baseline.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    /// The meta-learner under `hyper`, optionally leaving out the `drop_low_mi`
    /// reference tasks least informative about the event.
    Taml {
        name: String,
        hyper: TamlHyper,
        drop_low_mi: usize,
    },
    Baseline(BaselineKind),
}

impl ModelSpec {
    pub fn taml(name: &str, hyper: TamlHyper) -> Self {
        ModelSpec::Taml {
            name: name.to_string(),
            hyper,
            drop_low_mi: 0,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Taml { name, .. } => name,
            ModelSpec::Baseline(k) => k.display_name(),
        }
    }
}

/// Trains one model on `train` under `seed`.
pub fn train_model(
    spec: &ModelSpec,
    plan: &Plan,
    train: &Cohort,
    windows: &TimeWindows,
    seed: u64,
) -> Result<Box<dyn WindowScorer>> {
    let hyper = TamlHyper {
        seed,
        ..plan.hyper.clone()
    };
    match spec {
        ModelSpec::Taml {
            hyper: h,
            drop_low_mi,
            ..
        } => {
            let h = meta::exclude_low_mi(&TamlHyper { seed, ..h.clone() }, train, windows, *drop_low_mi);
            let model = meta::train(&h, train, windows)?;
            Ok(Box::new(finetune_all_windows(&model, train, windows)?))
        }
        ModelSpec::Baseline(kind) => {
            let cfg = BaselineConfig {
                seed,
                ..plan.baseline.with_kind(*kind)
            };
            train_baseline(train, windows, &cfg, &hyper)
        }
    }
}

/// Scores every window of `test` with a trained model.
pub fn evaluate_scorer(
    scorer: &dyn WindowScorer,
    name: &str,
    test: &Cohort,
    windows: &TimeWindows,
    seed: u64,
    threshold: f64,
) -> Result<Vec<MetricRow>> {
    (0..windows.n_windows())
        .map(|j| {
            let (idx, labels) = window_test_set(test, windows, j);
            let scores = scorer.window_scores(&test.feature_matrix(&idx), j)?;
            score_row(name, &windows.label(j), &scores, &labels, seed, threshold)
        })
        .collect()
}

/// Trains and evaluates every model under every seed. Each seed has its
/// own stratified split shared by all models. Rows are ordered by model,
/// then seed, then window, whatever the scheduling.
pub fn run_models(cohort: &Cohort, plan: &Plan, models: &[ModelSpec]) -> Result<MetricsReport> {
    plan.validate()?;
    let splits: Vec<(Cohort, Cohort)> = plan
        .seeds
        .iter()
        .map(|&seed| split(cohort, plan.test_fraction, seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..plan.seeds.len()).map(move |s| (m, s)))
        .collect();
    let results: Vec<Result<Vec<MetricRow>>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let seed = plan.seeds[s];
            let (train, test) = &splits[s];
            let scorer = train_model(&models[m], plan, train, &plan.windows, seed)?;
            evaluate_scorer(scorer.as_ref(), models[m].name(), test, &plan.windows, seed, plan.threshold)
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    MetricsReport::new(rows)
}

/// The meta-learner followed by the listed baselines.
pub fn run_comparison(cohort: &Cohort, plan: &Plan, baselines: &[BaselineKind]) -> Result<MetricsReport> {
    let mut models = vec![ModelSpec::taml("TAML", plan.hyper.clone())];
    models.extend(baselines.iter().map(|&k| ModelSpec::Baseline(k)));
    run_models(cohort, plan, &models)
}

pub const ABLATION_NAMES: [&str; 6] = [
    "TAML",
    "TAML w/o TISS",
    "TAML w/o weight",
    "TAML w/o TISS train",
    "TAML w/o unrelated",
    "MAML",
];

/// Full model, four ablated variants, and plain MAML on shared seeds and
/// splits. "w/o unrelated" leaves out the `drop_low_mi` reference tasks
/// with the lowest mutual information with the event.
pub fn run_ablation_suite(cohort: &Cohort, plan: &Plan, drop_low_mi: usize) -> Result<MetricsReport> {
    let h = &plan.hyper;
    let models = vec![
        ModelSpec::taml(ABLATION_NAMES[0], h.clone()),
        ModelSpec::taml(
            ABLATION_NAMES[1],
            TamlHyper {
                use_tiss_train: false,
                use_tiss_test: false,
                ..h.clone()
            },
        ),
        ModelSpec::taml(
            ABLATION_NAMES[2],
            TamlHyper {
                weight_ratio: 1.0,
                use_task_weights: false,
                ..h.clone()
            },
        ),
        ModelSpec::taml(
            ABLATION_NAMES[3],
            TamlHyper {
                use_tiss_train: false,
                ..h.clone()
            },
        ),
        ModelSpec::Taml {
            name: ABLATION_NAMES[4].to_string(),
            hyper: h.clone(),
            drop_low_mi,
        },
        ModelSpec::Baseline(BaselineKind::Maml),
    ];
    run_models(cohort, plan, &models)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    SupportSize,
    Rho,
    /// Fraction of the cohort used for training.
    SplitFraction,
    /// Width of every window, in the window unit.
    WindowWidth,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::SupportSize,
        SweepAxis::Rho,
        SweepAxis::SplitFraction,
        SweepAxis::WindowWidth,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::SupportSize => "support_size",
            SweepAxis::Rho => "rho",
            SweepAxis::SplitFraction => "split_fraction",
            SweepAxis::WindowWidth => "window_width",
        }
    }

    /// The plan for one sweep point.
    pub fn apply(self, plan: &Plan, value: f64) -> Result<Plan> {
        let mut p = plan.clone();
        match self {
            SweepAxis::SupportSize => {
                if !(value >= 1.0) || value.fract() != 0.0 {
                    return Err(Error::Config(format!("support size must be a positive integer, got {value}")));
                }
                p.hyper.support_size = value as usize;
            }
            SweepAxis::Rho => p.hyper.rho = value,
            SweepAxis::SplitFraction => p.test_fraction = 1.0 - value,
            SweepAxis::WindowWidth => p.windows = plan.windows.with_width(value)?,
        }
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.key() == s.trim()).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|a| a.key()).collect();
            Error::Config(format!("unknown sweep axis {s:?}; expected one of {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub window: String,
    pub auroc: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Model names carry the sweep point, e.g. `TAML rho=1.2`.
    pub report: MetricsReport,
    /// Seed-averaged metrics per window index, one point per value.
    pub series: Vec<Vec<SeriesPoint>>,
}

impl SweepReport {
    /// Writes one `series_<axis>_window<j>.csv` file per window and returns
    /// the paths.
    pub fn write_series(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (j, points) in self.series.iter().enumerate() {
            let path = dir.join(format!("series_{}_window{j}.csv", self.axis));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(f, "x,window,auroc,recall")?;
            for p in points {
                writeln!(f, "{:?},{},{:?},{:?}", p.x, p.window, p.auroc, p.recall)?;
            }
            f.flush()?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// One full train and evaluation of the meta-learner per value of `axis`.
pub fn run_sensitivity_sweep(
    cohort: &Cohort,
    plan: &Plan,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let plans: Vec<Plan> = values.iter().map(|&v| axis.apply(plan, v)).collect::<Result<_>>()?;
    let reports: Vec<Result<MetricsReport>> = plans
        .par_iter()
        .zip(values)
        .map(|(p, v)| {
            let name = format!("TAML {axis}={v}");
            run_models(cohort, p, &[ModelSpec::taml(&name, p.hyper.clone())])
        })
        .collect();

    let n_windows = plan.windows.n_windows();
    let mut report = MetricsReport::default();
    let mut series = vec![Vec::with_capacity(values.len()); n_windows];
    for ((r, &v), p) in reports.into_iter().zip(values).zip(&plans) {
        let r = r?;
        let name = format!("TAML {axis}={v}");
        for (j, s) in series.iter_mut().enumerate() {
            let window = p.windows.label(j);
            let (auroc, recall) = r.mean(&name, &window).expect("every window evaluated");
            s.push(SeriesPoint {
                x: v,
                window,
                auroc,
                recall,
            });
        }
        report.extend(r);
    }
    Ok(SweepReport {
        axis,
        values: values.to_vec(),
        report,
        series,
    })
}
