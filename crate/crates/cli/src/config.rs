//! Run configuration: TOML with `include` defaults, deep-merged so that the
//! including file wins.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use taml::baselines::{BaselineConfig, BaselineKind};
use taml::cohort::{generate_synthetic, load_csv, Cohort, SynthSpec};
use taml::eval::Plan;
use taml::meta::TamlHyper;
use taml::tasking::TimeWindows;
use toml::Table;

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

impl CohortSource {
    pub fn load(&self) -> Result<Cohort> {
        match (&self.csv, &self.synthetic) {
            (Some(path), None) => {
                load_csv(path).with_context(|| format!("loading cohort {}", path.display()))
            }
            (None, Some(spec)) => Ok(generate_synthetic(spec)?),
            _ => bail!("cohort needs exactly one of `csv` or `synthetic`"),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_threshold() -> f64 {
    taml::eval::DEFAULT_THRESHOLD
}

fn default_baselines() -> Vec<BaselineKind> {
    BaselineKind::ALL.to_vec()
}

fn default_ablation_drop_low_mi() -> usize {
    4
}

/// Fully resolved experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Window boundaries with a unit suffix, e.g. `"0,7,19,31,91d"`.
    pub windows: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineKind>,
    /// Reference tasks of lowest mutual information left out of training.
    #[serde(default)]
    pub drop_low_mi: usize,
    /// Tasks left out by the "w/o unrelated" ablation.
    #[serde(default = "default_ablation_drop_low_mi")]
    pub ablation_drop_low_mi: usize,
    pub cohort: CohortSource,
    #[serde(default)]
    pub hyper: TamlHyper,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let table = load_table(path, 0)?;
        let mut cfg: RunConfig = table
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(csv) = &cfg.cohort.csv {
            if csv.is_relative() {
                cfg.cohort.csv = Some(base.join(csv));
            }
        }
        if let Some(out) = &cfg.out {
            if out.is_relative() {
                cfg.out = Some(base.join(out));
            }
        }
        Ok(cfg)
    }

    pub fn windows(&self) -> Result<TimeWindows> {
        Ok(self.windows.parse::<TimeWindows>()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.windows()?;
        self.plan()?.validate()?;
        Ok(())
    }

    pub fn plan(&self) -> Result<Plan> {
        Ok(Plan {
            windows: self.windows()?,
            hyper: self.hyper.clone(),
            baseline: self.baseline.clone(),
            seeds: self.seeds.clone(),
            test_fraction: self.test_fraction,
            threshold: self.threshold,
        })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set `out` in the config"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

pub fn load_table(path: &Path, depth: usize) -> Result<Table> {
    if depth > MAX_INCLUDE_DEPTH {
        bail!("includes nested deeper than {MAX_INCLUDE_DEPTH} at {}", path.display());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut table: Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => bail!("include entries must be paths, got {other}"),
            })
            .collect::<Result<_>>()?,
        Some(other) => bail!("include must be a path or a list of paths, got {other}"),
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&base.join(inc), depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

/// Deep merge: nested tables merge key by key, anything else in `over`
/// replaces the value in `base`.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
