use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use taml::baselines::{finetune_all_windows, BaselineKind};
use taml::cohort::{load_csv, split, write_csv, Cohort, SynthSpec};
use taml::eval::{
    evaluate, evaluate_scorer, run_ablation_suite, run_comparison, run_models, run_sensitivity_sweep,
    window_test_set, MetricsReport, ModelSpec, SweepAxis,
};
use taml::meta::{self, exclude_low_mi, MetaModel, TamlHyper};
use taml::model::{read_checkpoint, write_checkpoint};
use taml::tasking::TimeWindows;

use crate::config::{load_table, RunConfig};
use crate::RunArgs;

const DEFAULT_SUPPORT_SIZES: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

/// Loads the config and applies command-line overrides.
pub fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(out) = &run.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = run.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = &run.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(w) = &run.windows {
        cfg.windows = w.clone();
    }
    if run.first_order {
        cfg.hyper.first_order = true;
    }
    if run.no_tiss_train {
        cfg.hyper.use_tiss_train = false;
    }
    if run.no_tiss_test {
        cfg.hyper.use_tiss_test = false;
    }
    if run.no_task_weights {
        cfg.hyper.use_task_weights = false;
    }
    if let Some(k) = run.drop_low_mi {
        cfg.drop_low_mi = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write(&dir.join(format!("{stem}.csv")), report.to_csv_string())?;
    let table = report.table();
    write(&dir.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn prevalence_summary(cohort: &Cohort, windows: Option<&TimeWindows>) -> String {
    let n = cohort.len();
    let pct = |k: usize| 100.0 * k as f64 / n.max(1) as f64;
    let events = cohort.records().iter().filter(|r| r.event.start.is_some()).count();
    let mut out = format!("patients: {n}\nevents: {events} ({:.2}%)\n", pct(events));
    for (i, name) in cohort.ref_task_names().iter().enumerate() {
        let k = cohort.records().iter().filter(|r| r.ref_labels[i]).count();
        out.push_str(&format!("ref {name}: {k} ({:.2}%)\n", pct(k)));
    }
    if let Some(w) = windows {
        for j in 0..w.n_windows() {
            let (_, labels) = window_test_set(cohort, w, j);
            let pos = labels.iter().filter(|&&y| y).count();
            let share = 100.0 * pos as f64 / labels.len().max(1) as f64;
            out.push_str(&format!(
                "window {}: {pos} of {} labeled ({share:.2}%)\n",
                w.label(j),
                labels.len()
            ));
        }
    }
    out
}

pub fn generate(spec_path: &Path, out: &Path, windows: Option<&str>) -> Result<()> {
    let windows = windows.map(str::parse::<TimeWindows>).transpose()?;
    let spec: SynthSpec = load_table(spec_path, 0)?
        .try_into()
        .with_context(|| format!("invalid generator spec {}", spec_path.display()))?;
    let cohort = taml::cohort::generate_synthetic(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&cohort, std::io::BufWriter::new(file))?;
    // the summary is recounted from the written file
    let written = load_csv(out)?;
    print!("{}", prevalence_summary(&written, windows.as_ref()));
    Ok(())
}

fn training_split(cfg: &RunConfig, cohort: &Cohort, seed: u64) -> Result<(Cohort, Cohort)> {
    Ok(split(cohort, cfg.test_fraction, seed)?)
}

fn seeded_hyper(cfg: &RunConfig, train: &Cohort, windows: &TimeWindows, seed: u64) -> TamlHyper {
    let h = TamlHyper {
        seed,
        ..cfg.hyper.clone()
    };
    exclude_low_mi(&h, train, windows, cfg.drop_low_mi)
}

pub fn train(run: &RunArgs) -> Result<()> {
    let cfg = resolve(run)?;
    let dir = prepare_out(&cfg)?;
    let windows = cfg.windows()?;
    let cohort = cfg.cohort.load()?;
    let seed = cfg.seeds[0];
    let (train, _) = training_split(&cfg, &cohort, seed)?;
    let hyper = seeded_hyper(&cfg, &train, &windows, seed);
    let model = meta::train(&hyper, &train, &windows)?;

    let mut ckpt = Vec::new();
    write_checkpoint(&model.theta, &mut ckpt)?;
    write(&dir.join("checkpoint.txt"), ckpt)?;
    write(&dir.join("loss.csv"), model.log_csv())?;
    let last = model.log.last().map(|r| r.mean_outer_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} outer iterations on {} records (seed {seed}); final mean outer loss {last:.5}",
        model.log.len(),
        train.len()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn parse_baselines(cfg: &RunConfig, arg: Option<Vec<String>>) -> Result<Vec<BaselineKind>> {
    match arg {
        None => Ok(Vec::new()),
        Some(list) if list.iter().all(|s| s.trim().is_empty()) => Ok(cfg.baselines.clone()),
        Some(list) => list
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| Ok(s.parse::<BaselineKind>()?))
            .collect(),
    }
}

pub fn evaluate_cmd(
    run: &RunArgs,
    checkpoint: Option<&Path>,
    window: Option<&str>,
    baselines: Option<Vec<String>>,
) -> Result<()> {
    let cfg = resolve(run)?;
    let windows = cfg.windows()?;
    let target = window.map(|w| windows.find(w)).transpose()?;
    let kinds = parse_baselines(&cfg, baselines)?;
    let dir = prepare_out(&cfg)?;
    let cohort = cfg.cohort.load()?;
    let plan = cfg.plan()?;

    let mut report = match checkpoint {
        Some(path) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let theta = read_checkpoint(BufReader::new(file))
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            if theta.config().input_dim != cohort.n_features() {
                bail!(
                    "checkpoint expects {} features, cohort has {}",
                    theta.config().input_dim,
                    cohort.n_features()
                );
            }
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let (train, test) = training_split(&cfg, &cohort, seed)?;
                let model = MetaModel::from_params(theta.clone(), seeded_hyper(&cfg, &train, &windows, seed));
                match target {
                    Some(j) => {
                        let p = meta::meta_test_finetune(
                            &model,
                            &train,
                            &windows,
                            j,
                            model.hyper.finetune_steps,
                            model.hyper.finetune_lr,
                        )?;
                        rows.push(evaluate(&p, &test, &windows, j, "TAML", seed, cfg.threshold)?);
                    }
                    None => {
                        let scorer = finetune_all_windows(&model, &train, &windows)?;
                        rows.extend(evaluate_scorer(&scorer, "TAML", &test, &windows, seed, cfg.threshold)?);
                    }
                }
            }
            let mut report = MetricsReport::new(rows)?;
            if !kinds.is_empty() {
                let specs: Vec<ModelSpec> = kinds.iter().map(|&k| ModelSpec::Baseline(k)).collect();
                report.extend(run_models(&cohort, &plan, &specs)?);
            }
            report
        }
        None if cfg.drop_low_mi > 0 => {
            let mut specs = vec![ModelSpec::Taml {
                name: "TAML".into(),
                hyper: cfg.hyper.clone(),
                drop_low_mi: cfg.drop_low_mi,
            }];
            specs.extend(kinds.iter().map(|&k| ModelSpec::Baseline(k)));
            run_models(&cohort, &plan, &specs)?
        }
        None => run_comparison(&cohort, &plan, &kinds)?,
    };
    if let Some(j) = target {
        let label = windows.label(j);
        report.rows.retain(|r| r.window == label);
    }
    write_report(dir, "metrics", &report)
}

pub fn ablate(run: &RunArgs) -> Result<()> {
    let mut cfg = resolve(run)?;
    if let Some(k) = run.drop_low_mi {
        // on this command the flag sizes the "w/o unrelated" variant
        cfg.drop_low_mi = 0;
        cfg.ablation_drop_low_mi = k;
    }
    let dir = prepare_out(&cfg)?;
    let cohort = cfg.cohort.load()?;
    let report = run_ablation_suite(&cohort, &cfg.plan()?, cfg.ablation_drop_low_mi)?;
    write_report(dir, "ablation", &report)
}

pub fn sweep(run: &RunArgs, axis: &str, values: Option<Vec<f64>>) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let values = match (values, axis) {
        (Some(v), _) => v,
        (None, SweepAxis::SupportSize) => DEFAULT_SUPPORT_SIZES.to_vec(),
        (None, _) => bail!("--values is required for the {axis} axis"),
    };
    let cfg = resolve(run)?;
    let dir = prepare_out(&cfg)?;
    let cohort = cfg.cohort.load()?;
    let sweep = run_sensitivity_sweep(&cohort, &cfg.plan()?, axis, &values)?;
    write_report(dir, &format!("sweep_{axis}"), &sweep.report)?;
    for p in sweep.write_series(dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
