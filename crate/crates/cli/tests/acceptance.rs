//! Acceptance suite: one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;
use taml::autodiff::StepMode;
use taml::baselines::{run_maml_baseline, BaselineConfig, BaselineKind};
use taml::cohort::{generate_synthetic, Cohort, SynthSpec};
use taml::eval::{auroc, run_models, run_sensitivity_sweep, window_test_set, ModelSpec, Plan, SweepAxis};
use taml::meta::{self, TamlHyper};
use taml::model::MlpParams;
use taml::tasking::{classify_situation, original_label, tiss_label, Situation, TimeWindows, WindowStatus};

const FD_FIRST_ORDER_TOL: f64 = 1e-5;
const FD_SECOND_ORDER_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-8;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(60);
const REDUCTION_ITERATIONS: usize = 200;
const METRIC_INSTANCES: usize = 1000;
const METRIC_MAX_N: usize = 200;
const DNN_MARGIN: f64 = 0.02;
const UNRELATED_TOLERANCE: f64 = 0.02;
const RAREST_MAX_SHARE: f64 = 0.05;
const BENCHMARK_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn first_order_gradients() -> Outcome {
    let clock = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_mlp(seed, 5);
        let batch = random_batch(&mut rng, 8, 5);
        let engine = engine_mlp_grad(&params, &batch);
        let cfg = params.config().clone();
        let numeric = central_diff(&params.flatten(), |flat| {
            mlp_loss(&MlpParams::unflatten(cfg.clone(), flat).unwrap(), &batch)
        });
        for (a, n) in engine.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, FD_FLOOR));
        }
    }
    let elapsed = clock.elapsed();
    let detail = format!("max rel err {worst:.2e} over 100 seeds in {elapsed:.1?}");
    ensure(worst <= FD_FIRST_ORDER_TOL && elapsed < ORACLE_TIME_LIMIT, &detail)?;
    Ok(detail)
}

fn second_order_gradients() -> Outcome {
    let clock = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (theta, task) = random_task241(&mut rng);
        let engine = engine_outer_grad(&theta, &task, StepMode::Exact);
        let numeric = central_diff(&theta, |t| net241_outer_objective(t, &task));
        for (a, n) in engine.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, FD_FLOOR));
        }
    }
    let elapsed = clock.elapsed();
    let detail = format!("max rel err {worst:.2e} over 20 seeds in {elapsed:.1?}");
    ensure(worst <= FD_SECOND_ORDER_TOL && elapsed < ORACLE_TIME_LIMIT, &detail)?;
    Ok(detail)
}

fn reduction_to_maml() -> Outcome {
    let (c, w) = small_cohort(21);
    for seed in [0, 1, 2] {
        let h = TamlHyper {
            outer_iterations: REDUCTION_ITERATIONS,
            ..neutral_taml(seed)
        };
        let taml = meta::train(&h, &c, &w).map_err(|e| e.to_string())?;
        let maml = run_maml_baseline(&c, &w, &h).map_err(|e| e.to_string())?;
        ensure(taml.log.len() == REDUCTION_ITERATIONS, "short trajectory")?;
        ensure(same_trajectory(&taml, &maml), format!("trajectories diverge for seed {seed}"))?;
    }
    Ok(format!("bit-identical over {REDUCTION_ITERATIONS} iterations for 3 seeds"))
}

fn tiss_correctness() -> Outcome {
    let w: TimeWindows = "0,7,19,31,91d".parse().unwrap();
    let rho = 1.5;
    let expected = [
        (Situation::S1, true, rho),
        (Situation::S2, true, 1.0),
        (Situation::S3, false, rho),
        (Situation::S4, false, 1.0),
    ];
    for (s, y, wt) in expected {
        let l = tiss_label(s, rho);
        ensure((l.y, l.weight) == (y, wt), format!("{s:?} gives ({}, {})", l.y, l.weight))?;
    }

    let grid = geometry_grid(&w);
    let mut cases = 0;
    for r in &grid {
        for j in 0..w.n_windows() {
            let (lo, hi) = w.bounds(j);
            let got = classify_situation(r, &w, j, 240.0);
            let want = match reference_situation(r, lo, hi, 240.0) {
                Some(s) => WindowStatus::Known(s),
                None => WindowStatus::Censored,
            };
            ensure(got == want, format!("{:?} in window {j}: {got:?} vs {want:?}", r.event))?;
            cases += 1;
        }
    }

    let horizon = w.horizon().1;
    let mut pairs = 0;
    for seed in 0..5 {
        let mut spec = SynthSpec::benchmark(seed);
        spec.n_patients = 1000;
        spec.mean_duration_hours = if seed % 2 == 0 { Some(240.0) } else { None };
        let c = generate_synthetic(&spec).map_err(|e| e.to_string())?;
        for r in c.records() {
            for j in 0..w.n_windows() {
                if let Some(s) = classify_situation(r, &w, j, 336.0).situation() {
                    let original = original_label(r, &w, j) == Some(true);
                    ensure(!original || tiss_label(s, rho).y, format!("lost positive {}", r.id))?;
                }
                if spec.mean_duration_hours.is_some() {
                    continue;
                }
                if let Some(s) = classify_situation(r, &w, j, horizon).situation() {
                    let cumulative = r.event.start.is_some_and(|t| t < w.bounds(j).1);
                    ensure(tiss_label(s, rho).y == cumulative, format!("not cumulative: {}", r.id))?;
                    pairs += 1;
                }
            }
        }
    }
    Ok(format!("{cases} geometries, {pairs} cumulative pairs"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    while done < METRIC_INSTANCES {
        let n = rng.gen_range(2..=METRIC_MAX_N);
        let levels = rng.gen_range(2..50u32);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let pos = labels.iter().filter(|&&y| y).count();
        if pos == 0 || pos == n {
            continue;
        }
        let a = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let b = brute_auroc(&scores, &labels);
        ensure(a == b, format!("instance {done}: {a} vs {b}"))?;
        done += 1;
    }
    let worked = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    ensure(worked == 0.75, format!("worked example gives {worked}"))?;
    Ok(format!("{METRIC_INSTANCES} instances exact, worked example 0.75"))
}

struct Benchmark {
    cohort: Cohort,
    plan: Plan,
    rarest: String,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_benchmark() -> Result<Benchmark, String> {
    let path = workspace_root().join("configs/benchmark.toml");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let get = |k: &str| table.get(k).cloned().ok_or(format!("benchmark config lacks {k}"));
    let spec: SynthSpec = get("cohort")?
        .get("synthetic")
        .cloned()
        .ok_or("benchmark config lacks cohort.synthetic")?
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())?;
    let windows: TimeWindows = get("windows")?
        .as_str()
        .ok_or("windows must be a string")?
        .parse()
        .map_err(|e: taml::Error| e.to_string())?;
    let seeds: Vec<u64> = get("seeds")?.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    let test_fraction = get("test_fraction")?.as_float().ok_or("test_fraction must be a float")?;
    let hyper: TamlHyper = match table.get("hyper") {
        Some(h) => h.clone().try_into().map_err(|e: toml::de::Error| e.to_string())?,
        None => TamlHyper::default(),
    };
    let baseline: BaselineConfig = match table.get("baseline") {
        Some(b) => b.clone().try_into().map_err(|e: toml::de::Error| e.to_string())?,
        None => BaselineConfig::default(),
    };

    let cohort = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let (n_related, n_unrelated) = (spec.ref_correlations.len(), spec.n_unrelated_ref_tasks);
    ensure(
        cohort.len() == 5000 && cohort.n_features() == 20 && windows.n_windows() == 4,
        "benchmark cohort shape",
    )?;
    ensure(n_related == 8 && n_unrelated == 4 && cohort.n_ref() == 12, "benchmark reference tasks")?;
    ensure(seeds.len() == 5, "benchmark needs 5 seeds")?;
    let shares: Vec<f64> = (0..windows.n_windows())
        .map(|j| {
            let (_, y) = window_test_set(&cohort, &windows, j);
            y.iter().filter(|&&v| v).count() as f64 / y.len() as f64
        })
        .collect();
    let j = (0..shares.len()).min_by(|&a, &b| shares[a].total_cmp(&shares[b])).unwrap();
    ensure(
        shares[j] <= RAREST_MAX_SHARE,
        format!("rarest window has {:.2}% positives", 100.0 * shares[j]),
    )?;
    Ok(Benchmark {
        cohort,
        plan: Plan {
            windows: windows.clone(),
            hyper,
            baseline,
            seeds,
            test_fraction,
            threshold: 0.5,
        },
        rarest: windows.label(j),
    })
}

/// Criteria on the benchmark cohort: model comparison, then ablations.
fn benchmark_criteria() -> (Outcome, Outcome) {
    let bench = match load_benchmark() {
        Ok(b) => b,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let h = bench.plan.hyper.clone();
    let models = vec![
        ModelSpec::taml("TAML", h.clone()),
        ModelSpec::Baseline(BaselineKind::Maml),
        ModelSpec::Baseline(BaselineKind::DnnPerWindow),
        ModelSpec::taml(
            "TAML w/o TISS",
            TamlHyper {
                use_tiss_train: false,
                use_tiss_test: false,
                ..h.clone()
            },
        ),
        ModelSpec::taml(
            "TAML w/o weight",
            TamlHyper {
                weight_ratio: 1.0,
                use_task_weights: false,
                ..h.clone()
            },
        ),
        ModelSpec::Taml {
            name: "TAML w/o unrelated".into(),
            hyper: h,
            drop_low_mi: 4,
        },
    ];
    let clock = Instant::now();
    let report = match run_models(&bench.cohort, &bench.plan, &models) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let elapsed = clock.elapsed();
    print!("{}", report.table());
    let w = bench.rarest.as_str();
    let mean = |m: &str| report.mean_auroc(m, w).unwrap_or(f64::NAN);
    let (taml, maml, dnn) = (mean("TAML"), mean("MAML"), mean("DNN"));
    let comparison = format!(
        "window {w}: TAML {taml:.4}, MAML {maml:.4}, DNN {dnn:.4}; {:.1} min for all benchmark models",
        elapsed.as_secs_f64() / 60.0
    );
    let c6 = if taml >= maml && taml >= dnn + DNN_MARGIN && elapsed <= BENCHMARK_TIME_LIMIT {
        Ok(comparison)
    } else {
        Err(comparison)
    };
    let (no_tiss, no_weight, no_unrelated) =
        (mean("TAML w/o TISS"), mean("TAML w/o weight"), mean("TAML w/o unrelated"));
    let ablation = format!(
        "window {w}: TAML {taml:.4}, w/o TISS {no_tiss:.4}, w/o weight {no_weight:.4}, w/o unrelated {no_unrelated:.4}"
    );
    let c7 = if taml >= no_tiss && taml >= no_weight && (no_unrelated - taml).abs() <= UNRELATED_TOLERANCE {
        Ok(ablation)
    } else {
        Err(ablation)
    };
    (c6, c7)
}

fn sweep_harness() -> Outcome {
    let (c, w) = small_cohort(33);
    let plan = small_plan(vec![0, 1]);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (axis, values) in [
        (SweepAxis::SupportSize, vec![5.0, 10.0, 15.0, 20.0]),
        (SweepAxis::Rho, vec![1.0, 1.25, 1.5, 2.0]),
    ] {
        let sweep = run_sensitivity_sweep(&c, &plan, axis, &values).map_err(|e| e.to_string())?;
        let paths = sweep.write_series(dir.path()).map_err(|e| e.to_string())?;
        ensure(paths.len() == w.n_windows(), format!("{axis}: {} series files", paths.len()))?;
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| e.to_string())?;
            let xs: Vec<f64> = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').next().unwrap_or("").parse().unwrap_or(f64::NAN))
                .collect();
            ensure(xs == values, format!("{} incomplete", p.display()))?;
        }
    }
    let (rho_one, unweighted) = uniform_weight_pair(4);
    let a = meta::train(&rho_one, &c, &w).map_err(|e| e.to_string())?;
    let b = meta::train(&unweighted, &c, &w).map_err(|e| e.to_string())?;
    ensure(same_trajectory(&a, &b), "rho = 1 differs from uniform support weights")?;
    Ok(format!(
        "support and rho series complete for {} windows; rho = 1 trajectory equal over {} iterations",
        w.n_windows(),
        a.log.len()
    ))
}

fn taml_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_taml"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        "windows = \"0,7,19,31,91d\"\nseeds = [0, 1]\n\n[hyper]\nhidden_dims = [16, 16, 8]\nouter_iterations = 40\nfinetune_steps = 10\n\n\
         [cohort.synthetic]\nn_patients = 800\nn_features = 6\nhorizon_hours = 2184.0\nevent_base_rate = 0.3\n\
         hazard_weights = [0.8, -0.5, 0.3, 0.2, 0.0, 0.0]\nn_ref_tasks = 4\nref_correlations = [0.8, 0.6, 0.4]\n\
         n_unrelated_ref_tasks = 1\nref_prevalence = 0.2\ncensor_rate = 0.05\nseed = 11\n",
    )
    .map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        taml_bin(&["train", "--config", &s(&cfg), "--out", &s(&out)])?;
        taml_bin(&[
            "evaluate",
            "--config",
            &s(&cfg),
            "--out",
            &s(&out.join("eval")),
            "--checkpoint",
            &s(&out.join("checkpoint.txt")),
        ])?;
        runs.push(out);
    }
    let files = ["checkpoint.txt", "loss.csv", "eval/metrics.csv", "eval/metrics.txt"];
    for f in files {
        let a = fs::read(runs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(runs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn run(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "first-order gradient oracle", run(first_order_gradients)),
        (2, "second-order gradient oracle", run(second_order_gradients)),
        (3, "reduction to MAML", run(reduction_to_maml)),
        (4, "persistence relabeling", run(tiss_correctness)),
        (5, "AUROC oracle", run(metric_oracle)),
    ];
    let (c6, c7) = catch_unwind(benchmark_criteria).unwrap_or_else(|_| {
        let e = Err("benchmark panicked".to_string());
        (e.clone(), e)
    });
    results.push((6, "synthetic benchmark ordering", c6));
    results.push((7, "ablation ordering", c7));
    results.push((8, "sweep harness", run(sweep_harness)));
    results.push((9, "CLI determinism", run(cli_determinism)));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS {id} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
