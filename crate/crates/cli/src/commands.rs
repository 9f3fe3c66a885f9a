use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use chrono::{SecondsFormat, Utc};
use fedldf_core::analysis::{self, BoundParams};
use fedldf_core::config::{Algorithm, ExperimentConfig};
use fedldf_core::engine::{run_simulation, ExperimentResult, Simulation};
use fedldf_core::report::{self, AlgorithmRuns, RunSummary};
use fedldf_core::trace;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::BoundArgs;

pub const THREADS_ENV: &str = "FEDLDF_THREADS";

/// `Input` maps to exit code 1, `Runtime` to 2.
pub enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

fn input(e: impl Display) -> Failure {
    Failure::Input(anyhow!("{e}"))
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(anyhow!("{e}"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(input(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_file(path).map_err(|e| input(format!("config {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

/// Writes every artifact of one finished run into `dir`.
fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
    started_at: String,
    quiet: bool,
) -> Result<RunSummary, Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut artifacts = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<(), Failure> {
        write(&dir.join(name), &contents)?;
        artifacts.push(name.to_string());
        Ok(())
    };

    emit("metrics.csv", report::metrics_csv(&result.metrics))?;
    let summary = RunSummary::from_metrics(&result.metrics, cfg.to_map())
        .ok_or_else(|| runtime("run produced no rounds"))?;
    emit("summary.json", to_json(&summary))?;
    if !result.traces.is_empty() {
        let lines: String = result
            .traces
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect();
        emit("trace.jsonl", lines)?;
        match analysis::bound_report(&result.traces) {
            Ok(rep) => emit("bound_report.json", to_json(&rep))?,
            Err(e) if !quiet => eprintln!("warning: no bound report for {}: {e}", dir.display()),
            Err(_) => {}
        }
    }
    let manifest = RunManifest {
        tool_version: format!("fedldf {}", env!("CARGO_PKG_VERSION")),
        started_at,
        finished_at: now(),
        config: cfg.to_map(),
        artifacts,
    };
    write(&dir.join("manifest.json"), &to_json(&manifest))?;
    Ok(summary)
}

fn describe(s: &RunSummary, dir: &Path) -> String {
    format!(
        "{} seed {}: {} rounds, final test error {:.4}, upload {} bytes -> {}",
        s.algorithm,
        s.seed,
        s.rounds,
        s.final_test_error,
        s.total_upload_bytes,
        dir.display()
    )
}

pub fn run(config: &Path, out: &Path, quiet: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let threads = thread_cap()?;
    let started = now();
    let mut sim = Simulation::new(cfg.clone()).map_err(runtime)?;
    if let Some(t) = threads {
        sim = sim.with_threads(t).map_err(runtime)?;
    }
    let result = run_simulation(sim).map_err(runtime)?;
    let summary = write_run(out, &cfg, &result, started, quiet)?;
    if !quiet {
        println!("{}", describe(&summary, out));
    }
    Ok(())
}

fn cell_dir(out: &Path, alg: Algorithm, seed: u64) -> PathBuf {
    out.join(alg.name()).join(format!("seed-{seed}"))
}

pub fn compare(
    config: &Path,
    out: &Path,
    algorithms: &[String],
    seeds: &[u64],
    quiet: bool,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    let mut algs: Vec<Algorithm> = Vec::new();
    for name in algorithms {
        let alg: Algorithm = name.trim().parse().map_err(input)?;
        if !algs.contains(&alg) {
            algs.push(alg);
        }
    }
    let mut seed_list: Vec<u64> = Vec::new();
    for &s in seeds {
        if !seed_list.contains(&s) {
            seed_list.push(s);
        }
    }
    if algs.is_empty() || seed_list.is_empty() {
        return Err(input("compare needs at least one algorithm and one seed"));
    }
    let mut cells = Vec::new();
    for &alg in &algs {
        for &seed in &seed_list {
            let mut cfg = base.clone();
            cfg.algorithm = alg;
            cfg.seed = seed;
            cfg.validate()
                .map_err(|e| input(format!("{alg} seed {seed}: {e}")))?;
            cells.push(cfg);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap()?.unwrap_or(0))
        .build()
        .map_err(runtime)?;
    let started = now();
    let results: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                let started = now();
                run_simulation(Simulation::new(cfg.clone())?).map(|r| (started, r))
            })
            .collect()
    });

    let mut runs: Vec<AlgorithmRuns> = algs
        .iter()
        .map(|&algorithm| AlgorithmRuns {
            algorithm,
            seeds: Vec::new(),
        })
        .collect();
    let mut artifacts = Vec::new();
    for (cfg, res) in cells.iter().zip(results) {
        let (cell_started, result) =
            res.map_err(|e| runtime(format!("{} seed {}: {e}", cfg.algorithm, cfg.seed)))?;
        let dir = cell_dir(out, cfg.algorithm, cfg.seed);
        let summary = write_run(&dir, cfg, &result, cell_started, quiet)?;
        if !quiet {
            println!("{}", describe(&summary, &dir));
        }
        artifacts.push(
            dir.strip_prefix(out)
                .unwrap_or(&dir)
                .display()
                .to_string(),
        );
        let slot = algs.iter().position(|&a| a == cfg.algorithm).expect("known algorithm");
        runs[slot].seeds.push(result.metrics);
    }

    let rows = report::compare(&runs);
    write(&out.join("comparison.csv"), &report::comparison_csv(&rows))?;
    artifacts.push("comparison.csv".into());
    let manifest = RunManifest {
        tool_version: format!("fedldf {}", env!("CARGO_PKG_VERSION")),
        started_at: started,
        finished_at: now(),
        config: base.to_map(),
        artifacts,
    };
    write(&out.join("manifest.json"), &to_json(&manifest))?;
    if !quiet {
        println!("{} comparison rows -> {}", rows.len(), out.join("comparison.csv").display());
    }
    Ok(())
}

fn required<T: Copy>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| input(format!("missing --{flag}")))
}

pub fn bound(args: &BoundArgs) -> Result<(), Failure> {
    if let Some(path) = &args.trace {
        let text = std::fs::read_to_string(path)
            .map_err(|e| input(format!("cannot read trace {}: {e}", path.display())))?;
        let records =
            trace::parse_trace(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let report = analysis::bound_report(&records).map_err(input)?;
        let mut value = serde_json::to_value(&report).expect("report serializes");
        if let Some(t) = args.t {
            let gap = analysis::bound_gap(&report.params, t, args.initial_gap.unwrap_or(0.0));
            value["bound_at_t"] = json!(gap.value);
            value["unit_contraction"] = json!(gap.unit_contraction);
        }
        print!("{}", to_json(&value));
        return Ok(());
    }

    let params = BoundParams {
        beta: required(args.beta, "beta")?,
        xi1: required(args.xi1, "xi1")?,
        xi2: required(args.xi2, "xi2")?,
        g: required(args.g, "g")?,
        eta: required(args.eta, "eta")?,
        layers: required(args.layers, "layers")?,
        n: required(args.n, "n")?,
        k: required(args.k, "k")?,
    };
    let t = required(args.t, "t")?;
    let initial_gap = required(args.initial_gap, "initial-gap")?;
    params.validate().map_err(input)?;
    if !(initial_gap.is_finite() && initial_gap >= 0.0) {
        return Err(input(format!("--initial-gap must be finite and non-negative, got {initial_gap}")));
    }
    let gap = analysis::bound_gap(&params, t, initial_gap);
    let value = json!({
        "A": analysis::bound_a(&params),
        "B": analysis::bound_b(&params),
        "condition_satisfied": analysis::convergence_condition(&params),
        "condition_threshold": analysis::convergence_threshold(&params),
        "bound_at_t": gap.value,
        "unit_contraction": gap.unit_contraction,
        "asymptotic_gap_closed_form": analysis::asymptotic_gap_closed_form(&params).ok(),
        "asymptotic_gap_recursion_form": analysis::asymptotic_gap_recursion_form(&params).ok(),
    });
    print!("{}", to_json(&value));
    Ok(())
}
