use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use mbmapq::coefficients::Coefficients;
use mbmapq::engine::{analyze, EngineConfig, JointResult, Mode};
use mbmapq::model::{stationary_summary, validate};
use mbmapq::modelfile::ModelFile;
use mbmapq::simulator::{simulate, SimConfig, SimEstimate};
use mbmapq::workload::{chain_diagnostics, mean_waiting, solve_workload, FixedPointConfig};
use mbmapq::Error;

#[derive(Parser)]
#[command(name = "mbmapq", version, about = "Queue-length analysis for multiclass batch Markovian arrival queues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AnalysisMode {
    /// Joint per-class distribution (also writes the total distribution).
    Joint,
    /// Total-count distribution only.
    Total,
    /// Workload and waiting-time means only; accepts per-size batch matrices.
    Workload,
}

#[derive(Subcommand)]
enum Command {
    /// Compute stationary distributions and write CSV/JSON outputs.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Largest total count kept.
        #[arg(long = "np", default_value_t = 300)]
        n_p: usize,
        #[arg(long, value_enum, default_value_t = AnalysisMode::Joint)]
        mode: AnalysisMode,
        /// Cap on stored uniformized-power blocks.
        #[arg(long, default_value_t = 40_000_000)]
        max_entries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the same quantities by discrete-event simulation.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1e6)]
        horizon: f64,
        /// Defaults to 10% of the horizon.
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        hist_cap: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an analysis directory with a simulation directory.
    Compare {
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        simulation: PathBuf,
        /// Largest tolerated |z|.
        #[arg(long, default_value_t = 4.0)]
        z_max: f64,
        /// Where to write compare.json; defaults to the simulation directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a model file and print its stationary summary.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Unstable { .. }) => 3,
            Some(Error::NoConvergence { .. } | Error::BudgetExceeded { .. } | Error::MassDeficit { .. }) => 4,
            Some(
                Error::Dimension(_)
                | Error::GeneratorRowSum { .. }
                | Error::NegativeRate { .. }
                | Error::EmptyStream { .. }
                | Error::ReducibleChain { .. }
                | Error::SubstochasticViolation { .. }
                | Error::InvalidService { .. }
                | Error::AssumptionViolation { .. }
                | Error::ModelFile { .. },
            ) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: 2,
        error: anyhow::anyhow!(msg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MBMAPQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if a pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let result = match cli.command {
        Command::Analyze {
            model,
            eps,
            n_p,
            mode,
            max_entries,
            out,
        } => cmd_analyze(&model, eps, n_p, mode, max_entries, &out),
        Command::Simulate {
            model,
            horizon,
            warmup,
            reps,
            seed,
            hist_cap,
            out,
        } => cmd_simulate(&model, horizon, warmup, reps, seed, hist_cap, &out),
        Command::Compare {
            analysis,
            simulation,
            z_max,
            out,
        } => cmd_compare(&analysis, &simulation, z_max, out.as_deref()),
        Command::Validate { model } => cmd_validate(&model),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn manifest(command: &str, model: &Path, out: &Path, extra: Value, started: Instant) -> Value {
    let mut m = json!({
        "command": command,
        "model": model.display().to_string(),
        "output_dir": out.display().to_string(),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
        m.extend(e);
    }
    m
}

fn cmd_validate(path: &Path) -> Result<u8, Failure> {
    let file = ModelFile::read(path)?;
    let (model, services) = file.build()?;
    let report = validate(&model, &services);
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("{mark} {}{}", c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
    }
    report.into_result()?;
    let summary = stationary_summary(&model, &services)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(0)
}

fn cmd_analyze(path: &Path, eps: f64, n_p: usize, mode: AnalysisMode, max_entries: usize, out: &Path) -> Result<u8, Failure> {
    let started = Instant::now();
    if !(eps > 0.0 && eps < 1.0) {
        return Err(usage(format!("--eps must lie in (0, 1), got {eps}")));
    }
    let file = ModelFile::read(path)?;
    let (model, services) = file.build()?;
    validate(&model, &services).into_result()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let summary = if mode == AnalysisMode::Workload {
        let stat = stationary_summary(&model, &services)?;
        let mut coeffs = Coefficients::new(&model, &services)?;
        let sol = solve_workload(&model, &services, &stat, &mut coeffs, FixedPointConfig::default())?;
        let waiting: Vec<f64> = (0..model.num_classes())
            .map(|k| mean_waiting(&model, &services, &stat, &sol.v1bar, k))
            .collect();
        json!({
            "mode": mode,
            "rho": stat.rho,
            "rho_k": stat.rho_k,
            "lambda": stat.lambda,
            "lambda_batch": stat.lambda_batch,
            "theta": stat.theta,
            "pi": stat.pi,
            "mean_workload": sol.mean(),
            "mean_workload_vector": sol.v1bar.iter().copied().collect::<Vec<_>>(),
            "kappa": sol.kappa.iter().copied().collect::<Vec<_>>(),
            "mean_waiting": waiting,
            "chain": chain_diagnostics(&sol),
        })
    } else {
        let cfg = EngineConfig {
            eps,
            n_p,
            max_stored_entries: max_entries,
            ..Default::default()
        };
        let engine_mode = if mode == AnalysisMode::Total { Mode::Total } else { Mode::Joint };
        let r = analyze(&model, &services, engine_mode, &cfg)?;
        write_distributions(&r, out)?;
        for b in r.bound_checks.iter().filter(|b| !b.passed) {
            eprintln!("warning: bound check failed: {} (class {}, margin {:e})", b.name, b.class, b.margin);
        }
        summary_json(&r)
    };
    write_json(&out.join("summary.json"), &summary)?;
    let m = manifest(
        "analyze",
        path,
        out,
        json!({ "eps": eps, "n_p": n_p, "mode": mode, "max_entries": max_entries, "seed": null }),
        started,
    );
    write_json(&out.join("manifest.json"), &m)?;
    if let Some(e) = summary.get("mean_n").and_then(Value::as_f64) {
        println!("E[N] = {e:.6}");
    }
    if let Some(v) = summary.get("mean_workload").and_then(Value::as_f64) {
        println!("E[V] = {v:.6}");
    }
    Ok(0)
}

fn summary_json(r: &JointResult) -> Value {
    json!({
        "mode": r.mode,
        "rho": r.summary.rho,
        "rho_k": r.summary.rho_k,
        "lambda": r.summary.lambda,
        "lambda_batch": r.summary.lambda_batch,
        "theta": r.summary.theta,
        "pi": r.summary.pi,
        "p_idle": r.p.block(0).iter().sum::<f64>(),
        "mean_n": r.mean_n,
        "mean_n_class": r.mean_n_class,
        "mean_n_truncated": r.mean_n_truncated,
        "tail_correction": r.tail.correction,
        "tail": r.tail,
        "unbounded_tail": r.tail.unbounded,
        "mean_workload": r.mean_workload,
        "mean_workload_vector": r.mean_workload_vector,
        "mean_workload_fd_gap": r.mean_workload_fd_gap,
        "mean_waiting": r.mean_waiting,
        "q_mass": r.q_mass,
        "ledger": r.ledger,
        "bound_checks": r.bound_checks,
        "all_bounds_hold": r.all_bounds_hold(),
    })
}

fn write_distributions(r: &JointResult, out: &Path) -> anyhow::Result<()> {
    let layout = r.layout();
    let dims = layout.dims();
    let m = r.summary.pi.len();
    let kk = r.q.len();
    let states = |prefix: &str| (1..=m).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",");
    let index_cols = if r.mode == Mode::Joint {
        (1..=dims).map(|k| format!("n_{k}")).collect::<Vec<_>>().join(",")
    } else {
        "n".to_string()
    };
    let field_csv = |field: &mbmapq::multi_index::Field| {
        let mut s = format!("{index_cols},{},mass\n", states("state_"));
        for level in 0..field.levels() {
            let coords = layout.coords(level);
            for (rank, block) in field.level(layout, level).chunks(m).enumerate() {
                for c in &coords[rank * dims..(rank + 1) * dims] {
                    s.push_str(&c.to_string());
                    s.push(',');
                }
                for x in block {
                    s.push_str(&fmt(*x));
                    s.push(',');
                }
                s.push_str(&fmt(block.iter().sum()));
                s.push('\n');
            }
        }
        s
    };
    if r.mode == Mode::Joint {
        fs::write(out.join("p_joint.csv"), field_csv(&r.p))?;
    }
    let mut s = format!("n,{},mass,ccdf\n", states("state_"));
    let mut cumulative = 0.0;
    for (level, row) in r.total_rows().iter().enumerate() {
        let mass: f64 = row.iter().sum();
        cumulative += mass;
        s.push_str(&level.to_string());
        for x in row {
            s.push(',');
            s.push_str(&fmt(*x));
        }
        s.push_str(&format!(",{},{}\n", fmt(mass), fmt(1.0 - cumulative)));
    }
    fs::write(out.join("p_total.csv"), s)?;
    for k in 0..kk {
        fs::write(out.join(format!("q_class_{}.csv", k + 1)), field_csv(&r.q[k]))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    path: &Path,
    horizon: f64,
    warmup: Option<f64>,
    reps: usize,
    seed: u64,
    hist_cap: u32,
    out: &Path,
) -> Result<u8, Failure> {
    let started = Instant::now();
    if reps == 0 {
        return Err(usage("--reps must be at least 1".into()));
    }
    let warmup = warmup.unwrap_or(0.1 * horizon);
    if !(horizon > warmup && warmup >= 0.0) {
        return Err(usage(format!("need horizon > warmup >= 0, got {horizon} and {warmup}")));
    }
    let file = ModelFile::read(path)?;
    let (model, services) = file.build()?;
    validate(&model, &services).into_result()?;
    model.ph_batches()?;
    match stationary_summary(&model, &services) {
        Err(Error::Unstable { rho }) => eprintln!("warning: rho = {rho} >= 1; estimates will not settle"),
        Err(e) => return Err(e.into()),
        Ok(_) => {}
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = SimConfig {
        horizon,
        warmup,
        replications: reps,
        seed,
        hist_cap,
    };
    let est = simulate(&model, &services, &cfg);
    check_arrival_rates(&model, &services, &est);
    write_json(&out.join("sim_summary.json"), &json!({ "config": cfg, "estimate": sim_summary(&est) }))?;
    let kk = model.num_classes();
    let mut s = (1..=kk).map(|k| format!("n_{k}")).collect::<Vec<_>>().join(",");
    s.push_str(",mass,se\n");
    for (key, e) in &est.histogram {
        for c in key {
            s.push_str(&format!("{c},"));
        }
        s.push_str(&format!("{},{}\n", fmt(e.mean), e.se.map_or(String::new(), fmt)));
    }
    fs::write(out.join("sim_hist.csv"), s).context("writing sim_hist.csv")?;
    let m = manifest(
        "simulate",
        path,
        out,
        json!({ "horizon": horizon, "warmup": warmup, "reps": reps, "seed": seed, "hist_cap": hist_cap }),
        started,
    );
    write_json(&out.join("manifest.json"), &m)?;
    println!("E[N] = {:.6} (se {})", est.mean_n.mean, est.mean_n.se.map_or("n/a".into(), |s| format!("{s:.2e}")));
    Ok(0)
}

fn sim_summary(est: &SimEstimate) -> Value {
    json!({
        "mean_n": est.mean_n,
        "mean_n_class": est.mean_n_class,
        "mean_workload": est.mean_workload,
        "p_idle": est.p_idle,
        "arrival_rate": est.arrival_rate,
        "events": est.events,
    })
}

fn check_arrival_rates(model: &mbmapq::model::ArrivalModel, services: &[mbmapq::model::ServiceLaw], est: &SimEstimate) {
    let Ok(summary) = stationary_summary(model, services) else { return };
    for (k, e) in est.arrival_rate.iter().enumerate() {
        if let Some(z) = e.z_score(summary.lambda[k]) {
            if z.abs() > 3.0 {
                eprintln!(
                    "warning: class {} arrival rate {:.6} is {z:.1} SE from lambda = {:.6}",
                    k + 1,
                    e.mean,
                    summary.lambda[k]
                );
            }
        }
    }
}

#[derive(Serialize)]
struct Comparison {
    statistic: String,
    analysis: f64,
    simulation: f64,
    se: f64,
    z: f64,
    passed: bool,
}

fn cmd_compare(analysis: &Path, simulation: &Path, z_max: f64, out: Option<&Path>) -> Result<u8, Failure> {
    let a = read_json(&analysis.join("summary.json"))?;
    let s = read_json(&simulation.join("sim_summary.json"))?;
    let est = &s["estimate"];
    let mut pairs: Vec<(String, Option<f64>, &Value)> = vec![
        ("E[N]".into(), a["mean_n"].as_f64(), &est["mean_n"]),
        ("E[V]".into(), a["mean_workload"].as_f64(), &est["mean_workload"]),
        ("P(N = 0)".into(), a["p_idle"].as_f64().or_else(|| a["rho"].as_f64().map(|r| 1.0 - r)), &est["p_idle"]),
    ];
    if let Some(classes) = a["mean_n_class"].as_array() {
        for (k, v) in classes.iter().enumerate() {
            pairs.push((format!("E[N_{}]", k + 1), v.as_f64(), &est["mean_n_class"][k]));
        }
    }
    let mut rows = Vec::new();
    for (name, value, sim) in pairs {
        let Some(value) = value else { continue };
        let (Some(mean), Some(se)) = (sim["mean"].as_f64(), sim["se"].as_f64()) else {
            if sim.is_null() {
                continue;
            }
            return Err(usage(format!("{name}: simulation has no standard error; rerun with --reps >= 2")));
        };
        let z = if se > 0.0 { (value - mean) / se } else { f64::INFINITY };
        rows.push(Comparison {
            statistic: name,
            analysis: value,
            simulation: mean,
            se,
            z,
            passed: z.abs() <= z_max,
        });
    }
    if rows.is_empty() {
        return Err(usage("no statistics in common between the two directories".into()));
    }
    let target = out.map_or_else(|| simulation.join("compare.json"), Path::to_path_buf);
    write_json(&target, &json!({ "z_max": z_max, "statistics": rows }))?;
    let mut bad = Vec::new();
    for r in &rows {
        println!("{:<10} analysis {:.6}  simulation {:.6} ± {:.2e}  z = {:+.2}", r.statistic, r.analysis, r.simulation, r.se, r.z);
        if !r.passed {
            bad.push(r.statistic.clone());
        }
    }
    if bad.is_empty() {
        Ok(0)
    } else {
        eprintln!("disagreement beyond |z| = {z_max}: {}", bad.join(", "));
        Ok(5)
    }
}
