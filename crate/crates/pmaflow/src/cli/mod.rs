//! The `pmaflow` command-line experiment runner.
//!
//! Every subcommand writes its CSV traces, a `config.json` echo of the
//! parsed command line and a `summary.json` into `--out`. `replay` re-runs
//! an echoed config. Exit codes: 0 success, 1 numeric or training failure
//! (or a failed `verify`), 2 usage error.

mod verify;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::divergence::three_point_quadrature;
use crate::error::{arg, Error, Result};
use crate::flow::run::{block_refresh_run, flow_run, write_final_map, FlowConfig, FlowMode};
use crate::flow::schedule::{AdaptiveMode, AdaptiveRule, StepSchedule};
use crate::flow::target::{bimodal_mixture, standard_normal, Target1D};
use crate::gaussian::{
    contraction_certificate, fokker_planck_sigma_sq, gaussian_three_point, riccati_sigma, sinkhorn_residual, variance_ratio, Certificate,
    GaussianFlowParams, GaussianTriple,
};
use crate::potential::PotentialStack;
use crate::quadrature::QuadratureSpec;
use crate::vi::{vi_run, write_vi_csv, Expectation, VIConfig, VITargetScalar};

pub use verify::{run_suites, CheckResult, SUITES};

#[derive(Parser, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[command(name = "pmaflow", version, about = "Discretized parabolic Monge-Ampere flow experiments in one dimension")]
pub struct Cli {
    /// Base seed; child seeds are derived per trial and per step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of iterations for `gaussian`, `flow` and `vi`.
    #[arg(long = "T", global = true)]
    pub t: Option<usize>,
    /// Quadrature node count (meaning depends on the subcommand).
    #[arg(long, global = true)]
    pub quad_nodes: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    /// Riccati vs Fokker–Planck variances and the discrete contraction sweep.
    Gaussian(GaussianArgs),
    /// Three-point identity on random Gaussian triples.
    ThreePoint(ThreePointArgs),
    /// Residual of the entropic one-step update against the flow residual.
    SinkhornLimit(SinkhornArgs),
    /// A full flow run on the two-component mixture.
    Flow(FlowArgs),
    /// Gaussian variational inference.
    Vi(ViArgs),
    /// Run the invariant suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Re-run the command recorded in a `config.json`.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    pub eta: f64,
    /// Initial slope; defaults to 1/λ + δ/2 inside the certified basin.
    #[arg(long)]
    pub c0: Option<f64>,
    /// Contraction factor; defaults to the midpoint of (|1 − 2η/λ|, 1).
    #[arg(long)]
    pub upsilon: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub t_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreePointArgs {
    /// Triples checked by quadrature.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Triples checked in closed form.
    #[arg(long, default_value_t = 1000)]
    pub closed_trials: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornArgs {
    /// Slope c of the quadratic potential ψ = c·y²/2.
    #[arg(long, default_value_t = 1.3)]
    pub c: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05, 0.025])]
    pub epsilons: Vec<f64>,
    /// Quadrature half-width.
    #[arg(long, default_value_t = 10.0)]
    pub half_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CliFlowMode {
    Oracle,
    OracleDistill,
    Score,
    Logistic,
    /// Block refresh with the `--block-learner`.
    Blocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    AdaptiveMin,
    AdaptivePaperMax,
    Constant,
    InverseSqrt,
    Logarithmic,
    LastIterate,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArgs {
    #[arg(long, value_enum, default_value_t = CliFlowMode::OracleDistill)]
    pub mode: CliFlowMode,
    #[arg(long, value_enum, default_value_t = ScheduleKind::AdaptiveMin)]
    pub schedule: ScheduleKind,
    /// Step for `constant`.
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    /// λ of the `logarithmic` and `last-iterate` schedules.
    #[arg(long, default_value_t = 1.0)]
    pub sched_lambda: f64,
    /// M of the `logarithmic` and `last-iterate` schedules.
    #[arg(long, default_value_t = 0.5)]
    pub sched_m: f64,
    /// C·B0 of the `last-iterate` schedule.
    #[arg(long, default_value_t = 1.0)]
    pub sched_cb0: f64,
    /// Sample count n for the learners.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub block: usize,
    #[arg(long, value_enum, default_value_t = FlowMode::Logistic)]
    pub block_learner: FlowMode,
    /// Use N(0,1) as the target, so the flow must stay at the identity.
    #[arg(long)]
    pub target_equals_reference: bool,
    /// Per-step MMD² with this many pushed and target samples (0 disables).
    #[arg(long, default_value_t = 0)]
    pub mmd_samples: usize,
    /// Start each student from the previous one.
    #[arg(long)]
    pub warm_start: bool,
    /// Epochs for a warm-started student (the first student uses --distill-epochs).
    #[arg(long)]
    pub warm_epochs: Option<usize>,
    #[arg(long)]
    pub distill_epochs: Option<usize>,
    #[arg(long)]
    pub learner_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ViTargetKind {
    Logistic,
    Gaussian,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViArgs {
    #[arg(long, value_enum, default_value_t = ViTargetKind::Logistic)]
    pub target: ViTargetKind,
    /// Mean of the Gaussian target.
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10.0)]
    pub m0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub s0: f64,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Gauss–Hermite expectations instead of Monte Carlo.
    #[arg(long)]
    pub exact: bool,
    /// Fixed step instead of the adaptive rule.
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Run only the suite with this name.
    #[arg(long)]
    pub filter: Option<String>,
    /// Mutation check: swap the classifier labels in the learned update.
    #[arg(long, hide = true)]
    pub flip_alg1_labels: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub config: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => 2,
        _ => 1,
    }
}

/// Runs the parsed command. `Ok(false)` means checks ran but failed.
pub fn run(cli: &Cli) -> Result<bool> {
    if let Command::Replay(r) = &cli.command {
        let text = fs::read_to_string(&r.config).map_err(|e| Error::Argument(format!("{}: {e}", r.config.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Argument(format!("bad config: {e}")))?;
        let mut inner: Cli = serde_json::from_value(v["cli"].clone()).map_err(|e| Error::Argument(format!("bad config: {e}")))?;
        if cli.out.is_some() {
            inner.out = cli.out.clone();
        }
        if matches!(inner.command, Command::Replay(_)) {
            return arg("a replay config cannot itself be a replay");
        }
        return run(&inner);
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Error::Argument(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("config.json"), &json!({ "cli": cli }))?;
    let (ok, summary) = match &cli.command {
        Command::Gaussian(a) => cmd_gaussian(cli, a, &out)?,
        Command::ThreePoint(a) => cmd_three_point(cli, a, &out)?,
        Command::SinkhornLimit(a) => cmd_sinkhorn_limit(cli, a, &out)?,
        Command::Flow(a) => cmd_flow(cli, a, &out)?,
        Command::Vi(a) => cmd_vi(cli, a, &out)?,
        Command::Verify(a) => cmd_verify(cli, a)?,
        Command::Replay(_) => unreachable!(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(ok)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, s + "\n").map_err(|e| Error::Numeric(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Numeric(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn put<W: std::io::Write>(w: &mut csv::Writer<W>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Numeric(format!("csv: {e}")))
}

fn done<W: std::io::Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::Numeric(e.to_string()))
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn cmd_gaussian(cli: &Cli, a: &GaussianArgs, out: &Path) -> Result<(bool, Value)> {
    let lambda = a.lambda;
    if !(lambda > 0.0 && lambda <= 1.0) {
        return arg(format!("--lambda must lie in (0, 1], got {lambda}"));
    }
    if !(a.dt > 0.0 && a.t_max >= 0.0) {
        return arg("--dt must be positive and --t-max nonnegative");
    }
    let steps = (a.t_max / a.dt).round() as usize;
    let mut w = csv_writer(&out.join("gaussian_continuous.csv"))?;
    put(&mut w, &["t", "sigma_riccati", "sigma_fp", "ratio"].map(String::from))?;
    for i in 0..=steps {
        let t = i as f64 * a.dt;
        let row = if lambda == 1.0 {
            // both flows start at the target
            [t, 1.0, 1.0, f64::NAN]
        } else {
            [t, riccati_sigma(t, lambda)?, fokker_planck_sigma_sq(t, lambda).sqrt(), variance_ratio(t, lambda)?]
        };
        put(&mut w, &row.map(f))?;
    }
    done(w)?;

    let lower = (1.0 - 2.0 * a.eta / lambda).abs();
    let upsilon = a.upsilon.unwrap_or(0.5 * (lower + 1.0));
    let delta = match contraction_certificate(lambda, a.eta, 1.0 / lambda, upsilon) {
        Certificate::Issued(p) => p.delta,
        Certificate::Rejected(_) => 0.0,
    };
    let c0 = a.c0.unwrap_or(1.0 / lambda + if delta > 0.0 { 0.5 * delta } else { 0.1 });
    let cert = contraction_certificate(lambda, a.eta, c0, upsilon);
    let params = match &cert {
        Certificate::Issued(p) => p.clone(),
        Certificate::Rejected(_) => GaussianFlowParams { lambda, eta: a.eta, c0, upsilon, delta },
    };
    let n = cli.t.unwrap_or(100);
    let traj = params.trajectory(n);
    let mut w = csv_writer(&out.join("gaussian_discrete.csv"))?;
    put(&mut w, &["k", "c", "bound"].map(String::from))?;
    let mut violations = 0;
    for (k, &c) in traj.iter().enumerate() {
        let bound = match cert {
            Certificate::Issued(_) => {
                let b = params.bound(k);
                if (c - 1.0 / lambda).abs() > b * (1.0 + 1e-9) + 1e-14 {
                    violations += 1;
                }
                f(b)
            }
            Certificate::Rejected(_) => String::new(),
        };
        put(&mut w, &[k.to_string(), f(c), bound])?;
    }
    done(w)?;
    match &cert {
        Certificate::Issued(_) => {
            println!("certificate issued: lambda={lambda} eta={} upsilon={upsilon} c0={c0}; {violations} bound violations", a.eta)
        }
        Certificate::Rejected(r) => println!("certificate rejected: {r:?}; trajectory written without a bound"),
    }
    Ok((violations == 0, json!({ "certificate": cert, "c0": c0, "upsilon": upsilon, "bound_violations": violations })))
}

fn random_triple(rng: &mut ChaCha8Rng) -> GaussianTriple {
    let mut s = || rng.random_range(0.5..2.0);
    GaussianTriple { sigma_g: s(), sigma_1: s(), sigma_2: s(), sigma_pi: s() }
}

fn cmd_three_point(cli: &Cli, a: &ThreePointArgs, out: &Path) -> Result<(bool, Value)> {
    let nodes = cli.quad_nodes.unwrap_or(256);
    let qy = QuadratureSpec::new(nodes, (-12.0, 12.0))?;
    let qx = QuadratureSpec::new(nodes, (-14.0, 14.0))?;
    let header = ["trial", "lhs", "bg1", "bg2", "bgpi", "residual"].map(String::from);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut w = csv_writer(&out.join("three_point_closed_form.csv"))?;
    put(&mut w, &header)?;
    let mut closed_max: f64 = 0.0;
    for i in 0..a.closed_trials {
        let mut t = random_triple(&mut rng);
        if i == 0 {
            t.sigma_2 = t.sigma_1;
        }
        let r = gaussian_three_point(t)?;
        closed_max = closed_max.max(r.residual().abs());
        put(&mut w, &[i.to_string(), f(r.lhs), f(r.bg_pi_rho1), f(r.bg_pi_rho2), f(r.bg_gpi), f(r.residual())])?;
    }
    done(w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(cli.seed, 1));
    let mut w = csv_writer(&out.join("three_point.csv"))?;
    put(&mut w, &header)?;
    let mut quad_max: f64 = 0.0;
    for i in 0..a.trials {
        let mut t = random_triple(&mut rng);
        if i == 0 {
            t.sigma_2 = t.sigma_1;
        }
        let n = |s: f64| Target1D::Normal { mean: 0.0, sd: s };
        let r = three_point_quadrature(&n(t.sigma_pi), &n(t.sigma_1), &n(t.sigma_2), &n(t.sigma_g), &qy, &qx)?;
        quad_max = quad_max.max(r.residual().abs());
        put(&mut w, &[i.to_string(), f(r.lhs), f(r.bg1), f(r.bg2), f(r.bgpi), f(r.residual())])?;
    }
    done(w)?;
    println!("closed-form max residual {closed_max:.3e} over {} triples", a.closed_trials);
    println!("quadrature max residual {quad_max:.3e} over {} triples", a.trials);
    Ok((true, json!({ "closed_form_max_residual": closed_max, "quadrature_max_residual": quad_max })))
}

fn cmd_sinkhorn_limit(cli: &Cli, a: &SinkhornArgs, out: &Path) -> Result<(bool, Value)> {
    let quad = QuadratureSpec::new(cli.quad_nodes.unwrap_or(2048), (-a.half_width, a.half_width))?;
    let probes: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let n = standard_normal();
    let mut summary = serde_json::Map::new();
    for (name, c) in [("sinkhorn_limit.csv", a.c), ("sinkhorn_limit_identity.csv", 1.0)] {
        let psi = PotentialStack::new(c)?;
        let mut w = csv_writer(&out.join(name))?;
        put(&mut w, &["epsilon", "max_residual"].map(String::from))?;
        let mut rows = Vec::new();
        for &eps in &a.epsilons {
            let r = sinkhorn_residual(&psi, eps, &n, &n, &quad, &probes)?;
            put(&mut w, &[f(eps), f(r)])?;
            println!("c = {c}: epsilon {eps} max residual {r:.6}");
            rows.push(json!([eps, r]));
        }
        done(w)?;
        summary.insert(name.to_string(), Value::Array(rows));
    }
    Ok((true, Value::Object(summary)))
}

/// The flow configuration a `flow` invocation resolves to.
pub fn flow_config(cli: &Cli, a: &FlowArgs) -> Result<FlowConfig> {
    let t = cli.t.unwrap_or(10);
    let schedule = match a.schedule {
        ScheduleKind::AdaptiveMin => StepSchedule::Adaptive(AdaptiveRule::standard(AdaptiveMode::Min)),
        ScheduleKind::AdaptivePaperMax => StepSchedule::Adaptive(AdaptiveRule::standard(AdaptiveMode::PaperMax)),
        ScheduleKind::Constant => StepSchedule::Constant { eta: a.eta },
        ScheduleKind::InverseSqrt => StepSchedule::InverseSqrtT { t },
        ScheduleKind::Logarithmic => StepSchedule::Logarithmic { lambda: a.sched_lambda, m: a.sched_m },
        ScheduleKind::LastIterate => StepSchedule::LastIterate { c: a.sched_cb0, m: a.sched_m, lambda: a.sched_lambda, b0: 1.0, t },
    };
    let (mode, distill) = match a.mode {
        CliFlowMode::Oracle => (FlowMode::Oracle, false),
        CliFlowMode::OracleDistill => (FlowMode::Oracle, true),
        CliFlowMode::Score => (FlowMode::Score, true),
        CliFlowMode::Logistic => (FlowMode::Logistic, true),
        CliFlowMode::Blocks => (a.block_learner, true),
    };
    if a.mode == CliFlowMode::Blocks && mode == FlowMode::Oracle {
        return arg("--block-learner must be logistic or score");
    }
    let target = if a.target_equals_reference { standard_normal() } else { bimodal_mixture() };
    let mut cfg = FlowConfig::new(target, standard_normal(), schedule, t, mode);
    cfg.distill = distill;
    cfg.seed = cli.seed;
    cfg.samples = a.samples;
    cfg.diagnostics.mmd_samples = a.mmd_samples;
    cfg.distill_cfg.warm_start = a.warm_start;
    if let Some(e) = a.warm_epochs {
        cfg.distill_cfg.warm_epochs = e;
    }
    if let Some(e) = a.distill_epochs {
        cfg.distill_cfg.train.epochs = e;
    }
    if let Some(e) = a.learner_epochs {
        cfg.learner.epochs = e;
    }
    if let Some(n) = cli.quad_nodes {
        cfg.diagnostics.quad_x = QuadratureSpec::new(n, cfg.diagnostics.quad_x.domain)?;
    }
    Ok(cfg)
}

fn cmd_flow(cli: &Cli, a: &FlowArgs, out: &Path) -> Result<(bool, Value)> {
    let cfg = flow_config(cli, a)?;
    let run = if a.mode == CliFlowMode::Blocks { block_refresh_run(&cfg, a.block)? } else { flow_run(&cfg)? };
    run.trace.write_csv(create(&out.join("flow_trace.csv"))?)?;
    for r in &run.trace.records {
        println!(
            "k={:>3} eta={:.4} kl={:.5} sup_map_err={:.4} min_hess={:.4} identity={:.2e}",
            r.k, r.eta, r.kl, r.sup_map_err, r.min_hess, r.avg_identity_residual
        );
    }
    let mut summary = json!({
        "effective": cfg,
        "records": run.trace.records.len(),
        "average_iterate": run.trace.average_iterate,
        "final": run.trace.last(),
    });
    if let Some(e) = &run.failure {
        summary["failure"] = json!(e.to_string());
        write_json(&out.join("summary.json"), &summary)?;
        return Err(e.clone());
    }
    let rows = run.final_map(&cfg, &cfg.diagnostics.probe_grid)?;
    write_final_map(&rows, create(&out.join("final_map.csv"))?)?;
    Ok((true, summary))
}

fn cmd_vi(cli: &Cli, a: &ViArgs, out: &Path) -> Result<(bool, Value)> {
    let target = match a.target {
        ViTargetKind::Logistic => VITargetScalar::Logistic,
        ViTargetKind::Gaussian => VITargetScalar::Gaussian { mean: a.mean, sd: 1.0 },
    };
    let mc = if a.exact {
        Expectation::Quadrature { nodes: cli.quad_nodes.unwrap_or(64) }
    } else {
        Expectation::MonteCarlo { draws: a.draws, seed: cli.seed }
    };
    let cfg = VIConfig { target, lambda: a.lambda, m0: a.m0, s0: a.s0, t: cli.t.unwrap_or(50), mc, eta: a.eta };
    let rows = vi_run(&cfg)?;
    write_vi_csv(&rows, create(&out.join("vi_trace.csv"))?)?;
    let last = rows.last().unwrap();
    println!("k={} m={:.6} s={:.6} err1={:.3e} err2={:.3e}", last.state.k, last.state.m, last.state.s, last.err1, last.err2);
    Ok((true, json!({ "effective": cfg, "final": last })))
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<(bool, Value)> {
    if let Some(name) = &a.filter {
        if !SUITES.contains(&name.as_str()) {
            return arg(format!("unknown suite {name}; expected one of {SUITES:?}"));
        }
    }
    let results = run_suites(a.filter.as_deref(), cli.seed, a.flip_alg1_labels);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{} {:<width$}  {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", results.len());
    Ok((failed == 0, json!({ "checks": results })))
}
