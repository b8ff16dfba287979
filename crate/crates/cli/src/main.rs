//! `hetserve`: build the performance database, generate deployment
//! candidates, search the latency/quality frontier, pick a plan and replay it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hetserve::candidates::CandidateSet;
use hetserve::optimizer::{run, select, Aggregation, Constraints, Requirement, RunConfig};
use hetserve::perfdb::{build_db, PerfDb};
use hetserve::plan::{candidate_digest, replay, ParetoFile, Plan};
use hetserve::simulator::{simulate, PERCENTILES};
use hetserve::{Cents, ClusterSpec, Error, LoadGrid, ReplicaConfig, SimOptions, Trace};

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "hetserve", version, about = "Joint query routing and GPU deployment planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Performance database commands.
    Perfdb {
        #[command(subcommand)]
        command: PerfdbCommand,
    },
    /// Deployment candidate commands.
    Candidates {
        #[command(subcommand)]
        command: CandidatesCommand,
    },
    /// Search the latency/quality frontier.
    Optimize(OptimizeArgs),
    /// Pick one frontier record as a plan.
    Select(SelectArgs),
    /// Serve the trace with a plan in simulation.
    Replay(ReplayArgs),
    /// Simulate one replica configuration.
    Simulate(SimulateArgs),
}

#[derive(Subcommand)]
enum PerfdbCommand {
    Build(PerfdbBuildArgs),
}

#[derive(Subcommand)]
enum CandidatesCommand {
    Gen(CandidatesGenArgs),
}

#[derive(Args)]
struct QualityScale {
    /// Scale of quality values in the trace and on the command line
    /// (e.g. 100 for 0-100 scores).
    #[arg(long, default_value_t = 1.0)]
    quality_scale: f64,
}

#[derive(Args)]
struct PerfdbBuildArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Offered loads as lo:hi:step, queries per second.
    #[arg(long, default_value = "2:40:2")]
    loads: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scale: QualityScale,
}

#[derive(Args)]
struct CandidatesGenArgs {
    #[arg(long)]
    db: PathBuf,
    /// Optional cluster spec the database must have been built from.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Budget cap, dollars per hour.
    #[arg(long)]
    budget: f64,
    /// Number of intermediate budgets.
    #[arg(long, default_value_t = 10)]
    grid: usize,
    /// Load at which candidates are compared; defaults to the grid median.
    #[arg(long)]
    ref_load: Option<f64>,
    /// Load split granularity; defaults to the grid spacing.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Pooled,
    Max,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    cands: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Total offered load, queries per second.
    #[arg(long)]
    qps: f64,
    /// Budget cap, dollars per hour.
    #[arg(long)]
    budget: f64,
    /// Latency cap on P95, seconds.
    #[arg(long)]
    lmax: Option<f64>,
    /// Quality floor, on the --quality-scale scale.
    #[arg(long)]
    qmin: Option<f64>,
    #[arg(long, default_value_t = 60)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "pooled")]
    aggregation: AggregationArg,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration log, one JSON record per line.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    scale: QualityScale,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    pareto: PathBuf,
    #[arg(long)]
    qmin: Option<f64>,
    #[arg(long)]
    lmax: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scale: QualityScale,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scale: QualityScale,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    gpu: String,
    /// GPUs in the replica; must equal tp * pp.
    #[arg(long)]
    n: u32,
    #[arg(long, default_value_t = 1)]
    tp: u32,
    #[arg(long, default_value_t = 1)]
    pp: u32,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    qps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scale: QualityScale,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NoFeasibleConfiguration | Error::Unsatisfiable { .. } => EXIT_INFEASIBLE,
        Error::Iteration { source, .. } => exit_code(source),
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Perfdb {
            command: PerfdbCommand::Build(a),
        } => perfdb_build(a),
        Command::Candidates {
            command: CandidatesCommand::Gen(a),
        } => candidates_gen(a),
        Command::Optimize(a) => optimize(a),
        Command::Select(a) => select_plan(a),
        Command::Replay(a) => replay_plan(a),
        Command::Simulate(a) => simulate_one(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn check_scale(scale: &QualityScale) -> CmdResult {
    if !(scale.quality_scale.is_finite() && scale.quality_scale > 0.0) {
        return Err(Failure::Usage("--quality-scale must be positive".into()));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> CmdResult {
    if !(v.is_finite() && v > 0.0) {
        return Err(Failure::Usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn load_trace(path: &Path, spec: &ClusterSpec, scale: &QualityScale) -> Result<Trace, Failure> {
    Ok(Trace::load(path, &spec.model_names(), scale.quality_scale)?)
}

fn line(value: serde_json::Value) {
    println!("{value}");
}

fn perfdb_build(a: PerfdbBuildArgs) -> CmdResult {
    check_scale(&a.scale)?;
    let spec = ClusterSpec::load(&a.spec)?;
    let trace = load_trace(&a.trace, &spec, &a.scale)?;
    let grid = LoadGrid::parse(&a.loads)?;
    let t = Instant::now();
    let db = build_db(&spec, &trace, &grid, a.seed, &SimOptions::default())?;
    let elapsed = t.elapsed().as_secs_f64();
    db.save(&a.out)?;
    let digest = hex::encode(db.digest());
    println!(
        "built {} configurations x {} loads = {} records in {:.2}s",
        db.records.len(),
        grid.len(),
        db.len(),
        elapsed
    );
    line(json!({
        "command": "perfdb build",
        "configs": db.records.len(),
        "loads": grid.len(),
        "records": db.len(),
        "build_s": elapsed,
        "digest": digest,
        "out": a.out,
    }));
    Ok(())
}

fn candidates_gen(a: CandidatesGenArgs) -> CmdResult {
    if !(10..=20).contains(&a.grid) {
        return Err(Failure::Usage("--grid must be between 10 and 20".into()));
    }
    positive("budget", a.budget)?;
    let db = match &a.spec {
        Some(p) => PerfDb::load_for_spec(&a.db, &ClusterSpec::load(p)?)?,
        None => PerfDb::load(&a.db)?,
    };
    let ref_load = match a.ref_load {
        Some(l) => {
            positive("ref-load", l)?;
            l
        }
        None => db.grid.loads()[(db.grid.len() - 1) / 2],
    };
    let delta = a.delta.unwrap_or_else(|| db.grid.step());
    positive("delta", delta)?;
    let set = CandidateSet::generate(&db, Cents::from_dollars(a.budget), a.grid, ref_load, delta)?;
    set.save(&a.out)?;
    let mut counts = serde_json::Map::new();
    for m in &set.models {
        println!("{}: {} candidates", m.model, m.candidates.len());
        if m.candidates.is_empty() {
            eprintln!("warning: no affordable unsaturated candidate for model {}", m.model);
        }
        counts.insert(m.model.clone(), json!(m.candidates.len()));
    }
    line(json!({
        "command": "candidates gen",
        "counts": counts,
        "ref_load": ref_load,
        "delta": delta,
        "out": a.out,
    }));
    Ok(())
}

fn optimize(a: OptimizeArgs) -> CmdResult {
    check_scale(&a.scale)?;
    positive("qps", a.qps)?;
    positive("budget", a.budget)?;
    let db = PerfDb::load(&a.db)?;
    let cands = CandidateSet::load(&a.cands)?;
    cands.check_db(&db)?;
    let trace = load_trace(&a.trace, &db.spec, &a.scale)?;
    if trace.digest() != db.trace_digest {
        return Err(Error::DigestMismatch {
            expected: hex::encode(db.trace_digest),
            found: hex::encode(trace.digest()),
        }
        .into());
    }
    let mut cons = Constraints::new(&db.spec, Cents::from_dollars(a.budget), a.qps)?;
    cons.l_max = a.lmax;
    cons.q_min = a.qmin.map(|q| q / a.scale.quality_scale);
    let aggregation = match a.aggregation {
        AggregationArg::Pooled => Aggregation::Pooled,
        AggregationArg::Max => Aggregation::Max,
    };
    let cfg = RunConfig {
        budget_iters: a.iters,
        seed: a.seed,
        aggregation,
        ..Default::default()
    };
    let t = Instant::now();
    let result = run(&trace, &db, &cands, &cons, &cfg)?;
    let elapsed = t.elapsed().as_secs_f64();
    if let Some(log) = &a.log {
        let mut text = String::new();
        for entry in &result.log {
            text.push_str(&serde_json::to_string(entry).map_err(Error::from)?);
            text.push('\n');
        }
        std::fs::write(log, text).map_err(|e| Error::Io {
            path: log.clone(),
            source: e,
        })?;
    }
    let file = ParetoFile::new(&db, &cands, &trace, &cons, aggregation, result.pareto)?;
    file.save(&a.out)?;
    let scale = a.scale.quality_scale;
    println!(
        "{} evaluations, {} frontier points, hypervolume {:.6}{}",
        result.records.len(),
        file.pareto.records.len(),
        file.pareto.hypervolume,
        if result.converged { ", converged" } else { "" }
    );
    for r in &file.pareto.records {
        println!(
            "  L={:.4}s Q={:.4} cost=${:.2}/h [{}]",
            r.l_p95_s,
            r.q * scale,
            r.cost_per_hour,
            r.candidate_ids.join(", ")
        );
    }
    line(json!({
        "command": "optimize",
        "evaluations": result.records.len(),
        "frontier": file.pareto.records.len(),
        "hypervolume": file.pareto.hypervolume,
        "converged": result.converged,
        "elapsed_s": elapsed,
        "cands_digest": candidate_digest(&cands)?,
        "out": a.out,
    }));
    Ok(())
}

fn select_plan(a: SelectArgs) -> CmdResult {
    check_scale(&a.scale)?;
    let scale = a.scale.quality_scale;
    let req = match (a.qmin, a.lmax) {
        (Some(q), None) => Requirement::MinQuality(q / scale),
        (None, Some(l)) => Requirement::MaxLatency(l),
        _ => return Err(Failure::Usage("give exactly one of --qmin and --lmax".into())),
    };
    let file = ParetoFile::load(&a.pareto)?;
    let rec = select(&file.pareto, req)?;
    let plan = Plan::from_record(&file, rec);
    plan.save(&a.out)?;
    println!(
        "selected L={:.4}s Q={:.4} cost=${:.2}/h [{}]",
        rec.l_p95_s,
        rec.q * scale,
        rec.cost_per_hour,
        rec.candidate_ids.join(", ")
    );
    line(json!({
        "command": "select",
        "l_p95_s": rec.l_p95_s,
        "q": rec.q * scale,
        "cost_per_hour": rec.cost_per_hour,
        "fractions": rec.fractions,
        "thresholds": rec.thresholds,
        "candidates": rec.candidate_ids,
        "out": a.out,
    }));
    Ok(())
}

fn replay_plan(a: ReplayArgs) -> CmdResult {
    check_scale(&a.scale)?;
    let spec = ClusterSpec::load(&a.spec)?;
    let plan = Plan::load(&a.plan)?;
    let trace = load_trace(&a.trace, &spec, &a.scale)?;
    let report = replay(&plan, &trace, &spec, a.seed, &SimOptions::default())?;
    if let Some(out) = &a.out {
        report.save(out)?;
    }
    let scale = a.scale.quality_scale;
    println!(
        "replayed {} requests: P95 {:.4}s (predicted {:.4}s, {:+.1}%), Q {:.4} (predicted {:.4})",
        report.requests,
        report.l_p95_s,
        report.predicted_l_p95_s,
        100.0 * report.p95_rel_delta,
        report.q * scale,
        report.predicted_q * scale
    );
    for m in &report.models {
        for r in &m.replicas {
            println!(
                "  {}: {} requests, P95 {:.4}s, utilization {:.2}",
                r.config, r.requests, r.quantiles[3], r.utilization
            );
        }
    }
    line(json!({
        "command": "replay",
        "requests": report.requests,
        "l_p95_s": report.l_p95_s,
        "predicted_l_p95_s": report.predicted_l_p95_s,
        "p95_rel_delta": report.p95_rel_delta,
        "q": report.q * scale,
        "predicted_q": report.predicted_q * scale,
        "saturated": report.saturated,
    }));
    Ok(())
}

fn simulate_one(a: SimulateArgs) -> CmdResult {
    check_scale(&a.scale)?;
    positive("qps", a.qps)?;
    if a.n != a.tp * a.pp {
        return Err(Error::Validation(format!("--n {} differs from tp*pp = {}", a.n, a.tp * a.pp)).into());
    }
    let spec = ClusterSpec::load(&a.spec)?;
    let trace = load_trace(&a.trace, &spec, &a.scale)?;
    let config = ReplicaConfig::new(&a.model, &a.gpu, a.tp, a.pp);
    let replica = config.resolve(&spec)?;
    let res = simulate(&replica, &spec.coeffs_for(&a.gpu), &trace, a.qps, a.seed, &SimOptions::default())?;
    println!("{config} at {} qps", a.qps);
    println!("{:>10} {:>12}", "percentile", "latency_s");
    for (p, v) in PERCENTILES.iter().zip(res.quantiles) {
        println!("{:>10} {:>12.6}", format!("p{p}"), v);
    }
    println!("throughput {:.6} qps, saturated {}", res.throughput, res.saturated);
    let quantiles: serde_json::Map<String, serde_json::Value> = PERCENTILES
        .iter()
        .zip(res.quantiles)
        .map(|(p, v)| (format!("p{p}"), json!(v)))
        .collect();
    line(json!({
        "command": "simulate",
        "config": config.to_string(),
        "qps": a.qps,
        "quantiles": quantiles,
        "throughput": res.throughput,
        "completed": res.completed,
        "saturated": res.saturated,
    }));
    Ok(())
}
