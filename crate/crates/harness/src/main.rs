use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use skelflow::runtime::WorkerServer;
use skelflow::Payload;
use skelflow_harness::bench::{bench_adapt, bench_grain, grain_csv, oracle};
use skelflow_harness::config::{parse_counts, ExperimentConfig, Script};
use skelflow_harness::ops::standard_registry;
use skelflow_harness::report::json_to_payload;
use skelflow_harness::run::run_experiment;

#[derive(Parser)]
#[command(name = "skelflow", version, about = "Run skeleton and workflow programs on a pool of workers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run a program over a stream of tasks and write a report.
    Run(RunArgs),
    /// Serve the wire protocol for remote runtimes.
    Worker {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Sleep of the `work` and `nap` opcodes, in ms.
        #[arg(long, default_value_t = 0.0)]
        grain: f64,
    },
    /// Sweep grain and worker count; write `grain,workers,efficiency` CSV.
    BenchGrain {
        #[arg(long, default_value = "3,70,200")]
        grains: String,
        #[arg(long, default_value = "1..8")]
        workers: String,
        #[arg(long, default_value_t = 1000)]
        tasks: usize,
        /// Injected delay per dispatch, ms. Grains are multiples of it.
        #[arg(long, default_value_t = 1.0)]
        comm: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a timed adaptation scenario described by a TOML file.
    BenchAdapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Evaluate a program sequentially on a JSON array of inputs.
    Oracle {
        #[command(flatten)]
        program: ProgramArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProgramArgs {
    /// Skeleton text, e.g. `farm(pipe(seq:inc,seq:dbl))`.
    #[arg(long, conflicts_with = "workflow")]
    program: Option<String>,
    /// Workflow description (JSON).
    #[arg(long)]
    workflow: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    program: ProgramArgs,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    grain: Option<f64>,
    #[arg(long)]
    comm: Option<f64>,
    /// `local:K` or a comma list of `local` and `host:port`.
    #[arg(long)]
    workers: Option<String>,
    /// Workers the manager may recruit later.
    #[arg(long)]
    spares: Option<String>,
    /// `pardegree:N`, `throughput:R` or `qos: V=a,b; E=expr`.
    #[arg(long)]
    contract: Option<String>,
    /// TOML file of `[[fault]]` entries.
    #[arg(long)]
    faults: Option<PathBuf>,
    /// TOML file of `[[overload]]` entries.
    #[arg(long)]
    overload: Option<PathBuf>,
    /// JSON array of task inputs; defaults to 0..tasks.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run(args) => cmd_run(args),
        Command::Worker { port, host, grain } => cmd_worker(&host, port, grain),
        Command::BenchGrain { grains, workers, tasks, comm, out } => {
            let grains: Vec<f64> = parse_counts(&grains).map_err(anyhow::Error::msg)?.into_iter().map(|g| g as f64).collect();
            let workers = parse_counts(&workers).map_err(anyhow::Error::msg)?;
            let rows = bench_grain(&grains, &workers, tasks, comm)?;
            emit(out.as_deref(), &grain_csv(&rows))?;
            Ok(0)
        }
        Command::BenchAdapt { config, out, events } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if events.is_some() {
                cfg.events = events;
            }
            if cfg.duration_s.is_none() {
                bail!("bench-adapt needs `duration_s` in {}", config.display());
            }
            let report = bench_adapt(&cfg, base_dir(&config))?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
            Ok(report.exit_code() as u8)
        }
        Command::Oracle { program, input, out } => {
            let mut cfg = ExperimentConfig::default();
            apply_program(&mut cfg, program);
            cfg.validate()?;
            let outputs = oracle(&cfg, Path::new("."), read_inputs(&input)?)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&outputs)?)?;
            Ok(0)
        }
    }
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn apply_program(cfg: &mut ExperimentConfig, p: ProgramArgs) {
    if p.program.is_some() || p.workflow.is_some() {
        cfg.program = p.program;
        cfg.workflow = p.workflow;
    }
    cfg.normalize |= p.normalize;
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let (mut cfg, base) = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (cfg, base_dir(path).to_path_buf())
        }
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    apply_program(&mut cfg, a.program);
    cfg.tasks = a.tasks.unwrap_or(cfg.tasks);
    cfg.grain_ms = a.grain.unwrap_or(cfg.grain_ms);
    cfg.comm_ms = a.comm.unwrap_or(cfg.comm_ms);
    cfg.workers = a.workers.unwrap_or(cfg.workers);
    cfg.spares = a.spares.or(cfg.spares);
    cfg.contract = a.contract.or(cfg.contract);
    cfg.events = a.events.or(cfg.events);
    for path in [a.faults, a.overload].into_iter().flatten() {
        cfg.merge_script(Script::load(&path)?);
    }
    cfg.validate()?;
    let inputs = a.input.as_deref().map(read_inputs).transpose()?;
    let outcome = run_experiment(&cfg, &base, inputs)?;
    let r = &outcome.report;
    eprintln!(
        "{} tasks, {} emitted, {} failed, {:.1} ms, efficiency {:.3}, {} reconfiguration(s), {} escalation(s)",
        r.tasks, r.emitted, r.failed, r.completion_ms, r.efficiency, r.reconfigurations, r.escalations
    );
    emit(a.out.as_deref(), &serde_json::to_string_pretty(r)?)?;
    Ok(r.exit_code() as u8)
}

fn cmd_worker(host: &str, port: u16, grain: f64) -> Result<u8> {
    if grain.is_nan() || grain < 0.0 {
        bail!("grain must be non-negative");
    }
    let registry = Arc::new(standard_registry(Duration::from_secs_f64(grain / 1e3)));
    let addr = format!("{host}:{port}");
    let server = WorkerServer::serve(&addr, registry).with_context(|| format!("binding {addr}"))?;
    eprintln!("worker listening on {}", server.local_addr());
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("installing the signal handler")?;
    let _ = rx.recv();
    eprintln!("draining connections");
    server.shutdown();
    Ok(0)
}

fn read_inputs(path: &Path) -> Result<Vec<Payload>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let items: Vec<serde_json::Value> =
        serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON array", path.display()))?;
    Ok(items.iter().map(json_to_payload).collect())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
