//! Experiment driver: compile, recruit, stream tasks, drain, report.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::RecvTimeoutError;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;
use skelflow::clock;
use skelflow::compiler::CompileError;
use skelflow::manager::{ManagerConfig, ManagerError};
use skelflow::mdf::MdfGraph;
use skelflow::runtime::{RuntimeError, WorkerId};
use skelflow::taskpool::PoolError;
use skelflow::workflow::WorkflowError;
use skelflow::{
    compile, normalize, EventLog, GraphTemplate, Manager, OpcodeRegistry, Payload, ResultRecord, Runtime, Skeleton,
    TaskPool, WfFuture, Workflow, WorkflowSpec,
};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::ops::standard_registry;
use crate::report::{bucket_series, outputs_from, RunReport, Sample};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("compiling the program")]
    Compile(#[from] CompileError),
    #[error("loading the workflow")]
    Workflow(#[from] WorkflowError),
    #[error("recruiting workers")]
    Runtime(#[from] RuntimeError),
    #[error("configuring the manager")]
    Manager(#[from] ManagerError),
    #[error("submitting tasks")]
    Pool(#[from] PoolError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run did not finish within {0:?}")]
    Timeout(Duration),
}

/// A compiled program, ready to run.
pub enum Program {
    Skeleton { skeleton: Skeleton, template: GraphTemplate },
    Workflow(WorkflowSpec),
}

impl Program {
    pub fn label(&self) -> String {
        match self {
            Program::Skeleton { skeleton, .. } => skeleton.to_string(),
            Program::Workflow(spec) => format!("workflow({} nodes)", spec.nodes().len()),
        }
    }

    pub fn opcodes(&self) -> Vec<String> {
        match self {
            Program::Skeleton { skeleton, .. } => skeleton.opcodes(),
            Program::Workflow(spec) => spec.opcodes(),
        }
    }

    /// Sequential evaluation of one task.
    pub fn evaluate(&self, reg: &OpcodeRegistry, task: Payload) -> Result<Payload, String> {
        match self {
            Program::Skeleton { skeleton, .. } => crate::oracle::eval_skeleton(reg, skeleton, task),
            Program::Workflow(spec) => spec.evaluate(reg, &task).map_err(|e| e.to_string()),
        }
    }
}

/// Parses skeleton text; `custom:@path` graphs are read relative to `base`.
pub fn parse_skeleton(text: &str, base: &Path) -> Result<Skeleton, RunError> {
    Ok(Skeleton::parse_with(text, |p| {
        let path = base.join(p);
        let src = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        MdfGraph::parse(&src).map_err(|e| format!("{}: {e}", path.display()))
    })?)
}

/// Loads the configured program and checks it against `reg`.
pub fn load_program(cfg: &ExperimentConfig, base: &Path, reg: &OpcodeRegistry) -> Result<Program, RunError> {
    let program = match (&cfg.program, &cfg.workflow) {
        (Some(text), _) => {
            let mut skeleton = parse_skeleton(text, base)?;
            if cfg.normalize {
                skeleton = normalize(&skeleton)?;
            }
            let template = compile(&skeleton)?;
            Program::Skeleton { skeleton, template }
        }
        (None, Some(path)) => {
            let path = base.join(path);
            let text = std::fs::read_to_string(&path).map_err(|source| RunError::Io { path, source })?;
            let spec = WorkflowSpec::from_json(&text)?;
            spec.check(reg)?;
            Program::Workflow(spec)
        }
        (None, None) => return Err(ConfigError::Invalid("no program given".into()).into()),
    };
    let missing: Vec<String> =
        program.opcodes().into_iter().filter(|op| OpcodeRegistry::components(op).iter().any(|c| !reg.contains(c))).collect();
    if !missing.is_empty() {
        return Err(ConfigError::Invalid(format!("unknown opcode(s): {}", missing.join(", "))).into());
    }
    Ok(program)
}

/// Everything a run produced.
pub struct RunOutcome {
    pub report: RunReport,
    pub results: BTreeMap<u64, Result<Payload, String>>,
    /// Emission records by seq (skeleton programs only).
    pub records: Vec<ResultRecord>,
    pub events: EventLog,
    /// Process-clock ms of the first submission.
    pub start_ms: f64,
}

/// Runs `cfg` with the standard opcodes at the configured grain. Inputs
/// default to the integers `0..tasks`.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, inputs: Option<Vec<Payload>>) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let registry = Arc::new(standard_registry(cfg.grain()));
    let program = load_program(cfg, base, &registry)?;
    run_program(cfg, &program, registry, inputs)
}

struct Task {
    inputs: Option<VecDeque<Payload>>,
    limit: Option<usize>,
    next: usize,
}

impl Task {
    fn new(cfg: &ExperimentConfig, inputs: Option<Vec<Payload>>) -> Self {
        match inputs {
            Some(v) => Task { limit: Some(v.len()), inputs: Some(v.into()), next: 0 },
            None if cfg.tasks == 0 && cfg.duration_s.is_some() => Task { inputs: None, limit: None, next: 0 },
            None => Task { inputs: None, limit: Some(cfg.tasks), next: 0 },
        }
    }

    fn pop(&mut self) -> Option<Payload> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return None;
        }
        self.next += 1;
        match &mut self.inputs {
            Some(q) => q.pop_front(),
            None => Some(skelflow::codec::int(self.next as i64 - 1)),
        }
    }

    fn exhausted(&self) -> bool {
        self.limit.is_some_and(|l| self.next >= l)
    }
}

/// Background threads shared by both program kinds.
struct Instruments {
    stop: Arc<AtomicBool>,
    busy: Arc<Mutex<BTreeMap<WorkerId, f64>>>,
    samples: Arc<Mutex<Vec<Sample>>>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl Instruments {
    fn start(cfg: &ExperimentConfig, runtime: &Arc<Runtime>, events: &EventLog, start: Instant) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let busy: Arc<Mutex<BTreeMap<WorkerId, f64>>> = Arc::default();
        let samples: Arc<Mutex<Vec<Sample>>> = Arc::default();
        let mut threads = Vec::new();

        let window = Duration::from_secs_f64(cfg.window_s);
        {
            let (stop, busy, samples, rt) = (stop.clone(), busy.clone(), samples.clone(), runtime.clone());
            threads.push(thread::spawn(move || {
                let mut next_sample = start + Duration::from_secs(1);
                while !stop.load(Ordering::SeqCst) {
                    record_busy(&rt, &busy);
                    let now = Instant::now();
                    if now >= next_sample {
                        samples.lock().unwrap().push(Sample {
                            t_s: (next_sample - start).as_secs_f64(),
                            workers: rt.active_count(),
                            throughput: rt.pool().throughput(window),
                        });
                        next_sample += Duration::from_secs(1);
                    }
                    thread::sleep(Duration::from_millis(50));
                }
            }));
        }

        let mut script: Vec<(f64, ScriptStep)> = cfg
            .fault
            .iter()
            .map(|f| (f.at_s, ScriptStep::Kill(f.worker)))
            .chain(cfg.overload.iter().map(|o| (o.at_s, ScriptStep::Slow(o.worker, o.factor))))
            .collect();
        script.sort_by(|a, b| a.0.total_cmp(&b.0));
        if !script.is_empty() {
            let (stop, rt, events) = (stop.clone(), runtime.clone(), events.clone());
            threads.push(thread::spawn(move || {
                for (at_s, step) in script {
                    let at = start + Duration::from_secs_f64(at_s.max(0.0));
                    while Instant::now() < at {
                        if stop.load(Ordering::SeqCst) {
                            return;
                        }
                        thread::sleep((at - Instant::now()).min(Duration::from_millis(10)));
                    }
                    step.apply(&rt, &events);
                }
            }));
        }
        Instruments { stop, busy, samples, threads }
    }

    fn finish(self, runtime: &Runtime) -> (f64, Vec<Sample>) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
        record_busy(runtime, &self.busy);
        let busy = self.busy.lock().unwrap().values().sum();
        let samples = std::mem::take(&mut *self.samples.lock().unwrap());
        (busy, samples)
    }
}

fn record_busy(rt: &Runtime, busy: &Mutex<BTreeMap<WorkerId, f64>>) {
    let mut busy = busy.lock().unwrap();
    for d in rt.descriptors() {
        let e = busy.entry(d.id).or_insert(0.0);
        *e = e.max(d.busy_ms);
    }
}

enum ScriptStep {
    Kill(u32),
    Slow(u32, f64),
}

impl ScriptStep {
    fn apply(&self, rt: &Runtime, events: &EventLog) {
        let (kind, worker, res) = match *self {
            ScriptStep::Kill(w) => ("fault", w, rt.kill_worker(WorkerId(w))),
            ScriptStep::Slow(w, f) => ("overload", w, rt.set_slowdown(WorkerId(w), f)),
        };
        match res {
            Ok(()) => {
                let factor = if let ScriptStep::Slow(_, f) = self { Some(*f) } else { None };
                events.record(kind, json!({ "worker": worker, "factor": factor }));
            }
            Err(e) => log::warn!("{kind} on worker {worker}: {e}"),
        }
    }
}

fn manager_config(cfg: &ExperimentConfig) -> ManagerConfig {
    let window = Duration::from_secs_f64(cfg.window_s);
    ManagerConfig {
        tick: Duration::from_millis(cfg.tick_ms),
        window,
        cooldown_ticks: cfg.cooldown_ticks,
        settle: window,
        ..ManagerConfig::default()
    }
}

fn event_log(cfg: &ExperimentConfig) -> Result<EventLog, RunError> {
    match &cfg.events {
        Some(path) => EventLog::to_file(path).map_err(|source| RunError::Io { path: path.clone(), source }),
        None => Ok(EventLog::new()),
    }
}

/// Recruits the initial workers and starts the manager.
fn set_up(cfg: &ExperimentConfig, program: &Program, runtime: &Arc<Runtime>, events: &EventLog) -> Result<(Manager, usize), RunError> {
    runtime.set_required_opcodes(program.opcodes());
    runtime.set_comm_delay(cfg.comm());
    runtime.set_event_log(events.clone());
    let specs = cfg.worker_specs();
    for spec in &specs {
        runtime.recruit(spec)?;
    }
    let manager = Manager::new(runtime.clone(), events.clone(), manager_config(cfg));
    manager.add_recruitable(cfg.spare_specs());
    if let Some(c) = cfg.contract() {
        manager.set_contract(c)?;
    }
    manager.provision();
    manager.start();
    Ok((manager, specs.len()))
}

struct Collected {
    results: BTreeMap<u64, Result<Payload, String>>,
    records: Vec<ResultRecord>,
    latencies: Vec<f64>,
    completions: Vec<f64>,
    submitted: usize,
}

pub fn run_program(
    cfg: &ExperimentConfig,
    program: &Program,
    registry: Arc<OpcodeRegistry>,
    inputs: Option<Vec<Payload>>,
) -> Result<RunOutcome, RunError> {
    let events = event_log(cfg)?;
    let timeout = Duration::from_secs_f64(cfg.timeout_s);
    let tasks = Task::new(cfg, inputs);
    let (collected, start, runtime, manager, workers, busy, samples) = match program {
        Program::Skeleton { template, .. } => {
            let (pool, rx) = TaskPool::with_channel();
            let runtime = Arc::new(Runtime::new(pool.clone(), registry));
            let (manager, workers) = set_up(cfg, program, &runtime, &events)?;
            let start = Instant::now();
            let inst = Instruments::start(cfg, &runtime, &events, start);
            let collected = stream_skeleton(cfg, &pool, &runtime, template, &rx, tasks, start, timeout);
            manager.stop();
            let (busy, samples) = inst.finish(&runtime);
            (collected, start, runtime, manager, workers, busy, samples)
        }
        Program::Workflow(spec) => {
            let wf = Workflow::new(registry);
            let runtime = wf.runtime().clone();
            let (manager, workers) = set_up(cfg, program, &runtime, &events)?;
            let start = Instant::now();
            let inst = Instruments::start(cfg, &runtime, &events, start);
            let collected = stream_workflow(cfg, &wf, spec, tasks, start, timeout);
            manager.stop();
            let (busy, samples) = inst.finish(&runtime);
            (collected, start, runtime, manager, workers, busy, samples)
        }
    };
    runtime.shutdown();
    let collected = collected?;
    let _ = events.flush();

    let start_ms = clock::to_ms(start);
    let last = collected.completions.iter().copied().fold(f64::NAN, f64::max);
    let t_par = if last.is_nan() { 0.0 } else { (last - start_ms).max(0.0) };
    let efficiency = if t_par > 0.0 && workers > 0 { busy / (workers as f64 * t_par) } else { 0.0 };
    let failed = collected.results.values().filter(|r| r.is_err()).count();
    let report = RunReport {
        program: program.label(),
        tasks: collected.submitted,
        emitted: collected.results.len(),
        failed,
        completion_ms: t_par,
        t_seq_ms: busy,
        t_par_ms: t_par,
        workers,
        efficiency,
        latencies_ms: collected.latencies,
        throughput_series: bucket_series(start_ms, collected.completions),
        samples,
        reconfigurations: manager.reconfiguration_count(),
        escalations: manager.escalation_count(),
        events: cfg.events.as_ref().map(|p| p.display().to_string()),
        outputs: outputs_from(&collected.results),
    };
    Ok(RunOutcome { report, results: collected.results, records: collected.records, events, start_ms })
}

#[allow(clippy::too_many_arguments)]
fn stream_skeleton(
    cfg: &ExperimentConfig,
    pool: &Arc<TaskPool>,
    runtime: &Runtime,
    template: &GraphTemplate,
    rx: &std::sync::mpsc::Receiver<ResultRecord>,
    mut tasks: Task,
    start: Instant,
    timeout: Duration,
) -> Result<Collected, RunError> {
    let stop_at = cfg.duration_s.map(|d| start + Duration::from_secs_f64(d));
    let give_up = start + timeout;
    let mut c = Collected { results: BTreeMap::new(), records: Vec::new(), latencies: Vec::new(), completions: Vec::new(), submitted: 0 };
    let mut feeding = true;
    loop {
        let now = Instant::now();
        if stop_at.is_some_and(|t| now >= t) {
            feeding = false;
        }
        if feeding {
            // Bounded streams go in at once; timed streams keep a short backlog.
            let cap = if stop_at.is_some() { 2 * runtime.active_count() + 2 } else { usize::MAX };
            while c.submitted - c.results.len() < cap {
                let Some(task) = tasks.pop() else { break };
                pool.submit_task(template, task)?;
                c.submitted += 1;
            }
            feeding = !tasks.exhausted();
        }
        if !feeding && c.results.len() == c.submitted {
            break;
        }
        if now >= give_up {
            return Err(RunError::Timeout(timeout));
        }
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(r) => {
                c.latencies.push(r.completed_ms - r.submitted_ms);
                c.completions.push(r.completed_ms);
                c.results.insert(r.seq, r.value.clone());
                c.records.push(r);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    c.records.sort_by_key(|r| r.seq);
    Ok(c)
}

fn stream_workflow(
    cfg: &ExperimentConfig,
    wf: &Workflow,
    spec: &WorkflowSpec,
    mut tasks: Task,
    start: Instant,
    timeout: Duration,
) -> Result<Collected, RunError> {
    let stop_at = cfg.duration_s.map(|d| start + Duration::from_secs_f64(d));
    let give_up = start + timeout;
    let mut c = Collected { results: BTreeMap::new(), records: Vec::new(), latencies: Vec::new(), completions: Vec::new(), submitted: 0 };
    let mut in_flight: VecDeque<(u64, f64, Result<WfFuture, WorkflowError>)> = VecDeque::new();
    loop {
        let window = 4 * wf.runtime().active_count().max(1);
        while in_flight.len() < window && !stop_at.is_some_and(|t| Instant::now() >= t) {
            let Some(task) = tasks.pop() else { break };
            in_flight.push_back((c.submitted as u64, clock::now_ms(), spec.launch(wf, task)));
            c.submitted += 1;
        }
        let Some((seq, submitted_ms, launched)) = in_flight.pop_front() else { break };
        let left = give_up.saturating_duration_since(Instant::now());
        let value = match launched.and_then(|f| f.get_value(left).map(|v| (v, f))) {
            Ok((v, f)) => {
                let done = f.execution_interval().map(|i| i.1).unwrap_or_else(clock::now_ms);
                c.latencies.push(done - submitted_ms);
                c.completions.push(done);
                Ok(v)
            }
            Err(WorkflowError::Timeout) => return Err(RunError::Timeout(timeout)),
            Err(e) => {
                c.completions.push(clock::now_ms());
                Err(e.to_string())
            }
        };
        c.results.insert(seq, value);
    }
    Ok(c)
}
