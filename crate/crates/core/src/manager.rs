//! The autonomic manager of a farm.
//!
//! Mechanisms ([`Manager::add_worker`], [`Manager::remove_worker`],
//! [`Manager::get_measure`]) are kept apart from policy
//! ([`Manager::control_tick`], [`select_plan`]). Policy runs on one
//! dedicated thread started by [`Manager::start`]; every reconfiguration
//! holds a single lock, so at most one is in flight.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::clock;
use crate::events::EventLog;
use crate::expr::{BinOp, Bindings, Expr, ExprError};
use crate::runtime::{NewWorker, Runtime, RuntimeError, WorkerId, WorkerSpec};
use crate::taskpool::DEFAULT_THROUGHPUT_WINDOW;

/// Context binding available to plan forecasts: the active worker count.
pub const WORKERS: &str = "workers";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManagerError {
    #[error("variable `{0}` cannot be monitored")]
    UnmonitorableVariable(String),
    #[error("no sensor for measure `{0}`")]
    SensorUnavailable(String),
    #[error("recruited only {0} worker(s)")]
    RecruitmentFailed(usize),
    #[error("removing {0} worker(s) would empty the pool")]
    WouldEmptyPool(usize),
    #[error("workers did not stop in time")]
    StopTimeout,
    #[error("bad contract: {0}")]
    BadContract(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum PerformanceContract {
    ParDegree(usize),
    /// Minimum tasks per second; satisfied while throughput is strictly above.
    Throughput(f64),
}

/// A pair ⟨V, E⟩: monitored measures and a predicate over them.
#[derive(Clone, Debug, PartialEq)]
pub struct QosContract {
    vars: BTreeSet<String>,
    predicate: Expr,
}

impl QosContract {
    pub fn new<S: Into<String>>(vars: impl IntoIterator<Item = S>, predicate: Expr) -> Result<Self, ManagerError> {
        let vars: BTreeSet<String> = vars.into_iter().map(Into::into).collect();
        if let Some(v) = predicate.vars().into_iter().find(|v| !vars.contains(v)) {
            return Err(ManagerError::UnmonitorableVariable(v));
        }
        Ok(QosContract { vars, predicate })
    }

    pub fn vars(&self) -> &BTreeSet<String> {
        &self.vars
    }

    pub fn predicate(&self) -> &Expr {
        &self.predicate
    }

    pub fn holds(&self, bindings: &Bindings) -> Result<bool, ExprError> {
        self.predicate.eval_bool(bindings)
    }
}

impl fmt::Display for QosContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vars: Vec<&str> = self.vars.iter().map(String::as_str).collect();
        write!(f, "qos: V={}; E={}", vars.join(","), self.predicate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Contract {
    Performance(PerformanceContract),
    Qos(QosContract),
}

impl Contract {
    /// The ⟨V, E⟩ form; `None` for a parallelism degree.
    pub fn as_qos(&self) -> Option<QosContract> {
        match self {
            Contract::Performance(PerformanceContract::ParDegree(_)) => None,
            Contract::Performance(PerformanceContract::Throughput(r)) => Some(QosContract {
                vars: BTreeSet::from(["throughput".to_string()]),
                predicate: Expr::bin(BinOp::Gt, Expr::var("throughput"), Expr::Num(*r)),
            }),
            Contract::Qos(q) => Some(q.clone()),
        }
    }
}

impl fmt::Display for Contract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Contract::Performance(PerformanceContract::ParDegree(n)) => write!(f, "pardegree:{n}"),
            Contract::Performance(PerformanceContract::Throughput(r)) => write!(f, "throughput:{r}"),
            Contract::Qos(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for Contract {
    type Err = ManagerError;

    /// `pardegree:8`, `throughput:1.5` or `qos: V=a,b; E=<expr>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| ManagerError::BadContract(format!("{m} in `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let rest = rest.trim();
        match kind.trim() {
            "pardegree" => rest.parse().map(|n| Contract::Performance(PerformanceContract::ParDegree(n))).map_err(|_| bad("bad degree")),
            "throughput" => match rest.parse::<f64>() {
                Ok(r) if r > 0.0 && r.is_finite() => Ok(Contract::Performance(PerformanceContract::Throughput(r))),
                _ => Err(bad("rate must be a positive number")),
            },
            "qos" => {
                let mut vars = None;
                let mut expr = None;
                for part in rest.split(';') {
                    let (k, v) = part.split_once('=').ok_or_else(|| bad("expected V=... and E=..."))?;
                    match k.trim() {
                        "V" => vars = Some(v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect::<Vec<_>>()),
                        "E" => expr = Some(v.trim().parse::<Expr>()?),
                        other => return Err(bad(&format!("unknown field `{other}`"))),
                    }
                }
                match (vars, expr) {
                    (Some(v), Some(e)) => Ok(Contract::Qos(QosContract::new(v, e)?)),
                    _ => Err(bad("expected V=... and E=...")),
                }
            }
            other => Err(bad(&format!("unknown contract kind `{other}`"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Harmonizer {
    Average,
    Max,
    Min,
    Sum,
}

impl Harmonizer {
    pub fn apply(self, xs: &[f64]) -> Option<f64> {
        if xs.is_empty() {
            return None;
        }
        Some(match self {
            Harmonizer::Average => xs.iter().sum::<f64>() / xs.len() as f64,
            Harmonizer::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Harmonizer::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
            Harmonizer::Sum => xs.iter().sum(),
        })
    }
}

/// Timestamped samples of one measure, pruned to a trailing window.
#[derive(Clone, Debug)]
pub struct MeasureWindow {
    name: String,
    window: Duration,
    samples: VecDeque<(Instant, f64)>,
}

impl MeasureWindow {
    pub fn new(name: &str, window: Duration) -> Self {
        MeasureWindow { name: name.to_string(), window, samples: VecDeque::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Adds a sample and drops those older than the window. Samples with an
    /// earlier timestamp than the newest are clamped to keep order.
    pub fn push(&mut self, at: Instant, value: f64) {
        let at = self.samples.back().map_or(at, |(last, _)| at.max(*last));
        self.samples.push_back((at, value));
        while let Some((t, _)) = self.samples.front() {
            if at.duration_since(*t) > self.window {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|(_, v)| *v).collect()
    }
}

type Source = Box<dyn Fn() -> Result<Vec<f64>, String> + Send + Sync>;

struct Sensor {
    harmonizer: Harmonizer,
    source: Source,
    samples: MeasureWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Action {
    AddWorker(usize),
    RemoveWorker(usize),
    Rebind,
}

/// Actions plus a forecast of the measures after they run.
///
/// Forecast assignments are evaluated against the current bindings
/// together; only assignments to contract variables take effect.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconfigurationPlan {
    pub name: String,
    pub actions: Vec<Action>,
    pub forecast: Vec<(String, Expr)>,
}

impl ReconfigurationPlan {
    /// `add(k)` with the linear farm forecast T' = T·(n+k)/n.
    pub fn linear_add(k: usize) -> Self {
        Self::linear("add", Action::AddWorker(k), k as f64)
    }

    /// `remove(k)` with T' = T·(n-k)/n.
    pub fn linear_remove(k: usize) -> Self {
        Self::linear("remove", Action::RemoveWorker(k), -(k as f64))
    }

    fn linear(label: &str, action: Action, delta: f64) -> Self {
        let n = Expr::var(WORKERS);
        let scaled = Expr::bin(
            BinOp::Div,
            Expr::bin(BinOp::Mul, Expr::var("throughput"), Expr::bin(BinOp::Add, n.clone(), Expr::Num(delta))),
            n,
        );
        ReconfigurationPlan {
            name: format!("{label}({})", delta.abs()),
            actions: vec![action],
            forecast: vec![("throughput".into(), scaled)],
        }
    }

    /// Net number of workers the plan adds.
    pub fn added_workers(&self) -> i64 {
        self.actions
            .iter()
            .map(|a| match a {
                Action::AddWorker(k) => *k as i64,
                Action::RemoveWorker(k) => -(*k as i64),
                Action::Rebind => 0,
            })
            .sum()
    }

    /// Bindings overridden by the forecast, restricted to `vars`.
    pub fn forecast(&self, bindings: &Bindings, vars: &BTreeSet<String>) -> Result<Bindings, ExprError> {
        let mut out = bindings.clone();
        for (var, e) in &self.forecast {
            if vars.contains(var) {
                out.insert(var.clone(), e.eval_num(bindings)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub plan: String,
    pub forecast: Option<Bindings>,
    pub valid: bool,
    pub error: Option<String>,
}

/// Evaluates each plan's forecast against the contract. Returns the index
/// of the valid plan adding the fewest workers (first declared on ties),
/// and the verdicts for all plans.
pub fn select_plan(plans: &[ReconfigurationPlan], bindings: &Bindings, contract: &QosContract) -> (Option<usize>, Vec<Verdict>) {
    let mut verdicts = Vec::with_capacity(plans.len());
    let mut best: Option<usize> = None;
    for (i, plan) in plans.iter().enumerate() {
        let outcome = plan.forecast(bindings, contract.vars()).and_then(|b| contract.holds(&b).map(|ok| (b, ok)));
        let verdict = match outcome {
            Ok((b, valid)) => Verdict { plan: plan.name.clone(), forecast: Some(b), valid, error: None },
            Err(e) => Verdict { plan: plan.name.clone(), forecast: None, valid: false, error: Some(e.to_string()) },
        };
        if verdict.valid && best.is_none_or(|j| plan.added_workers() < plans[j].added_workers()) {
            best = Some(i);
        }
        verdicts.push(verdict);
    }
    (best, verdicts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CheckOutcome {
    Satisfied,
    Violated { details: String },
}

impl CheckOutcome {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, CheckOutcome::Satisfied)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EscalationEvent {
    pub contract: String,
    pub bindings: Bindings,
    pub verdicts: Vec<Verdict>,
    pub ts_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TickOutcome {
    NoContract,
    /// Measures are still settling after start-up or a reconfiguration.
    Settling,
    Satisfied,
    Reconfigured { plan: String },
    Escalated,
    /// Violated, with escalation already reported for this episode.
    Violated,
}

#[derive(Clone, Debug)]
pub struct ManagerConfig {
    pub tick: Duration,
    /// Trailing window of the throughput measure.
    pub window: Duration,
    /// Ticks after a reconfiguration during which no further plan runs.
    pub cooldown_ticks: u64,
    /// After start-up or a reconfiguration, QoS checks wait this long so the
    /// measures no longer cover the previous configuration.
    pub settle: Duration,
    pub stop_timeout: Duration,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            tick: Duration::from_secs(1),
            window: DEFAULT_THROUGHPUT_WINDOW,
            cooldown_ticks: 2,
            settle: DEFAULT_THROUGHPUT_WINDOW,
            stop_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Default)]
struct Control {
    ticks: u64,
    quiet_until_tick: u64,
    settle_from: Option<Instant>,
    /// `Some(escalated)` while a violation episode is open.
    episode: Option<bool>,
    fallback: Option<WorkerId>,
}

type EscalationHook = Box<dyn Fn(&EscalationEvent) + Send + Sync>;

struct Inner {
    runtime: Arc<Runtime>,
    events: EventLog,
    config: ManagerConfig,
    contract: Mutex<Option<Contract>>,
    sensors: Mutex<BTreeMap<String, Sensor>>,
    available: Mutex<VecDeque<WorkerSpec>>,
    plans: Mutex<Option<Vec<ReconfigurationPlan>>>,
    control: Mutex<Control>,
    reconfig: Mutex<()>,
    on_escalation: Mutex<Option<EscalationHook>>,
    escalations: AtomicU64,
    reconfigurations: AtomicU64,
    running: AtomicBool,
    thread: Mutex<Option<JoinHandle<()>>>,
}

/// Autonomic manager over one runtime.
#[derive(Clone)]
pub struct Manager {
    inner: Arc<Inner>,
}

impl Manager {
    pub fn new(runtime: Arc<Runtime>, events: EventLog, config: ManagerConfig) -> Self {
        let m = Manager {
            inner: Arc::new(Inner {
                runtime,
                events,
                config,
                contract: Mutex::new(None),
                sensors: Mutex::new(BTreeMap::new()),
                available: Mutex::new(VecDeque::new()),
                plans: Mutex::new(None),
                control: Mutex::new(Control::default()),
                reconfig: Mutex::new(()),
                on_escalation: Mutex::new(None),
                escalations: AtomicU64::new(0),
                reconfigurations: AtomicU64::new(0),
                running: AtomicBool::new(false),
                thread: Mutex::new(None),
            }),
        };
        m.register_builtin_sensors();
        m
    }

    fn register_builtin_sensors(&self) {
        let rt = self.inner.runtime.clone();
        let window = self.inner.config.window;
        self.register_sensor("throughput", Harmonizer::Sum, Duration::ZERO, move || Ok(vec![rt.pool().throughput(window)]));
        let rt = self.inner.runtime.clone();
        self.register_sensor(WORKERS, Harmonizer::Sum, Duration::ZERO, move || Ok(vec![rt.active_count() as f64]));
        let rt = self.inner.runtime.clone();
        self.register_sensor("pending", Harmonizer::Sum, Duration::ZERO, move || Ok(vec![rt.pool().pending_count() as f64]));
        let rt = self.inner.runtime.clone();
        let last: Mutex<(Instant, BTreeMap<WorkerId, f64>)> = Mutex::new((Instant::now(), BTreeMap::new()));
        self.register_sensor("load", Harmonizer::Average, self.inner.config.tick, move || {
            let mut last = last.lock();
            let now = Instant::now();
            let span_ms = now.duration_since(last.0).as_secs_f64() * 1e3;
            let mut loads = Vec::new();
            let mut seen = BTreeMap::new();
            for d in rt.descriptors() {
                if let Some(prev) = last.1.get(&d.id) {
                    if span_ms > 0.0 {
                        loads.push(((d.busy_ms - prev) / span_ms).clamp(0.0, 1.0));
                    }
                }
                seen.insert(d.id, d.busy_ms);
            }
            *last = (now, seen);
            Ok(loads)
        });
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.inner.runtime
    }

    pub fn events(&self) -> &EventLog {
        &self.inner.events
    }

    /// Registers a measure. `source` returns one sample per contributing
    /// source (worker or runtime); samples are kept for `window` and
    /// harmonized on read.
    pub fn register_sensor<F>(&self, name: &str, harmonizer: Harmonizer, window: Duration, source: F)
    where
        F: Fn() -> Result<Vec<f64>, String> + Send + Sync + 'static,
    {
        self.inner.sensors.lock().insert(
            name.to_string(),
            Sensor { harmonizer, source: Box::new(source), samples: MeasureWindow::new(name, window) },
        );
    }

    pub fn get_measure(&self, name: &str) -> Result<f64, ManagerError> {
        let mut sensors = self.inner.sensors.lock();
        let sensor = sensors.get_mut(name).ok_or_else(|| ManagerError::SensorUnavailable(name.to_string()))?;
        let values = (sensor.source)().map_err(|e| {
            log::warn!("sensor {name}: {e}");
            ManagerError::SensorUnavailable(name.to_string())
        })?;
        let now = Instant::now();
        for v in values {
            sensor.samples.push(now, v);
        }
        sensor.harmonizer.apply(&sensor.samples.values()).ok_or_else(|| ManagerError::SensorUnavailable(name.to_string()))
    }

    /// Specs the manager may recruit from, in order.
    pub fn add_recruitable(&self, specs: impl IntoIterator<Item = WorkerSpec>) {
        self.inner.available.lock().extend(specs);
    }

    pub fn recruitable(&self) -> usize {
        self.inner.available.lock().len()
    }

    /// Replaces the default plans (`add(1)`, `add(2)`, `add(4)`).
    pub fn set_plans(&self, plans: Vec<ReconfigurationPlan>) {
        *self.inner.plans.lock() = Some(plans);
    }

    pub fn on_escalation(&self, hook: impl Fn(&EscalationEvent) + Send + Sync + 'static) {
        *self.inner.on_escalation.lock() = Some(Box::new(hook));
    }

    pub fn escalation_count(&self) -> u64 {
        self.inner.escalations.load(Ordering::SeqCst)
    }

    pub fn reconfiguration_count(&self) -> u64 {
        self.inner.reconfigurations.load(Ordering::SeqCst)
    }

    pub fn contract(&self) -> Option<Contract> {
        self.inner.contract.lock().clone()
    }

    pub fn set_contract(&self, c: Contract) -> Result<(), ManagerError> {
        if let Contract::Qos(q) = &c {
            let sensors = self.inner.sensors.lock();
            if let Some(v) = q.vars().iter().find(|v| !sensors.contains_key(*v)) {
                return Err(ManagerError::UnmonitorableVariable(v.clone()));
            }
        }
        self.inner.events.record("contract_set", json!({ "contract": c.to_string() }));
        *self.inner.contract.lock() = Some(c);
        let mut ctl = self.inner.control.lock();
        ctl.episode = None;
        Ok(())
    }

    /// Degree a ParDegree(n) contract resolves to given current resources.
    pub fn best_effort_degree(&self, n: usize) -> usize {
        let recruitable = self.inner.runtime.active_count() + self.recruitable();
        n.min(recruitable).max(1)
    }

    pub fn check_contract(&self, bindings: &Bindings) -> CheckOutcome {
        let Some(contract) = self.contract() else { return CheckOutcome::Satisfied };
        match contract {
            Contract::Performance(PerformanceContract::ParDegree(n)) => {
                let active = self.inner.runtime.active_count();
                let target = self.best_effort_degree(n);
                if active == target {
                    CheckOutcome::Satisfied
                } else {
                    CheckOutcome::Violated { details: format!("{active} active workers, want {target}") }
                }
            }
            other => {
                let q = other.as_qos().expect("non-degree contracts have a QoS form");
                match q.holds(bindings) {
                    Ok(true) => CheckOutcome::Satisfied,
                    Ok(false) => CheckOutcome::Violated { details: format!("{} does not hold", q.predicate()) },
                    Err(e) => CheckOutcome::Violated { details: e.to_string() },
                }
            }
        }
    }

    /// Recruits `k` workers: pause dispatch, create and verify each worker,
    /// bind them, resume dispatch. Returns the number added.
    pub fn add_worker(&self, k: usize) -> Result<usize, ManagerError> {
        let _one = self.inner.reconfig.lock();
        self.add_worker_locked(k)
    }

    fn add_worker_locked(&self, k: usize) -> Result<usize, ManagerError> {
        let ev = &self.inner.events;
        if k == 0 {
            return Ok(0);
        }
        if self.inner.available.lock().is_empty() {
            return Err(ManagerError::RecruitmentFailed(0));
        }
        let pool = self.inner.runtime.pool();
        let stopped = pool.pause();
        ev.record("add_worker_phase", json!({ "phase": "stop", "at_ms": clock::to_ms(stopped) }));
        let mut created: Vec<NewWorker> = Vec::new();
        while created.len() < k {
            let Some(spec) = self.inner.available.lock().pop_front() else { break };
            match self.inner.runtime.create_worker(&spec) {
                Ok(w) => {
                    ev.record("add_worker_phase", json!({ "phase": "new", "spec": spec.to_string() }));
                    created.push(w);
                }
                Err(e) => {
                    log::warn!("recruiting {spec}: {e}");
                    ev.record("recruit_failed", json!({ "spec": spec.to_string(), "error": e.to_string() }));
                }
            }
        }
        let added = created.len();
        for w in created {
            let id = self.inner.runtime.bind(w);
            ev.record("add_worker_phase", json!({ "phase": "bind", "worker": id.0 }));
        }
        let resumed = pool.resume();
        ev.record("add_worker_phase", json!({ "phase": "restart", "at_ms": clock::to_ms(resumed) }));
        ev.record("add_worker", json!({ "requested": k, "added": added, "active": self.inner.runtime.active_count() }));
        if added < k {
            Err(ManagerError::RecruitmentFailed(added))
        } else {
            Ok(added)
        }
    }

    /// Drains and unbinds the `k` most recently bound workers. Their specs
    /// become recruitable again.
    pub fn remove_worker(&self, k: usize) -> Result<usize, ManagerError> {
        let _one = self.inner.reconfig.lock();
        self.remove_worker_locked(k)
    }

    fn remove_worker_locked(&self, k: usize) -> Result<usize, ManagerError> {
        let active = self.inner.runtime.active_workers();
        if k >= active.len() {
            return Err(ManagerError::WouldEmptyPool(k));
        }
        for id in active.iter().rev().take(k) {
            let d = self.inner.runtime.unbind(*id)?;
            self.inner.available.lock().push_front(d.spec.clone());
            self.inner.events.record("remove_worker", json!({ "worker": id.0 }));
        }
        Ok(k)
    }

    fn default_plans() -> Vec<ReconfigurationPlan> {
        vec![ReconfigurationPlan::linear_add(1), ReconfigurationPlan::linear_add(2), ReconfigurationPlan::linear_add(4)]
    }

    /// Plans whose actions the current resources allow.
    fn executable_plans(&self) -> Vec<ReconfigurationPlan> {
        let plans = self.inner.plans.lock().clone().unwrap_or_else(Self::default_plans);
        let available = self.recruitable() as i64;
        let active = self.inner.runtime.active_count() as i64;
        plans
            .into_iter()
            .filter(|p| {
                let adds: i64 = p.actions.iter().map(|a| if let Action::AddWorker(k) = a { *k as i64 } else { 0 }).sum();
                adds <= available && active + p.added_workers() >= 1
            })
            .collect()
    }

    fn execute_plan(&self, plan: &ReconfigurationPlan) -> Result<(), ManagerError> {
        let _one = self.inner.reconfig.lock();
        for action in &plan.actions {
            match action {
                Action::AddWorker(k) => {
                    self.add_worker_locked(*k)?;
                }
                Action::RemoveWorker(k) => {
                    self.remove_worker_locked(*k)?;
                }
                Action::Rebind => {}
            }
        }
        Ok(())
    }

    /// Unbinds failed workers and keeps at least one worker running.
    fn tend_workers(&self) {
        for notice in self.inner.runtime.take_failures() {
            let _ = self.inner.runtime.unbind(notice.worker);
            self.inner.events.record("worker_lost", json!({ "worker": notice.worker.0, "error": notice.error }));
        }
        if self.inner.runtime.active_count() > 0 {
            return;
        }
        if self.recruitable() > 0 && self.add_worker(1).is_ok() {
            return;
        }
        match self.inner.runtime.recruit(&WorkerSpec::Local) {
            Ok(d) => {
                self.inner.control.lock().fallback = Some(d.id);
                self.inner.events.record("fallback_local", json!({ "worker": d.id.0 }));
            }
            Err(e) => log::error!("local fallback worker: {e}"),
        }
    }

    /// One monitor, analyse, plan, execute cycle.
    pub fn control_tick(&self) -> TickOutcome {
        let started = Instant::now();
        let outcome = self.tick_inner();
        self.inner.events.record(
            "tick",
            json!({ "outcome": outcome, "duration_ms": started.elapsed().as_secs_f64() * 1e3, "workers": self.inner.runtime.active_count() }),
        );
        outcome
    }

    fn tick_inner(&self) -> TickOutcome {
        self.tend_workers();
        let tick = {
            let mut ctl = self.inner.control.lock();
            ctl.ticks += 1;
            ctl.settle_from.get_or_insert_with(Instant::now);
            ctl.ticks
        };
        let Some(contract) = self.contract() else { return TickOutcome::NoContract };
        if let Contract::Performance(PerformanceContract::ParDegree(n)) = contract {
            return self.enforce_degree(n);
        }
        let q = contract.as_qos().expect("QoS form");
        {
            let ctl = self.inner.control.lock();
            let settled = ctl.settle_from.is_some_and(|t| t.elapsed() >= self.inner.config.settle);
            if tick < ctl.quiet_until_tick || !settled {
                return TickOutcome::Settling;
            }
        }
        let mut bindings = Bindings::new();
        for v in q.vars() {
            match self.get_measure(v) {
                Ok(x) => {
                    bindings.insert(v.clone(), x);
                }
                Err(e) => log::warn!("measure {v}: {e}"),
            }
        }
        if !bindings.contains_key(WORKERS) {
            bindings.insert(WORKERS.into(), self.inner.runtime.active_count() as f64);
        }
        match self.check_contract(&bindings) {
            CheckOutcome::Satisfied => {
                if self.inner.control.lock().episode.take().is_some() {
                    self.inner.events.record("satisfied", json!({ "bindings": bindings }));
                }
                TickOutcome::Satisfied
            }
            CheckOutcome::Violated { details } => self.on_violation(&contract, &q, bindings, details),
        }
    }

    fn on_violation(&self, contract: &Contract, q: &QosContract, bindings: Bindings, details: String) -> TickOutcome {
        let escalated = {
            let mut ctl = self.inner.control.lock();
            if ctl.episode.is_none() {
                self.inner.events.record("violation", json!({ "bindings": bindings, "details": details }));
            }
            *ctl.episode.get_or_insert(false)
        };
        let plans = self.executable_plans();
        let (choice, verdicts) = select_plan(&plans, &bindings, q);
        if let Some(i) = choice {
            let plan = &plans[i];
            self.inner.events.record("plan_selected", json!({ "plan": plan.name, "verdicts": verdicts }));
            if let Err(e) = self.execute_plan(plan) {
                log::warn!("plan {}: {e}", plan.name);
            }
            self.inner.reconfigurations.fetch_add(1, Ordering::SeqCst);
            let mut ctl = self.inner.control.lock();
            ctl.quiet_until_tick = ctl.ticks + 1 + self.inner.config.cooldown_ticks;
            ctl.settle_from = Some(Instant::now());
            ctl.episode = None;
            return TickOutcome::Reconfigured { plan: plan.name.clone() };
        }
        if escalated {
            return TickOutcome::Violated;
        }
        let event = EscalationEvent { contract: contract.to_string(), bindings, verdicts, ts_ms: clock::now_ms() };
        self.inner.events.record("escalation", serde_json::to_value(&event).unwrap_or_default());
        self.inner.escalations.fetch_add(1, Ordering::SeqCst);
        if let Some(hook) = self.inner.on_escalation.lock().as_ref() {
            hook(&event);
        }
        self.inner.control.lock().episode = Some(true);
        TickOutcome::Escalated
    }

    fn enforce_degree(&self, n: usize) -> TickOutcome {
        let active = self.inner.runtime.active_count();
        let target = self.best_effort_degree(n);
        let fallback = self.inner.control.lock().fallback;
        if active == target {
            return TickOutcome::Satisfied;
        }
        self.inner.events.record("violation", json!({ "details": format!("{active} active workers, want {target}") }));
        let result = if active < target {
            self.add_worker(target - active).map(|_| format!("add({})", target - active))
        } else {
            self.remove_worker(active - target).map(|_| format!("remove({})", active - target))
        };
        if let Some(id) = fallback {
            if self.inner.runtime.active_count() > 1 && active < target {
                let _ = self.inner.runtime.unbind(id);
                self.inner.control.lock().fallback = None;
            }
        }
        match result {
            Ok(plan) => {
                self.inner.reconfigurations.fetch_add(1, Ordering::SeqCst);
                TickOutcome::Reconfigured { plan }
            }
            Err(e) => {
                log::warn!("enforcing degree {n}: {e}");
                TickOutcome::Violated
            }
        }
    }

    /// Brings the pool to the contract's degree right away (ParDegree) or
    /// makes sure at least one worker runs.
    pub fn provision(&self) {
        if let Some(Contract::Performance(PerformanceContract::ParDegree(n))) = self.contract() {
            self.enforce_degree(n);
        }
        self.tend_workers();
    }

    /// Starts the control thread, ticking every `config.tick`.
    pub fn start(&self) {
        if self.inner.running.swap(true, Ordering::SeqCst) {
            return;
        }
        let me = self.clone();
        let handle = thread::Builder::new()
            .name("manager".into())
            .spawn(move || {
                let period = me.inner.config.tick;
                let mut next = Instant::now() + period;
                while me.inner.running.load(Ordering::SeqCst) {
                    let now = Instant::now();
                    if now < next {
                        thread::sleep((next - now).min(Duration::from_millis(20)));
                        continue;
                    }
                    me.control_tick();
                    next += period;
                }
            })
            .expect("spawning the manager thread");
        *self.inner.thread.lock() = Some(handle);
    }

    pub fn stop(&self) {
        self.inner.running.store(false, Ordering::SeqCst);
        if let Some(h) = self.inner.thread.lock().take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::int;
    use crate::compiler::{compile, Skeleton};
    use crate::opcode::OpcodeRegistry;
    use crate::taskpool::TaskPool;

    fn b(pairs: &[(&str, f64)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn setup() -> Manager {
        let mut r = OpcodeRegistry::new();
        r.register_unary("id", |p| Ok(p.clone())).unwrap();
        let (pool, _rx) = TaskPool::with_channel();
        let rt = Runtime::new(pool, Arc::new(r));
        Manager::new(Arc::new(rt), EventLog::new(), ManagerConfig::default())
    }

    fn throughput(r: f64) -> QosContract {
        Contract::Performance(PerformanceContract::Throughput(r)).as_qos().unwrap()
    }

    #[test]
    fn contract_parsing() {
        assert_eq!("pardegree:8".parse::<Contract>().unwrap(), Contract::Performance(PerformanceContract::ParDegree(8)));
        assert_eq!("throughput:1.5".parse::<Contract>().unwrap(), Contract::Performance(PerformanceContract::Throughput(1.5)));
        let q = "qos: V=throughput; E=throughput>1.5".parse::<Contract>().unwrap();
        assert_eq!(q.as_qos(), Some(throughput(1.5)));
        assert!(matches!("throughput:0".parse::<Contract>(), Err(ManagerError::BadContract(_))));
        assert!(matches!("speed:3".parse::<Contract>(), Err(ManagerError::BadContract(_))));
    }

    #[test]
    fn closure_check() {
        let err = "qos: V=FPS; E=latency < 3".parse::<Contract>().unwrap_err();
        assert_eq!(err, ManagerError::UnmonitorableVariable("latency".into()));
        let m = setup();
        let c = Contract::Qos(QosContract::new(["fps"], "fps > 3".parse().unwrap()).unwrap());
        assert_eq!(m.set_contract(c), Err(ManagerError::UnmonitorableVariable("fps".into())));
        assert!(m.set_contract("throughput:1.5".parse().unwrap()).is_ok());
    }

    #[test]
    fn check_throughput() {
        let m = setup();
        m.set_contract("throughput:1.5".parse().unwrap()).unwrap();
        assert!(m.check_contract(&b(&[("throughput", 3.5)])).is_satisfied());
        assert!(!m.check_contract(&b(&[("throughput", 1.2)])).is_satisfied());
    }

    #[test]
    fn check_pardegree() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local; 4]);
        m.set_contract("pardegree:4".parse().unwrap()).unwrap();
        assert!(!m.check_contract(&Bindings::new()).is_satisfied());
        m.provision();
        assert_eq!(m.runtime().active_count(), 4);
        assert!(m.check_contract(&Bindings::new()).is_satisfied());
    }

    #[test]
    fn pardegree_best_effort() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local; 7]);
        m.set_contract("pardegree:10".parse().unwrap()).unwrap();
        assert_eq!(m.best_effort_degree(10), 7);
        m.provision();
        assert_eq!(m.runtime().active_count(), 7);
        assert!(m.check_contract(&Bindings::new()).is_satisfied());
    }

    #[test]
    fn zero_recruitable_falls_back_to_local() {
        let m = setup();
        m.set_contract("pardegree:3".parse().unwrap()).unwrap();
        m.provision();
        assert_eq!(m.runtime().active_count(), 1);
        assert_eq!(m.events().of_kind("fallback_local").len(), 1);
        let t = compile(&Skeleton::seq("id")).unwrap();
        m.runtime().pool().submit_task(&t, int(5)).unwrap();
        assert!(m.runtime().pool().wait_idle(Duration::from_secs(5)));
    }

    #[test]
    fn select_plan_examples() {
        let bind = b(&[("throughput", 1.2), (WORKERS, 4.0)]);
        let plans = vec![ReconfigurationPlan::linear_add(2)];
        let (pick, v) = select_plan(&plans, &bind, &throughput(1.5));
        assert_eq!(pick, Some(0));
        assert!((v[0].forecast.as_ref().unwrap()["throughput"] - 1.8).abs() < 1e-12);

        let plans = vec![ReconfigurationPlan::linear_add(2), ReconfigurationPlan::linear_add(1)];
        let (pick, v) = select_plan(&plans, &bind, &throughput(1.5));
        assert_eq!(v[1].forecast.as_ref().unwrap()["throughput"], 1.5);
        assert!(!v[1].valid);
        assert_eq!(pick, Some(0));

        let (pick, v) = select_plan(&plans, &b(&[("throughput", 0.5), (WORKERS, 4.0)]), &throughput(1.5));
        assert_eq!(pick, None);
        assert!(v.iter().all(|v| !v.valid));
    }

    #[test]
    fn select_plan_prefers_fewest_then_first() {
        let bind = b(&[("throughput", 1.0), (WORKERS, 2.0)]);
        let mut a = ReconfigurationPlan::linear_add(2);
        a.name = "a".into();
        let mut c = ReconfigurationPlan::linear_add(2);
        c.name = "c".into();
        let plans = vec![ReconfigurationPlan::linear_add(4), a, c];
        assert_eq!(select_plan(&plans, &bind, &throughput(1.5)).0, Some(1));
    }

    #[test]
    fn forecast_only_touches_contract_vars() {
        let mut p = ReconfigurationPlan::linear_add(1);
        p.forecast.push(("latency".into(), Expr::Num(0.0)));
        let out = p.forecast(&b(&[("throughput", 2.0), (WORKERS, 2.0)]), &BTreeSet::from(["throughput".to_string()])).unwrap();
        assert_eq!(out.get("latency"), None);
        assert_eq!(out["throughput"], 3.0);
    }

    #[test]
    fn harmonizers() {
        assert!((Harmonizer::Average.apply(&[0.4, 0.4, 0.4]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(Harmonizer::Max.apply(&[1.0, 3.0]), Some(3.0));
        assert_eq!(Harmonizer::Min.apply(&[1.0, 3.0]), Some(1.0));
        assert_eq!(Harmonizer::Sum.apply(&[1.0, 3.0]), Some(4.0));
        assert_eq!(Harmonizer::Sum.apply(&[]), None);
    }

    #[test]
    fn measures() {
        let m = setup();
        m.register_sensor("load", Harmonizer::Average, Duration::from_secs(1), || Ok(vec![0.4; 4]));
        assert!((m.get_measure("load").unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(m.get_measure("nope"), Err(ManagerError::SensorUnavailable("nope".into())));
        m.register_sensor("broken", Harmonizer::Sum, Duration::ZERO, || Err("down".into()));
        assert_eq!(m.get_measure("broken"), Err(ManagerError::SensorUnavailable("broken".into())));
        assert_eq!(m.get_measure("throughput").unwrap(), 0.0);
    }

    #[test]
    fn measure_window_prunes() {
        let mut w = MeasureWindow::new("x", Duration::from_millis(10));
        let t0 = Instant::now();
        w.push(t0, 1.0);
        w.push(t0 + Duration::from_millis(5), 2.0);
        w.push(t0 + Duration::from_millis(20), 3.0);
        assert_eq!(w.values(), vec![3.0]);
        w.push(t0, 4.0);
        assert_eq!(w.values(), vec![3.0, 4.0]);
    }

    #[test]
    fn add_worker_phases() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local; 3]);
        m.add_worker(2).unwrap();
        assert_eq!(m.runtime().active_count(), 2);
        let before = m.events().of_kind("add_worker_phase").len();
        m.add_worker(1).unwrap();
        let phases: Vec<String> = m.events().of_kind("add_worker_phase")[before..]
            .iter()
            .map(|e| e.detail["phase"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(phases, ["stop", "new", "bind", "restart"]);
        assert_eq!(m.runtime().active_count(), 3);
        assert!(!m.runtime().pool().is_paused());
    }

    #[test]
    fn add_worker_without_specs() {
        let m = setup();
        assert_eq!(m.add_worker(1), Err(ManagerError::RecruitmentFailed(0)));
        assert!(m.events().of_kind("add_worker_phase").is_empty());
        assert_eq!(m.runtime().active_count(), 0);
    }

    #[test]
    fn add_worker_partial() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local]);
        assert_eq!(m.add_worker(2), Err(ManagerError::RecruitmentFailed(1)));
        assert_eq!(m.runtime().active_count(), 1);
        assert!(!m.runtime().pool().is_paused());
    }

    #[test]
    fn remove_worker_bounds() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local; 3]);
        m.add_worker(3).unwrap();
        assert_eq!(m.remove_worker(3), Err(ManagerError::WouldEmptyPool(3)));
        m.remove_worker(1).unwrap();
        assert_eq!(m.runtime().active_count(), 2);
        assert_eq!(m.recruitable(), 1);
    }

    fn fast_config() -> ManagerConfig {
        ManagerConfig { settle: Duration::ZERO, ..Default::default() }
    }

    #[test]
    fn tick_escalates_once_per_episode() {
        let mut r = OpcodeRegistry::new();
        r.register_unary("id", |p| Ok(p.clone())).unwrap();
        let (pool, _rx) = TaskPool::with_channel();
        let m = Manager::new(Arc::new(Runtime::new(pool, Arc::new(r))), EventLog::new(), fast_config());
        m.add_recruitable(vec![WorkerSpec::Local]);
        m.add_worker(1).unwrap();
        let hits = Arc::new(AtomicU64::new(0));
        let h = hits.clone();
        m.on_escalation(move |_| {
            h.fetch_add(1, Ordering::SeqCst);
        });
        // no throughput at all: no plan can forecast above the threshold
        m.set_contract("throughput:1.5".parse().unwrap()).unwrap();
        assert_eq!(m.control_tick(), TickOutcome::Escalated);
        assert_eq!(m.control_tick(), TickOutcome::Violated);
        assert_eq!(m.control_tick(), TickOutcome::Violated);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert_eq!(m.escalation_count(), 1);
        assert_eq!(m.events().of_kind("escalation").len(), 1);
    }

    #[test]
    fn tick_reconfigures_then_cools_down() {
        let m = setup();
        let m = Manager::new(m.runtime().clone(), EventLog::new(), fast_config());
        m.add_recruitable(vec![WorkerSpec::Local; 4]);
        m.add_worker(2).unwrap();
        let fake = Arc::new(Mutex::new(1.0f64));
        let f = fake.clone();
        m.register_sensor("throughput", Harmonizer::Sum, Duration::ZERO, move || Ok(vec![*f.lock()]));
        m.set_contract("throughput:1.2".parse().unwrap()).unwrap();
        assert_eq!(m.control_tick(), TickOutcome::Reconfigured { plan: "add(1)".into() });
        assert_eq!(m.runtime().active_count(), 3);
        assert_eq!(m.control_tick(), TickOutcome::Settling);
        assert_eq!(m.control_tick(), TickOutcome::Settling);
        *fake.lock() = 1.5;
        assert_eq!(m.control_tick(), TickOutcome::Satisfied);
        assert_eq!(m.control_tick(), TickOutcome::Satisfied);
        assert_eq!(m.reconfiguration_count(), 1);
    }

    #[test]
    fn satisfied_contract_no_action() {
        let m = Manager::new(setup().runtime().clone(), EventLog::new(), fast_config());
        m.add_recruitable(vec![WorkerSpec::Local; 2]);
        m.add_worker(1).unwrap();
        m.register_sensor("throughput", Harmonizer::Sum, Duration::ZERO, || Ok(vec![9.0]));
        m.set_contract("throughput:1.5".parse().unwrap()).unwrap();
        for _ in 0..3 {
            assert_eq!(m.control_tick(), TickOutcome::Satisfied);
        }
        assert_eq!(m.reconfiguration_count(), 0);
    }

    #[test]
    fn failed_workers_are_replaced_for_degree() {
        let m = setup();
        m.add_recruitable(vec![WorkerSpec::Local; 3]);
        m.set_contract("pardegree:2".parse().unwrap()).unwrap();
        m.provision();
        let victim = m.runtime().active_workers()[0];
        m.runtime().kill_worker(victim).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while m.runtime().active_count() == 2 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        m.control_tick();
        assert_eq!(m.runtime().active_count(), 2);
        assert_eq!(m.events().of_kind("worker_lost").len(), 1);
    }
}
