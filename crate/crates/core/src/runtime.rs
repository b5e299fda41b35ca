//! The distributed macro data-flow interpreter.
//!
//! Each bound worker gets one control loop: fetch a fireable instruction
//! from the task pool, run it on the worker's interpreter, route the
//! outputs. A transport failure requeues the instruction at the head of the
//! queue, marks the worker failed and leaves a notice for the manager. An
//! opcode that raises an error fails only its own stream item.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use thiserror::Error;

use crate::clock;
use crate::codec::Payload;
use crate::events::EventLog;
use crate::opcode::{manifest_mismatches, OpcodeRegistry, OpcodeSig};
use crate::taskpool::{Dispatch, TaskPool};
use crate::wire::{read_frame, write_frame, Frame, WireError, PROTO_VERSION};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// How to obtain a worker: an in-process interpreter or a daemon address.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum WorkerSpec {
    Local,
    Remote(String),
}

impl fmt::Display for WorkerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerSpec::Local => write!(f, "local"),
            WorkerSpec::Remote(addr) => write!(f, "{addr}"),
        }
    }
}

impl FromStr for WorkerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "local" => Ok(WorkerSpec::Local),
            _ => {
                let addr = s.strip_prefix("remote:").unwrap_or(s);
                match addr.rsplit_once(':') {
                    Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                        Ok(WorkerSpec::Remote(addr.to_string()))
                    }
                    _ => Err(format!("bad worker spec `{s}`: expected `local` or host:port")),
                }
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Idle,
    Busy,
    Stopped,
    Failed,
    /// Unbound from the pool; the control loop has exited.
    Retired,
}

/// Snapshot of one worker.
#[derive(Clone, Debug, Serialize)]
pub struct WorkerDescriptor {
    pub id: WorkerId,
    pub spec: WorkerSpec,
    pub state: WorkerState,
    pub completed: u64,
    pub busy_ms: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("no reply before the deadline")]
    Timeout,
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The opcode itself raised an error (locally or in a FAIL frame).
    #[error("{0}")]
    Opcode(String),
}

impl ExecError {
    /// Errors that say nothing about the worker's health.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, ExecError::Opcode(_))
    }
}

impl From<WireError> for ExecError {
    fn from(e: WireError) -> Self {
        if e.is_timeout() {
            return ExecError::Timeout;
        }
        match e {
            WireError::Io(io) => ExecError::ConnectionLost(io.to_string()),
            other => ExecError::Protocol(other.to_string()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("worker at {0} unreachable: {1}")]
    Unreachable(String, String),
    #[error("worker manifest lacks or disagrees on opcodes {0:?}")]
    OpcodeManifestMismatch(Vec<String>),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("worker {0} is {1:?}")]
    BadState(WorkerId, WorkerState),
    #[error("no worker {0}")]
    UnknownWorker(WorkerId),
    #[error("worker {0} did not stop in time")]
    StopTimeout(WorkerId),
}

/// An interpreter able to run one instruction at a time.
pub trait Executor: Send + Sync {
    fn execute(&self, opcode: &str, args: Vec<Payload>, deadline: Duration) -> Result<Vec<Payload>, ExecError>;

    /// Releases transport resources. Later calls to `execute` fail.
    fn shutdown(&self) {}
}

/// In-process interpreter sharing the client's registry.
pub struct LocalExecutor {
    registry: Arc<OpcodeRegistry>,
}

impl LocalExecutor {
    pub fn new(registry: Arc<OpcodeRegistry>) -> Self {
        LocalExecutor { registry }
    }
}

impl Executor for LocalExecutor {
    fn execute(&self, opcode: &str, args: Vec<Payload>, _deadline: Duration) -> Result<Vec<Payload>, ExecError> {
        self.registry.call(opcode, &args).map_err(|e| ExecError::Opcode(e.to_string()))
    }
}

/// Client side of a connection to a worker daemon.
pub struct RemoteExecutor {
    addr: String,
    conn: Mutex<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    raw: TcpStream,
    next_id: AtomicU64,
    manifest: Vec<OpcodeSig>,
}

impl RemoteExecutor {
    /// Connects and performs the HELLO/READY handshake.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, RuntimeError> {
        let unreachable = |e: &dyn fmt::Display| RuntimeError::Unreachable(addr.to_string(), e.to_string());
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| unreachable(&e))?
            .next()
            .ok_or_else(|| unreachable(&"no address"))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| unreachable(&e))?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(timeout)).map_err(|e| unreachable(&e))?;
        let mut reader = BufReader::new(stream.try_clone().map_err(|e| unreachable(&e))?);
        let mut writer = BufWriter::new(stream.try_clone().map_err(|e| unreachable(&e))?);
        write_frame(&mut writer, &Frame::Hello { version: PROTO_VERSION }).map_err(|e| unreachable(&e))?;
        let manifest = match read_frame(&mut reader) {
            Ok(Frame::Ready { manifest }) => manifest,
            Ok(Frame::Error { message }) => return Err(RuntimeError::Handshake(message)),
            Ok(other) => return Err(RuntimeError::Handshake(format!("unexpected reply {other:?}"))),
            Err(e) => return Err(RuntimeError::Handshake(e.to_string())),
        };
        Ok(RemoteExecutor {
            addr: addr.to_string(),
            conn: Mutex::new((reader, writer)),
            raw: stream,
            next_id: AtomicU64::new(1),
            manifest,
        })
    }

    pub fn manifest(&self) -> &[OpcodeSig] {
        &self.manifest
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn ping(&self, timeout: Duration) -> Result<(), ExecError> {
        let mut conn = self.conn.lock();
        self.raw.set_read_timeout(Some(timeout)).map_err(|e| ExecError::ConnectionLost(e.to_string()))?;
        write_frame(&mut conn.1, &Frame::Ping)?;
        match read_frame(&mut conn.0)? {
            Frame::Pong => Ok(()),
            other => Err(ExecError::Protocol(format!("expected PONG, got {other:?}"))),
        }
    }
}

impl Executor for RemoteExecutor {
    fn execute(&self, opcode: &str, args: Vec<Payload>, deadline: Duration) -> Result<Vec<Payload>, ExecError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut conn = self.conn.lock();
        self.raw.set_read_timeout(Some(deadline)).map_err(|e| ExecError::ConnectionLost(e.to_string()))?;
        write_frame(&mut conn.1, &Frame::Exec { id, opcode: opcode.to_string(), args })?;
        match read_frame(&mut conn.0)? {
            Frame::Result { id: got, outputs } if got == id => Ok(outputs),
            Frame::Fail { id: got, message } if got == id => Err(ExecError::Opcode(message)),
            Frame::Error { message } => Err(ExecError::Protocol(message)),
            other => Err(ExecError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    fn shutdown(&self) {
        let _ = self.raw.shutdown(Shutdown::Both);
    }
}

/// Serialised communication channel between the client and its workers:
/// each dispatch holds the link for the configured delay. Models the
/// per-dispatch communication cost on a single machine.
#[derive(Debug)]
pub struct Link {
    delay: Duration,
    busy: Mutex<()>,
}

impl Link {
    pub fn new(delay: Duration) -> Self {
        Link { delay, busy: Mutex::new(()) }
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }

    fn transfer(&self) {
        if self.delay.is_zero() {
            return;
        }
        let _held = self.busy.lock();
        thread::sleep(self.delay);
    }
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    /// How long an idle control loop waits on the pool before re-checking
    /// its stop flags.
    pub poll: Duration,
    /// Lower bound of the per-dispatch failure deadline.
    pub min_deadline: Duration,
    /// The deadline is this many times the rolling mean execution time,
    /// when that exceeds `min_deadline`.
    pub deadline_factor: f64,
    pub connect_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            poll: Duration::from_millis(50),
            min_deadline: Duration::from_secs(10),
            deadline_factor: 8.0,
            connect_timeout: Duration::from_secs(5),
        }
    }
}

/// Left for the manager when a worker fails.
#[derive(Clone, Debug, Serialize)]
pub struct FailureNotice {
    pub worker: WorkerId,
    pub error: String,
    pub at_ms: f64,
}

/// A created worker that has not been bound to the pool yet.
pub struct NewWorker {
    spec: WorkerSpec,
    executor: Box<dyn Executor>,
}

impl NewWorker {
    pub fn spec(&self) -> &WorkerSpec {
        &self.spec
    }
}

struct WorkerCell {
    id: WorkerId,
    spec: WorkerSpec,
    executor: Box<dyn Executor>,
    state: Mutex<WorkerState>,
    changed: Condvar,
    stop: AtomicBool,
    retire: AtomicBool,
    killed: AtomicBool,
    /// f64 bits; execution time is stretched by this factor.
    slowdown: AtomicU64,
    completed: AtomicU64,
    busy_us: AtomicU64,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl WorkerCell {
    fn state(&self) -> WorkerState {
        *self.state.lock()
    }

    fn set_state(&self, s: WorkerState) {
        *self.state.lock() = s;
        self.changed.notify_all();
    }

    fn descriptor(&self) -> WorkerDescriptor {
        WorkerDescriptor {
            id: self.id,
            spec: self.spec.clone(),
            state: self.state(),
            completed: self.completed.load(Ordering::Relaxed),
            busy_ms: self.busy_us.load(Ordering::Relaxed) as f64 / 1e3,
        }
    }
}

struct Shared {
    pool: Arc<TaskPool>,
    registry: Arc<OpcodeRegistry>,
    config: RuntimeConfig,
    required: Mutex<Vec<String>>,
    workers: Mutex<BTreeMap<WorkerId, Arc<WorkerCell>>>,
    next_id: AtomicU32,
    link: Mutex<Option<Arc<Link>>>,
    failures: Mutex<Vec<FailureNotice>>,
    /// Rolling mean execution time in microseconds (f64 bits).
    mean_exec_us: AtomicU64,
    events: Mutex<Option<EventLog>>,
}

impl Shared {
    fn deadline(&self) -> Duration {
        let mean = Duration::from_secs_f64(f64::from_bits(self.mean_exec_us.load(Ordering::Relaxed)) / 1e6);
        self.config.min_deadline.max(mean.mul_f64(self.config.deadline_factor))
    }

    fn observe_exec(&self, took: Duration) {
        let sample = took.as_secs_f64() * 1e6;
        let _ = self.mean_exec_us.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |bits| {
            let mean = f64::from_bits(bits);
            let next = if mean == 0.0 { sample } else { 0.9 * mean + 0.1 * sample };
            Some(next.to_bits())
        });
    }

    fn log(&self, kind: &str, detail: serde_json::Value) {
        if let Some(log) = self.events.lock().as_ref() {
            log.record(kind, detail);
        }
    }
}

/// Worker pool plus the control loops that feed it from the task pool.
pub struct Runtime {
    shared: Arc<Shared>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("workers", &self.descriptors()).finish()
    }
}

impl Runtime {
    pub fn new(pool: Arc<TaskPool>, registry: Arc<OpcodeRegistry>) -> Self {
        Self::with_config(pool, registry, RuntimeConfig::default())
    }

    pub fn with_config(pool: Arc<TaskPool>, registry: Arc<OpcodeRegistry>, config: RuntimeConfig) -> Self {
        Runtime {
            shared: Arc::new(Shared {
                pool,
                registry,
                config,
                required: Mutex::new(Vec::new()),
                workers: Mutex::new(BTreeMap::new()),
                next_id: AtomicU32::new(1),
                link: Mutex::new(None),
                failures: Mutex::new(Vec::new()),
                mean_exec_us: AtomicU64::new(0f64.to_bits()),
                events: Mutex::new(None),
            }),
        }
    }

    pub fn pool(&self) -> &Arc<TaskPool> {
        &self.shared.pool
    }

    pub fn registry(&self) -> &Arc<OpcodeRegistry> {
        &self.shared.registry
    }

    /// Opcodes the running program needs; checked against each new worker.
    pub fn set_required_opcodes(&self, ops: Vec<String>) {
        *self.shared.required.lock() = ops;
    }

    /// Adds a serialised communication delay to every dispatch.
    pub fn set_comm_delay(&self, delay: Duration) {
        *self.shared.link.lock() = (!delay.is_zero()).then(|| Arc::new(Link::new(delay)));
    }

    pub fn set_event_log(&self, log: EventLog) {
        *self.shared.events.lock() = Some(log);
    }

    /// Current per-dispatch failure deadline.
    pub fn deadline(&self) -> Duration {
        self.shared.deadline()
    }

    /// Creates a worker and verifies its opcode manifest, without binding it.
    pub fn create_worker(&self, spec: &WorkerSpec) -> Result<NewWorker, RuntimeError> {
        let required = self.shared.required.lock().clone();
        let executor: Box<dyn Executor> = match spec {
            WorkerSpec::Local => {
                let manifest = self.shared.registry.manifest();
                let bad = manifest_mismatches(&self.shared.registry, &manifest, &required);
                if !bad.is_empty() {
                    return Err(RuntimeError::OpcodeManifestMismatch(bad));
                }
                Box::new(LocalExecutor::new(self.shared.registry.clone()))
            }
            WorkerSpec::Remote(addr) => {
                let remote = RemoteExecutor::connect(addr, self.shared.config.connect_timeout)?;
                let bad = manifest_mismatches(&self.shared.registry, remote.manifest(), &required);
                if !bad.is_empty() {
                    remote.shutdown();
                    return Err(RuntimeError::OpcodeManifestMismatch(bad));
                }
                Box::new(remote)
            }
        };
        Ok(NewWorker { spec: spec.clone(), executor })
    }

    /// Wires a created worker into the pool and starts its control loop.
    pub fn bind(&self, worker: NewWorker) -> WorkerId {
        let id = WorkerId(self.shared.next_id.fetch_add(1, Ordering::Relaxed));
        let cell = Arc::new(WorkerCell {
            id,
            spec: worker.spec,
            executor: worker.executor,
            state: Mutex::new(WorkerState::Idle),
            changed: Condvar::new(),
            stop: AtomicBool::new(false),
            retire: AtomicBool::new(false),
            killed: AtomicBool::new(false),
            slowdown: AtomicU64::new(1f64.to_bits()),
            completed: AtomicU64::new(0),
            busy_us: AtomicU64::new(0),
            thread: Mutex::new(None),
        });
        self.shared.workers.lock().insert(id, cell.clone());
        let shared = self.shared.clone();
        let loop_cell = cell.clone();
        let handle = thread::Builder::new()
            .name(format!("worker-{}", id.0))
            .spawn(move || control_loop(&shared, &loop_cell))
            .expect("spawning a control loop");
        *cell.thread.lock() = Some(handle);
        self.shared.log("worker_bound", serde_json::json!({ "worker": id.0, "spec": cell.spec.to_string() }));
        id
    }

    /// Creates and binds a worker.
    pub fn recruit(&self, spec: &WorkerSpec) -> Result<WorkerDescriptor, RuntimeError> {
        let w = self.create_worker(spec)?;
        let id = self.bind(w);
        self.descriptor(id)
    }

    fn cell(&self, id: WorkerId) -> Result<Arc<WorkerCell>, RuntimeError> {
        self.shared.workers.lock().get(&id).cloned().ok_or(RuntimeError::UnknownWorker(id))
    }

    pub fn descriptor(&self, id: WorkerId) -> Result<WorkerDescriptor, RuntimeError> {
        Ok(self.cell(id)?.descriptor())
    }

    pub fn descriptors(&self) -> Vec<WorkerDescriptor> {
        self.shared.workers.lock().values().map(|c| c.descriptor()).collect()
    }

    /// Workers currently in rotation (idle or busy).
    pub fn active_workers(&self) -> Vec<WorkerId> {
        self.shared
            .workers
            .lock()
            .values()
            .filter(|c| matches!(c.state(), WorkerState::Idle | WorkerState::Busy))
            .map(|c| c.id)
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.active_workers().len()
    }

    /// Takes a worker out of rotation once its in-flight instruction is done.
    /// Blocks until the worker reports stopped.
    pub fn stop_worker(&self, id: WorkerId, timeout: Duration) -> Result<(), RuntimeError> {
        let cell = self.cell(id)?;
        match cell.state() {
            s @ (WorkerState::Failed | WorkerState::Retired) => return Err(RuntimeError::BadState(id, s)),
            WorkerState::Stopped => return Ok(()),
            _ => {}
        }
        cell.stop.store(true, Ordering::SeqCst);
        self.shared.pool.wake_all();
        let deadline = Instant::now() + timeout;
        let mut state = cell.state.lock();
        while !matches!(*state, WorkerState::Stopped | WorkerState::Failed) {
            if cell.changed.wait_until(&mut state, deadline).timed_out() {
                return Err(RuntimeError::StopTimeout(id));
            }
        }
        Ok(())
    }

    pub fn restart_worker(&self, id: WorkerId) -> Result<(), RuntimeError> {
        let cell = self.cell(id)?;
        let state = cell.state.lock();
        if *state != WorkerState::Stopped {
            return Err(RuntimeError::BadState(id, *state));
        }
        cell.stop.store(false, Ordering::SeqCst);
        cell.changed.notify_all();
        Ok(())
    }

    /// Drains and unbinds a worker: waits for its in-flight instruction,
    /// joins its control loop and forgets it.
    pub fn unbind(&self, id: WorkerId) -> Result<WorkerDescriptor, RuntimeError> {
        let cell = self.cell(id)?;
        cell.retire.store(true, Ordering::SeqCst);
        cell.changed.notify_all();
        self.shared.pool.wake_all();
        if let Some(h) = cell.thread.lock().take() {
            let _ = h.join();
        }
        cell.executor.shutdown();
        self.shared.workers.lock().remove(&id);
        self.shared.log("worker_unbound", serde_json::json!({ "worker": id.0 }));
        Ok(cell.descriptor())
    }

    /// Fault injection: the worker crashes. An instruction it is running
    /// is lost and re-executed elsewhere.
    pub fn kill_worker(&self, id: WorkerId) -> Result<(), RuntimeError> {
        let cell = self.cell(id)?;
        cell.killed.store(true, Ordering::SeqCst);
        cell.executor.shutdown();
        cell.changed.notify_all();
        self.shared.pool.wake_all();
        Ok(())
    }

    /// Overload injection: stretches the worker's execution time by `factor`.
    pub fn set_slowdown(&self, id: WorkerId, factor: f64) -> Result<(), RuntimeError> {
        let cell = self.cell(id)?;
        cell.slowdown.store(factor.max(1.0).to_bits(), Ordering::Relaxed);
        Ok(())
    }

    /// Failure notices since the last call.
    pub fn take_failures(&self) -> Vec<FailureNotice> {
        std::mem::take(&mut *self.shared.failures.lock())
    }

    /// Unbinds every worker.
    pub fn shutdown(&self) {
        let ids: Vec<WorkerId> = self.shared.workers.lock().keys().copied().collect();
        for id in ids {
            let _ = self.unbind(id);
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn control_loop(shared: &Shared, cell: &WorkerCell) {
    loop {
        if cell.retire.load(Ordering::SeqCst) {
            cell.set_state(WorkerState::Retired);
            return;
        }
        if cell.killed.load(Ordering::SeqCst) {
            fail_worker(shared, cell, None, "killed".into());
            return;
        }
        if cell.stop.load(Ordering::SeqCst) {
            let mut state = cell.state.lock();
            *state = WorkerState::Stopped;
            cell.changed.notify_all();
            while cell.stop.load(Ordering::SeqCst) && !cell.retire.load(Ordering::SeqCst) && !cell.killed.load(Ordering::SeqCst) {
                cell.changed.wait_for(&mut state, shared.config.poll);
            }
            if !cell.retire.load(Ordering::SeqCst) && !cell.killed.load(Ordering::SeqCst) {
                *state = WorkerState::Idle;
                cell.changed.notify_all();
            }
            continue;
        }
        let Some(dispatch) = shared.pool.fetch_fireable(shared.config.poll) else { continue };
        cell.set_state(WorkerState::Busy);
        run_one(shared, cell, dispatch);
        if cell.state() == WorkerState::Failed {
            return;
        }
    }
}

fn run_one(shared: &Shared, cell: &WorkerCell, d: Dispatch) {
    let Some(args) = d.instr.arguments() else {
        log::error!("dispatched instruction {} of graph {} is not fireable", d.instr.id, d.gid);
        let _ = shared.pool.requeue(d.gid, d.instr.id);
        cell.set_state(WorkerState::Idle);
        return;
    };
    if let Some(link) = shared.link.lock().clone() {
        link.transfer();
    }
    let start = Instant::now();
    let mut result = cell.executor.execute(&d.instr.opcode, args, shared.deadline());
    let took = start.elapsed();
    let factor = f64::from_bits(cell.slowdown.load(Ordering::Relaxed));
    if factor > 1.0 {
        thread::sleep(took.mul_f64(factor - 1.0));
    }
    if cell.killed.load(Ordering::SeqCst) {
        result = Err(ExecError::ConnectionLost("killed".into()));
    }
    match result {
        Ok(outputs) => {
            let total = start.elapsed();
            shared.observe_exec(total);
            cell.busy_us.fetch_add(total.as_micros() as u64, Ordering::Relaxed);
            cell.completed.fetch_add(1, Ordering::Relaxed);
            if let Err(e) = shared.pool.complete(d.gid, d.instr.id, outputs) {
                log::error!("completing instruction {} of graph {}: {e}", d.instr.id, d.gid);
            }
            cell.set_state(WorkerState::Idle);
        }
        Err(e) if e.is_deterministic() => {
            let _ = shared.pool.fail(d.gid, d.instr.id, e.to_string());
            cell.set_state(WorkerState::Idle);
        }
        Err(e) => fail_worker(shared, cell, Some(&d), e.to_string()),
    }
}

fn fail_worker(shared: &Shared, cell: &WorkerCell, in_flight: Option<&Dispatch>, error: String) {
    if let Some(d) = in_flight {
        if let Err(e) = shared.pool.requeue(d.gid, d.instr.id) {
            log::debug!("requeue after failure: {e}");
        }
    }
    cell.executor.shutdown();
    cell.set_state(WorkerState::Failed);
    log::warn!("worker {} failed: {error}", cell.id);
    shared.log("worker_failed", serde_json::json!({ "worker": cell.id.0, "error": error }));
    shared.failures.lock().push(FailureNotice { worker: cell.id, error, at_ms: clock::now_ms() });
}

/// A running worker daemon.
pub struct WorkerServer {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    conns: Arc<Mutex<BTreeMap<u64, TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl WorkerServer {
    /// Binds `addr` and serves the wire protocol with `registry`.
    pub fn serve(addr: &str, registry: Arc<OpcodeRegistry>) -> io::Result<WorkerServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<BTreeMap<u64, TcpStream>>> = Arc::default();
        let handlers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let acceptor = {
            let (stopping, conns, handlers) = (stopping.clone(), conns.clone(), handlers.clone());
            thread::Builder::new().name(format!("serve-{}", local.port())).spawn(move || {
                let mut next_conn = 0u64;
                while !stopping.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            stream.set_nodelay(true).ok();
                            next_conn += 1;
                            let key = next_conn;
                            if let Ok(clone) = stream.try_clone() {
                                conns.lock().insert(key, clone);
                            }
                            let (registry, conns) = (registry.clone(), conns.clone());
                            let h = thread::spawn(move || {
                                serve_connection(stream, &registry);
                                conns.lock().remove(&key);
                            });
                            let mut hs = handlers.lock();
                            hs.retain(|h| !h.is_finished());
                            hs.push(h);
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })?
        };
        Ok(WorkerServer { addr: local, stopping, conns, acceptor: Some(acceptor), handlers })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Graceful stop: no new connections; requests being executed finish and
    /// their replies are sent, then connections close.
    pub fn shutdown(mut self) {
        self.stop(Shutdown::Read);
    }

    /// Abrupt stop, as if the process died.
    pub fn kill(mut self) {
        self.stop(Shutdown::Both);
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop(&mut self, how: Shutdown) {
        self.stopping.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().values() {
            let _ = c.shutdown(how);
        }
        for h in self.handlers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerServer {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop(Shutdown::Both);
        }
    }
}

fn serve_connection(stream: TcpStream, registry: &OpcodeRegistry) {
    let Ok(handle) = stream.try_clone() else { return };
    converse(stream, registry);
    let _ = handle.shutdown(Shutdown::Both);
}

fn converse(stream: TcpStream, registry: &OpcodeRegistry) {
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut greeted = false;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return,
            Err(WireError::Io(_)) => return,
            Err(e) => {
                let _ = write_frame(&mut writer, &Frame::Error { message: e.to_string() });
                return;
            }
        };
        let reply = match frame {
            Frame::Hello { version } if version == PROTO_VERSION => {
                greeted = true;
                Frame::Ready { manifest: registry.manifest() }
            }
            Frame::Hello { version } => {
                let _ = write_frame(
                    &mut writer,
                    &Frame::Error { message: format!("protocol version {version} unsupported, speak {PROTO_VERSION}") },
                );
                return;
            }
            Frame::Ping => Frame::Pong,
            Frame::Exec { id, opcode, args } if greeted => match registry.call(&opcode, &args) {
                Ok(outputs) => Frame::Result { id, outputs },
                Err(e) => Frame::Fail { id, message: e.to_string() },
            },
            other => {
                let _ = write_frame(&mut writer, &Frame::Error { message: format!("unexpected frame {other:?}") });
                return;
            }
        };
        if write_frame(&mut writer, &reply).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{as_int, int};
    use crate::compiler::{compile, Skeleton};
    use std::io::Write;

    fn registry() -> Arc<OpcodeRegistry> {
        let mut r = OpcodeRegistry::new();
        r.register_unary("id", |p| Ok(p.clone())).unwrap();
        r.register_unary("inc", |p| Ok(int(as_int(p).unwrap() + 1))).unwrap();
        r.register_unary("nap", |p| {
            thread::sleep(Duration::from_millis(30));
            Ok(p.clone())
        })
        .unwrap();
        r.register("boom", 1, 1, |_| Err("kaput".into())).unwrap();
        Arc::new(r)
    }

    fn runtime() -> (Runtime, std::sync::mpsc::Receiver<crate::taskpool::ResultRecord>) {
        let (pool, rx) = TaskPool::with_channel();
        let rt = Runtime::with_config(pool, registry(), RuntimeConfig { poll: Duration::from_millis(5), ..Default::default() });
        (rt, rx)
    }

    #[test]
    fn worker_spec_parsing() {
        assert_eq!("local".parse::<WorkerSpec>().unwrap(), WorkerSpec::Local);
        assert_eq!("127.0.0.1:7000".parse::<WorkerSpec>().unwrap(), WorkerSpec::Remote("127.0.0.1:7000".into()));
        assert_eq!("remote:h:1".parse::<WorkerSpec>().unwrap(), WorkerSpec::Remote("h:1".into()));
        assert!("nope".parse::<WorkerSpec>().is_err());
    }

    #[test]
    fn identity_pipeline_one_worker() {
        let (rt, rx) = runtime();
        let d = rt.recruit(&WorkerSpec::Local).unwrap();
        assert!(matches!(d.state, WorkerState::Idle | WorkerState::Busy));
        let t = compile(&Skeleton::seq("id")).unwrap();
        for i in 0..10 {
            rt.pool().submit_task(&t, int(i)).unwrap();
        }
        assert!(rt.pool().wait_idle(Duration::from_secs(5)));
        let mut got: Vec<(u64, i64)> = rx.try_iter().map(|r| (r.seq, as_int(&r.value.unwrap()).unwrap())).collect();
        got.sort();
        assert_eq!(got, (0..10).map(|i| (i as u64, i)).collect::<Vec<_>>());
    }

    #[test]
    fn local_execute() {
        let exec = LocalExecutor::new(registry());
        assert_eq!(exec.execute("inc", vec![int(1)], Duration::from_secs(1)).unwrap(), vec![int(2)]);
        assert!(exec.execute("boom", vec![int(1)], Duration::from_secs(1)).unwrap_err().is_deterministic());
    }

    #[test]
    fn opcode_failure_fails_only_the_item() {
        let (rt, rx) = runtime();
        let w = rt.recruit(&WorkerSpec::Local).unwrap().id;
        rt.pool().submit_task(&compile(&Skeleton::seq("boom")).unwrap(), int(1)).unwrap();
        let r = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert!(r.value.unwrap_err().contains("kaput"));
        assert_ne!(rt.descriptor(w).unwrap().state, WorkerState::Failed);
    }

    #[test]
    fn missing_opcode_rejected_at_recruit() {
        let (rt, _rx) = runtime();
        rt.set_required_opcodes(vec!["id".into(), "g".into()]);
        assert_eq!(rt.recruit(&WorkerSpec::Local).unwrap_err(), RuntimeError::OpcodeManifestMismatch(vec!["g".into()]));
    }

    #[test]
    fn stop_and_restart() {
        let (rt, rx) = runtime();
        let w = rt.recruit(&WorkerSpec::Local).unwrap().id;
        rt.stop_worker(w, Duration::from_secs(1)).unwrap();
        assert_eq!(rt.descriptor(w).unwrap().state, WorkerState::Stopped);
        rt.pool().submit_task(&compile(&Skeleton::seq("id")).unwrap(), int(3)).unwrap();
        assert!(rx.recv_timeout(Duration::from_millis(100)).is_err(), "stopped worker must not run");
        rt.restart_worker(w).unwrap();
        assert_eq!(rx.recv_timeout(Duration::from_secs(2)).unwrap().value, Ok(int(3)));
    }

    #[test]
    fn stop_busy_worker_waits_for_instruction() {
        let (rt, rx) = runtime();
        let w = rt.recruit(&WorkerSpec::Local).unwrap().id;
        rt.pool().submit_task(&compile(&Skeleton::seq("nap")).unwrap(), int(1)).unwrap();
        while rt.descriptor(w).unwrap().state != WorkerState::Busy {
            thread::sleep(Duration::from_millis(1));
        }
        rt.stop_worker(w, Duration::from_secs(2)).unwrap();
        // the in-flight instruction finished before the worker reported stopped
        assert!(rx.try_recv().is_ok());
        assert_eq!(rt.descriptor(w).unwrap().completed, 1);
    }

    #[test]
    fn restart_failed_worker_is_bad_state() {
        let (rt, _rx) = runtime();
        let w = rt.recruit(&WorkerSpec::Local).unwrap().id;
        rt.kill_worker(w).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while rt.descriptor(w).unwrap().state != WorkerState::Failed && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(2));
        }
        assert!(matches!(rt.restart_worker(w), Err(RuntimeError::BadState(_, WorkerState::Failed))));
        assert!(matches!(rt.stop_worker(w, Duration::from_millis(10)), Err(RuntimeError::BadState(_, WorkerState::Failed))));
        assert_eq!(rt.take_failures().len(), 1);
    }

    #[test]
    fn killed_worker_work_is_redone() {
        let (rt, rx) = runtime();
        let a = rt.recruit(&WorkerSpec::Local).unwrap().id;
        let t = compile(&Skeleton::seq("nap")).unwrap();
        for i in 0..6 {
            rt.pool().submit_task(&t, int(i)).unwrap();
        }
        while rt.descriptor(a).unwrap().state != WorkerState::Busy {
            thread::sleep(Duration::from_millis(1));
        }
        rt.kill_worker(a).unwrap();
        rt.recruit(&WorkerSpec::Local).unwrap();
        assert!(rt.pool().wait_idle(Duration::from_secs(5)));
        let mut seqs: Vec<u64> = rx.try_iter().map(|r| r.seq).collect();
        seqs.sort();
        assert_eq!(seqs, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn deadline_has_floor() {
        let (rt, _rx) = runtime();
        assert_eq!(rt.deadline(), Duration::from_secs(10));
        rt.shared.observe_exec(Duration::from_secs(2));
        assert_eq!(rt.deadline(), Duration::from_secs(16));
    }

    #[test]
    fn remote_roundtrip_and_handshake() {
        let server = WorkerServer::serve("127.0.0.1:0", registry()).unwrap();
        let addr = server.local_addr().to_string();
        let remote = RemoteExecutor::connect(&addr, Duration::from_secs(2)).unwrap();
        assert_eq!(remote.manifest().len(), 4);
        let payload = Payload::new((0..=255).collect());
        assert_eq!(remote.execute("id", vec![payload.clone()], Duration::from_secs(2)).unwrap(), vec![payload]);
        assert_eq!(remote.execute("boom", vec![int(1)], Duration::from_secs(2)), Err(ExecError::Opcode("opcode `boom` failed: kaput".into())));
        remote.ping(Duration::from_secs(1)).unwrap();
        server.kill();
        assert!(remote.execute("id", vec![int(1)], Duration::from_secs(1)).is_err());
    }

    #[test]
    fn server_rejects_bad_version_and_garbage() {
        let server = WorkerServer::serve("127.0.0.1:0", registry()).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        write_frame(&mut s, &Frame::Hello { version: 2 }).unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Frame::Error { .. }));

        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(&[2, 0, 0, 0, 99, 1]).unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Frame::Error { .. }));
        // connection closed afterwards
        assert!(read_frame(&mut s).is_err());

        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        write_frame(&mut s, &Frame::Exec { id: 1, opcode: "id".into(), args: vec![] }).unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Frame::Error { .. }), "EXEC before HELLO");
    }

    #[test]
    fn unreachable_remote() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let (rt, _rx) = runtime();
        let err = rt.recruit(&WorkerSpec::Remote(format!("127.0.0.1:{port}"))).unwrap_err();
        assert!(matches!(err, RuntimeError::Unreachable(..)));
    }

    #[test]
    fn remote_timeout() {
        let mut r = OpcodeRegistry::new();
        r.register_unary("slow", |p| {
            thread::sleep(Duration::from_millis(300));
            Ok(p.clone())
        })
        .unwrap();
        let server = WorkerServer::serve("127.0.0.1:0", Arc::new(r)).unwrap();
        let remote = RemoteExecutor::connect(&server.local_addr().to_string(), Duration::from_secs(2)).unwrap();
        let start = Instant::now();
        assert_eq!(remote.execute("slow", vec![int(1)], Duration::from_millis(50)), Err(ExecError::Timeout));
        assert!(start.elapsed() >= Duration::from_millis(50));
    }
}
