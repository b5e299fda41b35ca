//! Futures frontend.
//!
//! [`Workflow::submit`] turns one opcode application into a single-instruction
//! graph and returns a [`WfFuture`] right away. Arguments that are still
//! pending futures are waited for by completion callbacks: the instruction
//! enters the task pool once the last one resolves, so no thread blocks on
//! a pending argument.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Deserialize;
use thiserror::Error;

use crate::codec::{unpack, CborCodec, Codec, Payload, Value};
use crate::compiler::GraphTemplate;
use crate::mdf::GraphId;
use crate::opcode::{OpcodeRegistry, PACK_PREFIX};
use crate::runtime::Runtime;
use crate::taskpool::{PoolError, ResultRecord, TaskPool};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("`{op}` takes {expected} argument(s), got {got}")]
    ArityMismatch { op: String, expected: usize, got: usize },
    #[error("timed out waiting for a future")]
    Timeout,
    #[error("an upstream node failed: {0}")]
    UpstreamFailed(String),
    #[error("node failed: {0}")]
    Failed(String),
    #[error("`{op}` has {outputs} output(s), no part {part}")]
    NoSuchPart { op: String, part: usize, outputs: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("bad workflow description: {0}")]
    Spec(String),
}

#[derive(Clone, Debug, PartialEq)]
enum Outcome {
    Done(Payload),
    Failed(String),
    Upstream(String),
}

type Callback = Box<dyn FnOnce(&Outcome) + Send>;

struct Cell {
    seq: u64,
    op: String,
    outputs: usize,
    state: Mutex<Option<Outcome>>,
    ready: Condvar,
    callbacks: Mutex<Vec<Callback>>,
    started_ms: Mutex<Option<(f64, f64)>>,
}

impl Cell {
    fn new(seq: u64, op: &str, outputs: usize) -> Arc<Cell> {
        Arc::new(Cell {
            seq,
            op: op.to_string(),
            outputs,
            state: Mutex::new(None),
            ready: Condvar::new(),
            callbacks: Mutex::new(Vec::new()),
            started_ms: Mutex::new(None),
        })
    }

    /// First completion wins; later ones are ignored.
    fn resolve(&self, outcome: Outcome) {
        {
            let mut st = self.state.lock();
            if st.is_some() {
                return;
            }
            *st = Some(outcome.clone());
            self.ready.notify_all();
        }
        let callbacks = std::mem::take(&mut *self.callbacks.lock());
        callbacks.into_iter().for_each(|cb| cb(&outcome));
    }

    fn on_ready(&self, cb: Callback) {
        let mut callbacks = self.callbacks.lock();
        let done = self.state.lock().clone();
        match done {
            Some(outcome) => {
                drop(callbacks);
                cb(&outcome);
            }
            None => callbacks.push(cb),
        }
    }
}

/// A value that a submitted node will produce.
#[derive(Clone)]
pub struct WfFuture {
    cell: Arc<Cell>,
    part: Option<usize>,
}

impl fmt::Debug for WfFuture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WfFuture")
            .field("seq", &self.cell.seq)
            .field("op", &self.cell.op)
            .field("part", &self.part)
            .field("ready", &self.is_ready())
            .finish()
    }
}

impl WfFuture {
    /// Submission id of the node behind this future.
    pub fn seq(&self) -> u64 {
        self.cell.seq
    }

    pub fn is_ready(&self) -> bool {
        self.cell.state.lock().is_some()
    }

    /// The `k`-th output of a multi-output node.
    pub fn part(&self, k: usize) -> Result<WfFuture, WorkflowError> {
        if self.part.is_some() || k >= self.cell.outputs || self.cell.outputs < 2 {
            return Err(WorkflowError::NoSuchPart { op: self.cell.op.clone(), part: k, outputs: self.cell.outputs });
        }
        Ok(WfFuture { cell: self.cell.clone(), part: Some(k) })
    }

    /// Blocks until the value is available.
    pub fn get_value(&self, timeout: Duration) -> Result<Payload, WorkflowError> {
        let deadline = Instant::now().checked_add(timeout);
        let mut st = self.cell.state.lock();
        while st.is_none() {
            match deadline {
                Some(d) => {
                    if self.cell.ready.wait_until(&mut st, d).timed_out() && st.is_none() {
                        return Err(WorkflowError::Timeout);
                    }
                }
                None => self.cell.ready.wait(&mut st),
            }
        }
        let outcome = st.clone().expect("resolved");
        drop(st);
        self.view(&outcome)
    }

    fn view(&self, outcome: &Outcome) -> Result<Payload, WorkflowError> {
        match (outcome, self.part) {
            (Outcome::Done(p), None) => Ok(p.clone()),
            (Outcome::Done(p), Some(k)) => unpack(p)
                .and_then(|parts| parts.into_iter().nth(k))
                .ok_or_else(|| WorkflowError::Failed(format!("`{}` returned a malformed packed result", self.cell.op))),
            (Outcome::Failed(m), _) => Err(WorkflowError::Failed(m.clone())),
            (Outcome::Upstream(m), _) => Err(WorkflowError::UpstreamFailed(m.clone())),
        }
    }

    /// Wall-clock interval the node's instruction ran in, as milliseconds on
    /// the process clock: (dispatched, completed).
    pub fn execution_interval(&self) -> Option<(f64, f64)> {
        *self.cell.started_ms.lock()
    }

    fn when_ready(&self, f: impl FnOnce(Result<Payload, WorkflowError>) + Send + 'static) {
        let me = self.clone();
        self.cell.on_ready(Box::new(move |o| f(me.view(o))));
    }
}

/// An argument of a submission.
#[derive(Clone, Debug)]
pub enum Arg {
    Value(Payload),
    Future(WfFuture),
}

impl From<Payload> for Arg {
    fn from(p: Payload) -> Self {
        Arg::Value(p)
    }
}

impl From<WfFuture> for Arg {
    fn from(f: WfFuture) -> Self {
        Arg::Future(f)
    }
}

impl From<&WfFuture> for Arg {
    fn from(f: &WfFuture) -> Self {
        Arg::Future(f.clone())
    }
}

#[derive(Default)]
struct Router {
    waiting: HashMap<GraphId, Arc<Cell>>,
    early: HashMap<GraphId, ResultRecord>,
}

fn settle(cell: &Cell, r: ResultRecord) {
    *cell.started_ms.lock() = Some((r.dispatched_ms, r.completed_ms));
    cell.resolve(match r.value {
        Ok(p) => Outcome::Done(p),
        Err(m) => Outcome::Failed(m),
    });
}

struct Shared {
    pool: Arc<TaskPool>,
    registry: Arc<OpcodeRegistry>,
    router: Mutex<Router>,
    templates: Mutex<HashMap<String, Arc<GraphTemplate>>>,
    next_seq: AtomicU64,
}

impl Shared {
    fn dispatch(&self, template: &GraphTemplate, cell: Arc<Cell>, args: Vec<Payload>) {
        match self.pool.submit_with_inputs(template, args) {
            Ok(h) => {
                let mut router = self.router.lock();
                match router.early.remove(&h.gid) {
                    Some(r) => {
                        drop(router);
                        settle(&cell, r);
                    }
                    None => {
                        router.waiting.insert(h.gid, cell);
                    }
                }
            }
            Err(e) => cell.resolve(Outcome::Failed(e.to_string())),
        }
    }
}

/// Futures frontend over its own task pool and runtime.
pub struct Workflow {
    shared: Arc<Shared>,
    runtime: Arc<Runtime>,
}

impl Workflow {
    /// Creates the pool and runtime. Recruit workers through
    /// [`Workflow::runtime`] or a manager.
    pub fn new(registry: Arc<OpcodeRegistry>) -> Self {
        let router_slot: Arc<Mutex<Option<std::sync::Weak<Shared>>>> = Arc::default();
        let sink_slot = router_slot.clone();
        let pool = TaskPool::new(move |r: ResultRecord| {
            let Some(shared) = sink_slot.lock().as_ref().and_then(std::sync::Weak::upgrade) else { return };
            let mut router = shared.router.lock();
            match router.waiting.remove(&r.gid) {
                Some(cell) => {
                    drop(router);
                    settle(&cell, r);
                }
                None => {
                    router.early.insert(r.gid, r);
                }
            }
        });
        let shared = Arc::new(Shared {
            pool: pool.clone(),
            registry: registry.clone(),
            router: Mutex::new(Router::default()),
            templates: Mutex::new(HashMap::new()),
            next_seq: AtomicU64::new(0),
        });
        *router_slot.lock() = Some(Arc::downgrade(&shared));
        Workflow { shared, runtime: Arc::new(Runtime::new(pool, registry)) }
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    pub fn registry(&self) -> &Arc<OpcodeRegistry> {
        &self.shared.registry
    }

    fn template(&self, op: &str, in_arity: usize) -> Result<Arc<GraphTemplate>, WorkflowError> {
        let mut cache = self.shared.templates.lock();
        if let Some(t) = cache.get(op) {
            return Ok(t.clone());
        }
        let t = Arc::new(GraphTemplate::single(op, in_arity).map_err(|e| WorkflowError::Spec(e.to_string()))?);
        cache.insert(op.to_string(), t.clone());
        Ok(t)
    }

    /// Applies `op` to `args` as soon as every future argument is ready.
    pub fn submit(&self, op: &str, args: Vec<Arg>) -> Result<WfFuture, WorkflowError> {
        let sig = self.shared.registry.signature(op).ok_or_else(|| WorkflowError::UnknownOpcode(op.to_string()))?;
        if sig.in_arity != args.len() {
            return Err(WorkflowError::ArityMismatch { op: op.to_string(), expected: sig.in_arity, got: args.len() });
        }
        let instr_op = if sig.out_arity > 1 { format!("{PACK_PREFIX}{op}") } else { op.to_string() };
        let template = self.template(&instr_op, sig.in_arity)?;
        let seq = self.shared.next_seq.fetch_add(1, Ordering::Relaxed);
        let cell = Cell::new(seq, op, sig.out_arity);
        let future = WfFuture { cell: cell.clone(), part: None };

        let mut values: Vec<Option<Payload>> = Vec::with_capacity(args.len());
        let mut pending = Vec::new();
        for (i, a) in args.into_iter().enumerate() {
            match a {
                Arg::Value(p) => values.push(Some(p)),
                Arg::Future(f) => {
                    values.push(None);
                    pending.push((i, f));
                }
            }
        }
        if pending.is_empty() {
            let args = values.into_iter().map(|v| v.expect("literal")).collect();
            self.shared.dispatch(&template, cell, args);
            return Ok(future);
        }

        // One extra count keeps dispatch from racing the registration loop.
        let gate = Arc::new(AtomicUsize::new(pending.len() + 1));
        let slots = Arc::new(Mutex::new(values));
        let arm = {
            let (shared, template, cell, gate, slots) =
                (self.shared.clone(), template.clone(), cell.clone(), gate.clone(), slots.clone());
            move || {
                if gate.fetch_sub(1, Ordering::AcqRel) != 1 || cell.state.lock().is_some() {
                    return;
                }
                let args: Vec<Payload> = std::mem::take(&mut *slots.lock()).into_iter().map(|v| v.expect("filled")).collect();
                shared.dispatch(&template, cell.clone(), args);
            }
        };
        let arm = Arc::new(arm);
        for (i, f) in pending {
            let (cell, slots, arm) = (cell.clone(), slots.clone(), arm.clone());
            f.when_ready(move |v| match v {
                Ok(p) => {
                    slots.lock()[i] = Some(p);
                    arm();
                }
                Err(e) => cell.resolve(Outcome::Upstream(e.to_string())),
            });
        }
        arm();
        Ok(future)
    }

    /// Runs `body` once per input with at most `window` instances in
    /// flight (default: four per active worker). Results come back in input
    /// order, tagged with the input's position.
    pub fn run_stream<'a, F, I>(&'a self, body: F, inputs: I, window: Option<usize>) -> StreamResults<'a, F, I::IntoIter>
    where
        F: FnMut(&Workflow, Payload) -> Result<WfFuture, WorkflowError>,
        I: IntoIterator<Item = Payload>,
    {
        let window = window.unwrap_or_else(|| 4 * self.runtime.active_count().max(1)).max(1);
        StreamResults { wf: self, body, inputs: inputs.into_iter(), window, next: 0, in_flight: VecDeque::new() }
    }
}

impl Drop for Workflow {
    fn drop(&mut self) {
        self.runtime.shutdown();
    }
}

/// Iterator returned by [`Workflow::run_stream`].
pub struct StreamResults<'a, F, I> {
    wf: &'a Workflow,
    body: F,
    inputs: I,
    window: usize,
    next: u64,
    in_flight: VecDeque<(u64, Result<WfFuture, WorkflowError>)>,
}

impl<F, I> Iterator for StreamResults<'_, F, I>
where
    F: FnMut(&Workflow, Payload) -> Result<WfFuture, WorkflowError>,
    I: Iterator<Item = Payload>,
{
    type Item = (u64, Result<Payload, WorkflowError>);

    fn next(&mut self) -> Option<Self::Item> {
        while self.in_flight.len() < self.window {
            let Some(input) = self.inputs.next() else { break };
            let launched = (self.body)(self.wf, input);
            self.in_flight.push_back((self.next, launched));
            self.next += 1;
        }
        let (seq, launched) = self.in_flight.pop_front()?;
        Some((seq, launched.and_then(|f| f.get_value(Duration::MAX))))
    }
}

/// One node of a workflow description file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub opcode: String,
    #[serde(default)]
    pub args: Vec<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
enum ArgSpec {
    Literal(Payload),
    Input,
    Node { index: usize, part: Option<usize> },
}

/// A workflow read from JSON: a list of nodes whose arguments are
/// literals, `"$input"`, `"$node"` or `"$node.k"`. The last node listed is
/// the result.
#[derive(Clone, Debug)]
pub struct WorkflowSpec {
    nodes: Vec<NodeSpec>,
    /// Node indices in an order where every node follows its arguments.
    order: Vec<usize>,
    args: Vec<Vec<ArgSpec>>,
}

impl WorkflowSpec {
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        let nodes: Vec<NodeSpec> = serde_json::from_str(text).map_err(|e| WorkflowError::Spec(e.to_string()))?;
        Self::new(nodes)
    }

    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self, WorkflowError> {
        let spec_err = |m: String| WorkflowError::Spec(m);
        if nodes.is_empty() {
            return Err(spec_err("no nodes".into()));
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.as_str(), i).is_some() {
                return Err(spec_err(format!("node `{}` defined twice", n.name)));
            }
        }
        let mut args = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let mut out = Vec::with_capacity(n.args.len());
            for a in &n.args {
                out.push(match a.as_str() {
                    Some("$input") => ArgSpec::Input,
                    Some(s) if s.starts_with('$') => {
                        let r = &s[1..];
                        let (name, part) = match r.rsplit_once('.') {
                            Some((name, k)) if k.parse::<usize>().is_ok() && index.contains_key(name) => (name, Some(k.parse().expect("checked"))),
                            _ => (r, None),
                        };
                        let i = *index.get(name).ok_or_else(|| spec_err(format!("`{}` refers to unknown node `{name}`", n.name)))?;
                        ArgSpec::Node { index: i, part }
                    }
                    _ => ArgSpec::Literal(CborCodec.encode(&Value::from_json(a))),
                });
            }
            args.push(out);
        }
        let order = topo_order(&nodes, &args)?;
        Ok(WorkflowSpec { nodes, order, args })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    /// Opcodes the workflow uses.
    pub fn opcodes(&self) -> Vec<String> {
        let mut ops: Vec<String> = self.nodes.iter().map(|n| n.opcode.clone()).collect();
        ops.sort();
        ops.dedup();
        ops
    }

    /// Checks opcodes, arities and part indices against a registry.
    pub fn check(&self, registry: &OpcodeRegistry) -> Result<(), WorkflowError> {
        for (n, args) in self.nodes.iter().zip(&self.args) {
            let sig = registry.signature(&n.opcode).ok_or_else(|| WorkflowError::UnknownOpcode(n.opcode.clone()))?;
            if sig.in_arity != args.len() {
                return Err(WorkflowError::ArityMismatch { op: n.opcode.clone(), expected: sig.in_arity, got: args.len() });
            }
            for a in args {
                if let ArgSpec::Node { index, part } = a {
                    let src = &self.nodes[*index];
                    let outputs = registry.signature(&src.opcode).map_or(0, |s| s.out_arity);
                    let ok = match part {
                        Some(k) => outputs > 1 && *k < outputs,
                        None => outputs == 1,
                    };
                    if !ok {
                        return Err(WorkflowError::NoSuchPart { op: src.opcode.clone(), part: part.unwrap_or(0), outputs });
                    }
                }
            }
        }
        Ok(())
    }

    /// Submits every node for one input; returns the result future.
    pub fn launch(&self, wf: &Workflow, input: Payload) -> Result<WfFuture, WorkflowError> {
        let mut futures: Vec<Option<WfFuture>> = vec![None; self.nodes.len()];
        for &i in &self.order {
            let args = self.args[i]
                .iter()
                .map(|a| match a {
                    ArgSpec::Literal(p) => Ok(Arg::Value(p.clone())),
                    ArgSpec::Input => Ok(Arg::Value(input.clone())),
                    ArgSpec::Node { index, part } => {
                        let f = futures[*index].as_ref().expect("topological order");
                        match part {
                            Some(k) => f.part(*k).map(Arg::Future),
                            None => Ok(Arg::Future(f.clone())),
                        }
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            futures[i] = Some(wf.submit(&self.nodes[i].opcode, args)?);
        }
        Ok(futures.pop().flatten().expect("last node submitted"))
    }

    /// Sequential evaluation straight through the registry.
    pub fn evaluate(&self, registry: &OpcodeRegistry, input: &Payload) -> Result<Payload, WorkflowError> {
        let mut values: Vec<Option<Vec<Payload>>> = vec![None; self.nodes.len()];
        for &i in &self.order {
            let args: Vec<Payload> = self.args[i]
                .iter()
                .map(|a| match a {
                    ArgSpec::Literal(p) => p.clone(),
                    ArgSpec::Input => input.clone(),
                    ArgSpec::Node { index, part } => values[*index].as_ref().expect("topological order")[part.unwrap_or(0)].clone(),
                })
                .collect();
            let out = registry.call(&self.nodes[i].opcode, &args).map_err(|e| WorkflowError::Failed(e.to_string()))?;
            values[i] = Some(out);
        }
        let last = values.pop().flatten().expect("last node evaluated");
        Ok(if last.len() == 1 { last.into_iter().next().expect("one output") } else { crate::codec::pack(&last) })
    }
}

fn topo_order(nodes: &[NodeSpec], args: &[Vec<ArgSpec>]) -> Result<Vec<usize>, WorkflowError> {
    let mut indegree = vec![0usize; nodes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, a) in args.iter().enumerate() {
        for arg in a {
            if let ArgSpec::Node { index, .. } = arg {
                indegree[i] += 1;
                users[*index].push(i);
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..nodes.len()).filter(|i| indegree[*i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.push_back(u);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| indegree[*i] > 0).expect("some node is on a cycle");
        return Err(WorkflowError::Spec(format!("node `{}` is on a cycle", nodes[stuck].name)));
    }
    Ok(order)
}
