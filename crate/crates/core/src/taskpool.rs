//! The instruction repository and matching unit.
//!
//! One graph instance lives in the pool per submitted stream item. Tokens
//! arriving for an instruction are stored under the pool lock together with
//! the fireability check and the enqueue, so an instruction enters the FIFO
//! fireable queue exactly once. Results reach the sink outside the lock.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use thiserror::Error;

use crate::clock;
use crate::codec::Payload;
use crate::compiler::GraphTemplate;
use crate::mdf::{Dest, GraphId, InstrId, MdfError, MdfInstruction};

/// Window used by the throughput figure of [`PoolMetrics`].
pub const DEFAULT_THROUGHPUT_WINDOW: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("task pool is closed")]
    PoolClosed,
    #[error("graph {0} is not live")]
    UnknownGraph(GraphId),
    #[error("instruction {1} of graph {0} is not in flight")]
    NotInFlight(GraphId, InstrId),
    #[error("instruction {1} of graph {0} does not exist")]
    UnknownInstruction(GraphId, InstrId),
    #[error("instruction {instr} produced {got} outputs for {expected} destinations")]
    OutputCount { instr: InstrId, expected: usize, got: usize },
    #[error("{0} inputs supplied, input instruction takes at most {1}")]
    TooManyInputs(usize, usize),
    #[error(transparent)]
    Token(#[from] MdfError),
}

/// Identity of a submitted stream item.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskHandle {
    pub gid: GraphId,
    pub seq: u64,
}

/// One emitted result. `value` is `Err` when an opcode failed
/// deterministically while computing the item.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub seq: u64,
    pub gid: GraphId,
    pub value: Result<Payload, String>,
    pub submitted_ms: f64,
    /// First dispatch of any instruction of the graph.
    pub dispatched_ms: f64,
    pub completed_ms: f64,
}

/// A fireable instruction handed to a control loop. The snapshot owns
/// copies of its input payloads.
#[derive(Clone, Debug)]
pub struct Dispatch {
    pub gid: GraphId,
    pub seq: u64,
    pub instr: MdfInstruction,
    pub dispatched_at: Instant,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Routed {
    Emitted { seq: u64 },
    Stored { fireable: bool },
}

#[derive(Debug, PartialEq, Eq)]
pub enum Completion {
    Accepted { emitted: Option<u64> },
    /// The instruction had already completed (a requeued copy raced it).
    Duplicate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PoolMetrics {
    pub submitted: u64,
    pub emitted: u64,
    pub in_flight: usize,
    pub fireable: usize,
    pub live_graphs: usize,
    /// Emissions per second over the last throughput window.
    pub throughput_window: f64,
}

struct LiveGraph {
    seq: u64,
    instrs: HashMap<InstrId, MdfInstruction>,
    completed: HashSet<InstrId>,
    submitted: Instant,
    first_dispatch: Option<Instant>,
}

#[derive(Default)]
struct State {
    graphs: HashMap<GraphId, LiveGraph>,
    queue: VecDeque<(GraphId, InstrId)>,
    in_flight: HashMap<(GraphId, InstrId), Instant>,
    next_gid: u64,
    next_seq: u64,
    closed: bool,
    paused: bool,
    /// Results retired but not yet handed to the sink.
    sinking: usize,
    submitted: u64,
    emitted: u64,
    emissions: VecDeque<Instant>,
    trace: Option<Vec<Instant>>,
}

type Sink = Box<dyn Fn(ResultRecord) + Send + Sync>;

pub struct TaskPool {
    state: Mutex<State>,
    work: Condvar,
    drained: Condvar,
    sink: Sink,
}

impl std::fmt::Debug for TaskPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskPool").field("metrics", &self.metrics()).finish()
    }
}

impl TaskPool {
    pub fn new(sink: impl Fn(ResultRecord) + Send + Sync + 'static) -> Arc<Self> {
        Arc::new(TaskPool {
            state: Mutex::new(State { next_gid: 1, ..State::default() }),
            work: Condvar::new(),
            drained: Condvar::new(),
            sink: Box::new(sink),
        })
    }

    /// Pool whose results arrive on a channel.
    pub fn with_channel() -> (Arc<Self>, mpsc::Receiver<ResultRecord>) {
        let (tx, rx) = mpsc::channel();
        let tx = Mutex::new(tx);
        (TaskPool::new(move |r| drop(tx.lock().send(r))), rx)
    }

    /// Instantiates `template` with `task` in slot 1 of its input instruction.
    pub fn submit_task(&self, template: &GraphTemplate, task: Payload) -> Result<TaskHandle, PoolError> {
        self.submit_with_inputs(template, vec![task])
    }

    /// Instantiates `template` with `inputs` in slots `1..` of its input
    /// instruction.
    pub fn submit_with_inputs(&self, template: &GraphTemplate, inputs: Vec<Payload>) -> Result<TaskHandle, PoolError> {
        let mut st = self.state.lock();
        if st.closed {
            return Err(PoolError::PoolClosed);
        }
        let arity = template.graph().get(template.input()).map_or(0, MdfInstruction::arity);
        if inputs.is_empty() || inputs.len() > arity {
            return Err(PoolError::TooManyInputs(inputs.len(), arity));
        }
        let gid = GraphId(st.next_gid);
        let seq = st.next_seq;
        st.next_gid += 1;
        st.next_seq += 1;
        let graph = template.graph().instantiate(gid);
        let input = graph.input();
        let mut instrs: HashMap<InstrId, MdfInstruction> = graph.into_instructions().map(|i| (i.id, i)).collect();
        let head = instrs.get_mut(&input).expect("template validated");
        for (k, value) in inputs.into_iter().enumerate() {
            head.store_token(k as u32 + 1, value)?;
        }
        let fireable = head.is_fireable();
        st.graphs.insert(
            gid,
            LiveGraph { seq, instrs, completed: HashSet::new(), submitted: Instant::now(), first_dispatch: None },
        );
        st.submitted += 1;
        if fireable {
            st.queue.push_back((gid, input));
            self.work.notify_one();
        }
        Ok(TaskHandle { gid, seq })
    }

    /// Routes one token. Resolving `Dest::Out` emits the graph's result and
    /// retires the graph.
    pub fn deliver_token(&self, gid: GraphId, dest: Dest, value: Payload) -> Result<Routed, PoolError> {
        let mut out = Vec::new();
        let routed = {
            let mut st = self.state.lock();
            self.route(&mut st, gid, dest, value, &mut out)?
        };
        self.deliver(out);
        Ok(routed)
    }

    fn route(
        &self,
        st: &mut State,
        gid: GraphId,
        dest: Dest,
        value: Payload,
        out: &mut Vec<ResultRecord>,
    ) -> Result<Routed, PoolError> {
        let graph = st.graphs.get_mut(&gid).ok_or(PoolError::UnknownGraph(gid))?;
        match dest {
            Dest::Out => {
                let seq = graph.seq;
                out.push(self.retire(st, gid, Ok(value)));
                Ok(Routed::Emitted { seq })
            }
            Dest::To { instr, slot, .. } => {
                let target = graph.instrs.get_mut(&instr).ok_or(PoolError::UnknownInstruction(gid, instr))?;
                target.store_token(slot, value)?;
                let fireable = target.is_fireable();
                if fireable {
                    st.queue.push_back((gid, instr));
                    self.work.notify_one();
                }
                Ok(Routed::Stored { fireable })
            }
        }
    }

    fn retire(&self, st: &mut State, gid: GraphId, value: Result<Payload, String>) -> ResultRecord {
        let graph = st.graphs.remove(&gid).expect("retiring a live graph");
        st.in_flight.retain(|(g, _), _| *g != gid);
        st.queue.retain(|(g, _)| *g != gid);
        let now = Instant::now();
        st.emitted += 1;
        st.sinking += 1;
        st.emissions.push_back(now);
        while st.emissions.len() > 1 && now.duration_since(st.emissions[0]) > Duration::from_secs(600) {
            st.emissions.pop_front();
        }
        ResultRecord {
            seq: graph.seq,
            gid,
            value,
            submitted_ms: clock::to_ms(graph.submitted),
            dispatched_ms: clock::to_ms(graph.first_dispatch.unwrap_or(now)),
            completed_ms: clock::to_ms(now),
        }
    }

    fn deliver(&self, out: Vec<ResultRecord>) {
        if out.is_empty() {
            return;
        }
        let n = out.len();
        out.into_iter().for_each(|r| (self.sink)(r));
        let mut st = self.state.lock();
        st.sinking -= n;
        if st.sinking == 0 && st.graphs.is_empty() {
            self.drained.notify_all();
        }
    }

    /// Records the outputs of an executed instruction, one per destination,
    /// all under one lock acquisition. A second completion of the same
    /// instruction is reported as [`Completion::Duplicate`] and ignored.
    pub fn complete(&self, gid: GraphId, instr: InstrId, outputs: Vec<Payload>) -> Result<Completion, PoolError> {
        let mut out = Vec::new();
        let result = {
            let mut st = self.state.lock();
            self.complete_locked(&mut st, gid, instr, outputs, &mut out)
        };
        self.deliver(out);
        result
    }

    fn complete_locked(
        &self,
        st: &mut State,
        gid: GraphId,
        instr: InstrId,
        outputs: Vec<Payload>,
        out: &mut Vec<ResultRecord>,
    ) -> Result<Completion, PoolError> {
        let Some(graph) = st.graphs.get_mut(&gid) else {
            return if gid.0 > 0 && gid.0 < st.next_gid { Ok(Completion::Duplicate) } else { Err(PoolError::UnknownGraph(gid)) };
        };
        if graph.completed.contains(&instr) {
            return Ok(Completion::Duplicate);
        }
        let dests = graph.instrs.get(&instr).ok_or(PoolError::UnknownInstruction(gid, instr))?.dests.clone();
        if dests.len() != outputs.len() {
            return Err(PoolError::OutputCount { instr, expected: dests.len(), got: outputs.len() });
        }
        graph.completed.insert(instr);
        st.in_flight.remove(&(gid, instr));
        st.queue.retain(|e| *e != (gid, instr));
        let mut emitted = None;
        for (dest, value) in dests.into_iter().zip(outputs) {
            if let Routed::Emitted { seq } = self.route(st, gid, dest, value, out)? {
                emitted = Some(seq);
            }
        }
        Ok(Completion::Accepted { emitted })
    }

    /// Retires the graph with a failure result: an opcode raised an error
    /// that re-execution would reproduce.
    pub fn fail(&self, gid: GraphId, instr: InstrId, msg: String) -> Result<(), PoolError> {
        let record = {
            let mut st = self.state.lock();
            let graph = st.graphs.get(&gid).ok_or(PoolError::UnknownGraph(gid))?;
            if graph.completed.contains(&instr) {
                return Ok(());
            }
            self.retire(&mut st, gid, Err(msg))
        };
        self.deliver(vec![record]);
        Ok(())
    }

    /// Oldest fireable instruction, marked in flight. Waits up to `timeout`
    /// while the queue is empty or dispatch is paused.
    pub fn fetch_fireable(&self, timeout: Duration) -> Option<Dispatch> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if !st.paused {
                while let Some((gid, id)) = st.queue.pop_front() {
                    let now = Instant::now();
                    let Some(graph) = st.graphs.get_mut(&gid) else { continue };
                    let seq = graph.seq;
                    graph.first_dispatch.get_or_insert(now);
                    let instr = graph.instrs[&id].clone();
                    st.in_flight.insert((gid, id), now);
                    if let Some(trace) = st.trace.as_mut() {
                        trace.push(now);
                    }
                    return Some(Dispatch { gid, seq, instr, dispatched_at: now });
                }
            }
            if self.work.wait_until(&mut st, deadline).timed_out() {
                return None;
            }
        }
    }

    /// Puts an in-flight instruction back at the head of the queue.
    pub fn requeue(&self, gid: GraphId, instr: InstrId) -> Result<(), PoolError> {
        let mut st = self.state.lock();
        if st.in_flight.remove(&(gid, instr)).is_none() {
            return Err(PoolError::NotInFlight(gid, instr));
        }
        st.queue.push_front((gid, instr));
        self.work.notify_one();
        Ok(())
    }

    /// Number of live graphs.
    pub fn pending_count(&self) -> usize {
        self.state.lock().graphs.len()
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    /// Stops handing out instructions. Returns the instant dispatch stopped.
    pub fn pause(&self) -> Instant {
        let mut st = self.state.lock();
        st.paused = true;
        Instant::now()
    }

    /// Resumes dispatch. Returns the instant it resumed.
    pub fn resume(&self) -> Instant {
        let mut st = self.state.lock();
        let at = Instant::now();
        st.paused = false;
        self.work.notify_all();
        at
    }

    pub fn is_paused(&self) -> bool {
        self.state.lock().paused
    }

    /// Wakes every waiting fetcher so it can re-check its own stop flags.
    pub fn wake_all(&self) {
        let _st = self.state.lock();
        self.work.notify_all();
    }

    /// Blocks until no graph is live and every result has reached the sink,
    /// or the timeout elapses.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        while !st.graphs.is_empty() || st.sinking > 0 {
            if self.drained.wait_until(&mut st, deadline).timed_out() {
                return st.graphs.is_empty() && st.sinking == 0;
            }
        }
        true
    }

    /// Emissions per second over the trailing `window`.
    pub fn throughput(&self, window: Duration) -> f64 {
        let st = self.state.lock();
        let now = Instant::now();
        let n = st.emissions.iter().rev().take_while(|t| now.duration_since(**t) <= window).count();
        n as f64 / window.as_secs_f64()
    }

    /// Emission instants in `[from, to)`.
    pub fn emissions_between(&self, from: Instant, to: Instant) -> usize {
        let st = self.state.lock();
        st.emissions.iter().filter(|t| **t >= from && **t < to).count()
    }

    pub fn metrics(&self) -> PoolMetrics {
        let throughput_window = self.throughput(DEFAULT_THROUGHPUT_WINDOW);
        let st = self.state.lock();
        PoolMetrics {
            submitted: st.submitted,
            emitted: st.emitted,
            in_flight: st.in_flight.len(),
            fireable: st.queue.len(),
            live_graphs: st.graphs.len(),
            throughput_window,
        }
    }

    /// Starts recording the instant of every dispatch.
    pub fn enable_dispatch_trace(&self) {
        self.state.lock().trace.get_or_insert_with(Vec::new);
    }

    pub fn dispatch_trace(&self) -> Vec<Instant> {
        self.state.lock().trace.clone().unwrap_or_default()
    }
}
