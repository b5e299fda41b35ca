//! Structured parallel programming over a macro data-flow interpreter.
//!
//! Skeleton programs (`seq`, `pipe`, `farm` and programmer-defined graphs)
//! are compiled into macro data-flow graph templates. One copy of the
//! template is instantiated per stream item inside a [`TaskPool`]; worker
//! control loops fetch fireable instructions from the pool and run them on
//! local or remote interpreters. An autonomic [`Manager`] watches the run
//! and grows or shrinks the worker pool to honour a performance contract.
//! A futures-based [`Workflow`] frontend drives the same machinery with
//! dynamically generated single-instruction graphs.

pub mod clock;
pub mod codec;
pub mod compiler;
pub mod events;
pub mod expr;
pub mod manager;
pub mod mdf;
pub mod opcode;
pub mod runtime;
pub mod taskpool;
pub mod wire;
pub mod workflow;

pub use codec::{CborCodec, Codec, Payload, Value};
pub use compiler::{build_map_graph, compile, link_custom, normalize, GraphTemplate, Skeleton};
pub use events::EventLog;
pub use manager::{Contract, Manager, PerformanceContract, QosContract};
pub use mdf::{Dest, GraphId, InstrId, MdfGraph, MdfInstruction, Token};
pub use opcode::OpcodeRegistry;
pub use runtime::{Runtime, WorkerSpec};
pub use taskpool::{ResultRecord, TaskPool};
pub use workflow::{Arg, WfFuture, Workflow, WorkflowSpec};

