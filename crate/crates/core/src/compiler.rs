//! Skeleton trees and their compilation into macro data-flow templates.
//!
//! `seq(f)` becomes one instruction, `farm(P)` compiles exactly like `P`
//! (farm only matters to scheduling and management), and `pipe(P1, P2)`
//! wires the external output of `P1` into slot 1 of the input instruction
//! of `P2`. Programmer-defined graphs are copied in with fresh ids and linked
//! by the same rule.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::mdf::{Dest, InstrId, MdfGraph, MdfInstruction, ValidateOptions, Violation};
use crate::opcode::{OpcodeRegistry, CHAIN_SEP};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("invalid custom graph: {0:?}")]
    InvalidCustomGraph(Vec<Violation>),
    #[error("skeletons containing custom graphs have no normal form")]
    NotNormalizable,
    #[error("graph has no external output destination")]
    NoExternalDest,
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("skeleton syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
}

/// A programmer-defined graph used as a skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CustomGraph {
    /// Shown by `Display`; the CLI stores the file path here.
    pub label: String,
    pub graph: Arc<MdfGraph>,
}

/// `P ::= seq(f) | pipe(P, P) | farm(P) | custom(graph)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Skeleton {
    Seq(String),
    Pipe(Box<Skeleton>, Box<Skeleton>),
    Farm(Box<Skeleton>),
    Custom(CustomGraph),
}

impl Skeleton {
    pub fn seq(op: impl Into<String>) -> Self {
        Skeleton::Seq(op.into())
    }

    pub fn pipe(first: Skeleton, second: Skeleton) -> Self {
        Skeleton::Pipe(Box::new(first), Box::new(second))
    }

    pub fn farm(worker: Skeleton) -> Self {
        Skeleton::Farm(Box::new(worker))
    }

    pub fn custom(label: impl Into<String>, graph: MdfGraph) -> Self {
        Skeleton::Custom(CustomGraph { label: label.into(), graph: Arc::new(graph) })
    }

    /// Opcode names of the `Seq` leaves, left to right.
    pub fn seq_leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |s| {
            if let Skeleton::Seq(op) = s {
                out.push(op.as_str());
            }
        });
        out
    }

    /// Every opcode the compiled program can execute.
    pub fn opcodes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.walk(&mut |s| match s {
            Skeleton::Seq(op) => out.push(op.clone()),
            Skeleton::Custom(c) => out.extend(c.graph.instructions().map(|i| i.opcode.clone())),
            _ => {}
        });
        out.sort();
        out.dedup();
        out
    }

    pub fn depth(&self) -> usize {
        match self {
            Skeleton::Seq(_) | Skeleton::Custom(_) => 1,
            Skeleton::Farm(p) => 1 + p.depth(),
            Skeleton::Pipe(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a Skeleton)) {
        visit(self);
        match self {
            Skeleton::Pipe(a, b) => {
                a.walk(visit);
                b.walk(visit);
            }
            Skeleton::Farm(p) => p.walk(visit),
            Skeleton::Seq(_) | Skeleton::Custom(_) => {}
        }
    }

    /// Parses `seq:f`, `pipe(A,B[,C...])`, `farm(A)` and `custom:@path`.
    /// Pipes with more than two stages nest to the right. `load` resolves
    /// custom graph paths.
    pub fn parse_with<F>(text: &str, mut load: F) -> Result<Skeleton, CompileError>
    where
        F: FnMut(&str) -> Result<MdfGraph, String>,
    {
        let mut p = Parser { src: text, pos: 0, load: &mut load };
        let s = p.expr()?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(p.error("trailing input"));
        }
        Ok(s)
    }

    /// Parses a skeleton without custom nodes.
    pub fn parse(text: &str) -> Result<Skeleton, CompileError> {
        Self::parse_with(text, |path| Err(format!("no loader for custom graph `{path}`")))
    }
}

impl fmt::Display for Skeleton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Skeleton::Seq(op) => write!(f, "seq:{op}"),
            Skeleton::Pipe(a, b) => write!(f, "pipe({a},{b})"),
            Skeleton::Farm(p) => write!(f, "farm({p})"),
            Skeleton::Custom(c) => write!(f, "custom:@{}", c.label),
        }
    }
}

struct Parser<'a, F> {
    src: &'a str,
    pos: usize,
    load: &'a mut F,
}

impl<F: FnMut(&str) -> Result<MdfGraph, String>> Parser<'_, F> {
    fn error(&self, msg: &str) -> CompileError {
        CompileError::Syntax { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn atom(&mut self) -> &str {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let end = rest.find([',', ')', '(']).unwrap_or(rest.len());
        self.pos += end;
        rest[..end].trim()
    }

    fn expr(&mut self) -> Result<Skeleton, CompileError> {
        if self.eat("seq:") {
            let start = self.pos;
            let op = self.atom().to_string();
            if op.is_empty() || op.contains(char::is_whitespace) {
                self.pos = start;
                return Err(self.error("expected opcode name"));
            }
            Ok(Skeleton::Seq(op))
        } else if self.eat("custom:@") {
            let start = self.pos;
            let path = self.atom().to_string();
            let graph = (self.load)(&path).map_err(|msg| CompileError::Syntax { pos: start, msg })?;
            Ok(Skeleton::custom(path, graph))
        } else if self.eat("farm(") {
            let inner = self.expr()?;
            if !self.eat(")") {
                return Err(self.error("expected `)`"));
            }
            Ok(Skeleton::farm(inner))
        } else if self.eat("pipe(") {
            let mut stages = vec![self.expr()?];
            while self.eat(",") {
                stages.push(self.expr()?);
            }
            if !self.eat(")") {
                return Err(self.error("expected `,` or `)`"));
            }
            if stages.len() < 2 {
                return Err(self.error("pipe needs at least two stages"));
            }
            let mut acc = stages.pop().unwrap();
            while let Some(prev) = stages.pop() {
                acc = Skeleton::pipe(prev, acc);
            }
            Ok(acc)
        } else {
            Err(self.error("expected `seq:`, `pipe(`, `farm(` or `custom:@`"))
        }
    }
}

/// A validated graph with no graph id and every token absent: the thing
/// copied once per stream item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTemplate {
    graph: MdfGraph,
    provenance: String,
}

impl GraphTemplate {
    /// Wraps a programmer-supplied graph after checking the template rules.
    pub fn from_graph(graph: MdfGraph, provenance: impl Into<String>) -> Result<Self, CompileError> {
        let mut violations = graph.validate();
        if graph.gid().is_some() || !graph.all_tokens_absent() {
            violations.push(Violation::GidMismatch(graph.input()));
        }
        if !violations.is_empty() {
            return Err(CompileError::InvalidCustomGraph(violations));
        }
        Ok(GraphTemplate { graph, provenance: provenance.into() })
    }

    /// One instruction emitting its only output; every input slot is fed at
    /// submission.
    pub fn single(opcode: &str, in_arity: usize) -> Result<Self, CompileError> {
        let instr = MdfInstruction::new(InstrId(1), None, opcode, in_arity, vec![Dest::Out])
            .map_err(|e| CompileError::ArityMismatch(format!("{opcode}: {e}")))?;
        Ok(GraphTemplate { graph: MdfGraph::new(InstrId(1), [instr]), provenance: format!("single:{opcode}") })
    }

    pub fn graph(&self) -> &MdfGraph {
        &self.graph
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input(&self) -> InstrId {
        self.graph.input()
    }

    pub fn dump(&self) -> String {
        self.graph.dump()
    }
}

struct Fragment {
    input: InstrId,
    exit: (InstrId, usize),
}

#[derive(Default)]
struct Builder {
    next_id: u32,
    instrs: Vec<MdfInstruction>,
}

impl Builder {
    fn new_id(&mut self) -> InstrId {
        self.next_id += 1;
        InstrId(self.next_id)
    }

    fn patch(&mut self, (id, k): (InstrId, usize), dest: Dest) {
        let instr = self.instrs.iter_mut().find(|i| i.id == id).expect("exit instruction exists");
        instr.dests[k] = dest;
    }

    fn emit(&mut self, s: &Skeleton) -> Result<Fragment, CompileError> {
        match s {
            Skeleton::Seq(op) => {
                let id = self.new_id();
                self.instrs.push(MdfInstruction::new(id, None, op.clone(), 1, vec![Dest::Out]).expect("arity 1"));
                Ok(Fragment { input: id, exit: (id, 0) })
            }
            Skeleton::Farm(inner) => self.emit(inner),
            Skeleton::Pipe(first, second) => {
                let a = self.emit(first)?;
                let b = self.emit(second)?;
                self.patch(a.exit, Dest::To { graph: None, instr: b.input, slot: 1 });
                Ok(Fragment { input: a.input, exit: b.exit })
            }
            Skeleton::Custom(c) => self.emit_custom(&c.graph),
        }
    }

    fn emit_custom(&mut self, graph: &MdfGraph) -> Result<Fragment, CompileError> {
        let template = GraphTemplate::from_graph(graph.clone(), "custom")?;
        let graph = template.graph;
        let renumber: std::collections::HashMap<InstrId, InstrId> =
            graph.instructions().map(|i| i.id).collect::<Vec<_>>().into_iter().map(|id| (id, self.new_id())).collect();
        let (exit_old, k) = graph.external_dests()[0];
        for instr in graph.instructions() {
            let dests = instr
                .dests
                .iter()
                .map(|d| match *d {
                    Dest::To { instr: t, slot, .. } => Dest::To { graph: None, instr: renumber[&t], slot },
                    Dest::Out => Dest::Out,
                })
                .collect();
            let copy = MdfInstruction::new(renumber[&instr.id], None, instr.opcode.clone(), instr.arity(), dests)
                .expect("validated instruction");
            self.instrs.push(copy);
        }
        Ok(Fragment { input: renumber[&graph.input()], exit: (renumber[&exit_old], k) })
    }
}

/// Compiles a skeleton into a graph template. Instruction ids start at 1.
pub fn compile(s: &Skeleton) -> Result<GraphTemplate, CompileError> {
    let mut b = Builder::default();
    let frag = b.emit(s)?;
    let graph = MdfGraph::new(frag.input, b.instrs);
    debug_assert!(graph.validate().is_empty(), "compiler produced an invalid graph: {:?}", graph.validate());
    Ok(GraphTemplate { graph, provenance: s.to_string() })
}

/// Rewrites a skeleton into its normal form: a farm whose worker runs every
/// `Seq` leaf in left-to-right order as one chained opcode.
pub fn normalize(s: &Skeleton) -> Result<Skeleton, CompileError> {
    let mut custom = false;
    s.walk(&mut |n| custom |= matches!(n, Skeleton::Custom(_)));
    if custom {
        return Err(CompileError::NotNormalizable);
    }
    let chain = s.seq_leaves().join(&CHAIN_SEP.to_string());
    Ok(Skeleton::farm(Skeleton::Seq(chain)))
}

/// Replaces the template's external output destination with `successor`.
/// Linking to `Dest::Out` leaves the graph unchanged. When the successor
/// lies outside the graph the result is a fragment meant to be merged with
/// the graph owning that instruction.
pub fn link_custom(template: &GraphTemplate, successor: Dest) -> Result<GraphTemplate, CompileError> {
    let exits = template.graph.external_dests();
    let Some(&(id, k)) = exits.first() else {
        return Err(CompileError::NoExternalDest);
    };
    if successor.is_out() {
        return Ok(template.clone());
    }
    let mut graph = template.graph.clone();
    graph.get_mut(id).expect("exit exists").dests[k] = successor;
    let Dest::To { instr: target, .. } = successor else { unreachable!() };
    let opts = ValidateOptions {
        waive_output: true,
        external_target: graph.get(target).is_none().then_some(target),
    };
    let violations = graph.validate_with(opts);
    if !violations.is_empty() {
        return Err(CompileError::InvalidCustomGraph(violations));
    }
    Ok(GraphTemplate { graph, provenance: format!("{} linked to {successor}", template.provenance) })
}

/// The programmer-defined map skeleton: `split` fans one task out to `parts`
/// copies of `worker`, whose results `merge` gathers.
pub fn build_map_graph(
    registry: &OpcodeRegistry,
    split: &str,
    worker: &str,
    merge: &str,
    parts: usize,
) -> Result<GraphTemplate, CompileError> {
    let sig = |name: &str| registry.signature(name).ok_or_else(|| CompileError::UnknownOpcode(name.to_string()));
    let (s, w, m) = (sig(split)?, sig(worker)?, sig(merge)?);
    if parts == 0 {
        return Err(CompileError::ArityMismatch("a map needs at least one part".into()));
    }
    if s.in_arity != 1 || s.out_arity != parts {
        return Err(CompileError::ArityMismatch(format!("split `{split}` emits {} outputs, need {parts}", s.out_arity)));
    }
    if w.in_arity != 1 || w.out_arity != 1 {
        return Err(CompileError::ArityMismatch(format!("worker `{worker}` must be unary")));
    }
    if m.in_arity != parts || m.out_arity != 1 {
        return Err(CompileError::ArityMismatch(format!("merge `{merge}` takes {} inputs, need {parts}", m.in_arity)));
    }
    let parts = parts as u32;
    let merge_id = parts + 2;
    let mut instrs = Vec::with_capacity(parts as usize + 2);
    let fan_out = (0..parts).map(|p| Dest::to(p + 2, 1)).collect();
    instrs.push(MdfInstruction::new(InstrId(1), None, split, 1, fan_out).expect("arity 1"));
    for p in 0..parts {
        instrs.push(MdfInstruction::new(InstrId(p + 2), None, worker, 1, vec![Dest::to(merge_id, p + 1)]).expect("arity 1"));
    }
    instrs.push(MdfInstruction::new(InstrId(merge_id), None, merge, parts as usize, vec![Dest::Out]).expect("parts >= 1"));
    GraphTemplate::from_graph(MdfGraph::new(InstrId(1), instrs), format!("map({split},{worker},{merge},{parts})"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{as_int, int};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn f_g() -> Skeleton {
        Skeleton::pipe(Skeleton::farm(Skeleton::seq("f")), Skeleton::farm(Skeleton::seq("g")))
    }

    #[test]
    fn compile_pipe_of_farms() {
        let t = compile(&f_g()).unwrap();
        assert_eq!(t.dump(), "1 NoId f [_] -> [(NoId,2,1)]\n2 NoId g [_] -> [OUT]\n");
        assert_eq!(t.graph().canonical().dump(), "1 1 f [_] -> [(1,2,1)]\n2 1 g [_] -> [OUT]\n");
    }

    #[test]
    fn compile_seq() {
        let t = compile(&Skeleton::seq("f")).unwrap();
        assert_eq!(t.dump(), "1 NoId f [_] -> [OUT]\n");
    }

    #[test]
    fn farm_is_transparent() {
        let twice = compile(&Skeleton::farm(Skeleton::farm(Skeleton::seq("f")))).unwrap();
        assert_eq!(twice.graph(), compile(&Skeleton::seq("f")).unwrap().graph());
    }

    #[test]
    fn compile_rejects_bad_custom() {
        let bad = MdfGraph::new(InstrId(1), [MdfInstruction::new(InstrId(1), None, "f", 1, vec![Dest::Out, Dest::Out]).unwrap()]);
        let err = compile(&Skeleton::pipe(Skeleton::seq("a"), Skeleton::custom("bad", bad))).unwrap_err();
        assert_eq!(err, CompileError::InvalidCustomGraph(vec![Violation::MultipleOutputs]));
    }

    /// t' = h1(f1(t), g2(g1(f1(t)))) followed by a two stage pipeline.
    fn preprocessing() -> MdfGraph {
        MdfGraph::parse(
            "1 NoId f1 [_] -> [(NoId,2,1),(NoId,4,1)]\n\
             2 NoId g1 [_] -> [(NoId,3,1)]\n\
             3 NoId g2 [_] -> [(NoId,4,2)]\n\
             4 NoId h1 [_,_] -> [OUT]\n",
        )
        .unwrap()
    }

    #[test]
    fn mixed_custom_and_pipeline() {
        let s = Skeleton::pipe(Skeleton::custom("pre", preprocessing()), Skeleton::pipe(Skeleton::seq("p"), Skeleton::seq("q")));
        let t = compile(&s).unwrap();
        assert_eq!(
            t.dump(),
            "1 NoId f1 [_] -> [(NoId,2,1),(NoId,4,1)]\n\
             2 NoId g1 [_] -> [(NoId,3,1)]\n\
             3 NoId g2 [_] -> [(NoId,4,2)]\n\
             4 NoId h1 [_,_] -> [(NoId,5,1)]\n\
             5 NoId p [_] -> [(NoId,6,1)]\n\
             6 NoId q [_] -> [OUT]\n"
        );
    }

    #[test]
    fn link_custom_cases() {
        let pre = GraphTemplate::from_graph(preprocessing(), "pre").unwrap();
        let linked = link_custom(&pre, Dest::to(5, 1)).unwrap();
        assert_eq!(linked.graph().get(InstrId(4)).unwrap().dests, vec![Dest::to(5, 1)]);
        assert!(linked.graph().external_dests().is_empty());

        assert_eq!(link_custom(&pre, Dest::Out).unwrap(), pre);
        assert_eq!(link_custom(&linked, Dest::to(7, 1)), Err(CompileError::NoExternalDest));
    }

    #[test]
    fn linked_fragment_merges_into_pipeline_figure() {
        // the linked preprocessing graph plus the compiled postprocessing
        // pipeline (renumbered past it) is exactly the mixed graph
        let pre = GraphTemplate::from_graph(preprocessing(), "pre").unwrap();
        let linked = link_custom(&pre, Dest::to(5, 1)).unwrap();
        let post = compile(&Skeleton::pipe(Skeleton::seq("p"), Skeleton::seq("q"))).unwrap();
        let shifted = post.graph().instructions().map(|i| {
            let dests = i
                .dests
                .iter()
                .map(|d| match *d {
                    Dest::To { instr, slot, .. } => Dest::to(instr.0 + 4, slot),
                    Dest::Out => Dest::Out,
                })
                .collect();
            MdfInstruction::new(InstrId(i.id.0 + 4), None, i.opcode.clone(), i.arity(), dests).unwrap()
        });
        let merged = MdfGraph::new(InstrId(1), linked.graph().clone().into_instructions().chain(shifted));
        assert!(merged.validate().is_empty());
        let s = Skeleton::pipe(Skeleton::custom("pre", preprocessing()), Skeleton::pipe(Skeleton::seq("p"), Skeleton::seq("q")));
        assert_eq!(merged, compile(&s).unwrap().graph().clone());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&f_g()).unwrap(), Skeleton::farm(Skeleton::seq("f>g")));
        assert_eq!(normalize(&Skeleton::seq("f")).unwrap(), Skeleton::farm(Skeleton::seq("f")));
        let abc = Skeleton::pipe(Skeleton::pipe(Skeleton::seq("a"), Skeleton::seq("b")), Skeleton::seq("c"));
        assert_eq!(normalize(&abc).unwrap(), Skeleton::farm(Skeleton::seq("a>b>c")));
        assert_eq!(normalize(&Skeleton::custom("pre", preprocessing())), Err(CompileError::NotNormalizable));
    }

    #[test]
    fn normal_form_chain_matches_direct_composition() {
        let fa = |x: i64| x.wrapping_mul(3).wrapping_add(1);
        let fb = |x: i64| x ^ 0x55;
        let fc = |x: i64| x.wrapping_sub(7);
        let mut r = OpcodeRegistry::new();
        r.register_unary("a", move |p| Ok(int(fa(as_int(p).unwrap())))).unwrap();
        r.register_unary("b", move |p| Ok(int(fb(as_int(p).unwrap())))).unwrap();
        r.register_unary("c", move |p| Ok(int(fc(as_int(p).unwrap())))).unwrap();
        let abc = Skeleton::pipe(Skeleton::pipe(Skeleton::seq("a"), Skeleton::seq("b")), Skeleton::seq("c"));
        let Skeleton::Farm(inner) = normalize(&abc).unwrap() else { panic!() };
        let Skeleton::Seq(chain) = *inner else { panic!() };
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let x: i64 = rng.gen_range(-1_000_000..1_000_000);
            assert_eq!(r.call(&chain, &[int(x)]).unwrap(), vec![int(fc(fb(fa(x))))]);
        }
    }

    #[test]
    fn map_graph_shapes() {
        let mut r = OpcodeRegistry::new();
        r.register("split3", 1, 3, |a| Ok(vec![a[0].clone(); 3])).unwrap();
        r.register("split1", 1, 1, |a| Ok(a.to_vec())).unwrap();
        r.register_unary("w", |p| Ok(p.clone())).unwrap();
        r.register("merge3", 3, 1, |a| Ok(vec![a[0].clone()])).unwrap();
        r.register("merge2", 2, 1, |a| Ok(vec![a[0].clone()])).unwrap();
        r.register("merge1", 1, 1, |a| Ok(vec![a[0].clone()])).unwrap();

        let t = build_map_graph(&r, "split3", "w", "merge3", 3).unwrap();
        assert_eq!(t.graph().len(), 5);
        assert!(t.graph().validate().is_empty());
        assert_eq!(t.graph().get(InstrId(1)).unwrap().dests.len(), 3);
        assert_eq!(t.graph().get(InstrId(5)).unwrap().arity(), 3);
        let into_merge = t.graph().instructions().flat_map(|i| &i.dests).filter(|d| matches!(d, Dest::To { instr: InstrId(5), .. })).count();
        assert_eq!(into_merge, 3);

        let t = build_map_graph(&r, "split1", "w", "merge1", 1).unwrap();
        assert_eq!(t.dump(), "1 NoId split1 [_] -> [(NoId,2,1)]\n2 NoId w [_] -> [(NoId,3,1)]\n3 NoId merge1 [_] -> [OUT]\n");

        assert!(matches!(build_map_graph(&r, "split3", "w", "merge2", 3), Err(CompileError::ArityMismatch(_))));
        assert!(matches!(build_map_graph(&r, "split3", "w", "merge3", 0), Err(CompileError::ArityMismatch(_))));
    }

    #[test]
    fn parse_skeleton_text() {
        assert_eq!(Skeleton::parse("pipe(farm(seq:f), farm(seq:g))").unwrap(), f_g());
        let three = Skeleton::parse("pipe(seq:a,seq:b,seq:c)").unwrap();
        assert_eq!(three, Skeleton::pipe(Skeleton::seq("a"), Skeleton::pipe(Skeleton::seq("b"), Skeleton::seq("c"))));
        assert_eq!(Skeleton::parse(&f_g().to_string()).unwrap(), f_g());
        assert!(matches!(Skeleton::parse("pipe(seq:a)"), Err(CompileError::Syntax { .. })));
        assert!(matches!(Skeleton::parse("farm(seq:a"), Err(CompileError::Syntax { .. })));
        assert!(matches!(Skeleton::parse("seq:a junk"), Err(CompileError::Syntax { .. })));
        let c = Skeleton::parse_with("pipe(custom:@pre.graph,seq:p)", |path| {
            assert_eq!(path, "pre.graph");
            Ok(preprocessing())
        })
        .unwrap();
        assert_eq!(c.to_string(), "pipe(custom:@pre.graph,seq:p)");
    }

    pub(crate) fn random_skeleton(rng: &mut impl Rng, depth: usize) -> Skeleton {
        const OPS: [&str; 4] = ["a", "b", "c", "d"];
        if depth <= 1 || rng.gen_bool(0.3) {
            return Skeleton::seq(OPS[rng.gen_range(0..OPS.len())]);
        }
        if rng.gen_bool(0.4) {
            Skeleton::farm(random_skeleton(rng, depth - 1))
        } else {
            Skeleton::pipe(random_skeleton(rng, depth - 1), random_skeleton(rng, depth - 1))
        }
    }

    proptest! {
        #[test]
        fn compiled_templates_are_valid(seed in any::<u64>()) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let s = random_skeleton(&mut rng, 6);
            let t = compile(&s).unwrap();
            prop_assert!(t.graph().validate().is_empty());
            prop_assert!(t.graph().all_tokens_absent());
            prop_assert_eq!(t.graph().len(), s.seq_leaves().len());
            // single writer per slot
            let mut seen = std::collections::HashSet::new();
            for d in t.graph().instructions().flat_map(|i| &i.dests) {
                if let Dest::To { instr, slot, .. } = d {
                    prop_assert!(seen.insert((*instr, *slot)));
                }
            }
        }

        #[test]
        fn compilation_is_deterministic_and_farm_transparent(seed in any::<u64>()) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let s = random_skeleton(&mut rng, 6);
            let a = compile(&s).unwrap().graph().canonical().dump();
            let b = compile(&s).unwrap().graph().canonical().dump();
            prop_assert_eq!(&a, &b);
            let farmed = compile(&Skeleton::farm(s.clone())).unwrap().graph().canonical().dump();
            prop_assert_eq!(a, farmed);
        }

        #[test]
        fn display_parse_roundtrip(seed in any::<u64>()) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let s = random_skeleton(&mut rng, 6);
            prop_assert_eq!(Skeleton::parse(&s.to_string()).unwrap(), s);
        }
    }
}
