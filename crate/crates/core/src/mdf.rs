//! Tokens, destinations, macro data-flow instructions and graphs.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Payload;

/// Instruction identifier, unique within a graph. Generated ids start at 1.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstrId(pub u32);

/// Graph identifier. Templates carry no graph id (`None`, printed `NoId`);
/// instances get a fresh one from the task pool.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphId(pub u64);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for GraphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn fmt_gid(gid: Option<GraphId>) -> String {
    gid.map_or_else(|| "NoId".to_string(), |g| g.to_string())
}

/// A single-assignment input slot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Token {
    value: Option<Payload>,
}

impl Token {
    pub fn absent() -> Self {
        Token { value: None }
    }

    pub fn present(value: Payload) -> Self {
        Token { value: Some(value) }
    }

    pub fn is_present(&self) -> bool {
        self.value.is_some()
    }

    pub fn value(&self) -> Option<&Payload> {
        self.value.as_ref()
    }
}

/// Where an output token goes: a slot of an instruction, or the external
/// output stream.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Dest {
    Out,
    To {
        /// `None` inside templates; resolved to the enclosing graph on instantiation.
        graph: Option<GraphId>,
        instr: InstrId,
        /// 1-based.
        slot: u32,
    },
}

impl Dest {
    /// Same-graph destination.
    pub fn to(instr: u32, slot: u32) -> Dest {
        Dest::To { graph: None, instr: InstrId(instr), slot }
    }

    pub fn is_out(&self) -> bool {
        matches!(self, Dest::Out)
    }

    fn with_graph(self, gid: Option<GraphId>) -> Dest {
        match self {
            Dest::Out => Dest::Out,
            Dest::To { instr, slot, .. } => Dest::To { graph: gid, instr, slot },
        }
    }
}

impl fmt::Display for Dest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dest::Out => write!(f, "OUT"),
            Dest::To { graph, instr, slot } => write!(f, "({},{},{})", fmt_gid(*graph), instr, slot),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MdfError {
    #[error("instruction needs at least one input token")]
    ZeroArity,
    #[error("instruction needs at least one destination")]
    EmptyDests,
    #[error("slot {slot} out of range for instruction {instr} with arity {arity}")]
    SlotOutOfRange { instr: InstrId, slot: u32, arity: usize },
    #[error("slot {slot} of instruction {instr} already holds a token")]
    SlotOccupied { instr: InstrId, slot: u32 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// `⟨id, gid, opcode, inputs, dests⟩`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MdfInstruction {
    pub id: InstrId,
    pub gid: Option<GraphId>,
    pub opcode: String,
    inputs: Vec<Token>,
    pub dests: Vec<Dest>,
}

impl MdfInstruction {
    /// Builds an instruction with every input token absent.
    pub fn new(
        id: InstrId,
        gid: Option<GraphId>,
        opcode: impl Into<String>,
        in_arity: usize,
        dests: Vec<Dest>,
    ) -> Result<Self, MdfError> {
        if in_arity == 0 {
            return Err(MdfError::ZeroArity);
        }
        if dests.is_empty() {
            return Err(MdfError::EmptyDests);
        }
        Ok(MdfInstruction { id, gid, opcode: opcode.into(), inputs: vec![Token::absent(); in_arity], dests })
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[Token] {
        &self.inputs
    }

    /// Stores `value` into the 1-based `slot`. Slots are single-assignment.
    pub fn store_token(&mut self, slot: u32, value: Payload) -> Result<(), MdfError> {
        let arity = self.inputs.len();
        let token = (slot as usize)
            .checked_sub(1)
            .and_then(|i| self.inputs.get_mut(i))
            .ok_or(MdfError::SlotOutOfRange { instr: self.id, slot, arity })?;
        if token.is_present() {
            return Err(MdfError::SlotOccupied { instr: self.id, slot });
        }
        token.value = Some(value);
        Ok(())
    }

    pub fn is_fireable(&self) -> bool {
        self.inputs.iter().all(Token::is_present)
    }

    /// Copies of the input payloads, in slot order. `None` unless fireable.
    pub fn arguments(&self) -> Option<Vec<Payload>> {
        self.inputs.iter().map(|t| t.value.clone()).collect()
    }

    fn instantiate(&self, gid: GraphId) -> MdfInstruction {
        MdfInstruction {
            gid: Some(gid),
            dests: self.dests.iter().map(|d| d.with_graph(Some(gid))).collect(),
            ..self.clone()
        }
    }
}

impl fmt::Display for MdfInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self
            .inputs
            .iter()
            .map(|t| t.value.as_ref().map_or_else(|| "_".to_string(), |p| format!("#{}", p.to_hex())))
            .collect();
        let dests: Vec<String> = self.dests.iter().map(Dest::to_string).collect();
        write!(
            f,
            "{} {} {} [{}] -> [{}]",
            self.id,
            fmt_gid(self.gid),
            self.opcode,
            tokens.join(","),
            dests.join(",")
        )
    }
}

/// A broken [`MdfGraph`] invariant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Violation {
    MissingInput(InstrId),
    GidMismatch(InstrId),
    ZeroArity(InstrId),
    NoDests(InstrId),
    /// A destination names an instruction that is not in the graph.
    DanglingDest(InstrId),
    /// A destination names a slot the target does not have.
    SlotOutOfRange(InstrId),
    /// A destination names another graph.
    ForeignDest(InstrId),
    /// More than one writer for a slot (the input slot counts as written).
    DuplicateWriter { instr: InstrId, slot: u32 },
    /// A slot nobody writes: the instruction could never fire.
    UnfedSlot { instr: InstrId, slot: u32 },
    MultipleOutputs,
    NoOutput,
    Cycle(InstrId),
}

/// Rules that may be relaxed while graphs are being linked together.
#[derive(Clone, Copy, Debug, Default)]
pub struct ValidateOptions {
    /// Skip the exactly-one-external-output rule.
    pub waive_output: bool,
    /// Destinations to this instruction id are not checked against the graph.
    pub external_target: Option<InstrId>,
}

/// A set of instructions with a unique input instruction and a unique
/// external output destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MdfGraph {
    instructions: BTreeMap<InstrId, MdfInstruction>,
    input: InstrId,
    gid: Option<GraphId>,
}

impl MdfGraph {
    /// Assembles a template graph (no graph id). Call [`MdfGraph::validate`]
    /// before using it.
    pub fn new(input: InstrId, instructions: impl IntoIterator<Item = MdfInstruction>) -> Self {
        MdfGraph { instructions: instructions.into_iter().map(|i| (i.id, i)).collect(), input, gid: None }
    }

    pub fn input(&self) -> InstrId {
        self.input
    }

    pub fn gid(&self) -> Option<GraphId> {
        self.gid
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn get(&self, id: InstrId) -> Option<&MdfInstruction> {
        self.instructions.get(&id)
    }

    pub fn get_mut(&mut self, id: InstrId) -> Option<&mut MdfInstruction> {
        self.instructions.get_mut(&id)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &MdfInstruction> {
        self.instructions.values()
    }

    pub fn into_instructions(self) -> impl Iterator<Item = MdfInstruction> {
        self.instructions.into_values()
    }

    /// Location `(instruction, dest index)` of every external output destination.
    pub fn external_dests(&self) -> Vec<(InstrId, usize)> {
        self.instructions
            .values()
            .flat_map(|i| i.dests.iter().enumerate().filter(|(_, d)| d.is_out()).map(move |(k, _)| (i.id, k)))
            .collect()
    }

    pub fn all_tokens_absent(&self) -> bool {
        self.instructions.values().all(|i| i.inputs.iter().all(|t| !t.is_present()))
    }

    /// Copy of this graph bound to `gid`.
    pub fn instantiate(&self, gid: GraphId) -> MdfGraph {
        MdfGraph {
            instructions: self.instructions.iter().map(|(k, i)| (*k, i.instantiate(gid))).collect(),
            input: self.input,
            gid: Some(gid),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(ValidateOptions::default())
    }

    /// Checks every graph invariant. An empty list means the graph is valid.
    pub fn validate_with(&self, opts: ValidateOptions) -> Vec<Violation> {
        let mut out = Vec::new();
        if !self.instructions.contains_key(&self.input) {
            out.push(Violation::MissingInput(self.input));
        }
        let mut writers: HashMap<(InstrId, u32), usize> = HashMap::new();
        writers.insert((self.input, 1), 1);
        let mut outputs = 0;
        for instr in self.instructions.values() {
            if instr.gid != self.gid {
                out.push(Violation::GidMismatch(instr.id));
            }
            if instr.inputs.is_empty() {
                out.push(Violation::ZeroArity(instr.id));
            }
            if instr.dests.is_empty() {
                out.push(Violation::NoDests(instr.id));
            }
            for dest in &instr.dests {
                let Dest::To { graph, instr: target, slot } = *dest else {
                    outputs += 1;
                    continue;
                };
                if graph.is_some() && graph != self.gid {
                    out.push(Violation::ForeignDest(instr.id));
                    continue;
                }
                if opts.external_target == Some(target) {
                    continue;
                }
                match self.instructions.get(&target) {
                    None => out.push(Violation::DanglingDest(instr.id)),
                    Some(t) if slot == 0 || slot as usize > t.arity() => out.push(Violation::SlotOutOfRange(instr.id)),
                    Some(_) => *writers.entry((target, slot)).or_default() += 1,
                }
            }
        }
        if !opts.waive_output {
            match outputs {
                0 => out.push(Violation::NoOutput),
                1 => {}
                _ => out.push(Violation::MultipleOutputs),
            }
        }
        for instr in self.instructions.values() {
            for slot in 1..=instr.arity() as u32 {
                match writers.get(&(instr.id, slot)).copied().unwrap_or(0) {
                    0 => out.push(Violation::UnfedSlot { instr: instr.id, slot }),
                    1 => {}
                    _ => out.push(Violation::DuplicateWriter { instr: instr.id, slot }),
                }
            }
        }
        out.extend(self.cycle_members().into_iter().map(Violation::Cycle));
        out.sort();
        out.dedup();
        out
    }

    /// Instructions left over after Kahn's algorithm, i.e. on or behind a cycle.
    fn cycle_members(&self) -> Vec<InstrId> {
        let mut indegree: HashMap<InstrId, usize> = self.instructions.keys().map(|k| (*k, 0)).collect();
        for instr in self.instructions.values() {
            for t in self.internal_targets(instr) {
                *indegree.get_mut(&t).unwrap() += 1;
            }
        }
        let mut ready: VecDeque<InstrId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut seen = 0;
        while let Some(id) = ready.pop_front() {
            seen += 1;
            for t in self.internal_targets(&self.instructions[&id]) {
                let d = indegree.get_mut(&t).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push_back(t);
                }
            }
        }
        if seen == self.instructions.len() {
            return Vec::new();
        }
        let mut left: Vec<InstrId> = indegree.into_iter().filter(|(_, d)| *d > 0).map(|(k, _)| k).collect();
        left.sort();
        left
    }

    fn internal_targets<'a>(&'a self, instr: &'a MdfInstruction) -> impl Iterator<Item = InstrId> + 'a {
        instr.dests.iter().filter_map(move |d| match d {
            Dest::To { instr: t, .. } if self.instructions.contains_key(t) => Some(*t),
            _ => None,
        })
    }

    /// Renumbers instructions 1..n in breadth-first order from the input
    /// (destinations visited in order) and binds the graph to id 1. Two
    /// isomorphic graphs have byte-identical canonical dumps.
    pub fn canonical(&self) -> MdfGraph {
        let mut order = Vec::with_capacity(self.len());
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([self.input]);
        while let Some(id) = queue.pop_front() {
            if !self.instructions.contains_key(&id) || !seen.insert(id) {
                continue;
            }
            order.push(id);
            queue.extend(self.internal_targets(&self.instructions[&id]));
        }
        order.extend(self.instructions.keys().filter(|k| !seen.contains(k)));
        let renumber: HashMap<InstrId, InstrId> =
            order.iter().enumerate().map(|(n, id)| (*id, InstrId(n as u32 + 1))).collect();
        let gid = Some(GraphId(1));
        let instructions = order.iter().map(|id| {
            let i = &self.instructions[id];
            let dests = i
                .dests
                .iter()
                .map(|d| match *d {
                    Dest::To { instr, slot, .. } => {
                        Dest::To { graph: gid, instr: renumber.get(&instr).copied().unwrap_or(instr), slot }
                    }
                    Dest::Out => Dest::Out,
                })
                .collect();
            MdfInstruction { id: renumber[id], gid, dests, ..i.clone() }
        });
        MdfGraph {
            instructions: instructions.map(|i| (i.id, i)).collect(),
            input: renumber.get(&self.input).copied().unwrap_or(self.input),
            gid,
        }
    }

    /// Text dump, one instruction per line in id order:
    /// `id gid opcode [t1,...] -> [(g,i,s),...]`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for instr in self.instructions.values() {
            s.push_str(&instr.to_string());
            s.push('\n');
        }
        s
    }

    /// Parses the dump format. The input instruction is the lowest id whose
    /// first slot no destination writes. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<MdfGraph, MdfError> {
        let mut instrs = Vec::new();
        let mut gid = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") || (line.starts_with('#') && !line.contains("->")) {
                continue;
            }
            let err = |msg: &str| MdfError::Parse { line: n + 1, msg: msg.to_string() };
            let instr = parse_line(line).map_err(|m| err(&m))?;
            if !instrs.is_empty() && instr.gid != gid {
                return Err(err("mixed graph ids"));
            }
            gid = instr.gid;
            instrs.push(instr);
        }
        if instrs.is_empty() {
            return Err(MdfError::Parse { line: 0, msg: "empty graph".into() });
        }
        let written: HashSet<(InstrId, u32)> = instrs
            .iter()
            .flat_map(|i| i.dests.iter())
            .filter_map(|d| match d {
                Dest::To { instr, slot, .. } => Some((*instr, *slot)),
                Dest::Out => None,
            })
            .collect();
        let mut ids: Vec<InstrId> = instrs.iter().map(|i| i.id).collect();
        ids.sort();
        let input = ids.iter().copied().find(|id| !written.contains(&(*id, 1))).unwrap_or(ids[0]);
        let mut g = MdfGraph::new(input, instrs);
        g.gid = gid;
        Ok(g)
    }
}

fn parse_id<T>(s: &str, wrap: impl Fn(u64) -> T) -> Result<Option<T>, String> {
    match s.trim() {
        "NoId" => Ok(None),
        t => t.parse::<u64>().map(|v| Some(wrap(v))).map_err(|_| format!("bad identifier `{t}`")),
    }
}

fn parse_line(line: &str) -> Result<MdfInstruction, String> {
    let (head, dests) = line.split_once("->").ok_or("missing `->`")?;
    let (head, tokens) = head.split_once('[').ok_or("missing token list")?;
    let tokens = tokens.trim().strip_suffix(']').ok_or("unterminated token list")?;
    let mut fields = head.split_whitespace();
    let id = parse_id(fields.next().ok_or("missing id")?, |v| InstrId(v as u32))?.ok_or("instruction id cannot be NoId")?;
    let gid = parse_id(fields.next().ok_or("missing gid")?, GraphId)?;
    let opcode = fields.next().ok_or("missing opcode")?.to_string();
    if fields.next().is_some() {
        return Err("unexpected field before token list".into());
    }
    let inputs = tokens
        .split(',')
        .map(|t| match t.trim() {
            "_" => Ok(Token::absent()),
            t => t
                .strip_prefix('#')
                .and_then(Payload::from_hex)
                .map(Token::present)
                .ok_or_else(|| format!("bad token `{t}`")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dests = dests.trim().strip_prefix('[').and_then(|d| d.strip_suffix(']')).ok_or("bad destination list")?;
    let mut parsed = Vec::new();
    let mut rest = dests.trim();
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix("OUT") {
            parsed.push(Dest::Out);
            rest = r;
        } else if let Some(r) = rest.strip_prefix('(') {
            let (triple, r) = r.split_once(')').ok_or("unterminated destination")?;
            let parts: Vec<&str> = triple.split(',').collect();
            let [g, i, s] = parts[..] else { return Err(format!("bad destination `({triple})`")) };
            let graph = parse_id(g, GraphId)?;
            match (parse_id(i, |v| InstrId(v as u32))?, parse_id(s, |v| v as u32)?) {
                (None, None) if graph.is_none() => parsed.push(Dest::Out),
                (Some(instr), Some(slot)) => parsed.push(Dest::To { graph, instr, slot }),
                _ => return Err(format!("bad destination `({triple})`")),
            }
            rest = r;
        } else {
            return Err(format!("bad destination near `{rest}`"));
        }
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    let mut instr = MdfInstruction::new(id, gid, opcode, inputs.len(), parsed).map_err(|e| e.to_string())?;
    instr.inputs = inputs;
    Ok(instr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::int;

    fn instr(id: u32, op: &str, arity: usize, dests: Vec<Dest>) -> MdfInstruction {
        MdfInstruction::new(InstrId(id), None, op, arity, dests).unwrap()
    }

    fn f_then_g() -> MdfGraph {
        MdfGraph::new(InstrId(1), [instr(1, "f", 1, vec![Dest::to(2, 1)]), instr(2, "g", 1, vec![Dest::Out])])
    }

    #[test]
    fn make_instruction_has_absent_tokens() {
        let i = MdfInstruction::new(InstrId(2), Some(GraphId(1)), "g", 1, vec![Dest::Out]).unwrap();
        assert_eq!(i.inputs(), &[Token::absent()]);
        assert_eq!(i.to_string(), "2 1 g [_] -> [OUT]");

        let t = MdfInstruction::new(InstrId(1), None, "f", 1, vec![Dest::to(2, 1)]).unwrap();
        assert_eq!((t.id, t.gid, t.opcode.as_str(), t.arity()), (InstrId(1), None, "f", 1));
        assert_eq!(t.dests, vec![Dest::to(2, 1)]);
    }

    #[test]
    fn make_instruction_errors() {
        assert_eq!(MdfInstruction::new(InstrId(1), Some(GraphId(1)), "f", 0, vec![Dest::Out]), Err(MdfError::ZeroArity));
        assert_eq!(MdfInstruction::new(InstrId(1), None, "f", 1, vec![]), Err(MdfError::EmptyDests));
    }

    #[test]
    fn store_token_completes_instruction() {
        let mut i = instr(1, "f", 2, vec![Dest::Out]);
        i.store_token(1, int(123)).unwrap();
        assert!(!i.is_fireable());
        i.store_token(2, int(7)).unwrap();
        assert!(i.is_fireable());
        assert_eq!(i.arguments(), Some(vec![int(123), int(7)]));
    }

    #[test]
    fn store_token_single_slot() {
        let mut i = instr(1, "f", 1, vec![Dest::Out]);
        assert!(!i.is_fireable());
        i.store_token(1, int(5)).unwrap();
        assert!(i.is_fireable());
    }

    #[test]
    fn store_token_errors() {
        let mut i = instr(1, "f", 1, vec![Dest::Out]);
        i.store_token(1, int(123)).unwrap();
        assert_eq!(i.store_token(1, int(1)), Err(MdfError::SlotOccupied { instr: InstrId(1), slot: 1 }));
        assert!(matches!(i.store_token(0, int(1)), Err(MdfError::SlotOutOfRange { .. })));
        assert!(matches!(i.store_token(2, int(1)), Err(MdfError::SlotOutOfRange { .. })));
    }

    #[test]
    fn fireability() {
        let mut i = instr(1, "f", 2, vec![Dest::Out]);
        assert!(!i.is_fireable());
        i.store_token(1, int(123)).unwrap();
        assert!(!i.is_fireable());
    }

    #[test]
    fn validate_two_instruction_graph() {
        assert_eq!(f_then_g().validate(), vec![]);
    }

    #[test]
    fn validate_dangling() {
        let g = MdfGraph::new(InstrId(1), [instr(1, "f", 1, vec![Dest::Out, Dest::to(9, 1)])]);
        assert_eq!(g.validate(), vec![Violation::DanglingDest(InstrId(1))]);
    }

    #[test]
    fn validate_multiple_outputs() {
        let g = MdfGraph::new(InstrId(1), [instr(1, "f", 1, vec![Dest::Out, Dest::Out])]);
        assert_eq!(g.validate(), vec![Violation::MultipleOutputs]);
    }

    #[test]
    fn validate_structural_rules() {
        // two writers on one slot, an unfed slot, no output
        let g = MdfGraph::new(
            InstrId(1),
            [
                instr(1, "f", 1, vec![Dest::to(2, 1), Dest::to(2, 1)]),
                instr(2, "g", 2, vec![Dest::to(3, 1)]),
                instr(3, "h", 1, vec![Dest::to(1, 1)]),
            ],
        );
        let v = g.validate();
        assert!(v.contains(&Violation::DuplicateWriter { instr: InstrId(2), slot: 1 }));
        assert!(v.contains(&Violation::UnfedSlot { instr: InstrId(2), slot: 2 }));
        assert!(v.contains(&Violation::DuplicateWriter { instr: InstrId(1), slot: 1 }));
        assert!(v.contains(&Violation::NoOutput));
        assert!(v.contains(&Violation::Cycle(InstrId(1))));
    }

    #[test]
    fn validate_slot_range_and_input() {
        let g = MdfGraph::new(InstrId(5), [instr(1, "f", 1, vec![Dest::to(1, 3), Dest::Out])]);
        let v = g.validate();
        assert!(v.contains(&Violation::MissingInput(InstrId(5))));
        assert!(v.contains(&Violation::SlotOutOfRange(InstrId(1))));
    }

    #[test]
    fn instantiate_binds_graph_ids() {
        let g = f_then_g().instantiate(GraphId(7));
        assert_eq!(g.validate(), vec![]);
        assert_eq!(g.dump(), "1 7 f [_] -> [(7,2,1)]\n2 7 g [_] -> [OUT]\n");
    }

    #[test]
    fn dump_parse_roundtrip() {
        let mut g = f_then_g().instantiate(GraphId(3));
        g.get_mut(InstrId(1)).unwrap().store_token(1, int(123)).unwrap();
        let text = g.dump();
        assert_eq!(MdfGraph::parse(&text).unwrap(), g);
        let t = f_then_g();
        assert_eq!(t.dump(), "1 NoId f [_] -> [(NoId,2,1)]\n2 NoId g [_] -> [OUT]\n");
        assert_eq!(MdfGraph::parse(&t.dump()).unwrap(), t);
    }

    #[test]
    fn parse_reports_line() {
        let err = MdfGraph::parse("1 NoId f [_] -> [OUT]\n2 NoId g [_] [OUT]\n").unwrap_err();
        assert!(matches!(err, MdfError::Parse { line: 2, .. }));
        // (NoId,NoId,NoId) is the external destination
        let g = MdfGraph::parse("1 NoId f [_] -> [(NoId,NoId,NoId)]").unwrap();
        assert_eq!(g.get(InstrId(1)).unwrap().dests, vec![Dest::Out]);
    }

    #[test]
    fn canonical_renumbers_breadth_first() {
        let g = MdfGraph::new(
            InstrId(10),
            [instr(10, "f", 1, vec![Dest::to(4, 1)]), instr(4, "g", 1, vec![Dest::Out])],
        );
        assert_eq!(g.canonical().dump(), "1 1 f [_] -> [(1,2,1)]\n2 1 g [_] -> [OUT]\n");
    }
}
