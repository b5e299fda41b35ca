//! Sequential evaluation of skeleton programs, without a pool or runtime.

use std::collections::BTreeSet;

use skelflow::mdf::{Dest, MdfGraph};
use skelflow::{OpcodeRegistry, Payload, Skeleton};

/// Applies `program` to one task.
pub fn eval_skeleton(reg: &OpcodeRegistry, program: &Skeleton, task: Payload) -> Result<Payload, String> {
    match program {
        Skeleton::Seq(op) => single(reg.call(op, &[task]).map_err(|e| e.to_string())?, op),
        Skeleton::Pipe(a, b) => eval_skeleton(reg, b, eval_skeleton(reg, a, task)?),
        Skeleton::Farm(w) => eval_skeleton(reg, w, task),
        Skeleton::Custom(c) => eval_graph(reg, &c.graph, task),
    }
}

fn single(mut outs: Vec<Payload>, op: &str) -> Result<Payload, String> {
    if outs.len() != 1 {
        return Err(format!("`{op}` produced {} outputs where one was expected", outs.len()));
    }
    Ok(outs.remove(0))
}

/// Fires the graph's instructions one at a time, lowest id first, until the
/// output token appears.
pub fn eval_graph(reg: &OpcodeRegistry, template: &MdfGraph, task: Payload) -> Result<Payload, String> {
    let mut g = template.clone();
    let input = g.input();
    g.get_mut(input).ok_or("graph has no input instruction")?.store_token(1, task).map_err(|e| e.to_string())?;
    let mut fired = BTreeSet::new();
    loop {
        let next = g.instructions().find(|i| !fired.contains(&i.id) && i.is_fireable()).map(|i| i.id);
        let Some(id) = next else { return Err("graph stalled before producing its output".into()) };
        fired.insert(id);
        let instr = g.get(id).expect("listed");
        let args = instr.arguments().expect("fireable");
        let dests = instr.dests.clone();
        let outs = reg.call(&instr.opcode, &args).map_err(|e| e.to_string())?;
        if outs.len() != dests.len() {
            return Err(format!("`{}` produced {} outputs for {} destinations", instr.opcode, outs.len(), dests.len()));
        }
        let mut result = None;
        for (d, v) in dests.into_iter().zip(outs) {
            match d {
                Dest::Out => result = Some(v),
                Dest::To { instr, slot, .. } => {
                    g.get_mut(instr).ok_or("dangling destination")?.store_token(slot, v).map_err(|e| e.to_string())?;
                }
            }
        }
        if let Some(v) = result {
            return Ok(v);
        }
    }
}
