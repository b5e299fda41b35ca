//! Named opcodes shared by the client and every worker.
//!
//! Besides plainly registered functions the registry resolves two derived
//! forms: sequential chains `f>g>h` (apply `f`, then `g`, then `h`; every
//! stage unary) and packed multi-output calls `pack:name`, which frame the
//! outputs of `name` into a single payload with [`crate::codec::pack`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{pack, Payload};

pub const CHAIN_SEP: char = '>';
pub const PACK_PREFIX: &str = "pack:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpError {
    #[error("unknown opcode `{0}`")]
    Unknown(String),
    #[error("opcode `{name}` takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("opcode `{name}` returned {got} output(s), declared {expected}")]
    OutputArity { name: String, expected: usize, got: usize },
    #[error("opcode `{name}` failed: {msg}")]
    Failed { name: String, msg: String },
    #[error("invalid opcode registration `{0}`")]
    BadRegistration(String),
}

impl OpError {
    pub fn failed(name: &str, msg: impl fmt::Display) -> Self {
        OpError::Failed { name: name.to_string(), msg: msg.to_string() }
    }
}

type OpFn = dyn Fn(&[Payload]) -> Result<Vec<Payload>, String> + Send + Sync;

/// Name and arities of an opcode, as advertised in a worker manifest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpcodeSig {
    pub name: String,
    pub in_arity: usize,
    pub out_arity: usize,
}

#[derive(Clone)]
struct Entry {
    sig: OpcodeSig,
    func: Arc<OpFn>,
}

/// Mapping from opcode names to side-effect-free functions.
#[derive(Clone, Default)]
pub struct OpcodeRegistry {
    ops: BTreeMap<String, Entry>,
}

impl fmt::Debug for OpcodeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ops.keys()).finish()
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with(PACK_PREFIX)
        && name.chars().all(|c| !c.is_whitespace() && !matches!(c, '>' | ',' | '(' | ')' | '[' | ']' | '#'))
}

impl OpcodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, in_arity: usize, out_arity: usize, func: F) -> Result<(), OpError>
    where
        F: Fn(&[Payload]) -> Result<Vec<Payload>, String> + Send + Sync + 'static,
    {
        if !valid_name(name) || in_arity == 0 || out_arity == 0 || self.ops.contains_key(name) {
            return Err(OpError::BadRegistration(name.to_string()));
        }
        let sig = OpcodeSig { name: name.to_string(), in_arity, out_arity };
        self.ops.insert(name.to_string(), Entry { sig, func: Arc::new(func) });
        Ok(())
    }

    /// Registers a one-in, one-out opcode.
    pub fn register_unary<F>(&mut self, name: &str, func: F) -> Result<(), OpError>
    where
        F: Fn(&Payload) -> Result<Payload, String> + Send + Sync + 'static,
    {
        self.register(name, 1, 1, move |args| func(&args[0]).map(|p| vec![p]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.signature(name).is_some()
    }

    /// Signature of a plain or derived opcode.
    pub fn signature(&self, name: &str) -> Option<OpcodeSig> {
        if let Some(inner) = name.strip_prefix(PACK_PREFIX) {
            let sig = self.signature(inner)?;
            return Some(OpcodeSig { name: name.to_string(), in_arity: sig.in_arity, out_arity: 1 });
        }
        if name.contains(CHAIN_SEP) {
            let unary = name.split(CHAIN_SEP).all(|part| {
                self.ops.get(part).is_some_and(|e| e.sig.in_arity == 1 && e.sig.out_arity == 1)
            });
            return unary.then(|| OpcodeSig { name: name.to_string(), in_arity: 1, out_arity: 1 });
        }
        self.ops.get(name).map(|e| e.sig.clone())
    }

    /// Plain opcode names a (possibly derived) name is built from.
    pub fn components(name: &str) -> Vec<&str> {
        name.strip_prefix(PACK_PREFIX).unwrap_or(name).split(CHAIN_SEP).collect()
    }

    /// Runs an opcode on copies of `args`.
    pub fn call(&self, name: &str, args: &[Payload]) -> Result<Vec<Payload>, OpError> {
        if let Some(inner) = name.strip_prefix(PACK_PREFIX) {
            return self.call(inner, args).map(|outs| vec![pack(&outs)]);
        }
        if name.contains(CHAIN_SEP) {
            let sig = self.signature(name).ok_or_else(|| OpError::Unknown(name.to_string()))?;
            check_arity(&sig, args.len())?;
            let mut acc = args.to_vec();
            for part in name.split(CHAIN_SEP) {
                acc = self.call(part, &acc)?;
            }
            return Ok(acc);
        }
        let entry = self.ops.get(name).ok_or_else(|| OpError::Unknown(name.to_string()))?;
        check_arity(&entry.sig, args.len())?;
        let outs = (entry.func)(args).map_err(|msg| OpError::failed(name, msg))?;
        if outs.len() != entry.sig.out_arity {
            return Err(OpError::OutputArity { name: name.to_string(), expected: entry.sig.out_arity, got: outs.len() });
        }
        Ok(outs)
    }

    /// Plain opcodes only, sorted by name.
    pub fn manifest(&self) -> Vec<OpcodeSig> {
        self.ops.values().map(|e| e.sig.clone()).collect()
    }
}

fn check_arity(sig: &OpcodeSig, got: usize) -> Result<(), OpError> {
    if sig.in_arity != got {
        return Err(OpError::Arity { name: sig.name.clone(), expected: sig.in_arity, got });
    }
    Ok(())
}

/// Checks that `manifest` offers every plain opcode `required` names, with
/// the same arities as `local`. Returns the names that are missing or differ.
pub fn manifest_mismatches(local: &OpcodeRegistry, manifest: &[OpcodeSig], required: &[String]) -> Vec<String> {
    let mut bad = Vec::new();
    for name in required {
        for part in OpcodeRegistry::components(name) {
            let offered = manifest.iter().find(|s| s.name == part);
            let expected = local.signature(part);
            let ok = match (offered, &expected) {
                (Some(o), Some(e)) => o == e,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if !ok && !bad.iter().any(|b| b == part) {
                bad.push(part.to_string());
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{as_int, int, unpack};

    fn registry() -> OpcodeRegistry {
        let mut r = OpcodeRegistry::new();
        r.register_unary("inc", |p| Ok(int(as_int(p).ok_or("not int")? + 1))).unwrap();
        r.register_unary("dbl", |p| Ok(int(as_int(p).ok_or("not int")? * 2))).unwrap();
        r.register("split", 1, 2, |a| {
            let x = as_int(&a[0]).ok_or("not int")?;
            Ok(vec![int(x), int(x + 1)])
        })
        .unwrap();
        r.register("boom", 1, 1, |_| Err("exploded".to_string())).unwrap();
        r
    }

    #[test]
    fn plain_call() {
        assert_eq!(registry().call("inc", &[int(1)]).unwrap(), vec![int(2)]);
    }

    #[test]
    fn chain_applies_left_to_right() {
        let r = registry();
        assert_eq!(r.call("inc>dbl", &[int(1)]).unwrap(), vec![int(4)]);
        assert_eq!(r.call("dbl>inc", &[int(1)]).unwrap(), vec![int(3)]);
        assert!(r.signature("inc>split").is_none());
    }

    #[test]
    fn pack_frames_outputs() {
        let r = registry();
        let out = r.call("pack:split", &[int(5)]).unwrap();
        assert_eq!(unpack(&out[0]).unwrap(), vec![int(5), int(6)]);
        assert_eq!(r.signature("pack:split").unwrap().out_arity, 1);
    }

    #[test]
    fn errors() {
        let r = registry();
        assert_eq!(r.call("nope", &[int(1)]), Err(OpError::Unknown("nope".into())));
        assert!(matches!(r.call("inc", &[]), Err(OpError::Arity { .. })));
        assert!(matches!(r.call("boom", &[int(1)]), Err(OpError::Failed { .. })));
        let mut r = r;
        assert!(r.register("inc", 1, 1, |a| Ok(a.to_vec())).is_err());
        assert!(r.register("a>b", 1, 1, |a| Ok(a.to_vec())).is_err());
        assert!(r.register("z", 0, 1, |a| Ok(a.to_vec())).is_err());
    }

    #[test]
    fn manifest_check() {
        let r = registry();
        let m = r.manifest();
        assert!(manifest_mismatches(&r, &m, &["inc>dbl".into(), "pack:split".into()]).is_empty());
        let partial: Vec<OpcodeSig> = m.into_iter().filter(|s| s.name != "dbl").collect();
        assert_eq!(manifest_mismatches(&r, &partial, &["inc>dbl".into()]), vec!["dbl".to_string()]);
    }
}
