//! Opaque payloads and the pluggable value codec.
//!
//! The runtime moves [`Payload`]s around without looking inside them; only
//! opcodes and the CLI decode them. The default codec is CBOR, which is
//! self-describing and deterministic for the [`Value`] model used here.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An opaque byte string travelling through the data-flow graph.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Payload(Vec<u8>);

impl Payload {
    pub fn new(bytes: Vec<u8>) -> Self {
        Payload(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lower-case hex rendering used by the graph dump.
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if !s.len().is_multiple_of(2) {
            return None;
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
            .collect::<Option<Vec<u8>>>()
            .map(Payload)
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match CborCodec.decode(self) {
            Ok(v) => write!(f, "Payload({v:?})"),
            Err(_) => write!(f, "Payload(0x{})", self.to_hex()),
        }
    }
}

impl From<Vec<u8>> for Payload {
    fn from(bytes: Vec<u8>) -> Self {
        Payload(bytes)
    }
}

/// Self-describing value model carried by the default codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    /// Converts a JSON document into a value: integers stay integers,
    /// other numbers become floats.
    pub fn from_json(json: &serde_json::Value) -> Value {
        match json {
            serde_json::Value::Null => Value::Null,
            serde_json::Value::Bool(b) => Value::Bool(*b),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            serde_json::Value::String(s) => Value::Str(s.clone()),
            serde_json::Value::Array(items) => Value::List(items.iter().map(Value::from_json).collect()),
            serde_json::Value::Object(map) => match (map.len(), map.get("bytes")) {
                (1, Some(serde_json::Value::String(hex))) => Payload::from_hex(hex)
                    .map(|p| Value::Bytes(p.into_bytes()))
                    .unwrap_or_else(|| Value::Str(hex.clone())),
                _ => Value::Str(json.to_string()),
            },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Null => serde_json::Value::Null,
            Value::Bool(b) => (*b).into(),
            Value::Int(i) => (*i).into(),
            Value::Float(x) => serde_json::Number::from_f64(*x)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Str(s) => s.clone().into(),
            Value::Bytes(b) => serde_json::json!({ "bytes": Payload(b.clone()).to_hex() }),
            Value::List(items) => serde_json::Value::Array(items.iter().map(Value::to_json).collect()),
        }
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

#[derive(Debug, Error)]
#[error("cannot decode payload: {0}")]
pub struct CodecError(pub String);

/// Encodes values into payloads and back.
pub trait Codec: Send + Sync {
    fn encode(&self, value: &Value) -> Payload;
    fn decode(&self, payload: &Payload) -> Result<Value, CodecError>;
}

/// CBOR codec backed by `ciborium`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CborCodec;

impl Codec for CborCodec {
    fn encode(&self, value: &Value) -> Payload {
        let mut out = Vec::with_capacity(16);
        ciborium::into_writer(value, &mut out).expect("writing to a Vec cannot fail");
        Payload(out)
    }

    fn decode(&self, payload: &Payload) -> Result<Value, CodecError> {
        ciborium::from_reader(payload.as_bytes()).map_err(|e| CodecError(e.to_string()))
    }
}

/// Shorthand for encoding an integer with the default codec.
pub fn int(i: i64) -> Payload {
    CborCodec.encode(&Value::Int(i))
}

/// Shorthand for decoding an integer with the default codec.
pub fn as_int(p: &Payload) -> Option<i64> {
    CborCodec.decode(p).ok()?.as_int()
}

/// Packs several payloads into one: `u32` count, then `u32` length-prefixed
/// bodies, all little-endian. Codec independent.
pub fn pack(parts: &[Payload]) -> Payload {
    let mut out = Vec::with_capacity(4 + parts.iter().map(|p| p.len() + 4).sum::<usize>());
    out.extend_from_slice(&(parts.len() as u32).to_le_bytes());
    for p in parts {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        out.extend_from_slice(p.as_bytes());
    }
    Payload(out)
}

pub fn unpack(packed: &Payload) -> Option<Vec<Payload>> {
    let bytes = packed.as_bytes();
    let read_u32 = |at: usize| -> Option<usize> {
        Some(u32::from_le_bytes(bytes.get(at..at + 4)?.try_into().ok()?) as usize)
    };
    let count = read_u32(0)?;
    let mut at = 4;
    let mut parts = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(at)?;
        at += 4;
        parts.push(Payload(bytes.get(at..at + len)?.to_vec()));
        at += len;
    }
    (at == bytes.len()).then_some(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn value_strategy() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            (-1e12f64..1e12).prop_map(Value::Float),
            ".{0,12}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..16).prop_map(Value::Bytes),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| proptest::collection::vec(inner, 0..4).prop_map(Value::List))
    }

    proptest! {
        #[test]
        fn cbor_roundtrip(v in value_strategy()) {
            let p = CborCodec.encode(&v);
            prop_assert_eq!(CborCodec.decode(&p).unwrap(), v.clone());
            // canonical: same value, same bytes
            prop_assert_eq!(CborCodec.encode(&v), p);
        }

        #[test]
        fn pack_roundtrip(parts in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..20), 0..6)) {
            let parts: Vec<Payload> = parts.into_iter().map(Payload).collect();
            prop_assert_eq!(unpack(&pack(&parts)).unwrap(), parts);
        }
    }

    #[test]
    fn unpack_rejects_truncated() {
        let packed = pack(&[int(1), int(2)]);
        let cut = Payload(packed.as_bytes()[..packed.len() - 1].to_vec());
        assert!(unpack(&cut).is_none());
    }

    #[test]
    fn hex_roundtrip() {
        let p = Payload(vec![0, 1, 0xab, 0xff]);
        assert_eq!(p.to_hex(), "0001abff");
        assert_eq!(Payload::from_hex("0001abff"), Some(p));
        assert_eq!(Payload::from_hex("abc"), None);
    }

    #[test]
    fn json_conversion() {
        let j: serde_json::Value = serde_json::from_str(r#"[1, 2.5, "x", null, {"bytes": "0aff"}]"#).unwrap();
        let v = Value::from_json(&j);
        assert_eq!(
            v,
            Value::List(vec![
                Value::Int(1),
                Value::Float(2.5),
                Value::Str("x".into()),
                Value::Null,
                Value::Bytes(vec![0x0a, 0xff])
            ])
        );
        assert_eq!(v.to_json(), j);
    }
}
