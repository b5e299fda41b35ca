//! Length-prefixed binary frames spoken between the client and worker
//! daemons.
//!
//! Every frame is a `u32` body length followed by the body: a one-byte
//! frame type and its fields. Integers are fixed-width little-endian;
//! strings and payloads carry `u32` length prefixes.
//!
//! ```text
//! HELLO  {u32 version}             -> READY {u32 n, n × (str name, u32 in, u32 out)}
//! EXEC   {u64 id, str op, payloads} -> RESULT {u64 id, payloads} | FAIL {u64 id, str msg}
//! PING                              -> PONG
//! ERROR  {str msg}                  (then the connection closes)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::codec::Payload;
use crate::opcode::OpcodeSig;

pub const PROTO_VERSION: u32 = 1;
/// Frames larger than this are rejected.
pub const MAX_FRAME: usize = 256 << 20;

const HELLO: u8 = 1;
const READY: u8 = 2;
const EXEC: u8 = 3;
const RESULT: u8 = 4;
const FAIL: u8 = 5;
const PING: u8 = 6;
const PONG: u8 = 7;
const ERROR: u8 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Hello { version: u32 },
    Ready { manifest: Vec<OpcodeSig> },
    Exec { id: u64, opcode: String, args: Vec<Payload> },
    Result { id: u64, outputs: Vec<Payload> },
    Fail { id: u64, message: String },
    Ping,
    Pong,
    Error { message: String },
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

impl WireError {
    /// Timeouts and connection loss, as opposed to protocol violations.
    pub fn is_timeout(&self) -> bool {
        matches!(self, WireError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn payloads(&mut self, ps: &[Payload]) {
        self.u32(ps.len() as u32);
        ps.iter().for_each(|p| self.bytes(p.as_bytes()));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| WireError::Malformed("truncated frame".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| WireError::Malformed("invalid utf-8".into()))
    }
    fn payloads(&mut self) -> Result<Vec<Payload>, WireError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            out.push(Payload::new(self.bytes()?.to_vec()));
        }
        Ok(out)
    }
}

impl Frame {
    /// Frame body, without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc(Vec::with_capacity(32));
        match self {
            Frame::Hello { version } => {
                e.0.push(HELLO);
                e.u32(*version);
            }
            Frame::Ready { manifest } => {
                e.0.push(READY);
                e.u32(manifest.len() as u32);
                for sig in manifest {
                    e.bytes(sig.name.as_bytes());
                    e.u32(sig.in_arity as u32);
                    e.u32(sig.out_arity as u32);
                }
            }
            Frame::Exec { id, opcode, args } => {
                e.0.push(EXEC);
                e.u64(*id);
                e.bytes(opcode.as_bytes());
                e.payloads(args);
            }
            Frame::Result { id, outputs } => {
                e.0.push(RESULT);
                e.u64(*id);
                e.payloads(outputs);
            }
            Frame::Fail { id, message } => {
                e.0.push(FAIL);
                e.u64(*id);
                e.bytes(message.as_bytes());
            }
            Frame::Ping => e.0.push(PING),
            Frame::Pong => e.0.push(PONG),
            Frame::Error { message } => {
                e.0.push(ERROR);
                e.bytes(message.as_bytes());
            }
        }
        e.0
    }

    pub fn decode(body: &[u8]) -> Result<Frame, WireError> {
        let (&kind, rest) = body.split_first().ok_or_else(|| WireError::Malformed("empty frame".into()))?;
        let mut d = Dec { buf: rest, at: 0 };
        let frame = match kind {
            HELLO => Frame::Hello { version: d.u32()? },
            READY => {
                let n = d.u32()? as usize;
                let mut manifest = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let name = d.string()?;
                    let in_arity = d.u32()? as usize;
                    let out_arity = d.u32()? as usize;
                    manifest.push(OpcodeSig { name, in_arity, out_arity });
                }
                Frame::Ready { manifest }
            }
            EXEC => Frame::Exec { id: d.u64()?, opcode: d.string()?, args: d.payloads()? },
            RESULT => Frame::Result { id: d.u64()?, outputs: d.payloads()? },
            FAIL => Frame::Fail { id: d.u64()?, message: d.string()? },
            PING => Frame::Ping,
            PONG => Frame::Pong,
            ERROR => Frame::Error { message: d.string()? },
            other => return Err(WireError::Malformed(format!("unknown frame type {other}"))),
        };
        if d.at != rest.len() {
            return Err(WireError::Malformed("trailing bytes".into()));
        }
        Ok(frame)
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), WireError> {
    let body = frame.encode();
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::decode(&body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn payloads() -> impl Strategy<Value = Vec<Payload>> {
        proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40).prop_map(Payload::new), 0..5)
    }

    fn frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            any::<u32>().prop_map(|version| Frame::Hello { version }),
            proptest::collection::vec(("[a-z]{1,8}", 1usize..5, 1usize..5), 0..4).prop_map(|m| Frame::Ready {
                manifest: m.into_iter().map(|(name, in_arity, out_arity)| OpcodeSig { name, in_arity, out_arity }).collect()
            }),
            (any::<u64>(), "[a-z>:]{1,12}", payloads()).prop_map(|(id, opcode, args)| Frame::Exec { id, opcode, args }),
            (any::<u64>(), payloads()).prop_map(|(id, outputs)| Frame::Result { id, outputs }),
            (any::<u64>(), ".{0,20}").prop_map(|(id, message)| Frame::Fail { id, message }),
            Just(Frame::Ping),
            Just(Frame::Pong),
            ".{0,20}".prop_map(|message| Frame::Error { message }),
        ]
    }

    proptest! {
        #[test]
        fn frames_roundtrip(f in frame()) {
            let mut buf = Vec::new();
            write_frame(&mut buf, &f).unwrap();
            prop_assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), f);
        }
    }

    #[test]
    fn fixed_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Hello { version: 1 }).unwrap();
        assert_eq!(buf, [5, 0, 0, 0, HELLO, 1, 0, 0, 0]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Exec { id: 2, opcode: "f".into(), args: vec![Payload::new(vec![9])] }).unwrap();
        assert_eq!(buf, [23, 0, 0, 0, EXEC, 2, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, b'f', 1, 0, 0, 0, 1, 0, 0, 0, 9]);
    }

    #[test]
    fn malformed_frames() {
        assert!(matches!(Frame::decode(&[]), Err(WireError::Malformed(_))));
        assert!(matches!(Frame::decode(&[99]), Err(WireError::Malformed(_))));
        assert!(matches!(Frame::decode(&[HELLO, 1, 0]), Err(WireError::Malformed(_))));
        assert!(matches!(Frame::decode(&[PING, 0]), Err(WireError::Malformed(_))));
        let huge = (MAX_FRAME as u32 + 1).to_le_bytes();
        assert!(matches!(read_frame(&mut huge.as_slice()), Err(WireError::TooLarge(_))));
    }
}
