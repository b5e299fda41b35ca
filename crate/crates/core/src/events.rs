//! Append-only event log, rendered as JSON lines `{ts, kind, detail}`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Milliseconds on the process clock.
    pub ts: f64,
    pub kind: String,
    pub detail: serde_json::Value,
}

#[derive(Default)]
struct Inner {
    events: Vec<Event>,
    file: Option<BufWriter<File>>,
}

/// Shared, cloneable handle to one log.
#[derive(Clone, Default)]
pub struct EventLog {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EventLog({} events)", self.inner.lock().events.len())
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also mirrors every event to `path`, one JSON object per line.
    pub fn to_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let log = Self::new();
        log.inner.lock().file = Some(BufWriter::new(File::create(path)?));
        Ok(log)
    }

    pub fn record(&self, kind: &str, detail: serde_json::Value) -> Event {
        let mut inner = self.inner.lock();
        let event = Event { ts: clock::now_ms(), kind: kind.to_string(), detail };
        if let Some(f) = inner.file.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *f, &event).map_err(io::Error::from).and_then(|_| f.write_all(b"\n")) {
                log::warn!("event log write failed: {e}");
            }
        }
        inner.events.push(event.clone());
        event
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().events.clone()
    }

    pub fn of_kind(&self, kind: &str) -> Vec<Event> {
        self.inner.lock().events.iter().filter(|e| e.kind == kind).cloned().collect()
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.inner.lock().file.as_mut() {
            Some(f) => f.flush(),
            None => Ok(()),
        }
    }

    pub fn to_json_lines(&self) -> String {
        self.inner
            .lock()
            .events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_in_order() {
        let log = EventLog::new();
        log.record("a", serde_json::json!({"x": 1}));
        log.record("b", serde_json::Value::Null);
        let ev = log.events();
        assert_eq!(ev.iter().map(|e| e.kind.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(ev[0].ts <= ev[1].ts);
        let lines: Vec<Event> = log.to_json_lines().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, ev);
    }
}
