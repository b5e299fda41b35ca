//! Run reports and per-seq output files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use skelflow::{CborCodec, Codec, Payload, Value};

/// One output, keyed by stream position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl OutputEntry {
    pub fn new(seq: u64, result: &Result<Payload, String>) -> Self {
        match result {
            Ok(p) => OutputEntry { seq, value: Some(payload_to_json(p)), error: None },
            Err(e) => OutputEntry { seq, value: None, error: Some(e.clone()) },
        }
    }
}

/// Decodes a payload for display; undecodable payloads appear as
/// `{"bytes": hex}`.
pub fn payload_to_json(p: &Payload) -> serde_json::Value {
    match CborCodec.decode(p) {
        Ok(v) => v.to_json(),
        Err(_) => Value::Bytes(p.as_bytes().to_vec()).to_json(),
    }
}

pub fn json_to_payload(j: &serde_json::Value) -> Payload {
    CborCodec.encode(&Value::from_json(j))
}

pub fn outputs_from(results: &BTreeMap<u64, Result<Payload, String>>) -> Vec<OutputEntry> {
    results.iter().map(|(seq, r)| OutputEntry::new(*seq, r)).collect()
}

/// State of the pool, sampled once a second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_s: f64,
    pub workers: usize,
    /// Emissions per second over the manager's window.
    pub throughput: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub program: String,
    pub tasks: usize,
    pub emitted: usize,
    pub failed: usize,
    /// From the first submission to the last emission.
    pub completion_ms: f64,
    /// Sum of worker execution time.
    pub t_seq_ms: f64,
    pub t_par_ms: f64,
    /// Workers recruited at start.
    pub workers: usize,
    /// `t_seq / (workers · t_par)`; zero for empty runs.
    pub efficiency: f64,
    pub latencies_ms: Vec<f64>,
    /// Emissions per 1 s bucket, starting at the first submission.
    pub throughput_series: Vec<u64>,
    pub samples: Vec<Sample>,
    pub reconfigurations: u64,
    pub escalations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<String>,
    pub outputs: Vec<OutputEntry>,
}

impl RunReport {
    pub fn all_emitted(&self) -> bool {
        self.emitted == self.tasks
    }

    /// 0 on success, 2 if the contract escalated, 1 if tasks failed or went
    /// missing.
    pub fn exit_code(&self) -> i32 {
        if self.escalations > 0 {
            2
        } else if self.failed > 0 || !self.all_emitted() {
            1
        } else {
            0
        }
    }
}

/// Counts of `completed_ms` values per 1 s bucket from `start_ms`.
pub fn bucket_series(start_ms: f64, completed_ms: impl IntoIterator<Item = f64>) -> Vec<u64> {
    let mut series: Vec<u64> = Vec::new();
    for t in completed_ms {
        let b = ((t - start_ms).max(0.0) / 1e3) as usize;
        if series.len() <= b {
            series.resize(b + 1, 0);
        }
        series[b] += 1;
    }
    series
}
