//! Event trace (JSON lines) and ground-truth labels.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{AlertPattern, DecisionSource, GateState};
use crate::domain::{AccessPolicy, DeviceId, Timestamp, Uid};
use crate::sync::SendOutcome;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionOutcome {
    Granted,
    Denied,
    RejectedInput,
    GateBusy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum QueryReply {
    Policy { policy: AccessPolicy },
    NotFound,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    SimStart {
        run_id: String,
        scenario: String,
        seed: u64,
        start: Timestamp,
        duration_s: u64,
    },
    SimEnd {
        offered: u64,
        delivered: u64,
        queued: u64,
        dead_lettered: u64,
        lost: u64,
    },
    /// `uid` is the raw string as read, possibly malformed or misread.
    CardRead {
        request: u64,
        device: DeviceId,
        uid: String,
    },
    CloudQuery {
        request: u64,
        device: DeviceId,
        uid: Uid,
        #[serde(flatten)]
        reply: QueryReply,
        elapsed_ms: u64,
    },
    Decision {
        request: u64,
        device: DeviceId,
        outcome: DecisionOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<DecisionSource>,
        latency_ms: u64,
    },
    Gate {
        device: DeviceId,
        state: GateState,
    },
    Alert {
        device: DeviceId,
        pattern: AlertPattern,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uid: Option<Uid>,
    },
    Sample {
        device: DeviceId,
        intensity: f64,
        ambient: f64,
        flow_lpm: f64,
    },
    FlameDetected {
        device: DeviceId,
        intensity: f64,
        threshold: f64,
    },
    FlowAnomaly {
        device: DeviceId,
        flow_lpm: f64,
        mean: f64,
        stddev: f64,
    },
    PersonnelScan {
        device: DeviceId,
        uid: Uid,
    },
    /// `record` is the codec envelope of the queued record.
    Enqueue {
        device: DeviceId,
        key: String,
        depth: u64,
        record: serde_json::Value,
    },
    QueueFull {
        device: DeviceId,
        key: String,
    },
    DroppedOldest {
        device: DeviceId,
        key: String,
    },
    Send {
        device: DeviceId,
        key: String,
        attempt: u32,
        result: SendOutcome,
        elapsed_ms: u64,
    },
    Delivered {
        device: DeviceId,
        key: String,
        row_index: u64,
        attempts: u32,
        latency_ms: u64,
    },
    DeadLetter {
        device: DeviceId,
        key: String,
        attempts: u32,
    },
    QueueDepth {
        depth: u64,
    },
}

/// One trace line: simulated time in unix milliseconds, a tiebreak
/// sequence number, then the event fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t_ms: i64,
    pub seq: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceLine {
    pub fn at(&self) -> Timestamp {
        Timestamp::from_millis(self.t_ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    pub lines: Vec<TraceLine>,
}

impl EventTrace {
    pub fn push(&mut self, at: Timestamp, event: TraceEvent) {
        let seq = self.lines.len() as u64;
        self.lines.push(TraceLine {
            t_ms: at.as_millis(),
            seq,
            event,
        });
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceLine> {
        self.lines.iter()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for line in &self.lines {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, TraceError> {
        let mut lines = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            lines.push(parsed);
        }
        Ok(Self { lines })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestLabel {
    /// Provisioned card presented inside its window on an allowed day.
    Authorized,
    Unauthorized,
    /// The read could not be a valid UID.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRequest {
    pub request: u64,
    pub device: DeviceId,
    pub label: RequestLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Flame,
    Flow,
}

/// A labeled positive episode. Detections in `[start_ms, match_until_ms]`
/// are attributed to it; time outside every episode is labeled negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEpisode {
    pub device: DeviceId,
    pub detector: Detector,
    pub start_ms: i64,
    pub end_ms: i64,
    pub match_until_ms: i64,
}

pub const TRUTH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub run_id: String,
    pub requests: Vec<LabeledRequest>,
    pub episodes: Vec<LabeledEpisode>,
}

impl GroundTruth {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            schema_version: TRUTH_SCHEMA_VERSION,
            run_id: run_id.into(),
            requests: Vec::new(),
            episodes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("truth serializes");
        v.push(b'\n');
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip_exactly() {
        let dev = DeviceId::parse("SM_001").unwrap();
        let mut trace = EventTrace::default();
        let t = Timestamp::from_millis(1_705_329_045_123);
        trace.push(
            t,
            TraceEvent::Sample {
                device: dev.clone(),
                intensity: 312.345_678_901_234_5,
                ambient: 0.1 + 0.2,
                flow_lpm: 29.65,
            },
        );
        trace.push(
            t,
            TraceEvent::Send {
                device: dev.clone(),
                key: "SM_001:3".into(),
                attempt: 2,
                result: SendOutcome::Ack {
                    row_index: 9,
                    key: "SM_001:3".into(),
                },
                elapsed_ms: 1200,
            },
        );
        trace.push(
            t,
            TraceEvent::CloudQuery {
                request: 1,
                device: dev,
                uid: Uid::parse("A1B2C3D4").unwrap(),
                reply: QueryReply::NotFound,
                elapsed_ms: 900,
            },
        );
        let bytes = trace.to_jsonl();
        let back = EventTrace::read_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.to_jsonl(), bytes);
        let first = String::from_utf8(bytes).unwrap();
        assert!(first.starts_with(r#"{"t_ms":1705329045123,"seq":0,"kind":"sample","device":"SM_001""#));
    }

    #[test]
    fn bad_line_is_located() {
        let src = "{\"t_ms\":0,\"seq\":0,\"kind\":\"queue_depth\",\"depth\":1}\nnot json\n";
        match EventTrace::read_jsonl(src.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
