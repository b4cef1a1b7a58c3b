//! Re-executes a trace's inputs through fresh engines and checks that the
//! recorded decisions and detections come out again.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use thiserror::Error;

use crate::auth::{
    AccessController, AuthError, CloudAuthority, CloudReply, CloudResponse, CollectedEvents,
    DecisionSource, Verdict,
};
use crate::domain::{DeviceId, Timestamp, Uid};
use crate::safety::{FlameSample, SafetyMonitor};

use super::scenario::Scenario;
use super::trace::{DecisionOutcome, Detector, EventTrace, QueryReply, TraceEvent};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("trace was produced by run {trace}, scenario is run {scenario}")]
    WrongScenario { trace: String, scenario: String },
    #[error("trace mentions unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("trace line {seq}: {message}")]
    Mismatch { seq: u64, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplaySummary {
    pub decisions: u64,
    pub detections: u64,
}

/// Answers exactly one query with the recorded reply.
struct Recorded {
    reply: Option<CloudResponse>,
    asked: bool,
}

impl CloudAuthority for Recorded {
    fn query_policy(&mut self, _uid: &Uid, _at: Timestamp, deadline: Duration) -> CloudResponse {
        self.asked = true;
        self.reply.take().unwrap_or(CloudResponse {
            reply: CloudReply::Timeout,
            elapsed: deadline,
        })
    }
}

struct PendingRead {
    uid: String,
    query: Option<CloudResponse>,
}

pub fn verify(scenario: &Scenario, trace: &EventTrace) -> Result<ReplaySummary, ReplayError> {
    let expected_run = super::run_id(scenario);
    if let Some(TraceEvent::SimStart { run_id, .. }) = trace.lines.first().map(|l| &l.event) {
        if *run_id != expected_run {
            return Err(ReplayError::WrongScenario {
                trace: run_id.clone(),
                scenario: expected_run,
            });
        }
    }

    let mut gates: BTreeMap<DeviceId, AccessController> = BTreeMap::new();
    for d in &scenario.access_devices {
        let id = DeviceId::parse(&d.id).expect("validated scenario");
        let ctl = AccessController::new(id.clone(), d.auth_config()).expect("validated scenario");
        gates.insert(id, ctl);
    }
    let mut monitors: BTreeMap<DeviceId, SafetyMonitor> = BTreeMap::new();
    for d in &scenario.safety_devices {
        let id = DeviceId::parse(&d.id).expect("validated scenario");
        let mon = SafetyMonitor::new(id.clone(), d.monitor_config()).expect("validated scenario");
        monitors.insert(id, mon);
    }

    let mut pending: HashMap<u64, PendingRead> = HashMap::new();
    let mut recorded_detections = Vec::new();
    let mut replayed_detections = Vec::new();
    let mut summary = ReplaySummary::default();
    let mut sink = CollectedEvents::default();

    for line in &trace.lines {
        let at = line.at();
        let mismatch = |message: String| ReplayError::Mismatch {
            seq: line.seq,
            message,
        };
        match &line.event {
            TraceEvent::CardRead { request, uid, .. } => {
                pending.insert(
                    *request,
                    PendingRead {
                        uid: uid.clone(),
                        query: None,
                    },
                );
            }
            TraceEvent::CloudQuery {
                request,
                reply,
                elapsed_ms,
                ..
            } => {
                let read = pending
                    .get_mut(request)
                    .ok_or_else(|| mismatch(format!("query for unread request {request}")))?;
                read.query = Some(CloudResponse {
                    reply: match reply {
                        QueryReply::Policy { policy } => CloudReply::Policy(policy.clone()),
                        QueryReply::NotFound => CloudReply::NotFound,
                        QueryReply::Timeout => CloudReply::Timeout,
                    },
                    elapsed: Duration::from_millis(*elapsed_ms),
                });
            }
            TraceEvent::Decision {
                request,
                device,
                outcome,
                source,
                latency_ms,
            } => {
                let read = pending
                    .remove(request)
                    .ok_or_else(|| mismatch(format!("decision for unread request {request}")))?;
                let ctl = gates
                    .get_mut(device)
                    .ok_or_else(|| ReplayError::UnknownDevice(device.clone()))?;
                let had_query = read.query.is_some();
                let mut cloud = Recorded {
                    reply: read.query,
                    asked: false,
                };
                let got: (DecisionOutcome, Option<DecisionSource>, u64) =
                    match ctl.process_request(&read.uid, at, &mut cloud, &mut sink) {
                        Ok(r) => (
                            match r.outcome {
                                Verdict::Granted => DecisionOutcome::Granted,
                                Verdict::Denied => DecisionOutcome::Denied,
                            },
                            Some(r.source),
                            r.decision_latency_ms,
                        ),
                        Err(AuthError::MalformedUid(_)) => (DecisionOutcome::RejectedInput, None, 0),
                        Err(AuthError::GateBusy { .. }) => (DecisionOutcome::GateBusy, None, 0),
                        Err(e) => return Err(mismatch(e.to_string())),
                    };
                if cloud.asked != had_query {
                    return Err(mismatch(format!(
                        "request {request}: engine queried the cloud: {}, trace recorded a query: {had_query}",
                        cloud.asked
                    )));
                }
                let want = (*outcome, *source, *latency_ms);
                if got != want {
                    return Err(mismatch(format!(
                        "request {request}: replayed {got:?}, recorded {want:?}"
                    )));
                }
                summary.decisions += 1;
            }
            TraceEvent::Sample {
                device,
                intensity,
                ambient,
                flow_lpm,
            } => {
                let mon = monitors
                    .get_mut(device)
                    .ok_or_else(|| ReplayError::UnknownDevice(device.clone()))?;
                let sample = FlameSample {
                    intensity: *intensity,
                    ambient: *ambient,
                    at,
                };
                let out = mon
                    .sample(sample, *flow_lpm, &mut sink)
                    .map_err(|e| mismatch(e.to_string()))?;
                if out.flame_event {
                    replayed_detections.push((line.t_ms, device.clone(), Detector::Flame));
                }
                if out.flow_event {
                    replayed_detections.push((line.t_ms, device.clone(), Detector::Flow));
                }
            }
            TraceEvent::PersonnelScan { device, uid } => {
                if let Some(mon) = monitors.get_mut(device) {
                    mon.personnel_scan(uid.clone(), at, &mut sink);
                }
            }
            TraceEvent::FlameDetected { device, .. } => {
                recorded_detections.push((line.t_ms, device.clone(), Detector::Flame));
            }
            TraceEvent::FlowAnomaly { device, .. } => {
                recorded_detections.push((line.t_ms, device.clone(), Detector::Flow));
            }
            _ => {}
        }
        sink.records.clear();
        sink.alerts.clear();
    }

    if recorded_detections != replayed_detections {
        let first = recorded_detections
            .iter()
            .zip(&replayed_detections)
            .position(|(a, b)| a != b)
            .unwrap_or(recorded_detections.len().min(replayed_detections.len()));
        return Err(ReplayError::Mismatch {
            seq: 0,
            message: format!(
                "detections diverge at #{first}: recorded {} total, replayed {} total",
                recorded_detections.len(),
                replayed_detections.len()
            ),
        });
    }
    summary.detections = recorded_detections.len() as u64;
    Ok(summary)
}
