//! Metrics over a labeled trace, and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::trace::{
    DecisionOutcome, Detector, EventTrace, GroundTruth, LabeledEpisode, RequestLabel, TraceEvent,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("trace and ground truth do not belong to the same run: {0}")]
    MismatchedTruth(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub requests: u64,
    pub authorized_attempts: u64,
    pub unauthorized_attempts: u64,
    pub valid_attempts: u64,
    pub granted: u64,
    pub denied: u64,
    pub rejected_input: u64,
    pub gate_busy: u64,
    pub false_grants: u64,
    pub false_denials: u64,
    pub offered: u64,
    pub delivered: u64,
    pub queued: u64,
    pub dead_lettered: u64,
    pub lost: u64,
    pub send_attempts: u64,
    pub flame_detections: u64,
    pub flow_detections: u64,
    pub flame_episodes: u64,
    pub flow_episodes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthSample {
    pub t_ms: i64,
    pub depth: u64,
}

/// Fractions whose denominator is zero are `None` and omitted from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_mean_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_p95_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logging_success: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lost_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queued_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead_letter_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_mean_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_p95_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flame_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flame_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_recall: Option<f64>,
    pub counts: Counts,
    pub queue_depth_series: Vec<DepthSample>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: None,
            auth_accuracy: None,
            far: None,
            frr: None,
            response_mean_ms: None,
            response_p95_ms: None,
            logging_success: None,
            lost_fraction: None,
            queued_fraction: None,
            dead_letter_fraction: None,
            latency_mean_s: None,
            latency_p95_s: None,
            flame_precision: None,
            flame_recall: None,
            flow_precision: None,
            flow_recall: None,
            counts: Counts::default(),
            queue_depth_series: Vec::new(),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(xs: &[u64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64)
}

/// Nearest-rank percentile: the smallest sample with at least `p` of the
/// data at or below it.
pub fn percentile_nearest_rank(xs: &[u64], p: f64) -> Option<u64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_unstable();
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

pub fn compute_metrics(trace: &EventTrace, truth: &GroundTruth) -> Result<MetricsReport, MetricsError> {
    let mut report = MetricsReport::empty();
    report.run_id = Some(truth.run_id.clone());
    if let Some(TraceEvent::SimStart { run_id, .. }) = trace.lines.first().map(|l| &l.event) {
        if *run_id != truth.run_id {
            return Err(MetricsError::MismatchedTruth(format!(
                "trace run {run_id}, truth run {}",
                truth.run_id
            )));
        }
    }

    let mut labels = BTreeMap::new();
    for r in &truth.requests {
        if labels.insert(r.request, r.label).is_some() {
            return Err(MetricsError::MismatchedTruth(format!(
                "request {} labeled twice",
                r.request
            )));
        }
    }

    let c = &mut report.counts;
    let mut finals: BTreeMap<u64, (DecisionOutcome, u64)> = BTreeMap::new();
    let mut delivery_ms = Vec::new();
    let mut detections: Vec<(i64, &crate::domain::DeviceId, Detector)> = Vec::new();
    for line in trace.iter() {
        match &line.event {
            TraceEvent::Decision {
                request,
                outcome,
                latency_ms,
                ..
            } => {
                if *outcome == DecisionOutcome::GateBusy {
                    c.gate_busy += 1;
                } else if finals.insert(*request, (*outcome, *latency_ms)).is_some() {
                    return Err(MetricsError::MismatchedTruth(format!(
                        "request {request} decided twice"
                    )));
                }
            }
            TraceEvent::Enqueue { .. } => c.offered += 1,
            TraceEvent::QueueFull { .. } => {
                c.offered += 1;
                c.lost += 1;
            }
            TraceEvent::DroppedOldest { .. } => c.lost += 1,
            TraceEvent::Send { .. } => c.send_attempts += 1,
            TraceEvent::Delivered { latency_ms, .. } => {
                c.delivered += 1;
                delivery_ms.push(*latency_ms);
            }
            TraceEvent::DeadLetter { .. } => c.dead_lettered += 1,
            TraceEvent::FlameDetected { device, .. } => {
                c.flame_detections += 1;
                detections.push((line.t_ms, device, Detector::Flame));
            }
            TraceEvent::FlowAnomaly { device, .. } => {
                c.flow_detections += 1;
                detections.push((line.t_ms, device, Detector::Flow));
            }
            TraceEvent::QueueDepth { depth } => report.queue_depth_series.push(DepthSample {
                t_ms: line.t_ms,
                depth: *depth,
            }),
            _ => {}
        }
    }

    let decided: BTreeSet<u64> = finals.keys().copied().collect();
    let labeled: BTreeSet<u64> = labels.keys().copied().collect();
    if decided != labeled {
        let missing = decided.symmetric_difference(&labeled).next().expect("sets differ");
        return Err(MetricsError::MismatchedTruth(format!(
            "request {missing} is decided in one and not labeled in the other"
        )));
    }

    let mut response_ms = Vec::new();
    for (request, (outcome, latency_ms)) in &finals {
        c.requests += 1;
        match outcome {
            DecisionOutcome::Granted => {
                c.granted += 1;
                response_ms.push(*latency_ms);
            }
            DecisionOutcome::Denied => {
                c.denied += 1;
                response_ms.push(*latency_ms);
            }
            DecisionOutcome::RejectedInput => c.rejected_input += 1,
            DecisionOutcome::GateBusy => unreachable!("busy outcomes are not final"),
        }
        let granted = *outcome == DecisionOutcome::Granted;
        match labels[request] {
            RequestLabel::Authorized => {
                c.authorized_attempts += 1;
                if !granted {
                    c.false_denials += 1;
                }
            }
            RequestLabel::Unauthorized => {
                c.unauthorized_attempts += 1;
                if granted {
                    c.false_grants += 1;
                }
            }
            RequestLabel::Malformed => {}
        }
    }
    c.valid_attempts = c.authorized_attempts + c.unauthorized_attempts;
    c.queued = c.offered.saturating_sub(c.delivered + c.dead_lettered + c.lost);

    let (flame_p, flame_r, flame_n) = detection_scores(&detections, &truth.episodes, Detector::Flame);
    let (flow_p, flow_r, flow_n) = detection_scores(&detections, &truth.episodes, Detector::Flow);
    c.flame_episodes = flame_n;
    c.flow_episodes = flow_n;

    let c = report.counts;
    report.auth_accuracy = ratio(c.false_grants + c.false_denials, c.valid_attempts).map(|e| 1.0 - e);
    report.far = ratio(c.false_grants, c.unauthorized_attempts);
    report.frr = ratio(c.false_denials, c.authorized_attempts);
    report.response_mean_ms = mean(&response_ms);
    report.response_p95_ms = percentile_nearest_rank(&response_ms, 0.95).map(|x| x as f64);
    report.logging_success = ratio(c.delivered, c.offered);
    report.lost_fraction = ratio(c.lost, c.offered);
    report.queued_fraction = ratio(c.queued, c.offered);
    report.dead_letter_fraction = ratio(c.dead_lettered, c.offered);
    report.latency_mean_s = mean(&delivery_ms).map(|ms| ms / 1000.0);
    report.latency_p95_s = percentile_nearest_rank(&delivery_ms, 0.95).map(|ms| ms as f64 / 1000.0);
    report.flame_precision = flame_p;
    report.flame_recall = flame_r;
    report.flow_precision = flow_p;
    report.flow_recall = flow_r;
    Ok(report)
}

/// Precision over detections and recall over episodes for one detector.
fn detection_scores(
    detections: &[(i64, &crate::domain::DeviceId, Detector)],
    episodes: &[LabeledEpisode],
    detector: Detector,
) -> (Option<f64>, Option<f64>, u64) {
    let eps: Vec<&LabeledEpisode> = episodes.iter().filter(|e| e.detector == detector).collect();
    let mut hit = vec![false; eps.len()];
    let mut total = 0u64;
    let mut matched = 0u64;
    for &(t, device, d) in detections {
        if d != detector {
            continue;
        }
        total += 1;
        let mut any = false;
        for (i, e) in eps.iter().enumerate() {
            if e.device == *device && e.start_ms <= t && t <= e.match_until_ms {
                hit[i] = true;
                any = true;
            }
        }
        if any {
            matched += 1;
        }
    }
    let recalled = hit.iter().filter(|&&h| h).count() as u64;
    (
        ratio(matched, total),
        ratio(recalled, eps.len() as u64),
        eps.len() as u64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

/// Scalar fields in the order they appear as CSV columns.
fn scalar_fields(r: &MetricsReport) -> Vec<(&'static str, Option<String>)> {
    let f = |x: Option<f64>| x.map(|v| v.to_string());
    let n = |x: u64| Some(x.to_string());
    let c = &r.counts;
    vec![
        ("schema_version", n(r.schema_version as u64)),
        ("run_id", r.run_id.clone()),
        ("auth_accuracy", f(r.auth_accuracy)),
        ("far", f(r.far)),
        ("frr", f(r.frr)),
        ("response_mean_ms", f(r.response_mean_ms)),
        ("response_p95_ms", f(r.response_p95_ms)),
        ("logging_success", f(r.logging_success)),
        ("lost_fraction", f(r.lost_fraction)),
        ("queued_fraction", f(r.queued_fraction)),
        ("dead_letter_fraction", f(r.dead_letter_fraction)),
        ("latency_mean_s", f(r.latency_mean_s)),
        ("latency_p95_s", f(r.latency_p95_s)),
        ("flame_precision", f(r.flame_precision)),
        ("flame_recall", f(r.flame_recall)),
        ("flow_precision", f(r.flow_precision)),
        ("flow_recall", f(r.flow_recall)),
        ("requests", n(c.requests)),
        ("authorized_attempts", n(c.authorized_attempts)),
        ("unauthorized_attempts", n(c.unauthorized_attempts)),
        ("valid_attempts", n(c.valid_attempts)),
        ("granted", n(c.granted)),
        ("denied", n(c.denied)),
        ("rejected_input", n(c.rejected_input)),
        ("gate_busy", n(c.gate_busy)),
        ("false_grants", n(c.false_grants)),
        ("false_denials", n(c.false_denials)),
        ("offered", n(c.offered)),
        ("delivered", n(c.delivered)),
        ("queued", n(c.queued)),
        ("dead_lettered", n(c.dead_lettered)),
        ("lost", n(c.lost)),
        ("send_attempts", n(c.send_attempts)),
        ("flame_detections", n(c.flame_detections)),
        ("flow_detections", n(c.flow_detections)),
        ("flame_episodes", n(c.flame_episodes)),
        ("flow_episodes", n(c.flow_episodes)),
        ("queue_depth_samples", n(r.queue_depth_series.len() as u64)),
    ]
}

pub fn render_report(r: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(r).expect("report serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::Csv => {
            let fields = scalar_fields(r);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(fields.iter().map(|(k, _)| *k)).expect("in-memory write");
            w.write_record(fields.iter().map(|(_, v)| v.as_deref().unwrap_or("n/a")))
                .expect("in-memory write");
            w.into_inner().expect("in-memory flush")
        }
        ReportFormat::Text => {
            let fields = scalar_fields(r);
            let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            let mut out = String::new();
            for (k, v) in fields {
                let v = match v {
                    Some(v) => v,
                    None => "n/a".into(),
                };
                let _ = writeln!(out, "{k:<width$}  {v}");
            }
            out.into_bytes()
        }
    }
}
