use std::collections::{BTreeMap, HashSet};

use edgegate_core::codec::idempotency_key;
use edgegate_core::metrics::compute_metrics;
use edgegate_core::sim::{self, replay, EventTrace, Scenario, SimOutput, TraceEvent};

const LOSSY: &str = r#"
name = "lossy"
seed = 11
duration_s = 14400

[network]
drop_prob = 0.2
ack_drop_prob = 0.1
duplicate_prob = 0.1

[[faults.partitions]]
start_s = 3600
end_s = 5400

[[faults.sink_outages]]
start_s = 7200
end_s = 7800

[authz]
generated = 8

[[access_devices]]
id = "AC_001"
[access_devices.uplink]
capacity = 5
overflow = "drop_oldest"
[access_devices.workload]
rate_per_hour = 90

[[access_devices]]
id = "AC_002"
[access_devices.uplink]
capacity = 8
max_attempts = 3
[access_devices.workload]
rate_per_hour = 90
misread_accept_rate = 0.1

[[safety_devices]]
id = "SM_001"
status_interval_s = 30
[safety_devices.uplink]
max_attempts = 4
jitter = 0.5
[[safety_devices.flame_trace.episodes]]
start_s = 2000
duration_s = 20
"#;

fn lossy() -> Scenario {
    Scenario::from_toml_str(LOSSY).unwrap()
}

fn run(s: &Scenario) -> SimOutput {
    sim::run(s).unwrap()
}

#[test]
fn faults_conserve_records() {
    let out = run(&lossy());
    let c = out.report.counts;
    assert!(c.lost > 0 && c.dead_lettered > 0, "{c:?}");
    assert_eq!(c.delivered + c.dead_lettered + c.lost + c.queued, c.offered);

    let Some(TraceEvent::SimEnd {
        offered,
        delivered,
        queued,
        dead_lettered,
        lost,
    }) = out.trace.lines.last().map(|l| l.event.clone())
    else {
        panic!("trace does not end with sim_end");
    };
    assert_eq!(
        (offered, delivered, queued, dead_lettered, lost),
        (c.offered, c.delivered, c.queued, c.dead_lettered, c.lost)
    );
    let per_device: u64 = out.uplinks.iter().map(|(_, u)| u.offered).sum();
    assert_eq!(per_device, c.offered);

    let offered_keys: HashSet<String> = out
        .trace
        .iter()
        .filter_map(|l| match &l.event {
            TraceEvent::Enqueue { key, .. } | TraceEvent::QueueFull { key, .. } => Some(key.clone()),
            _ => None,
        })
        .collect();
    let mut row_keys = HashSet::new();
    let mut last_seq = BTreeMap::new();
    for row in out.sink.sheet().rows() {
        let key = idempotency_key(&row.record);
        assert!(offered_keys.contains(&key), "{key} was never offered");
        assert!(row_keys.insert(key.clone()), "{key} stored twice");
        let prev = last_seq.insert(row.record.device_id.clone(), row.record.seq);
        assert!(prev.is_none_or(|p| p < row.record.seq), "{key} out of order");
    }
    assert!(out.sink.sheet().duplicate_appends() > 0);
    for l in out.trace.iter() {
        if let TraceEvent::Delivered { key, row_index, .. } = &l.event {
            assert_eq!(out.sink.sheet().row_for_key(key), Some(*row_index));
        }
    }
}

#[test]
fn replay_reproduces_decisions_and_detections() {
    let s = lossy();
    let out = run(&s);
    let summary = replay::verify(&s, &out.trace).unwrap();
    assert_eq!(summary.decisions, out.report.counts.requests + out.report.counts.gate_busy);
    assert_eq!(
        summary.detections,
        out.report.counts.flame_detections + out.report.counts.flow_detections
    );

    let mut other = s.clone();
    other.seed += 1;
    assert!(matches!(
        replay::verify(&other, &out.trace),
        Err(replay::ReplayError::WrongScenario { .. })
    ));
}

#[test]
fn tampered_trace_fails_replay() {
    let s = lossy();
    let mut trace = run(&s).trace;
    let line = trace
        .lines
        .iter_mut()
        .find(|l| matches!(l.event, TraceEvent::Decision { .. }))
        .unwrap();
    if let TraceEvent::Decision { latency_ms, .. } = &mut line.event {
        *latency_ms += 1;
    }
    assert!(matches!(
        replay::verify(&s, &trace),
        Err(replay::ReplayError::Mismatch { .. })
    ));
}

#[test]
fn trace_file_reproduces_report() {
    let out = run(&lossy());
    let bytes = out.trace.to_jsonl();
    let back = EventTrace::read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back.to_jsonl(), bytes);
    assert_eq!(compute_metrics(&back, &out.truth).unwrap(), out.report);
}

#[test]
fn seed_changes_the_run() {
    let a = lossy();
    let mut b = a.clone();
    b.seed = 12;
    assert_ne!(run(&a).trace.to_jsonl(), run(&b).trace.to_jsonl());
}

#[test]
fn scenario_survives_toml_round_trip() {
    let s = lossy();
    let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
    assert_eq!(back, s);
    assert_eq!(sim::run_id(&back), sim::run_id(&s));
}

#[test]
fn invalid_scenarios_list_every_problem() {
    let src = r#"
duration_s = 60
[network]
drop_prob = 1.5
[[faults.partitions]]
start_s = 10
end_s = 5
[[access_devices]]
id = "not-an-id"
[[access_devices]]
id = "AC_001"
timeout_s = 0
"#;
    let err = Scenario::from_toml_str(src).and_then(|s| s.validate().map(|_| s)).unwrap_err();
    let fields: Vec<&str> = err.diagnostics.iter().map(|d| d.field.as_str()).collect();
    assert!(fields.len() >= 4, "{fields:?}");
    assert!(fields.iter().any(|f| f.contains("drop_prob")), "{fields:?}");
    assert!(fields.iter().any(|f| f.contains("partitions")), "{fields:?}");
    assert!(
        err.diagnostics.iter().any(|d| d.field == "access_devices[1]" && d.message.contains("timeout")),
        "{err}"
    );

    let unknown = Scenario::from_toml_str("durration_s = 5").unwrap_err();
    assert!(unknown.to_string().contains("durration_s"), "{unknown}");
}

#[test]
fn trace_time_stays_in_simulated_window() {
    let s = lossy();
    let out = run(&s);
    let (start, end) = (s.start.as_millis(), s.end().as_millis());
    for (i, w) in out.trace.lines.windows(2).enumerate() {
        assert!(w[0].t_ms <= w[1].t_ms, "time went backwards at line {}", i + 1);
    }
    for (i, l) in out.trace.iter().enumerate() {
        assert_eq!(l.seq, i as u64);
        assert!(start <= l.t_ms && l.t_ms <= end, "line {i} at {} outside the run", l.t_ms);
    }
}
