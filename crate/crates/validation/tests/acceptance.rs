//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, then exits non-zero if any
//! failed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate, TimeZone, Utc};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use edgegate_core::auth::{
    check_temporal, AccessController, AuthConfig, CollectedEvents, DecisionSource, Verdict,
};
use edgegate_core::codec::{decode, encode, idempotency_key, CloudRecord, DataMap, DataValue, EventType, RecordStamper};
use edgegate_core::domain::{AccessPolicy, DeviceId, Timestamp, Uid, Weekday};
use edgegate_core::metrics::{compute_metrics, render_report, ReportFormat};
use edgegate_core::safety::{
    flame_threshold, flow_anomaly, kalman_update, FlameParams, FlameSample, KalmanState, RollingWindow,
};
use edgegate_core::sim::network::{Fabric, Link, NetworkModel};
use edgegate_core::sim::trace::{
    DecisionOutcome, EventTrace, GroundTruth, LabeledRequest, RequestLabel, TraceEvent,
};
use edgegate_core::sim::scenario::{AccessDeviceConfig, AccessWorkload};
use edgegate_core::sim::{self, rng_stream, Scenario};
use edgegate_core::sink::{AuthzTable, CloudSink, DEFAULT_TOKEN};
use edgegate_core::sync::{backoff_delay, FlushStep, Outbox, OverflowPolicy, RetryPolicy, Uplink};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario_file(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    let src = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_toml_str(&src).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// 1

fn backoff_exactness() -> Outcome {
    let p = RetryPolicy::default();
    let got: Vec<Duration> = (1..=10).map(|n| backoff_delay(n, &p).unwrap()).collect();
    let want: Vec<Duration> = [1, 2, 4, 8, 16, 32, 60, 60, 60, 60]
        .into_iter()
        .map(Duration::from_secs)
        .collect();
    ensure(got == want, || format!("got {got:?}"))?;
    Ok("1,2,4,8,16,32,60,60,60,60 s".into())
}

// 2

fn threshold_at(slope: f64, ambient: f64) -> f64 {
    let t0 = Timestamp::from_secs(1_700_000_000);
    let prev = FlameSample {
        intensity: 0.0,
        ambient,
        at: t0,
    };
    let curr = FlameSample {
        intensity: slope,
        ambient,
        at: t0 + Duration::from_secs(1),
    };
    flame_threshold(&prev, &curr, &FlameParams::default()).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn flame_threshold_linearity() -> Outcome {
    let base = threshold_at(0.0, 0.0);
    ensure(rel_close(base, 560.0, 1e-12), || format!("base threshold {base}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let (s1, s2) = (rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
        let (a1, a2) = (rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
        let k: f64 = rng.random_range(0.0..10.0);
        let d = |s, a| threshold_at(s, a) - base;
        let sum = d(s1 + s2, a1 + a2);
        ensure(rel_close(sum, d(s1, a1) + d(s2, a2), 1e-9), || {
            format!("additivity fails at ({s1},{a1}) + ({s2},{a2})")
        })?;
        ensure(rel_close(d(k * s1, k * a1), k * d(s1, a1), 1e-9), || {
            format!("homogeneity fails at k={k} ({s1},{a1})")
        })?;
        // The slope and ambient contributions enter independently.
        ensure(rel_close(d(s1, a1), d(s1, 0.0) + d(0.0, a1), 1e-9), || {
            format!("separability fails at ({s1},{a1})")
        })?;
    }
    Ok(format!("base {base}, 10000 superposition cases within 1e-9"))
}

// 3

fn batch_anomaly(history: &[f64], f: f64) -> bool {
    if history.len() < 30 {
        return false;
    }
    let w = &history[history.len() - 30..];
    let mut sum = 0.0;
    for x in w {
        sum += x;
    }
    let mean = sum / 30.0;
    let mut ss = 0.0;
    for x in w {
        ss += (x - mean) * (x - mean);
    }
    let sigma = (ss / 30.0).sqrt();
    (f - mean).abs() > 3.0 * sigma
}

fn flow_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flagged = 0u32;
    for case in 0..100_000u32 {
        let len = rng.random_range(1..=60);
        let level: f64 = rng.random_range(0.0..100.0);
        let spread: f64 = if rng.random_bool(0.05) { 0.0 } else { rng.random_range(0.001..10.0) };
        let noise = Normal::new(0.0, 1.0).unwrap();
        let history: Vec<f64> = (0..len)
            .map(|_| (level + spread * noise.sample(&mut rng)).max(0.0))
            .collect();
        let mut w = RollingWindow::new();
        for &x in &history {
            w.push(x).unwrap();
        }
        let f = match rng.random_range(0..3) {
            0 => history[rng.random_range(0..len)],
            _ => (level + spread * rng.random_range(-6.0..6.0)).max(0.0),
        };
        let want = batch_anomaly(&history, f);
        let got = flow_anomaly(&w, f);
        ensure(got == want, || {
            format!("case {case}: window of {len}, f={f}: engine {got}, batch {want}")
        })?;
        flagged += want as u32;
    }
    Ok(format!("100000 windows, 0 disagreements ({flagged} flagged)"))
}

// 4

fn temporal_truth_table() -> Outcome {
    let uid = Uid::parse("A1B2C3D4").unwrap();
    let (start, end) = (9 * 3600, 17 * 3600);
    let positions = [
        ("below start", start - 1),
        ("at start", start),
        ("inside", 12 * 3600 + 30 * 60),
        ("at end", end),
        ("above end", end + 1),
    ];
    let mut cases = 0;
    // 2024-01-15 is a Monday; walk one calendar week via chrono.
    let monday = NaiveDate::from_ymd_opt(2024, 1, 15).unwrap();
    for offset in 0..7 {
        let date = monday + chrono::Days::new(offset);
        let day: Weekday = date.weekday().to_string().parse().unwrap();
        for allowed in [true, false] {
            let days: Vec<Weekday> = Weekday::ALL
                .into_iter()
                .filter(|d| allowed || *d != day)
                .collect();
            let policy = AccessPolicy::new(uid.clone(), start, end, days).unwrap();
            for (label, sod) in positions {
                let secs = Utc
                    .from_utc_datetime(&date.and_hms_opt(0, 0, 0).unwrap())
                    .timestamp()
                    + sod as i64;
                let t = Timestamp::from_secs(secs);
                let oracle = allowed && start <= sod && sod <= end;
                let got = check_temporal(&policy, t) == Verdict::Granted;
                ensure(got == oracle, || {
                    format!("{date} ({day}) {label}, day allowed {allowed}: got {got}, want {oracle}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases match"))
}

// 5

fn record_strategy() -> impl Strategy<Value = CloudRecord> {
    let device = ("[A-Z]{1,3}", 0u32..10_000).prop_map(|(r, n)| DeviceId::parse(&format!("{r}_{n:03}")).unwrap());
    let value = prop_oneof![
        any::<String>().prop_map(DataValue::Str),
        any::<i64>().prop_map(DataValue::Int),
        any::<bool>().prop_map(DataValue::Bool),
    ];
    let data = proptest::collection::vec(("[a-z_]{1,12}", value), 0..8).prop_map(|kv| {
        let mut m = DataMap::new();
        for (k, v) in kv {
            m.insert(k, v);
        }
        m
    });
    (
        device,
        0i64..253_402_300_800,
        proptest::sample::select(EventType::ALL.to_vec()),
        data,
        0u64..=i64::MAX as u64,
    )
        .prop_map(|(device_id, secs, event_type, data, seq)| CloudRecord {
            device_id,
            timestamp: Timestamp::from_secs(secs),
            event_type,
            data,
            seq,
        })
}

const LISTING: &str = r#"{
  "device_id": "AC_001",
  "timestamp": "2024-01-15T14:30:45Z",
  "event_type": "access_granted",
  "data": {
    "uid": "A1B2C3D4",
    "gate_status": "open",
    "duration_ms": 4800,
    "location": "Main_Entrance"
  }
}"#;

fn codec_round_trip() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 10_000,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&record_strategy(), |r| {
            let bytes = encode(&r).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), r);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let r = decode(LISTING.as_bytes()).map_err(|e| e.to_string())?;
    ensure(r.device_id.as_str() == "AC_001", || format!("device_id {}", r.device_id))?;
    ensure(r.timestamp == Timestamp::from_civil(2024, 1, 15, 14, 30, 45), || {
        format!("timestamp {}", r.timestamp)
    })?;
    ensure(r.event_type == EventType::AccessGranted, || format!("event_type {}", r.event_type))?;
    let want: Vec<(&str, DataValue)> = vec![
        ("uid", "A1B2C3D4".into()),
        ("gate_status", "open".into()),
        ("duration_ms", 4800i64.into()),
        ("location", "Main_Entrance".into()),
    ];
    let got: Vec<(&str, DataValue)> = r.data.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    ensure(got == want, || format!("data {got:?}"))?;
    Ok("10000 generated records round-trip; listing fields exact".into())
}

// 6

fn outage_survival() -> Outcome {
    let scenario = scenario_file("outage.toml");
    let partition = scenario
        .faults
        .partitions
        .first()
        .ok_or("outage scenario has no partition")?;
    ensure(scenario.duration_s >= 30 * 3600, || "shorter than 30 h".into())?;
    ensure(partition.end_s - partition.start_s >= 24.0 * 3600.0, || "partition under 24 h".into())?;
    let out = sim::run(&scenario).map_err(|e| e.to_string())?;
    let c = out.report.counts;
    ensure(c.offered > 0 && c.delivered == c.offered, || {
        format!("delivered {} of {} offered", c.delivered, c.offered)
    })?;
    ensure(c.lost == 0 && c.queued == 0 && c.dead_lettered == 0, || {
        format!("lost {} queued {} dead {}", c.lost, c.queued, c.dead_lettered)
    })?;

    let rows = out.sink.sheet().rows();
    ensure(rows.len() as u64 == c.offered, || {
        format!("{} sink rows for {} offered", rows.len(), c.offered)
    })?;
    let mut keys = HashSet::new();
    let mut last_seq: BTreeMap<&str, u64> = BTreeMap::new();
    for row in rows {
        let key = idempotency_key(&row.record);
        ensure(keys.insert(key.clone()), || format!("duplicate row for {key}"))?;
        let dev = row.record.device_id.as_str();
        if let Some(&prev) = last_seq.get(dev) {
            ensure(row.record.seq > prev, || {
                format!("{dev}: seq {} stored after {prev}", row.record.seq)
            })?;
        }
        last_seq.insert(dev, row.record.seq);
    }

    let series = &out.report.queue_depth_series;
    let peak = series.iter().map(|s| s.depth).max().unwrap_or(0);
    let last = series.last().map(|s| s.depth).unwrap_or(0);
    ensure(peak > 0 && last == 0, || format!("queue peak {peak}, final {last}"))?;
    Ok(format!(
        "{} of {} records delivered in per-device order, 0 duplicate rows, queue peak {peak} drained to 0",
        c.delivered, c.offered
    ))
}

// 7

fn delivery_rate_model() -> Outcome {
    const N: u64 = 10_000;
    let mut network = NetworkModel::default();
    network.drop_prob = 0.1;
    let mut fabric = Fabric {
        network,
        sink: CloudSink::new(DEFAULT_TOKEN, AuthzTable::default()),
        token: DEFAULT_TOKEN.into(),
        sink_outages: Vec::new(),
    };
    let mut rng = rng_stream(7, "network/AC_001");
    let policy = RetryPolicy {
        max_attempts: Some(4),
        ..RetryPolicy::default()
    };
    let mut uplink = Uplink::new(Outbox::new(N as usize, OverflowPolicy::RejectNew), policy).unwrap();
    let mut stamper = RecordStamper::new(DeviceId::parse("AC_001").unwrap());
    let mut now = Timestamp::from_civil(2024, 1, 15, 0, 0, 0);
    for _ in 0..N {
        let mut data = DataMap::new();
        data.insert("uid".into(), "A1B2C3D4".into());
        uplink.enqueue(stamper.stamp(EventType::AccessGranted, now, data), now).unwrap();
    }
    let mut link = Link::new(&mut fabric, &mut rng, Duration::from_secs(5));
    loop {
        match uplink.step(now, &mut link) {
            FlushStep::Idle => break,
            FlushStep::Delivered { elapsed, .. } | FlushStep::DeadLettered { elapsed, .. } => now = now + elapsed,
            FlushStep::Failed {
                elapsed, retry_after, ..
            } => now = now + elapsed + retry_after,
        }
    }
    let k = uplink.counters();
    ensure(k.delivered + k.dead_lettered == N, || format!("{k:?}"))?;
    ensure(fabric.sink.sheet().len() as u64 == k.delivered, || "sink rows differ from acks".into())?;
    let p = 1.0 - 0.1f64.powi(4);
    let band = 3.0 * (p * (1.0 - p) / N as f64).sqrt();
    let rate = k.delivered as f64 / N as f64;
    ensure((rate - p).abs() <= band, || {
        format!("success {rate:.6} outside {p:.6} +/- {band:.6}")
    })?;
    Ok(format!(
        "success {:.4}% vs model {:.4}% +/- {:.4}% ({} dead letters)",
        rate * 100.0,
        p * 100.0,
        band * 100.0,
        k.dead_lettered
    ))
}

// 8

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF by composite Simpson integration of the density.
fn std_normal_cdf(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let mut s = std_normal_pdf(0.0) + std_normal_pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * std_normal_pdf(i as f64 * h);
    }
    0.5 + s * h / 3.0
}

fn latency_composition() -> Outcome {
    const PAIRS: usize = 5_000;
    let network = NetworkModel::default();
    let (mu, sigma, floor) = (network.latency_mean_s, network.latency_stddev_s, network.latency_floor_s);
    let all_days = Weekday::ALL;
    let uids: Vec<Uid> = (0..PAIRS as u32).map(|i| Uid::from_u32(0x1000_0000 + i)).collect();
    let authz: AuthzTable = uids
        .iter()
        .map(|u| AccessPolicy::new(u.clone(), 0, 86_399, all_days).unwrap())
        .collect();
    let mut fabric = Fabric {
        network,
        sink: CloudSink::new(DEFAULT_TOKEN, authz),
        token: DEFAULT_TOKEN.into(),
        sink_outages: Vec::new(),
    };
    let mut rng = rng_stream(8, "network/AC_001");
    let config = AuthConfig::default();
    let t_cache = config.cache_decision.as_secs_f64();
    let timeout = config.timeout;
    let mut ctl = AccessController::new(DeviceId::parse("AC_001").unwrap(), config).unwrap();
    let mut out = CollectedEvents::default();
    let mut now = Timestamp::from_civil(2024, 1, 15, 0, 0, 0);
    let mut total_ms = 0u64;
    let mut hits = 0usize;
    let mut link = Link::new(&mut fabric, &mut rng, timeout);
    // Each card is presented twice: a cold cloud lookup, then a cache hit.
    for uid in &uids {
        for _ in 0..2 {
            let r = ctl
                .process_request(uid.as_str(), now, &mut link, &mut out)
                .map_err(|e| e.to_string())?;
            ensure(r.outcome == Verdict::Granted, || format!("{uid} denied"))?;
            hits += (r.source == DecisionSource::Cache) as usize;
            total_ms += r.decision_latency_ms;
            now = now + Duration::from_secs(60);
        }
        out.records.clear();
    }
    let n = 2 * PAIRS;
    let h = hits as f64 / n as f64;
    ensure(h == 0.5, || format!("hit ratio {h}"))?;
    let measured = total_ms as f64 / 1000.0 / n as f64;
    let alpha = (floor - mu) / sigma;
    let phi_a = std_normal_cdf(alpha);
    let e_rtt = floor * phi_a + mu * (1.0 - phi_a) + sigma * std_normal_pdf(alpha);
    let analytic = h * t_cache + (1.0 - h) * e_rtt;
    let rel = (measured - analytic).abs() / analytic;
    ensure(rel <= 0.05, || {
        format!("measured {measured:.4} s vs analytic {analytic:.4} s ({:.2}% off)", rel * 100.0)
    })?;
    Ok(format!(
        "measured mean {measured:.4} s vs analytic {analytic:.4} s ({:.2}% off, {n} requests)",
        rel * 100.0
    ))
}

// 9

fn determinism() -> Outcome {
    let mut names = Vec::new();
    for file in ["demo.toml", "outage.toml", "misread.toml"] {
        let scenario = scenario_file(file);
        let a = sim::run(&scenario).map_err(|e| e.to_string())?;
        let b = sim::run(&scenario).map_err(|e| e.to_string())?;
        ensure(a.trace.to_jsonl() == b.trace.to_jsonl(), || format!("{file}: traces differ"))?;
        ensure(a.truth.to_json() == b.truth.to_json(), || format!("{file}: ground truth differs"))?;
        for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Text] {
            ensure(
                render_report(&a.report, format) == render_report(&b.report, format),
                || format!("{file}: {format:?} reports differ"),
            )?;
        }
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        a.sink.sheet().save(&mut sa).unwrap();
        b.sink.sheet().save(&mut sb).unwrap();
        ensure(sa == sb, || format!("{file}: sink state differs"))?;
        names.push(format!("{file} ({} lines)", a.trace.len()));
    }
    Ok(format!("byte-identical: {}", names.join(", ")))
}

// 10

fn metrics_oracle() -> Outcome {
    let dev = DeviceId::parse("AC_001").unwrap();
    let t0 = Timestamp::from_civil(2024, 1, 15, 9, 0, 0);
    // (label, outcome, latency ms)
    let events = [
        (RequestLabel::Authorized, DecisionOutcome::Granted, 20),
        (RequestLabel::Authorized, DecisionOutcome::Granted, 1200),
        (RequestLabel::Authorized, DecisionOutcome::Granted, 20),
        (RequestLabel::Authorized, DecisionOutcome::Denied, 5000),
        (RequestLabel::Authorized, DecisionOutcome::Granted, 900),
        (RequestLabel::Unauthorized, DecisionOutcome::Denied, 1100),
        (RequestLabel::Unauthorized, DecisionOutcome::Granted, 20),
        (RequestLabel::Unauthorized, DecisionOutcome::Denied, 1300),
        (RequestLabel::Unauthorized, DecisionOutcome::Denied, 20),
        (RequestLabel::Malformed, DecisionOutcome::RejectedInput, 0),
    ];
    let mut trace = EventTrace::default();
    let mut truth = GroundTruth::new("hand-built");
    for (i, (label, outcome, latency_ms)) in events.iter().enumerate() {
        let request = i as u64 + 1;
        trace.push(
            t0 + Duration::from_secs(60 * request),
            TraceEvent::Decision {
                request,
                device: dev.clone(),
                outcome: *outcome,
                source: None,
                latency_ms: *latency_ms,
            },
        );
        truth.requests.push(LabeledRequest {
            request,
            device: dev.clone(),
            label: *label,
        });
    }
    let r = compute_metrics(&trace, &truth).map_err(|e| e.to_string())?;

    // Confusion matrix over the nine well-formed attempts.
    let (tp, fn_, fp, tn) = (4.0, 1.0, 1.0, 3.0);
    let accuracy = (tp + tn) / (tp + fn_ + fp + tn);
    let far = fp / (fp + tn);
    let frr = fn_ / (tp + fn_);
    let got = (r.auth_accuracy, r.far, r.frr);
    ensure(got == (Some(accuracy), Some(far), Some(frr)), || {
        format!("got {got:?}, want ({accuracy}, {far}, {frr})")
    })?;
    ensure(r.counts.rejected_input == 1 && r.counts.valid_attempts == 9, || {
        format!("{:?}", r.counts)
    })?;
    Ok(format!("accuracy {accuracy:.6}, FAR {far}, FRR {frr}"))
}

// 11

fn kalman_steady_state() -> Outcome {
    let (q, r) = (0.01, 1.0);
    let mut s = KalmanState::new(0.0, 1.0, q, r).unwrap();
    for _ in 0..1000 {
        s = kalman_update(s, 5.0).0;
    }
    let target = KalmanState::steady_state_predicted_variance(q, r);
    let rel = (s.variance - target).abs() / target;
    let detail = format!(
        "post-update variance {:.6}, root of v^2 = q(v + r) is {target:.6} ({:.2}% off; the post-update fixed point is {:.6})",
        s.variance,
        rel * 100.0,
        KalmanState::steady_state_posterior_variance(q, r)
    );
    ensure(rel <= 0.01, || detail.clone())?;
    Ok(detail)
}

// 12

fn fault_free_scale() -> Scenario {
    let device = |i: usize| AccessDeviceConfig {
        id: format!("AC_{i:03}"),
        workload: AccessWorkload {
            rate_per_hour: 15.0,
            max_requests: Some(1000),
            authorized_fraction: 0.6,
            malformed_fraction: 0.0,
            ..AccessWorkload::default()
        },
        ..AccessDeviceConfig::default()
    };
    let mut s = Scenario {
        name: "auth-at-scale".into(),
        seed: 12,
        duration_s: 5 * 24 * 3600,
        access_devices: (1..=10).map(device).collect(),
        ..Scenario::default()
    };
    s.authz.generated = 40;
    s
}

fn binomial_band(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn auth_at_scale() -> Outcome {
    let scenario = fault_free_scale();
    let out = sim::run(&scenario).map_err(|e| e.to_string())?;
    let c = out.report.counts;
    ensure(c.requests == 10_000, || format!("{} requests decided", c.requests))?;
    let authorized: BTreeSet<u64> = out
        .truth
        .requests
        .iter()
        .filter(|r| r.label == RequestLabel::Authorized)
        .map(|r| r.request)
        .collect();
    let granted: BTreeSet<u64> = out
        .trace
        .iter()
        .filter_map(|l| match &l.event {
            TraceEvent::Decision {
                request,
                outcome: DecisionOutcome::Granted,
                ..
            } => Some(*request),
            _ => None,
        })
        .collect();
    ensure(granted == authorized, || {
        format!(
            "{} granted vs {} authorized, {} differ",
            granted.len(),
            authorized.len(),
            granted.symmetric_difference(&authorized).count()
        )
    })?;
    ensure(out.report.auth_accuracy == Some(1.0), || {
        format!("accuracy {:?}", out.report.auth_accuracy)
    })?;

    let misread = scenario_file("misread.toml");
    let w = &misread.access_devices[0].workload;
    let (p_accept, p_reject) = (w.misread_accept_rate, w.misread_reject_rate);
    let m = sim::run(&misread).map_err(|e| e.to_string())?;
    let mc = m.report.counts;
    let far = m.report.far.ok_or("no unauthorized attempts")?;
    let frr = m.report.frr.ok_or("no authorized attempts")?;
    let far_band = binomial_band(p_accept, mc.unauthorized_attempts);
    let frr_band = binomial_band(p_reject, mc.authorized_attempts);
    ensure((far - p_accept).abs() <= far_band, || {
        format!("FAR {far:.4} outside {p_accept} +/- {far_band:.4}")
    })?;
    ensure((frr - p_reject).abs() <= frr_band, || {
        format!("FRR {frr:.4} outside {p_reject} +/- {frr_band:.4}")
    })?;
    Ok(format!(
        "10000 fault-free requests, granted set = {} authorized; misread FAR {far:.4} ({p_accept} +/- {far_band:.4}), FRR {frr:.4} ({p_reject} +/- {frr_band:.4})",
        authorized.len()
    ))
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "backoff exactness", budget: Duration::from_millis(1), check: backoff_exactness },
    Criterion { id: 2, name: "flame threshold", budget: Duration::from_secs(1), check: flame_threshold_linearity },
    Criterion { id: 3, name: "flow anomaly oracle", budget: Duration::from_secs(10), check: flow_oracle_equivalence },
    Criterion { id: 4, name: "temporal truth table", budget: Duration::from_secs(1), check: temporal_truth_table },
    Criterion { id: 5, name: "codec round-trip", budget: Duration::from_secs(5), check: codec_round_trip },
    Criterion { id: 6, name: "outage survival", budget: Duration::from_secs(60), check: outage_survival },
    Criterion { id: 7, name: "delivery-rate model", budget: Duration::from_secs(60), check: delivery_rate_model },
    Criterion { id: 8, name: "latency composition", budget: Duration::from_secs(120), check: latency_composition },
    Criterion { id: 9, name: "determinism", budget: Duration::from_secs(60), check: determinism },
    Criterion { id: 10, name: "metrics oracle", budget: Duration::from_secs(1), check: metrics_oracle },
    Criterion { id: 11, name: "kalman steady state", budget: Duration::from_secs(1), check: kalman_steady_state },
    Criterion { id: 12, name: "auth correctness at scale", budget: Duration::from_secs(120), check: auth_at_scale },
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        let label = format!("criterion {} {}", c.id, c.name);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed();
        let result = match result {
            Ok(detail) if took > c.budget => Err(format!("{detail}; took {took:?}, budget {:?}", c.budget)),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {label} [{took:.2?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label} [{took:.2?}]: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
