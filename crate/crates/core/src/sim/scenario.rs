//! Scenario files: TOML, one key per simulator knob, every key optional
//! except device ids.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::auth::{AuthConfig, FallbackMode};
use crate::domain::{AccessPolicy, DeviceId, Timestamp};
use crate::safety::{FlameParams, KalmanState, MonitorConfig};
use crate::sync::{OverflowPolicy, RetryPolicy, DEFAULT_OUTBOX_CAPACITY};

/// One problem with a scenario, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", d.field, d.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub start: Timestamp,
    pub duration_s: u64,
    /// How often total outbox depth is sampled for the depth series.
    pub queue_sample_interval_s: u64,
    pub network: NetworkConfig,
    pub faults: FaultConfig,
    pub authz: AuthzConfig,
    pub access_devices: Vec<AccessDeviceConfig>,
    pub safety_devices: Vec<SafetyDeviceConfig>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            seed: 0,
            start: Timestamp::from_civil(2024, 1, 15, 0, 0, 0),
            duration_s: 3600,
            queue_sample_interval_s: 60,
            network: NetworkConfig::default(),
            faults: FaultConfig::default(),
            authz: AuthzConfig::default(),
            access_devices: Vec::new(),
            safety_devices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub latency_mean_s: f64,
    pub latency_stddev_s: f64,
    pub latency_floor_s: f64,
    /// Probability a request is lost before reaching the sink.
    pub drop_prob: f64,
    /// Probability the sink's reply is lost after the request was served.
    pub ack_drop_prob: f64,
    /// Probability an append is delivered to the sink twice.
    pub duplicate_prob: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency_mean_s: 1.2,
            latency_stddev_s: 0.3,
            latency_floor_s: 0.05,
            drop_prob: 0.0,
            ack_drop_prob: 0.0,
            duplicate_prob: 0.0,
        }
    }
}

/// Offsets in seconds from the scenario start, half-open `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub drop_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    /// No traffic crosses the network inside these intervals.
    pub partitions: Vec<Interval>,
    /// Overrides `network.drop_prob` inside each window.
    pub drop_schedule: Vec<DropWindow>,
    /// The sink answers every request with `Unavailable`.
    pub sink_outages: Vec<Interval>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuthzConfig {
    /// Number of extra random cards to provision.
    pub generated: u32,
    pub policies: Vec<AccessPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UplinkConfig {
    pub retry_base_s: f64,
    pub retry_max_s: f64,
    pub max_attempts: Option<u32>,
    pub capacity: usize,
    pub overflow: OverflowPolicy,
    pub send_timeout_s: f64,
    /// Uniform backoff stretch in `[1, 1 + jitter)`; 0 keeps the exact sequence.
    pub jitter: f64,
}

impl Default for UplinkConfig {
    fn default() -> Self {
        Self {
            retry_base_s: 1.0,
            retry_max_s: 60.0,
            max_attempts: None,
            capacity: DEFAULT_OUTBOX_CAPACITY,
            overflow: OverflowPolicy::RejectNew,
            send_timeout_s: 5.0,
            jitter: 0.0,
        }
    }
}

impl UplinkConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            base: secs(self.retry_base_s),
            max: secs(self.retry_max_s),
            max_attempts: self.max_attempts,
        }
    }

    pub fn send_timeout(&self) -> Duration {
        secs(self.send_timeout_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccessWorkload {
    pub rate_per_hour: f64,
    /// Stop after this many card presentations.
    pub max_requests: Option<u64>,
    /// Fraction of presentations using a provisioned card.
    pub authorized_fraction: f64,
    /// Fraction of presentations producing an unparseable read.
    pub malformed_fraction: f64,
    /// Probability an unauthorized card reads as a currently authorized UID.
    pub misread_accept_rate: f64,
    /// Probability an authorized card reads as an unprovisioned UID.
    pub misread_reject_rate: f64,
}

impl Default for AccessWorkload {
    fn default() -> Self {
        Self {
            rate_per_hour: 60.0,
            max_requests: None,
            authorized_fraction: 0.8,
            malformed_fraction: 0.02,
            misread_accept_rate: 0.0,
            misread_reject_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccessDeviceConfig {
    pub id: String,
    pub location: String,
    /// Card read delay; not counted in response time.
    pub detection_ms: u64,
    pub entry_s: f64,
    pub timeout_s: f64,
    pub cache_ttl_s: f64,
    pub cache_capacity: usize,
    pub cache_decision_ms: u64,
    pub servo_travel_ms: u64,
    pub fallback: FallbackMode,
    pub uplink: UplinkConfig,
    pub workload: AccessWorkload,
}

impl Default for AccessDeviceConfig {
    fn default() -> Self {
        let auth = AuthConfig::default();
        Self {
            id: String::new(),
            location: auth.location,
            detection_ms: auth.detection.as_millis() as u64,
            entry_s: auth.entry.as_secs_f64(),
            timeout_s: auth.timeout.as_secs_f64(),
            cache_ttl_s: auth.cache_ttl.as_secs_f64(),
            cache_capacity: auth.cache_capacity,
            cache_decision_ms: auth.cache_decision.as_millis() as u64,
            servo_travel_ms: auth.servo_travel.as_millis() as u64,
            fallback: auth.fallback,
            uplink: UplinkConfig::default(),
            workload: AccessWorkload::default(),
        }
    }
}

impl AccessDeviceConfig {
    pub fn auth_config(&self) -> AuthConfig {
        AuthConfig {
            detection: Duration::from_millis(self.detection_ms),
            entry: secs(self.entry_s),
            timeout: secs(self.timeout_s),
            cache_ttl: secs(self.cache_ttl_s),
            cache_capacity: self.cache_capacity,
            cache_decision: Duration::from_millis(self.cache_decision_ms),
            servo_travel: Duration::from_millis(self.servo_travel_ms),
            fallback: self.fallback,
            location: self.location.clone(),
            ..AuthConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlameEpisode {
    pub start_s: f64,
    pub duration_s: f64,
    #[serde(default = "default_peak")]
    pub peak: f64,
    /// 0 presents the full peak; 1 presents only the baseline.
    #[serde(default)]
    pub difficulty: f64,
}

fn default_peak() -> f64 {
    900.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlameTrace {
    pub baseline: f64,
    pub noise: f64,
    pub ambient: f64,
    pub ambient_noise: f64,
    pub episodes: Vec<FlameEpisode>,
}

impl Default for FlameTrace {
    fn default() -> Self {
        Self {
            baseline: 300.0,
            noise: 15.0,
            ambient: 100.0,
            ambient_noise: 5.0,
            episodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowInjection {
    pub start_s: f64,
    pub duration_s: f64,
    pub offset_lpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrace {
    pub baseline_lpm: f64,
    pub noise_lpm: f64,
    pub anomalies: Vec<FlowInjection>,
}

impl Default for FlowTrace {
    fn default() -> Self {
        Self {
            baseline_lpm: 30.0,
            noise_lpm: 0.5,
            anomalies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyDeviceConfig {
    pub id: String,
    pub sample_period_ms: u64,
    pub status_interval_s: u64,
    pub personnel_scan_rate_per_hour: f64,
    pub presence_window_s: u64,
    pub flame: FlameParams,
    pub kalman_q: f64,
    pub kalman_r: f64,
    pub flame_trace: FlameTrace,
    pub flow_trace: FlowTrace,
    pub uplink: UplinkConfig,
}

impl Default for SafetyDeviceConfig {
    fn default() -> Self {
        let m = MonitorConfig::default();
        Self {
            id: String::new(),
            sample_period_ms: 1000,
            status_interval_s: 60,
            personnel_scan_rate_per_hour: 0.0,
            presence_window_s: m.presence_window.as_secs(),
            flame: m.flame,
            kalman_q: m.kalman_q,
            kalman_r: m.kalman_r,
            flame_trace: FlameTrace::default(),
            flow_trace: FlowTrace::default(),
            uplink: UplinkConfig::default(),
        }
    }
}

impl SafetyDeviceConfig {
    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig {
            flame: self.flame,
            kalman_q: self.kalman_q,
            kalman_r: self.kalman_r,
            presence_window: Duration::from_secs(self.presence_window_s),
        }
    }
}

pub(crate) fn secs(s: f64) -> Duration {
    Duration::from_millis((s * 1000.0).round().max(0.0) as u64)
}

impl Scenario {
    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(src).map_err(|e| ConfigError {
            diagnostics: vec![Diagnostic {
                field: "<scenario>".into(),
                message: e.to_string().trim_end().to_string(),
            }],
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn end(&self) -> Timestamp {
        self.start + Duration::from_secs(self.duration_s)
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Validator::default();
        v.positive("queue_sample_interval_s", self.queue_sample_interval_s as f64);

        let n = &self.network;
        v.non_negative("network.latency_mean_s", n.latency_mean_s);
        v.non_negative("network.latency_stddev_s", n.latency_stddev_s);
        v.non_negative("network.latency_floor_s", n.latency_floor_s);
        v.probability("network.drop_prob", n.drop_prob);
        v.probability("network.ack_drop_prob", n.ack_drop_prob);
        v.probability("network.duplicate_prob", n.duplicate_prob);

        v.intervals("faults.partitions", &self.faults.partitions, true);
        v.intervals("faults.sink_outages", &self.faults.sink_outages, false);
        for (i, w) in self.faults.drop_schedule.iter().enumerate() {
            let f = format!("faults.drop_schedule[{i}]");
            v.interval(&f, w.start_s, w.end_s);
            v.probability(&format!("{f}.drop_prob"), w.drop_prob);
        }

        let mut uids = BTreeSet::new();
        for (i, p) in self.authz.policies.iter().enumerate() {
            if !uids.insert(p.uid().clone()) {
                v.push(format!("authz.policies[{i}].uid"), format!("duplicate uid {}", p.uid()));
            }
        }

        let mut ids = BTreeSet::new();
        let access = self.access_devices.iter().map(|d| ("access_devices", &d.id));
        let safety = self.safety_devices.iter().map(|d| ("safety_devices", &d.id));
        let mut counters = [0usize; 2];
        for (section, id) in access.chain(safety) {
            let idx = if section == "access_devices" { 0 } else { 1 };
            let field = format!("{section}[{}].id", counters[idx]);
            counters[idx] += 1;
            if id.is_empty() {
                v.push(field, "required".into());
            } else if let Err(e) = DeviceId::parse(id) {
                v.push(field, e.to_string());
            } else if !ids.insert(id.clone()) {
                v.push(field, format!("duplicate device id {id}"));
            }
        }

        for (i, d) in self.access_devices.iter().enumerate() {
            let f = format!("access_devices[{i}]");
            if let Err(e) = d.auth_config().validate() {
                v.push(f.clone(), e.to_string());
            }
            v.uplink(&format!("{f}.uplink"), &d.uplink);
            let w = &d.workload;
            v.non_negative(&format!("{f}.workload.rate_per_hour"), w.rate_per_hour);
            v.probability(&format!("{f}.workload.authorized_fraction"), w.authorized_fraction);
            v.probability(&format!("{f}.workload.malformed_fraction"), w.malformed_fraction);
            v.probability(&format!("{f}.workload.misread_accept_rate"), w.misread_accept_rate);
            v.probability(&format!("{f}.workload.misread_reject_rate"), w.misread_reject_rate);
            if w.authorized_fraction + w.malformed_fraction > 1.0 {
                v.push(
                    format!("{f}.workload"),
                    "authorized_fraction + malformed_fraction exceeds 1".into(),
                );
            }
            if w.authorized_fraction > 0.0
                && w.rate_per_hour > 0.0
                && self.authz.policies.is_empty()
                && self.authz.generated == 0
            {
                v.push(
                    format!("{f}.workload.authorized_fraction"),
                    "no provisioned cards in authz".into(),
                );
            }
        }

        for (i, d) in self.safety_devices.iter().enumerate() {
            let f = format!("safety_devices[{i}]");
            v.positive(&format!("{f}.sample_period_ms"), d.sample_period_ms as f64);
            v.positive(&format!("{f}.status_interval_s"), d.status_interval_s as f64);
            v.non_negative(
                &format!("{f}.personnel_scan_rate_per_hour"),
                d.personnel_scan_rate_per_hour,
            );
            if let Err(e) = d.flame.validate() {
                v.push(format!("{f}.flame"), e.to_string());
            }
            if let Err(e) = KalmanState::new(0.0, 1.0, d.kalman_q, d.kalman_r) {
                v.push(format!("{f}.kalman"), e.to_string());
            }
            v.non_negative(&format!("{f}.flame_trace.noise"), d.flame_trace.noise);
            v.non_negative(&format!("{f}.flame_trace.ambient_noise"), d.flame_trace.ambient_noise);
            for (j, e) in d.flame_trace.episodes.iter().enumerate() {
                let g = format!("{f}.flame_trace.episodes[{j}]");
                v.positive(&format!("{g}.duration_s"), e.duration_s);
                v.non_negative(&format!("{g}.start_s"), e.start_s);
                v.probability(&format!("{g}.difficulty"), e.difficulty);
            }
            v.non_negative(&format!("{f}.flow_trace.baseline_lpm"), d.flow_trace.baseline_lpm);
            v.non_negative(&format!("{f}.flow_trace.noise_lpm"), d.flow_trace.noise_lpm);
            for (j, a) in d.flow_trace.anomalies.iter().enumerate() {
                let g = format!("{f}.flow_trace.anomalies[{j}]");
                v.positive(&format!("{g}.duration_s"), a.duration_s);
                v.non_negative(&format!("{g}.start_s"), a.start_s);
                v.finite(&format!("{g}.offset_lpm"), a.offset_lpm);
            }
            v.uplink(&format!("{f}.uplink"), &d.uplink);
        }

        v.finish()
    }
}

#[derive(Default)]
struct Validator {
    diagnostics: Vec<Diagnostic>,
}

impl Validator {
    fn push(&mut self, field: String, message: String) {
        self.diagnostics.push(Diagnostic { field, message });
    }

    fn finite(&mut self, field: &str, x: f64) -> bool {
        if !x.is_finite() {
            self.push(field.into(), format!("must be finite, got {x}"));
            return false;
        }
        true
    }

    fn non_negative(&mut self, field: &str, x: f64) {
        if self.finite(field, x) && x < 0.0 {
            self.push(field.into(), format!("must be >= 0, got {x}"));
        }
    }

    fn positive(&mut self, field: &str, x: f64) {
        if self.finite(field, x) && x <= 0.0 {
            self.push(field.into(), format!("must be > 0, got {x}"));
        }
    }

    fn probability(&mut self, field: &str, p: f64) {
        if self.finite(field, p) && !(0.0..=1.0).contains(&p) {
            self.push(field.into(), format!("must be in [0, 1], got {p}"));
        }
    }

    fn interval(&mut self, field: &str, start: f64, end: f64) -> bool {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            self.push(field.into(), format!("need 0 <= start_s < end_s, got [{start}, {end})"));
            return false;
        }
        true
    }

    fn intervals(&mut self, field: &str, list: &[Interval], disjoint: bool) {
        let mut ok = Vec::new();
        for (i, iv) in list.iter().enumerate() {
            if self.interval(&format!("{field}[{i}]"), iv.start_s, iv.end_s) {
                ok.push((i, *iv));
            }
        }
        if !disjoint {
            return;
        }
        ok.sort_by(|a, b| a.1.start_s.total_cmp(&b.1.start_s));
        for pair in ok.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            if next.1.start_s < prev.1.end_s {
                self.push(
                    format!("{field}[{}]", next.0),
                    format!("overlaps {field}[{}]", prev.0),
                );
            }
        }
    }

    fn uplink(&mut self, field: &str, u: &UplinkConfig) {
        if let Err(e) = u.retry_policy().validate() {
            self.push(field.into(), e.to_string());
        }
        if u.capacity == 0 {
            self.push(format!("{field}.capacity"), "must be > 0".into());
        }
        self.positive(&format!("{field}.send_timeout_s"), u.send_timeout_s);
        self.non_negative(&format!("{field}.jitter"), u.jitter);
    }

    fn finish(self) -> Result<(), ConfigError> {
        if self.diagnostics.is_empty() {
            Ok(())
        } else {
            Err(ConfigError {
                diagnostics: self.diagnostics,
            })
        }
    }
}
