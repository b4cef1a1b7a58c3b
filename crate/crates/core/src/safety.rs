//! Safety-monitoring analytics: adaptive flame threshold, rolling-window
//! flow anomaly detection, scalar Kalman smoothing and safety event records.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{AlertPattern, BuzzerAlert, EventOut};
use crate::codec::{CloudRecord, DataMap, DataValue, EventType, RecordStamper};
use crate::domain::{DeviceId, Timestamp, Uid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("sample interval must be positive (prev {prev}, curr {curr})")]
    NonPositiveInterval { prev: Timestamp, curr: Timestamp },
    #[error("negative flow {0} L/min")]
    NegativeFlow(f64),
    #[error("missing field {field:?} for {kind} event")]
    MissingField { kind: EventType, field: &'static str },
    #[error("{0} is not a safety event type")]
    NotSafetyEvent(EventType),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlameSample {
    pub intensity: f64,
    pub ambient: f64,
    pub at: Timestamp,
}

/// Weights of the adaptive flame threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlameParams {
    pub t_base: f64,
    pub alpha: f64,
    /// Weight on the intensity slope, in seconds.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FlameParams {
    fn default() -> Self {
        Self {
            t_base: 800.0,
            alpha: 0.7,
            beta: 0.2,
            gamma: 0.1,
        }
    }
}

impl FlameParams {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.t_base > 0.0) {
            return Err(SafetyError::InvalidParameter("t_base must be > 0".into()));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(SafetyError::InvalidParameter(
                "alpha, beta, gamma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `alpha * t_base + beta * dI/dt + gamma * ambient`, with dI/dt taken as
/// the backward difference between the two samples in counts per second.
pub fn flame_threshold(
    prev: &FlameSample,
    curr: &FlameSample,
    params: &FlameParams,
) -> Result<f64, SafetyError> {
    let dt_ms = curr.at.millis_since(prev.at);
    if dt_ms <= 0 {
        return Err(SafetyError::NonPositiveInterval {
            prev: prev.at,
            curr: curr.at,
        });
    }
    let slope = (curr.intensity - prev.intensity) / (dt_ms as f64 / 1000.0);
    Ok(params.alpha * params.t_base + params.beta * slope + params.gamma * curr.ambient)
}

/// Flame present iff intensity reaches the threshold (inclusive).
pub fn detect_flame(curr: &FlameSample, threshold: f64) -> bool {
    curr.intensity >= threshold
}

pub const FLOW_WINDOW: usize = 30;

/// The most recent flow readings with their mean and population standard
/// deviation. Statistics are refreshed from the stored samples on every push,
/// so they never drift from a batch recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingWindow {
    capacity: usize,
    samples: VecDeque<f64>,
    mean: f64,
    stddev: f64,
}

impl Default for RollingWindow {
    fn default() -> Self {
        Self::new()
    }
}

impl RollingWindow {
    pub fn new() -> Self {
        Self::with_capacity(FLOW_WINDOW)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            samples: VecDeque::with_capacity(capacity),
            mean: 0.0,
            stddev: 0.0,
        }
    }

    pub fn push(&mut self, flow: f64) -> Result<(), SafetyError> {
        if !(flow >= 0.0) || !flow.is_finite() {
            return Err(SafetyError::NegativeFlow(flow));
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(flow);
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        let var = self.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        self.mean = mean;
        self.stddev = var.sqrt();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().copied()
    }
}

/// Functional form of [`RollingWindow::push`].
pub fn window_push(mut w: RollingWindow, flow: f64) -> Result<RollingWindow, SafetyError> {
    w.push(flow)?;
    Ok(w)
}

/// Three-sigma test against a full window; never flags during warm-up.
pub fn flow_anomaly(w: &RollingWindow, f_current: f64) -> bool {
    w.is_full() && (f_current - w.mean()).abs() > 3.0 * w.stddev()
}

/// Scalar random-walk Kalman filter state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub estimate: f64,
    pub variance: f64,
    /// Process-noise variance.
    pub q: f64,
    /// Measurement-noise variance.
    pub r: f64,
}

impl KalmanState {
    pub fn new(estimate: f64, variance: f64, q: f64, r: f64) -> Result<Self, SafetyError> {
        if !(variance > 0.0) || !(q > 0.0) || !(r > 0.0) {
            return Err(SafetyError::InvalidParameter(
                "kalman variance, q and r must be > 0".into(),
            ));
        }
        Ok(Self {
            estimate,
            variance,
            q,
            r,
        })
    }

    /// Steady-state predicted variance: the positive root of v² = q·(v + r).
    pub fn steady_state_predicted_variance(q: f64, r: f64) -> f64 {
        (q + (q * q + 4.0 * q * r).sqrt()) / 2.0
    }

    /// Steady-state post-update variance: the positive root of v² + q·v − q·r = 0.
    pub fn steady_state_posterior_variance(q: f64, r: f64) -> f64 {
        (-q + (q * q + 4.0 * q * r).sqrt()) / 2.0
    }
}

pub fn kalman_update(s: KalmanState, z: f64) -> (KalmanState, f64) {
    let predicted = s.variance + s.q;
    let gain = predicted / (predicted + s.r);
    let estimate = s.estimate + gain * (z - s.estimate);
    let variance = (1.0 - gain) * predicted;
    (
        KalmanState {
            estimate,
            variance,
            ..s
        },
        estimate,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    FlameDetected,
    FlowAnomaly,
    Status,
    PersonnelScan,
}

impl SafetyKind {
    pub fn event_type(self) -> EventType {
        match self {
            SafetyKind::FlameDetected => EventType::FlameDetected,
            SafetyKind::FlowAnomaly => EventType::FlowAnomaly,
            SafetyKind::Status => EventType::Status,
            SafetyKind::PersonnelScan => EventType::PersonnelScan,
        }
    }
}

impl TryFrom<EventType> for SafetyKind {
    type Error = SafetyError;

    fn try_from(e: EventType) -> Result<Self, Self::Error> {
        match e {
            EventType::FlameDetected => Ok(SafetyKind::FlameDetected),
            EventType::FlowAnomaly => Ok(SafetyKind::FlowAnomaly),
            EventType::Status => Ok(SafetyKind::Status),
            EventType::PersonnelScan => Ok(SafetyKind::PersonnelScan),
            other => Err(SafetyError::NotSafetyEvent(other)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SafetyContext {
    pub uid: Option<Uid>,
    pub flow_lpm: Option<f64>,
    pub intensity: Option<f64>,
}

/// Fixed-point encoding keeps payloads integer-only: flow in mL/min,
/// intensity in hundredths of a count.
pub fn flow_to_milli(flow_lpm: f64) -> i64 {
    (flow_lpm * 1000.0).round() as i64
}

pub fn intensity_to_centi(intensity: f64) -> i64 {
    (intensity * 100.0).round() as i64
}

/// Builds the record for a safety event. Flame events need an intensity,
/// flow anomalies a flow reading, personnel scans a uid.
pub fn emit_safety_event(
    stamper: &mut RecordStamper,
    kind: SafetyKind,
    ctx: &SafetyContext,
    at: Timestamp,
) -> Result<CloudRecord, SafetyError> {
    let missing = |field| SafetyError::MissingField {
        kind: kind.event_type(),
        field,
    };
    match kind {
        SafetyKind::FlameDetected if ctx.intensity.is_none() => return Err(missing("intensity")),
        SafetyKind::FlowAnomaly if ctx.flow_lpm.is_none() => return Err(missing("flow")),
        SafetyKind::PersonnelScan if ctx.uid.is_none() => return Err(missing("uid")),
        _ => {}
    }
    let mut data = DataMap::new();
    if let Some(uid) = &ctx.uid {
        data.insert("uid".into(), uid.as_str().into());
    }
    if let Some(flow) = ctx.flow_lpm {
        data.insert("flow_ml_min".into(), DataValue::Int(flow_to_milli(flow)));
    }
    if let Some(i) = ctx.intensity {
        data.insert("intensity_centi".into(), DataValue::Int(intensity_to_centi(i)));
    }
    Ok(stamper.stamp(kind.event_type(), at, data))
}

/// Per-device monitor settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub flame: FlameParams,
    pub kalman_q: f64,
    pub kalman_r: f64,
    /// How long a personnel scan stays attached to subsequent events.
    pub presence_window: Duration,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            flame: FlameParams::default(),
            kalman_q: 0.01,
            kalman_r: 1.0,
            presence_window: Duration::from_secs(600),
        }
    }
}

/// What one sensor sample produced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleOutcome {
    /// Threshold used for this flame sample (absent on the first sample).
    pub flame_threshold: Option<f64>,
    pub flame_present: bool,
    /// Rising edge: emitted a flame_detected record.
    pub flame_event: bool,
    pub flow_anomalous: bool,
    /// Rising edge: emitted a flow_anomaly record.
    pub flow_event: bool,
    pub window_mean: f64,
    pub window_stddev: f64,
}

/// Sequential per-device safety engine. Detection runs on raw samples; the
/// Kalman-smoothed values are reported in status records.
#[derive(Debug)]
pub struct SafetyMonitor {
    config: MonitorConfig,
    stamper: RecordStamper,
    prev_flame: Option<FlameSample>,
    flame_active: bool,
    flow_window: RollingWindow,
    flow_active: bool,
    flow_filter: Option<KalmanState>,
    flame_filter: Option<KalmanState>,
    last_flow: Option<f64>,
    personnel: Option<(Uid, Timestamp)>,
}

impl SafetyMonitor {
    pub fn new(device_id: DeviceId, config: MonitorConfig) -> Result<Self, SafetyError> {
        config.flame.validate()?;
        KalmanState::new(0.0, 1.0, config.kalman_q, config.kalman_r)?;
        Ok(Self {
            config,
            stamper: RecordStamper::new(device_id),
            prev_flame: None,
            flame_active: false,
            flow_window: RollingWindow::new(),
            flow_active: false,
            flow_filter: None,
            flame_filter: None,
            last_flow: None,
            personnel: None,
        })
    }

    pub fn device_id(&self) -> &DeviceId {
        self.stamper.device_id()
    }

    pub fn flow_window(&self) -> &RollingWindow {
        &self.flow_window
    }

    fn filter(slot: &mut Option<KalmanState>, z: f64, q: f64, r: f64) -> f64 {
        let state = slot.unwrap_or(KalmanState {
            estimate: z,
            variance: r,
            q,
            r,
        });
        let (next, filtered) = kalman_update(state, z);
        *slot = Some(next);
        filtered
    }

    fn present_uid(&self, at: Timestamp) -> Option<Uid> {
        self.personnel
            .as_ref()
            .filter(|(_, seen)| at.saturating_duration_since(*seen) <= self.config.presence_window)
            .map(|(u, _)| u.clone())
    }

    /// Records a personnel badge scan in the safety zone.
    pub fn personnel_scan(&mut self, uid: Uid, at: Timestamp, out: &mut dyn EventOut) {
        self.personnel = Some((uid.clone(), at));
        let ctx = SafetyContext {
            uid: Some(uid),
            ..Default::default()
        };
        let rec = emit_safety_event(&mut self.stamper, SafetyKind::PersonnelScan, &ctx, at)
            .expect("uid present");
        out.record(rec);
    }

    /// Processes one simultaneous flame + flow reading.
    pub fn sample(
        &mut self,
        flame: FlameSample,
        flow_lpm: f64,
        out: &mut dyn EventOut,
    ) -> Result<SampleOutcome, SafetyError> {
        let mut outcome = SampleOutcome::default();
        let (q, r) = (self.config.kalman_q, self.config.kalman_r);
        Self::filter(&mut self.flame_filter, flame.intensity, q, r);

        if let Some(prev) = self.prev_flame {
            let threshold = flame_threshold(&prev, &flame, &self.config.flame)?;
            outcome.flame_threshold = Some(threshold);
            outcome.flame_present = detect_flame(&flame, threshold);
        }
        self.prev_flame = Some(flame);
        if outcome.flame_present && !self.flame_active {
            outcome.flame_event = true;
            let ctx = SafetyContext {
                uid: self.present_uid(flame.at),
                intensity: Some(flame.intensity),
                flow_lpm: None,
            };
            out.record(emit_safety_event(
                &mut self.stamper,
                SafetyKind::FlameDetected,
                &ctx,
                flame.at,
            )?);
            out.alert(BuzzerAlert {
                device_id: self.stamper.device_id().clone(),
                pattern: AlertPattern::FlameAlarm,
                uid: ctx.uid,
                at: flame.at,
            });
        }
        self.flame_active = outcome.flame_present;

        if flow_lpm < 0.0 || !flow_lpm.is_finite() {
            return Err(SafetyError::NegativeFlow(flow_lpm));
        }
        outcome.window_mean = self.flow_window.mean();
        outcome.window_stddev = self.flow_window.stddev();
        outcome.flow_anomalous = flow_anomaly(&self.flow_window, flow_lpm);
        if outcome.flow_anomalous && !self.flow_active {
            outcome.flow_event = true;
            let ctx = SafetyContext {
                uid: self.present_uid(flame.at),
                flow_lpm: Some(flow_lpm),
                intensity: None,
            };
            out.record(emit_safety_event(
                &mut self.stamper,
                SafetyKind::FlowAnomaly,
                &ctx,
                flame.at,
            )?);
            out.alert(BuzzerAlert {
                device_id: self.stamper.device_id().clone(),
                pattern: AlertPattern::FlowAlarm,
                uid: ctx.uid,
                at: flame.at,
            });
        }
        self.flow_active = outcome.flow_anomalous;
        self.flow_window.push(flow_lpm)?;
        Self::filter(&mut self.flow_filter, flow_lpm, q, r);
        self.last_flow = Some(flow_lpm);
        Ok(outcome)
    }

    /// Emits a periodic status record with the smoothed readings.
    pub fn status(&mut self, at: Timestamp, out: &mut dyn EventOut) {
        let ctx = SafetyContext {
            uid: self.present_uid(at),
            flow_lpm: self.flow_filter.map(|k| k.estimate),
            intensity: self.flame_filter.map(|k| k.estimate),
        };
        let rec = emit_safety_event(&mut self.stamper, SafetyKind::Status, &ctx, at)
            .expect("status has no required fields");
        out.record(rec);
    }
}
