//! Tiered card authentication for an access-control device.
//!
//! A request is validated, then decided from the local policy cache, the
//! cloud authority (bounded by a deadline) or the fallback policy, in that
//! order. Grants drive the gate through a full open/close cycle in simulated
//! time; denials raise a buzzer alert. Every well-formed request that reaches
//! a decision emits exactly one cloud record.

use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CloudRecord, DataMap, EventType, RecordStamper};
use crate::domain::{seconds_of_day, weekday_of, AccessPolicy, DeviceId, Timestamp, Uid};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("malformed uid {0:?}")]
    MalformedUid(String),
    #[error("gate busy until {until}")]
    GateBusy { until: Timestamp },
    #[error("invalid auth config: {0}")]
    InvalidConfig(String),
    #[error("invalid gate transition {from:?} -> {to:?}")]
    InvalidGateTransition { from: GateState, to: GateState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Granted,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Cache,
    Cloud,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    /// Deny whenever neither the cache nor the cloud can decide.
    #[default]
    Deny,
    /// Replay an expired cache entry through the temporal check.
    GrantIfPreviouslyGranted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuthConfig {
    /// Reader detection window. Models reader hardware; the engine never
    /// branches on it.
    pub detection: Duration,
    pub entry: Duration,
    /// Cloud query deadline.
    pub timeout: Duration,
    pub cache_ttl: Duration,
    pub cache_capacity: usize,
    /// Local processing time for a cache-tier decision.
    pub cache_decision: Duration,
    /// Servo travel time between the closed and open angles.
    pub servo_travel: Duration,
    pub open_angle_deg: u16,
    pub closed_angle_deg: u16,
    pub fallback: FallbackMode,
    pub location: String,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            detection: Duration::from_millis(100),
            entry: Duration::from_secs(5),
            timeout: Duration::from_secs(5),
            cache_ttl: Duration::from_secs(86_400),
            cache_capacity: 256,
            cache_decision: Duration::from_millis(20),
            servo_travel: Duration::from_millis(150),
            open_angle_deg: 90,
            closed_angle_deg: 0,
            fallback: FallbackMode::Deny,
            location: "Main_Entrance".into(),
        }
    }
}

impl AuthConfig {
    pub fn validate(&self) -> Result<(), AuthError> {
        let bad = |m: &str| Err(AuthError::InvalidConfig(m.into()));
        if self.detection.is_zero() {
            return bad("detection must be > 0");
        }
        if self.entry.is_zero() {
            return bad("entry must be > 0");
        }
        if self.timeout.is_zero() {
            return bad("timeout must be > 0");
        }
        if self.cache_ttl.is_zero() {
            return bad("cache_ttl must be > 0");
        }
        if self.cache_capacity == 0 {
            return bad("cache_capacity must be > 0");
        }
        if self.open_angle_deg > 180 || self.closed_angle_deg > 180 {
            return bad("servo angles must be within 0..=180");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub uid: Uid,
    pub policy: AccessPolicy,
    pub inserted_at: Timestamp,
    pub ttl: Duration,
}

impl CacheEntry {
    pub fn is_expired(&self, now: Timestamp) -> bool {
        now > self.inserted_at + self.ttl
    }
}

/// Bounded policy cache with per-entry TTL and oldest-insertion eviction.
///
/// Entries found expired on lookup are moved to a stale set so the fallback
/// tier can still consult them.
#[derive(Debug, Clone)]
pub struct PolicyCache {
    capacity: usize,
    live: IndexMap<Uid, CacheEntry>,
    stale: IndexMap<Uid, CacheEntry>,
}

impl PolicyCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            live: IndexMap::new(),
            stale: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn contains(&self, uid: &Uid) -> bool {
        self.live.contains_key(uid)
    }

    /// Returns the entry iff present and unexpired. Expired entries are evicted.
    pub fn lookup(&mut self, uid: &Uid, now: Timestamp) -> Option<&CacheEntry> {
        let expired = self.live.get(uid)?.is_expired(now);
        if expired {
            if let Some(e) = self.live.shift_remove(uid) {
                self.remember_stale(e);
            }
            return None;
        }
        self.live.get(uid)
    }

    /// Inserts or refreshes `uid`. Returns the uid evicted to make room, if any.
    pub fn insert(
        &mut self,
        uid: Uid,
        policy: AccessPolicy,
        now: Timestamp,
        ttl: Duration,
    ) -> Option<Uid> {
        self.stale.shift_remove(&uid);
        self.live.shift_remove(&uid);
        self.live.insert(
            uid.clone(),
            CacheEntry {
                uid,
                policy,
                inserted_at: now,
                ttl,
            },
        );
        if self.live.len() > self.capacity {
            self.live.shift_remove_index(0).map(|(k, _)| k)
        } else {
            None
        }
    }

    /// An expired entry for `uid`, whether already evicted or not.
    pub fn expired_entry(&self, uid: &Uid, now: Timestamp) -> Option<&CacheEntry> {
        match self.live.get(uid) {
            Some(e) if e.is_expired(now) => Some(e),
            Some(_) => None,
            None => self.stale.get(uid),
        }
    }

    fn remember_stale(&mut self, e: CacheEntry) {
        self.stale.insert(e.uid.clone(), e);
        if self.stale.len() > self.capacity {
            self.stale.shift_remove_index(0);
        }
    }
}

/// Canonicalizes a raw reader string into a [`Uid`].
pub fn validate_uid_format(raw: &str) -> Result<Uid, AuthError> {
    Uid::parse(raw).map_err(|_| AuthError::MalformedUid(raw.to_string()))
}

/// Daily window (both ends inclusive) AND allowed weekday.
pub fn check_temporal(policy: &AccessPolicy, t: Timestamp) -> Verdict {
    let sod = seconds_of_day(t);
    let in_window = policy.window_start() <= sod && sod <= policy.window_end();
    if in_window && policy.allowed_days().contains(&weekday_of(t)) {
        Verdict::Granted
    } else {
        Verdict::Denied
    }
}

pub fn cache_lookup<'a>(cache: &'a mut PolicyCache, uid: &Uid, now: Timestamp) -> Option<&'a CacheEntry> {
    cache.lookup(uid, now)
}

pub fn update_cache(
    cache: &mut PolicyCache,
    uid: Uid,
    policy: AccessPolicy,
    now: Timestamp,
    ttl: Duration,
) -> Option<Uid> {
    cache.insert(uid, policy, now, ttl)
}

/// Decision used when the cache missed and the cloud did not answer in time.
pub fn fallback_decision(
    uid: &Uid,
    cache: &PolicyCache,
    now: Timestamp,
    mode: FallbackMode,
) -> Verdict {
    match mode {
        FallbackMode::Deny => Verdict::Denied,
        FallbackMode::GrantIfPreviouslyGranted => cache
            .expired_entry(uid, now)
            .map(|e| check_temporal(&e.policy, now))
            .unwrap_or(Verdict::Denied),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloudReply {
    Policy(AccessPolicy),
    NotFound,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudResponse {
    pub reply: CloudReply,
    /// Time from issuing the query to receiving the reply (or giving up).
    pub elapsed: Duration,
}

/// The authoritative policy store, reached over the network.
pub trait CloudAuthority {
    /// Queries the policy for `uid`. Implementations should give up after
    /// `deadline` and report [`CloudReply::Timeout`].
    fn query_policy(&mut self, uid: &Uid, at: Timestamp, deadline: Duration) -> CloudResponse;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateState {
    Closed,
    Opening,
    Open,
    Closing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateActuator {
    angle_deg: u16,
    state: GateState,
    open_angle_deg: u16,
    closed_angle_deg: u16,
}

impl GateActuator {
    pub fn new(open_angle_deg: u16, closed_angle_deg: u16) -> Self {
        Self {
            angle_deg: closed_angle_deg,
            state: GateState::Closed,
            open_angle_deg,
            closed_angle_deg,
        }
    }

    pub fn state(&self) -> GateState {
        self.state
    }

    pub fn angle_deg(&self) -> u16 {
        self.angle_deg
    }

    /// Moves to the next state in Closed -> Opening -> Open -> Closing -> Closed.
    pub fn transition(&mut self, to: GateState) -> Result<(), AuthError> {
        use GateState::*;
        let ok = matches!(
            (self.state, to),
            (Closed, Opening) | (Opening, Open) | (Open, Closing) | (Closing, Closed)
        );
        if !ok {
            return Err(AuthError::InvalidGateTransition {
                from: self.state,
                to,
            });
        }
        self.state = to;
        match to {
            Open => self.angle_deg = self.open_angle_deg,
            Closed => self.angle_deg = self.closed_angle_deg,
            Opening | Closing => {}
        }
        Ok(())
    }
}

/// Planned transition times for one grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCycle {
    pub opening_at: Timestamp,
    pub open_at: Timestamp,
    pub closing_at: Timestamp,
    pub closed_at: Timestamp,
}

impl GateCycle {
    fn steps(&self) -> [(Timestamp, GateState); 4] {
        [
            (self.opening_at, GateState::Opening),
            (self.open_at, GateState::Open),
            (self.closing_at, GateState::Closing),
            (self.closed_at, GateState::Closed),
        ]
    }

    pub fn open_duration(&self) -> Duration {
        self.closing_at.saturating_duration_since(self.open_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertPattern {
    /// Three short beeps on a denied card.
    AccessDenied,
    /// Continuous tone while a flame is present.
    FlameAlarm,
    /// Two long beeps on a flow anomaly.
    FlowAlarm,
}

impl AlertPattern {
    pub fn name(self) -> &'static str {
        match self {
            AlertPattern::AccessDenied => "triple_short",
            AlertPattern::FlameAlarm => "continuous",
            AlertPattern::FlowAlarm => "double_long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuzzerAlert {
    pub device_id: DeviceId,
    pub pattern: AlertPattern,
    pub uid: Option<Uid>,
    pub at: Timestamp,
}

/// Where an engine sends its cloud records and local alerts.
pub trait EventOut {
    fn record(&mut self, record: CloudRecord);
    fn alert(&mut self, alert: BuzzerAlert);
}

/// Collects emitted events in memory.
#[derive(Debug, Default, Clone)]
pub struct CollectedEvents {
    pub records: Vec<CloudRecord>,
    pub alerts: Vec<BuzzerAlert>,
}

impl EventOut for CollectedEvents {
    fn record(&mut self, record: CloudRecord) {
        self.records.push(record);
    }

    fn alert(&mut self, alert: BuzzerAlert) {
        self.alerts.push(alert);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthResult {
    pub outcome: Verdict,
    pub source: DecisionSource,
    pub decision_latency_ms: u64,
    pub uid: Uid,
    pub at: Timestamp,
}

impl AuthResult {
    pub fn decided_at(&self) -> Timestamp {
        self.at + Duration::from_millis(self.decision_latency_ms)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuthStats {
    pub granted: u64,
    pub denied: u64,
    pub rejected_input: u64,
    pub gate_busy: u64,
    pub cloud_queries: u64,
}

/// Sequential per-device authentication state machine.
#[derive(Debug)]
pub struct AccessController {
    config: AuthConfig,
    cache: PolicyCache,
    gate: GateActuator,
    stamper: RecordStamper,
    cycle: Option<GateCycle>,
    cycle_steps_applied: usize,
    busy_until: Option<Timestamp>,
    stats: AuthStats,
}

impl AccessController {
    pub fn new(device_id: DeviceId, config: AuthConfig) -> Result<Self, AuthError> {
        config.validate()?;
        Ok(Self {
            cache: PolicyCache::new(config.cache_capacity),
            gate: GateActuator::new(config.open_angle_deg, config.closed_angle_deg),
            stamper: RecordStamper::new(device_id),
            cycle: None,
            cycle_steps_applied: 0,
            busy_until: None,
            stats: AuthStats::default(),
            config,
        })
    }

    pub fn config(&self) -> &AuthConfig {
        &self.config
    }

    pub fn device_id(&self) -> &DeviceId {
        self.stamper.device_id()
    }

    pub fn cache(&self) -> &PolicyCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut PolicyCache {
        &mut self.cache
    }

    pub fn gate(&self) -> &GateActuator {
        &self.gate
    }

    pub fn pending_cycle(&self) -> Option<GateCycle> {
        self.cycle
    }

    pub fn stats(&self) -> AuthStats {
        self.stats
    }

    /// Applies every gate transition due at or before `now`, returning them.
    pub fn advance_to(&mut self, now: Timestamp) -> Vec<(Timestamp, GateState)> {
        let mut applied = Vec::new();
        let Some(cycle) = self.cycle else {
            return applied;
        };
        let steps = cycle.steps();
        for &(at, state) in steps.iter().skip(self.cycle_steps_applied) {
            if at > now {
                break;
            }
            // The cycle is built in transition order, so this cannot fail.
            self.gate
                .transition(state)
                .expect("gate cycle steps follow the state machine");
            self.cycle_steps_applied += 1;
            applied.push((at, state));
        }
        if self.cycle_steps_applied == steps.len() {
            self.cycle = None;
            self.cycle_steps_applied = 0;
        }
        applied
    }

    /// Runs one access request to completion.
    ///
    /// `now` is the moment the UID was read. The returned result carries the
    /// decision latency; gate transitions start at `now + latency` and are
    /// applied through [`AccessController::advance_to`].
    pub fn process_request(
        &mut self,
        uid_raw: &str,
        now: Timestamp,
        cloud: &mut dyn CloudAuthority,
        out: &mut dyn EventOut,
    ) -> Result<AuthResult, AuthError> {
        self.advance_to(now);
        let busy = self.busy_until.filter(|&b| now < b);
        if self.gate.state() != GateState::Closed || self.cycle.is_some() || busy.is_some() {
            self.stats.gate_busy += 1;
            let until = self
                .cycle
                .map(|c| c.closed_at)
                .into_iter()
                .chain(busy)
                .max()
                .unwrap_or(now);
            return Err(AuthError::GateBusy { until });
        }
        let uid = match validate_uid_format(uid_raw) {
            Ok(u) => u,
            Err(e) => {
                self.stats.rejected_input += 1;
                return Err(e);
            }
        };

        let (outcome, source, latency) = self.decide(&uid, now, cloud);
        let decided_at = now + latency;

        let mut data = DataMap::new();
        data.insert("uid".into(), uid.as_str().into());
        let event_type = match outcome {
            Verdict::Granted => {
                self.stats.granted += 1;
                let opening_at = decided_at;
                let open_at = opening_at + self.config.servo_travel;
                let closing_at = open_at + self.config.entry;
                let closed_at = closing_at + self.config.servo_travel;
                self.cycle = Some(GateCycle {
                    opening_at,
                    open_at,
                    closing_at,
                    closed_at,
                });
                self.busy_until = Some(closed_at);
                data.insert("gate_status".into(), "open".into());
                data.insert(
                    "duration_ms".into(),
                    (self.config.entry.as_millis() as i64).into(),
                );
                EventType::AccessGranted
            }
            Verdict::Denied => {
                self.stats.denied += 1;
                self.busy_until = Some(decided_at);
                data.insert("gate_status".into(), "closed".into());
                data.insert("duration_ms".into(), 0i64.into());
                out.alert(BuzzerAlert {
                    device_id: self.stamper.device_id().clone(),
                    pattern: AlertPattern::AccessDenied,
                    uid: Some(uid.clone()),
                    at: decided_at,
                });
                EventType::AccessDenied
            }
        };
        data.insert("location".into(), self.config.location.as_str().into());
        out.record(self.stamper.stamp(event_type, now, data));

        Ok(AuthResult {
            outcome,
            source,
            decision_latency_ms: latency.as_millis() as u64,
            uid,
            at: now,
        })
    }

    fn decide(
        &mut self,
        uid: &Uid,
        now: Timestamp,
        cloud: &mut dyn CloudAuthority,
    ) -> (Verdict, DecisionSource, Duration) {
        if let Some(entry) = self.cache.lookup(uid, now) {
            return (
                check_temporal(&entry.policy, now),
                DecisionSource::Cache,
                self.config.cache_decision,
            );
        }
        self.stats.cloud_queries += 1;
        let deadline = self.config.timeout;
        let resp = cloud.query_policy(uid, now, deadline);
        if resp.elapsed > deadline || resp.reply == CloudReply::Timeout {
            let verdict = fallback_decision(uid, &self.cache, now, self.config.fallback);
            return (verdict, DecisionSource::Fallback, deadline);
        }
        match resp.reply {
            CloudReply::Policy(policy) if policy.uid() == uid => {
                let verdict = check_temporal(&policy, now);
                self.cache
                    .insert(uid.clone(), policy, now + resp.elapsed, self.config.cache_ttl);
                (verdict, DecisionSource::Cloud, resp.elapsed)
            }
            _ => (Verdict::Denied, DecisionSource::Cloud, resp.elapsed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Weekday;

    fn uid() -> Uid {
        Uid::parse("A1B2C3D4").unwrap()
    }

    fn weekday_policy(u: Uid) -> AccessPolicy {
        AccessPolicy::new(
            u,
            9 * 3600,
            17 * 3600,
            [
                Weekday::Monday,
                Weekday::Tuesday,
                Weekday::Wednesday,
                Weekday::Thursday,
                Weekday::Friday,
            ],
        )
        .unwrap()
    }

    fn monday(h: u32, m: u32, s: u32) -> Timestamp {
        Timestamp::from_civil(2024, 1, 15, h, m, s)
    }

    struct ScriptedCloud {
        replies: Vec<CloudResponse>,
        calls: usize,
    }

    impl ScriptedCloud {
        fn new(replies: Vec<CloudResponse>) -> Self {
            Self { replies, calls: 0 }
        }
    }

    impl CloudAuthority for ScriptedCloud {
        fn query_policy(&mut self, _uid: &Uid, _at: Timestamp, deadline: Duration) -> CloudResponse {
            self.calls += 1;
            self.replies.get(self.calls - 1).cloned().unwrap_or(CloudResponse {
                reply: CloudReply::Timeout,
                elapsed: deadline,
            })
        }
    }

    fn controller() -> AccessController {
        AccessController::new(DeviceId::parse("AC_001").unwrap(), AuthConfig::default()).unwrap()
    }

    #[test]
    fn uid_validation() {
        assert_eq!(validate_uid_format("A1B2C3D4").unwrap(), uid());
        assert_eq!(validate_uid_format("a1b2c3d4").unwrap(), uid());
        assert_eq!(
            validate_uid_format("A1B2C3"),
            Err(AuthError::MalformedUid("A1B2C3".into()))
        );
    }

    #[test]
    fn temporal_examples() {
        let p = weekday_policy(uid());
        assert_eq!(check_temporal(&p, monday(14, 30, 45)), Verdict::Granted);
        let saturday = Timestamp::from_civil(2024, 1, 20, 10, 0, 0);
        assert_eq!(check_temporal(&p, saturday), Verdict::Denied);
        assert_eq!(check_temporal(&p, monday(9, 0, 0)), Verdict::Granted);
        assert_eq!(check_temporal(&p, monday(17, 0, 0)), Verdict::Granted);
        assert_eq!(check_temporal(&p, monday(17, 0, 1)), Verdict::Denied);
        assert_eq!(check_temporal(&p, monday(8, 59, 59)), Verdict::Denied);
    }

    #[test]
    fn empty_day_set_never_grants() {
        let p = AccessPolicy::new(uid(), 0, 86_399, []).unwrap();
        assert_eq!(check_temporal(&p, monday(12, 0, 0)), Verdict::Denied);
    }

    #[test]
    fn cache_ttl_semantics() {
        let t = monday(10, 0, 0);
        let ttl = Duration::from_secs(3600);
        let mut c = PolicyCache::new(4);
        assert!(cache_lookup(&mut c, &uid(), t).is_none());
        update_cache(&mut c, uid(), weekday_policy(uid()), t, ttl);
        assert!(cache_lookup(&mut c, &uid(), t + Duration::from_secs(1)).is_some());
        assert!(cache_lookup(&mut c, &uid(), t + Duration::from_secs(10)).is_some());
        assert!(cache_lookup(&mut c, &uid(), t + Duration::from_secs(3600)).is_some());
        assert!(cache_lookup(&mut c, &uid(), t + Duration::from_secs(3601)).is_none());
        // Evicted as a side effect, but remembered as stale.
        assert!(!c.contains(&uid()));
        assert!(c.expired_entry(&uid(), t + Duration::from_secs(3601)).is_some());
    }

    #[test]
    fn reinsertion_refreshes_ttl() {
        let t = monday(10, 0, 0);
        let ttl = Duration::from_secs(3600);
        let mut c = PolicyCache::new(4);
        update_cache(&mut c, uid(), weekday_policy(uid()), t, ttl);
        update_cache(&mut c, uid(), weekday_policy(uid()), t + Duration::from_secs(100), ttl);
        assert!(c.lookup(&uid(), t + Duration::from_secs(3650)).is_some());
    }

    #[test]
    fn capacity_evicts_oldest_insertion() {
        let t = monday(10, 0, 0);
        let ttl = Duration::from_secs(3600);
        let mut c = PolicyCache::new(3);
        let uids: Vec<Uid> = (1..=4).map(Uid::from_u32).collect();
        for u in &uids[..3] {
            assert_eq!(c.insert(u.clone(), weekday_policy(u.clone()), t, ttl), None);
        }
        let evicted = c.insert(uids[3].clone(), weekday_policy(uids[3].clone()), t, ttl);
        assert_eq!(evicted, Some(uids[0].clone()));
        assert!(c.lookup(&uids[0], t).is_none());
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn fallback_modes() {
        let t = monday(10, 0, 0);
        let mut c = PolicyCache::new(4);
        assert_eq!(fallback_decision(&uid(), &c, t, FallbackMode::Deny), Verdict::Denied);
        c.insert(uid(), weekday_policy(uid()), t, Duration::from_secs(60));
        let later = monday(11, 0, 0);
        assert_eq!(
            fallback_decision(&uid(), &c, later, FallbackMode::Deny),
            Verdict::Denied
        );
        // Expired entry replayed through the temporal check: 11:00 Monday is inside.
        assert_eq!(
            fallback_decision(&uid(), &c, later, FallbackMode::GrantIfPreviouslyGranted),
            Verdict::Granted
        );
        let evening = monday(20, 0, 0);
        assert_eq!(
            fallback_decision(&uid(), &c, evening, FallbackMode::GrantIfPreviouslyGranted),
            Verdict::Denied
        );
        // Unexpired entries are not fallback material.
        assert_eq!(
            fallback_decision(&uid(), &c, t, FallbackMode::GrantIfPreviouslyGranted),
            Verdict::Denied
        );
    }

    #[test]
    fn gate_state_machine() {
        let mut g = GateActuator::new(90, 0);
        assert!(g.transition(GateState::Open).is_err());
        for s in [GateState::Opening, GateState::Open, GateState::Closing, GateState::Closed] {
            g.transition(s).unwrap();
            match s {
                GateState::Open => assert_eq!(g.angle_deg(), 90),
                GateState::Closed => assert_eq!(g.angle_deg(), 0),
                _ => {}
            }
        }
    }

    #[test]
    fn grant_from_cache_cycles_gate() {
        let mut ctl = controller();
        let t = monday(14, 30, 45);
        ctl.cache_mut()
            .insert(uid(), weekday_policy(uid()), t, Duration::from_secs(3600));
        let mut cloud = ScriptedCloud::new(vec![]);
        let mut out = CollectedEvents::default();
        let r = ctl.process_request("A1B2C3D4", t, &mut cloud, &mut out).unwrap();
        assert_eq!(r.outcome, Verdict::Granted);
        assert_eq!(r.source, DecisionSource::Cache);
        assert_eq!(cloud.calls, 0);
        assert_eq!(out.records.len(), 1);
        let rec = &out.records[0];
        assert_eq!(rec.event_type, EventType::AccessGranted);
        assert_eq!(rec.get("gate_status"), Some(&"open".into()));
        assert_eq!(rec.get("duration_ms"), Some(&5000i64.into()));
        assert_eq!(rec.get("location"), Some(&"Main_Entrance".into()));

        let cycle = ctl.pending_cycle().unwrap();
        assert_eq!(cycle.open_duration(), Duration::from_secs(5));
        let steps = ctl.advance_to(cycle.closed_at);
        let states: Vec<GateState> = steps.iter().map(|s| s.1).collect();
        assert_eq!(
            states,
            vec![GateState::Opening, GateState::Open, GateState::Closing, GateState::Closed]
        );
        assert_eq!(steps[2].0.millis_since(steps[1].0), 5000);
        assert_eq!(ctl.gate().state(), GateState::Closed);
        assert!(ctl.pending_cycle().is_none());
    }

    #[test]
    fn cloud_grant_populates_cache() {
        let mut ctl = controller();
        let t = monday(14, 30, 45);
        let mut cloud = ScriptedCloud::new(vec![CloudResponse {
            reply: CloudReply::Policy(weekday_policy(uid())),
            elapsed: Duration::from_millis(1200),
        }]);
        let mut out = CollectedEvents::default();
        let r = ctl.process_request("A1B2C3D4", t, &mut cloud, &mut out).unwrap();
        assert_eq!(
            (r.outcome, r.source, r.decision_latency_ms),
            (Verdict::Granted, DecisionSource::Cloud, 1200)
        );
        assert!(ctl.cache().contains(&uid()));
    }

    #[test]
    fn unknown_uid_timeout_falls_back_to_deny() {
        let mut ctl = controller();
        let t = monday(14, 30, 45);
        let mut cloud = ScriptedCloud::new(vec![]);
        let mut out = CollectedEvents::default();
        let r = ctl.process_request("DEADBEEF", t, &mut cloud, &mut out).unwrap();
        assert_eq!((r.outcome, r.source), (Verdict::Denied, DecisionSource::Fallback));
        assert_eq!(r.decision_latency_ms, 5000);
        assert_eq!(out.records[0].event_type, EventType::AccessDenied);
        assert_eq!(out.alerts.len(), 1);
        assert_eq!(out.alerts[0].pattern.name(), "triple_short");
    }

    #[test]
    fn late_cloud_reply_counts_as_timeout() {
        let mut ctl = controller();
        let t = monday(14, 30, 45);
        let mut cloud = ScriptedCloud::new(vec![CloudResponse {
            reply: CloudReply::Policy(weekday_policy(uid())),
            elapsed: Duration::from_millis(5001),
        }]);
        let mut out = CollectedEvents::default();
        let r = ctl.process_request("A1B2C3D4", t, &mut cloud, &mut out).unwrap();
        assert_eq!(r.source, DecisionSource::Fallback);
        assert!(!ctl.cache().contains(&uid()));
    }

    #[test]
    fn not_found_denies_from_cloud() {
        let mut ctl = controller();
        let mut cloud = ScriptedCloud::new(vec![CloudResponse {
            reply: CloudReply::NotFound,
            elapsed: Duration::from_millis(900),
        }]);
        let mut out = CollectedEvents::default();
        let r = ctl
            .process_request("0BADCAFE", monday(10, 0, 0), &mut cloud, &mut out)
            .unwrap();
        assert_eq!((r.outcome, r.source), (Verdict::Denied, DecisionSource::Cloud));
    }

    #[test]
    fn malformed_uid_emits_nothing() {
        let mut ctl = controller();
        let mut cloud = ScriptedCloud::new(vec![]);
        let mut out = CollectedEvents::default();
        let err = ctl
            .process_request("A1B2", monday(10, 0, 0), &mut cloud, &mut out)
            .unwrap_err();
        assert_eq!(err, AuthError::MalformedUid("A1B2".into()));
        assert!(out.records.is_empty() && out.alerts.is_empty());
        assert_eq!(cloud.calls, 0);
        assert_eq!(ctl.stats().rejected_input, 1);
    }

    #[test]
    fn request_during_gate_cycle_is_refused() {
        let mut ctl = controller();
        let t = monday(14, 0, 0);
        ctl.cache_mut()
            .insert(uid(), weekday_policy(uid()), t, Duration::from_secs(3600));
        let mut cloud = ScriptedCloud::new(vec![]);
        let mut out = CollectedEvents::default();
        ctl.process_request("A1B2C3D4", t, &mut cloud, &mut out).unwrap();
        let during = t + Duration::from_secs(2);
        assert!(matches!(
            ctl.process_request("A1B2C3D4", during, &mut cloud, &mut out),
            Err(AuthError::GateBusy { .. })
        ));
        assert_eq!(out.records.len(), 1);
        let after = ctl.pending_cycle().unwrap().closed_at;
        assert!(ctl.process_request("A1B2C3D4", after, &mut cloud, &mut out).is_ok());
        assert_eq!(ctl.stats().gate_busy, 1);
    }

    #[test]
    fn config_validation() {
        let mut c = AuthConfig::default();
        assert!(c.validate().is_ok());
        c.entry = Duration::ZERO;
        assert!(c.validate().is_err());
    }
}
