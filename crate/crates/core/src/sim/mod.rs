//! Deterministic discrete-event simulation of access and safety devices
//! talking to the mock sink over a faulty network.

pub mod network;
pub mod replay;
pub mod scenario;
pub mod trace;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use thiserror::Error;

use crate::auth::{
    check_temporal, AccessController, AuthError, BuzzerAlert, CloudReply, CollectedEvents,
    DecisionSource, Verdict,
};
use crate::codec::CloudRecord;
use crate::domain::{AccessPolicy, DeviceId, Timestamp, Uid, Weekday};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::safety::{FlameSample, SafetyMonitor, FLOW_WINDOW};
use crate::sink::{AuthzTable, CloudSink};
use crate::sync::{Enqueued, FlushStep, Outbox, SyncError, Uplink, UplinkCounters};

pub use network::{inject_partition, sample_latency, Fabric, Link, NetworkError, NetworkModel};
pub use scenario::{ConfigError, Diagnostic, Scenario};
pub use trace::{
    DecisionOutcome, Detector, EventTrace, GroundTruth, LabeledEpisode, LabeledRequest,
    QueryReply, RequestLabel, TraceEvent, TraceLine,
};

const SIM_TOKEN: &str = "sim-token";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario:\n{0}")]
    Config(#[from] ConfigError),
    #[error("engine failure: {0}")]
    Engine(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// FNV-1a, used to derive stable stream ids and run ids.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// An independent random stream for one named component.
pub fn rng_stream(seed: u64, component: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(component.as_bytes()));
    rng
}

/// Virtual clock with a priority queue of pending events. Events with equal
/// due times fire in scheduling order.
#[derive(Debug)]
pub struct SimClock<E> {
    now: Timestamp,
    next_seq: u64,
    queue: BinaryHeap<Pending<E>>,
}

#[derive(Debug)]
struct Pending<E> {
    due: Timestamp,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

impl<E> SimClock<E> {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: start,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Schedules `event`; times in the past are moved up to now.
    pub fn schedule(&mut self, due: Timestamp, event: E) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending {
            due: due.max(self.now),
            seq,
            event,
        });
    }

    pub fn peek_due(&self) -> Option<Timestamp> {
        self.queue.peek().map(|p| p.due)
    }

    pub fn pop(&mut self) -> Option<(Timestamp, E)> {
        let p = self.queue.pop()?;
        self.now = p.due;
        Some((p.due, p.event))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug)]
enum Ev {
    Arrival { dev: usize },
    CardRead { dev: usize, req: u64 },
    GateAdvance { dev: usize },
    Emit { dev: usize, records: Vec<CloudRecord> },
    Flush { link: usize },
    Sample { dev: usize },
    Status { dev: usize },
    Personnel { dev: usize },
    QueueSample,
}

#[derive(Debug, Clone)]
enum Card {
    Provisioned(Uid),
    Unprovisioned(Uid),
    Malformed(String),
}

struct AccessDev {
    id: DeviceId,
    ctl: AccessController,
    workload: scenario::AccessWorkload,
    detection: Duration,
    rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    timeout: Duration,
    link: usize,
    generated: u64,
}

struct SafetyDev {
    id: DeviceId,
    cfg: scenario::SafetyDeviceConfig,
    mon: SafetyMonitor,
    sensor_rng: ChaCha8Rng,
    personnel_rng: ChaCha8Rng,
    link: usize,
}

struct UplinkSlot {
    device: DeviceId,
    uplink: Uplink,
    rng: ChaCha8Rng,
    timeout: Duration,
    scheduled: bool,
    free_at: Timestamp,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct SimOutput {
    pub trace: EventTrace,
    pub truth: GroundTruth,
    pub report: MetricsReport,
    pub sink: CloudSink,
    pub uplinks: Vec<(DeviceId, UplinkCounters)>,
}

/// Stable identity of a scenario, shared by its trace and ground truth.
pub fn run_id(scenario: &Scenario) -> String {
    format!("{:016x}", fnv1a(scenario.to_toml_string().as_bytes()))
}

/// Cards in the authorization table: explicit policies, then generated ones.
pub fn provision(scenario: &Scenario) -> AuthzTable {
    let mut table: AuthzTable = scenario.authz.policies.iter().cloned().collect();
    let mut rng = rng_stream(scenario.seed, "authz");
    let mut made = 0;
    while made < scenario.authz.generated {
        let uid = Uid::from_u32(rng.random());
        if table.get(&uid).is_some() {
            continue;
        }
        let start = rng.random_range(5..=10) * 3600;
        let end = rng.random_range(15..=21) * 3600;
        let days: Vec<Weekday> = if rng.random_bool(0.7) {
            Weekday::ALL[..5].to_vec()
        } else {
            Weekday::ALL.to_vec()
        };
        table.insert(AccessPolicy::new(uid, start, end, days).expect("generated policy is valid"));
        made += 1;
    }
    table
}

pub fn run(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    Sim::new(scenario)?.run()
}

struct Sim<'a> {
    scenario: &'a Scenario,
    end: Timestamp,
    clock: SimClock<Ev>,
    trace: EventTrace,
    truth: GroundTruth,
    fabric: Fabric,
    provisioned: Vec<AccessPolicy>,
    access: Vec<AccessDev>,
    safety: Vec<SafetyDev>,
    links: Vec<UplinkSlot>,
    requests: Vec<Card>,
    last_depth: u64,
}

fn engine<E: std::fmt::Display>(e: E) -> SimError {
    SimError::Engine(e.to_string())
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        let seed = scenario.seed;
        let start = scenario.start;
        let at = |s: f64| start + scenario::secs(s);

        let n = &scenario.network;
        let mut network = NetworkModel::default();
        network.latency_mean_s = n.latency_mean_s;
        network.latency_stddev_s = n.latency_stddev_s;
        network.latency_floor_s = n.latency_floor_s;
        network.drop_prob = n.drop_prob;
        network.ack_drop_prob = n.ack_drop_prob;
        network.duplicate_prob = n.duplicate_prob;
        for p in &scenario.faults.partitions {
            inject_partition(&mut network, at(p.start_s), at(p.end_s)).map_err(engine)?;
        }
        for w in &scenario.faults.drop_schedule {
            network.add_drop_window(at(w.start_s), at(w.end_s), w.drop_prob);
        }
        let authz = provision(scenario);
        let provisioned: Vec<AccessPolicy> = authz.iter().cloned().collect();
        let fabric = Fabric {
            network,
            sink: CloudSink::new(SIM_TOKEN, authz),
            token: SIM_TOKEN.into(),
            sink_outages: scenario
                .faults
                .sink_outages
                .iter()
                .map(|o| (at(o.start_s), at(o.end_s)))
                .collect(),
        };

        let mut links = Vec::new();
        let mut add_link = |id: &DeviceId, cfg: &scenario::UplinkConfig| -> Result<usize, SimError> {
            let outbox = Outbox::new(cfg.capacity, cfg.overflow);
            let mut uplink = Uplink::new(outbox, cfg.retry_policy()).map_err(engine)?;
            if cfg.jitter > 0.0 {
                let jitter_seed = rng_stream(seed, &format!("jitter/{id}")).random();
                uplink = uplink.with_jitter(cfg.jitter, jitter_seed);
            }
            links.push(UplinkSlot {
                device: id.clone(),
                uplink,
                rng: rng_stream(seed, &format!("uplink/{id}")),
                timeout: cfg.send_timeout(),
                scheduled: false,
                free_at: start,
            });
            Ok(links.len() - 1)
        };

        let mut access = Vec::new();
        for d in &scenario.access_devices {
            let id = DeviceId::parse(&d.id).map_err(engine)?;
            let cfg = d.auth_config();
            access.push(AccessDev {
                ctl: AccessController::new(id.clone(), cfg.clone()).map_err(engine)?,
                workload: d.workload.clone(),
                detection: cfg.detection,
                rng: rng_stream(seed, &format!("workload/{id}")),
                net_rng: rng_stream(seed, &format!("network/{id}")),
                timeout: cfg.timeout,
                link: add_link(&id, &d.uplink)?,
                generated: 0,
                id,
            });
        }
        let mut safety = Vec::new();
        for d in &scenario.safety_devices {
            let id = DeviceId::parse(&d.id).map_err(engine)?;
            safety.push(SafetyDev {
                mon: SafetyMonitor::new(id.clone(), d.monitor_config()).map_err(engine)?,
                cfg: d.clone(),
                sensor_rng: rng_stream(seed, &format!("sensors/{id}")),
                personnel_rng: rng_stream(seed, &format!("personnel/{id}")),
                link: add_link(&id, &d.uplink)?,
                id,
            });
        }

        let run_id = run_id(scenario);
        Ok(Self {
            scenario,
            end: scenario.end(),
            clock: SimClock::new(start),
            trace: EventTrace::default(),
            truth: GroundTruth::new(run_id),
            fabric,
            provisioned,
            access,
            safety,
            links,
            requests: Vec::new(),
            last_depth: 0,
        })
    }

    fn run(mut self) -> Result<SimOutput, SimError> {
        let start = self.scenario.start;
        self.trace.push(
            start,
            TraceEvent::SimStart {
                run_id: self.truth.run_id.clone(),
                scenario: self.scenario.name.clone(),
                seed: self.scenario.seed,
                start,
                duration_s: self.scenario.duration_s,
            },
        );
        self.label_episodes();
        for dev in 0..self.access.len() {
            self.schedule_arrival(dev, start);
        }
        for dev in 0..self.safety.len() {
            let period = Duration::from_millis(self.safety[dev].cfg.sample_period_ms);
            let status = Duration::from_secs(self.safety[dev].cfg.status_interval_s);
            self.schedule(start + period, Ev::Sample { dev });
            self.schedule(start + status, Ev::Status { dev });
            self.schedule_personnel(dev, start);
        }
        if !self.links.is_empty() {
            self.schedule(start + self.sample_interval(), Ev::QueueSample);
        }

        while let Some(due) = self.clock.peek_due() {
            if due > self.end {
                break;
            }
            let (now, ev) = self.clock.pop().expect("peeked");
            self.handle(now, ev)?;
        }
        if !self.links.is_empty() {
            self.sample_depth(self.end);
        }

        let totals = self.totals();
        self.trace.push(
            self.end,
            TraceEvent::SimEnd {
                offered: totals.offered,
                delivered: totals.delivered,
                queued: totals.queued,
                dead_lettered: totals.dead_lettered,
                lost: totals.dropped,
            },
        );
        let report = compute_metrics(&self.trace, &self.truth)?;
        Ok(SimOutput {
            report,
            uplinks: self
                .links
                .iter()
                .map(|l| (l.device.clone(), l.uplink.counters()))
                .collect(),
            trace: self.trace,
            truth: self.truth,
            sink: self.fabric.sink,
        })
    }

    fn schedule(&mut self, at: Timestamp, ev: Ev) {
        if at <= self.end {
            self.clock.schedule(at, ev);
        }
    }

    /// Logs total outbox depth when it differs from the last logged value.
    fn sample_depth(&mut self, now: Timestamp) {
        let depth: u64 = self.links.iter().map(|l| l.uplink.depth() as u64).sum();
        if depth != self.last_depth {
            self.trace.push(now, TraceEvent::QueueDepth { depth });
            self.last_depth = depth;
        }
    }

    fn sample_interval(&self) -> Duration {
        Duration::from_secs(self.scenario.queue_sample_interval_s)
    }

    fn totals(&self) -> UplinkCounters {
        self.links.iter().fold(UplinkCounters::default(), |mut acc, l| {
            let c = l.uplink.counters();
            acc.offered += c.offered;
            acc.delivered += c.delivered;
            acc.queued += c.queued;
            acc.dead_lettered += c.dead_lettered;
            acc.dropped += c.dropped;
            acc.attempts += c.attempts;
            acc.stale_acks += c.stale_acks;
            acc
        })
    }

    fn label_episodes(&mut self) {
        let start = self.scenario.start;
        let ms = |s: f64| (start + scenario::secs(s)).as_millis();
        for d in &self.safety {
            let period = d.cfg.sample_period_ms as i64;
            for e in &d.cfg.flame_trace.episodes {
                self.truth.episodes.push(LabeledEpisode {
                    device: d.id.clone(),
                    detector: Detector::Flame,
                    start_ms: ms(e.start_s),
                    end_ms: ms(e.start_s + e.duration_s),
                    match_until_ms: ms(e.start_s + e.duration_s) + period,
                });
            }
            for a in &d.cfg.flow_trace.anomalies {
                // The rolling window needs a full refill after the step ends,
                // so the return to baseline is attributed to the episode.
                self.truth.episodes.push(LabeledEpisode {
                    device: d.id.clone(),
                    detector: Detector::Flow,
                    start_ms: ms(a.start_s),
                    end_ms: ms(a.start_s + a.duration_s),
                    match_until_ms: ms(a.start_s + a.duration_s) + period * FLOW_WINDOW as i64,
                });
            }
        }
    }

    fn handle(&mut self, now: Timestamp, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Arrival { dev } => self.on_arrival(now, dev),
            Ev::CardRead { dev, req } => self.on_card_read(now, dev, req)?,
            Ev::GateAdvance { dev } => self.advance_gate(now, dev),
            Ev::Emit { dev, records } => {
                let link = self.access[dev].link;
                for r in records {
                    self.enqueue(now, link, r);
                }
            }
            Ev::Flush { link } => self.on_flush(now, link),
            Ev::Sample { dev } => self.on_sample(now, dev)?,
            Ev::Status { dev } => {
                let mut out = CollectedEvents::default();
                self.safety[dev].mon.status(now, &mut out);
                self.emit_safety(now, dev, out);
                let next = now + Duration::from_secs(self.safety[dev].cfg.status_interval_s);
                self.schedule(next, Ev::Status { dev });
            }
            Ev::Personnel { dev } => self.on_personnel(now, dev),
            Ev::QueueSample => {
                self.sample_depth(now);
                let next = now + self.sample_interval();
                self.schedule(next, Ev::QueueSample);
            }
        }
        Ok(())
    }

    fn schedule_arrival(&mut self, dev: usize, from: Timestamp) {
        let d = &mut self.access[dev];
        let w = &d.workload;
        if w.rate_per_hour <= 0.0 || w.max_requests.is_some_and(|m| d.generated >= m) {
            return;
        }
        let gap: f64 = d.rng.sample::<f64, _>(Exp1) * 3600.0 / w.rate_per_hour;
        let at = from + scenario::secs(gap);
        self.schedule(at, Ev::Arrival { dev });
    }

    fn random_unprovisioned(&self, rng: &mut ChaCha8Rng) -> Uid {
        loop {
            let uid = Uid::from_u32(rng.random());
            if self.fabric.sink.authz().get(&uid).is_none() {
                return uid;
            }
        }
    }

    fn on_arrival(&mut self, now: Timestamp, dev: usize) {
        let mut rng = self.access[dev].rng.clone();
        let w = self.access[dev].workload.clone();
        let u: f64 = rng.random();
        let card = if u < w.malformed_fraction {
            Card::Malformed(malformed_read(&mut rng))
        } else if u < w.malformed_fraction + w.authorized_fraction && !self.provisioned.is_empty() {
            let i = rng.random_range(0..self.provisioned.len());
            Card::Provisioned(self.provisioned[i].uid().clone())
        } else {
            Card::Unprovisioned(self.random_unprovisioned(&mut rng))
        };
        self.access[dev].rng = rng;
        let req = self.requests.len() as u64;
        self.requests.push(card);
        self.access[dev].generated += 1;
        let read_at = now + self.access[dev].detection;
        self.schedule(read_at, Ev::CardRead { dev, req });
        self.schedule_arrival(dev, now);
    }

    fn advance_gate(&mut self, now: Timestamp, dev: usize) {
        let d = &mut self.access[dev];
        for (at, state) in d.ctl.advance_to(now) {
            self.trace.push(
                at.max(now),
                TraceEvent::Gate {
                    device: d.id.clone(),
                    state,
                },
            );
        }
    }

    fn on_card_read(&mut self, now: Timestamp, dev: usize, req: u64) -> Result<(), SimError> {
        self.advance_gate(now, dev);
        let card = self.requests[req as usize].clone();
        let mut rng = self.access[dev].rng.clone();
        let u_misread: f64 = rng.random();
        let w = &self.access[dev].workload;
        let (label, mut raw) = match &card {
            Card::Malformed(s) => (RequestLabel::Malformed, s.clone()),
            Card::Provisioned(uid) => {
                let policy = self.fabric.sink.authz().get(uid).expect("provisioned");
                let label = match check_temporal(policy, now) {
                    Verdict::Granted => RequestLabel::Authorized,
                    Verdict::Denied => RequestLabel::Unauthorized,
                };
                (label, uid.to_string())
            }
            Card::Unprovisioned(uid) => (RequestLabel::Unauthorized, uid.to_string()),
        };
        match label {
            RequestLabel::Authorized if u_misread < w.misread_reject_rate => {
                raw = self.random_unprovisioned(&mut rng).to_string();
            }
            RequestLabel::Unauthorized if u_misread < w.misread_accept_rate => {
                let candidates: Vec<&AccessPolicy> = self
                    .provisioned
                    .iter()
                    .filter(|p| check_temporal(p, now) == Verdict::Granted)
                    .collect();
                if !candidates.is_empty() {
                    raw = candidates[rng.random_range(0..candidates.len())].uid().to_string();
                }
            }
            _ => {}
        }
        self.access[dev].rng = rng;

        let device = self.access[dev].id.clone();
        self.trace.push(
            now,
            TraceEvent::CardRead {
                request: req,
                device: device.clone(),
                uid: raw.clone(),
            },
        );

        let mut out = CollectedEvents::default();
        let d = &mut self.access[dev];
        let mut link = Link::new(&mut self.fabric, &mut d.net_rng, d.timeout);
        let result = d.ctl.process_request(&raw, now, &mut link, &mut out);
        let query = link.last_query.take();

        if let (Some(q), Ok(uid)) = (query, Uid::parse(&raw)) {
            let reply = match q.reply {
                CloudReply::Policy(policy) => QueryReply::Policy { policy },
                CloudReply::NotFound => QueryReply::NotFound,
                CloudReply::Timeout => QueryReply::Timeout,
            };
            self.trace.push(
                now,
                TraceEvent::CloudQuery {
                    request: req,
                    device: device.clone(),
                    uid,
                    reply,
                    elapsed_ms: q.elapsed.as_millis() as u64,
                },
            );
        }

        let decision = |outcome, source: Option<DecisionSource>, latency_ms| TraceEvent::Decision {
            request: req,
            device: device.clone(),
            outcome,
            source,
            latency_ms,
        };
        match result {
            Ok(r) => {
                let outcome = match r.outcome {
                    Verdict::Granted => DecisionOutcome::Granted,
                    Verdict::Denied => DecisionOutcome::Denied,
                };
                self.trace
                    .push(now, decision(outcome, Some(r.source), r.decision_latency_ms));
                self.label(req, &device, label);
                self.log_alerts(now, &out.alerts);
                let decided = r.decided_at();
                if let Some(cycle) = self.access[dev].ctl.pending_cycle() {
                    for at in [cycle.opening_at, cycle.open_at, cycle.closing_at, cycle.closed_at] {
                        self.schedule(at, Ev::GateAdvance { dev });
                    }
                }
                self.schedule(decided, Ev::Emit { dev, records: out.records });
            }
            Err(AuthError::MalformedUid(_)) => {
                self.trace
                    .push(now, decision(DecisionOutcome::RejectedInput, None, 0));
                self.label(req, &device, label);
            }
            Err(AuthError::GateBusy { until }) => {
                self.trace.push(now, decision(DecisionOutcome::GateBusy, None, 0));
                // The person waits and presents the card again.
                let retry = until + self.access[dev].detection;
                self.schedule(retry, Ev::CardRead { dev, req });
            }
            Err(e) => return Err(engine(e)),
        }
        Ok(())
    }

    fn label(&mut self, req: u64, device: &DeviceId, label: RequestLabel) {
        self.truth.requests.push(LabeledRequest {
            request: req,
            device: device.clone(),
            label,
        });
    }

    fn log_alerts(&mut self, now: Timestamp, alerts: &[BuzzerAlert]) {
        for a in alerts {
            self.trace.push(
                now,
                TraceEvent::Alert {
                    device: a.device_id.clone(),
                    pattern: a.pattern,
                    uid: a.uid.clone(),
                },
            );
        }
    }

    fn enqueue(&mut self, now: Timestamp, link: usize, record: CloudRecord) {
        let slot = &mut self.links[link];
        let device = slot.device.clone();
        let envelope = crate::codec::encode(&record)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or(serde_json::Value::Null);
        let key = crate::codec::idempotency_key(&record);
        match slot.uplink.enqueue(record, now) {
            Ok(result) => {
                if let Enqueued::DroppedOldest(old) = result {
                    self.trace.push(
                        now,
                        TraceEvent::DroppedOldest {
                            device: device.clone(),
                            key: old,
                        },
                    );
                }
                let depth = slot.uplink.depth() as u64;
                self.trace.push(
                    now,
                    TraceEvent::Enqueue {
                        device,
                        key,
                        depth,
                        record: envelope,
                    },
                );
                if !slot.scheduled {
                    slot.scheduled = true;
                    let at = slot.free_at.max(now);
                    self.schedule(at, Ev::Flush { link });
                }
            }
            Err(SyncError::QueueFull { .. }) => {
                self.trace.push(now, TraceEvent::QueueFull { device, key });
            }
            Err(e) => {
                // Only codec failures remain, and stamped records always encode.
                debug_assert!(false, "enqueue failed: {e}");
            }
        }
    }

    fn on_flush(&mut self, now: Timestamp, link: usize) {
        let slot = &mut self.links[link];
        slot.scheduled = false;
        let device = slot.device.clone();
        let mut transport = Link::new(&mut self.fabric, &mut slot.rng, slot.timeout);
        let step = slot.uplink.step(now, &mut transport);
        let next = match step {
            FlushStep::Idle => None,
            FlushStep::Delivered { receipt, elapsed } => {
                self.trace.push(
                    now,
                    TraceEvent::Send {
                        device: device.clone(),
                        key: receipt.key.clone(),
                        attempt: receipt.attempts,
                        result: crate::sync::SendOutcome::Ack {
                            row_index: receipt.row_index,
                            key: receipt.key.clone(),
                        },
                        elapsed_ms: elapsed.as_millis() as u64,
                    },
                );
                self.trace.push(
                    now,
                    TraceEvent::Delivered {
                        device,
                        latency_ms: receipt.acked_at.millis_since(receipt.enqueued_at).max(0) as u64,
                        key: receipt.key,
                        row_index: receipt.row_index,
                        attempts: receipt.attempts,
                    },
                );
                Some(now + elapsed)
            }
            FlushStep::Failed {
                key,
                attempt,
                outcome,
                elapsed,
                retry_after,
            } => {
                self.trace.push(
                    now,
                    TraceEvent::Send {
                        device,
                        key,
                        attempt,
                        result: outcome,
                        elapsed_ms: elapsed.as_millis() as u64,
                    },
                );
                Some(now + elapsed + retry_after)
            }
            FlushStep::DeadLettered {
                key,
                attempts,
                outcome,
                elapsed,
            } => {
                self.trace.push(
                    now,
                    TraceEvent::Send {
                        device: device.clone(),
                        key: key.clone(),
                        attempt: attempts,
                        result: outcome,
                        elapsed_ms: elapsed.as_millis() as u64,
                    },
                );
                self.trace.push(now, TraceEvent::DeadLetter { device, key, attempts });
                Some(now + elapsed)
            }
        };
        let slot = &mut self.links[link];
        if let Some(at) = next {
            slot.free_at = at;
            if slot.uplink.depth() > 0 {
                slot.scheduled = true;
                self.schedule(at, Ev::Flush { link });
            }
        }
    }

    fn on_sample(&mut self, now: Timestamp, dev: usize) -> Result<(), SimError> {
        let d = &mut self.safety[dev];
        let offset_s = now.millis_since(self.scenario.start) as f64 / 1000.0;
        let ft = &d.cfg.flame_trace;
        let mut intensity = ft.baseline;
        for e in &ft.episodes {
            if e.start_s <= offset_s && offset_s < e.start_s + e.duration_s {
                intensity = intensity.max(ft.baseline + (e.peak - ft.baseline) * (1.0 - e.difficulty));
            }
        }
        let n1: f64 = d.sensor_rng.sample(StandardNormal);
        let n2: f64 = d.sensor_rng.sample(StandardNormal);
        let n3: f64 = d.sensor_rng.sample(StandardNormal);
        let intensity = (intensity + ft.noise * n1).max(0.0);
        let ambient = (ft.ambient + ft.ambient_noise * n2).max(0.0);
        let fl = &d.cfg.flow_trace;
        let mut flow = fl.baseline_lpm;
        for a in &fl.anomalies {
            if a.start_s <= offset_s && offset_s < a.start_s + a.duration_s {
                flow += a.offset_lpm;
            }
        }
        let flow = (flow + fl.noise_lpm * n3).max(0.0);

        let device = d.id.clone();
        self.trace.push(
            now,
            TraceEvent::Sample {
                device: device.clone(),
                intensity,
                ambient,
                flow_lpm: flow,
            },
        );
        let sample = FlameSample {
            intensity,
            ambient,
            at: now,
        };
        let mut out = CollectedEvents::default();
        let outcome = d.mon.sample(sample, flow, &mut out).map_err(engine)?;
        if outcome.flame_event {
            self.trace.push(
                now,
                TraceEvent::FlameDetected {
                    device: device.clone(),
                    intensity,
                    threshold: outcome.flame_threshold.unwrap_or(f64::NAN),
                },
            );
        }
        if outcome.flow_event {
            self.trace.push(
                now,
                TraceEvent::FlowAnomaly {
                    device,
                    flow_lpm: flow,
                    mean: outcome.window_mean,
                    stddev: outcome.window_stddev,
                },
            );
        }
        self.emit_safety(now, dev, out);
        let next = now + Duration::from_millis(self.safety[dev].cfg.sample_period_ms);
        self.schedule(next, Ev::Sample { dev });
        Ok(())
    }

    fn emit_safety(&mut self, now: Timestamp, dev: usize, out: CollectedEvents) {
        self.log_alerts(now, &out.alerts);
        let link = self.safety[dev].link;
        for r in out.records {
            self.enqueue(now, link, r);
        }
    }

    fn schedule_personnel(&mut self, dev: usize, from: Timestamp) {
        let d = &mut self.safety[dev];
        let rate = d.cfg.personnel_scan_rate_per_hour;
        if rate <= 0.0 {
            return;
        }
        let gap: f64 = d.personnel_rng.sample::<f64, _>(Exp1) * 3600.0 / rate;
        let at = from + scenario::secs(gap);
        self.schedule(at, Ev::Personnel { dev });
    }

    fn on_personnel(&mut self, now: Timestamp, dev: usize) {
        let mut rng = self.safety[dev].personnel_rng.clone();
        let uid = if self.provisioned.is_empty() {
            self.random_unprovisioned(&mut rng)
        } else {
            self.provisioned[rng.random_range(0..self.provisioned.len())].uid().clone()
        };
        self.safety[dev].personnel_rng = rng;
        self.trace.push(
            now,
            TraceEvent::PersonnelScan {
                device: self.safety[dev].id.clone(),
                uid: uid.clone(),
            },
        );
        let mut out = CollectedEvents::default();
        self.safety[dev].mon.personnel_scan(uid, now, &mut out);
        self.emit_safety(now, dev, out);
        self.schedule_personnel(dev, now);
    }
}

/// A read that cannot be a UID: wrong length or non-hex characters.
fn malformed_read(rng: &mut ChaCha8Rng) -> String {
    const NON_HEX: &[u8] = b"GHJKLMNPQRSTUVWXYZ";
    match rng.random_range(0..3) {
        0 => {
            let len = rng.random_range(0..8);
            (0..len).map(|_| format!("{:X}", rng.random_range(0..16u8))).collect()
        }
        1 => {
            let mut s: Vec<u8> = format!("{:08X}", rng.random::<u32>()).into_bytes();
            let i = rng.random_range(0..8);
            s[i] = NON_HEX[rng.random_range(0..NON_HEX.len())];
            String::from_utf8(s).expect("ascii")
        }
        _ => format!("{:010X}", rng.random::<u64>() & 0xFF_FFFF_FFFF),
    }
}
