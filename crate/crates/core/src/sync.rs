//! Store-and-forward uplink: a bounded outbox drained strictly in order with
//! capped exponential backoff between attempts.
//!
//! Delivery is at-least-once from the client's point of view; the sink
//! suppresses duplicates by idempotency key, so the observable effect is
//! exactly-once.

use std::collections::VecDeque;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode, idempotency_key, CloudRecord, CodecError};
use crate::domain::{Clock, ManualClock, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("attempt numbers start at 1 (got {0})")]
    InvalidAttempt(u32),
    #[error("outbox full ({capacity} entries); record {key} rejected")]
    QueueFull { capacity: usize, key: String },
    #[error("record {key} failed permanently after {attempts} attempts")]
    PermanentFailure { key: String, attempts: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub max: Duration,
    /// `None` retries forever.
    pub max_attempts: Option<u32>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            max: Duration::from_secs(60),
            max_attempts: None,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), SyncError> {
        if self.base.is_zero() {
            return Err(SyncError::InvalidPolicy("base must be > 0".into()));
        }
        if self.max < self.base {
            return Err(SyncError::InvalidPolicy("max must be >= base".into()));
        }
        if self.max_attempts == Some(0) {
            return Err(SyncError::InvalidPolicy("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Delay before retry number `n`: `min(max, base * 2^(n-1))`.
pub fn backoff_delay(n: u32, p: &RetryPolicy) -> Result<Duration, SyncError> {
    if n < 1 {
        return Err(SyncError::InvalidAttempt(n));
    }
    let factor = 1u32.checked_shl(n - 1).unwrap_or(u32::MAX);
    Ok(p.base.checked_mul(factor).map_or(p.max, |d| d.min(p.max)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    #[default]
    RejectNew,
    DropOldest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutboxEntry {
    pub record: CloudRecord,
    pub bytes: Vec<u8>,
    pub key: String,
    pub enqueued_at: Timestamp,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Enqueued {
    Queued,
    /// Queued after dropping the oldest entry, whose key is returned.
    DroppedOldest(String),
}

/// Bounded FIFO of unsent records.
#[derive(Debug, Clone)]
pub struct Outbox {
    entries: VecDeque<OutboxEntry>,
    capacity: usize,
    overflow: OverflowPolicy,
    offered: u64,
    dropped: u64,
}

pub const DEFAULT_OUTBOX_CAPACITY: usize = 100_000;

impl Default for Outbox {
    fn default() -> Self {
        Self::new(DEFAULT_OUTBOX_CAPACITY, OverflowPolicy::RejectNew)
    }
}

impl Outbox {
    pub fn new(capacity: usize, overflow: OverflowPolicy) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity: capacity.max(1),
            overflow,
            offered: 0,
            dropped: 0,
        }
    }

    pub fn enqueue(&mut self, record: CloudRecord, now: Timestamp) -> Result<Enqueued, SyncError> {
        let bytes = encode(&record)?;
        let key = idempotency_key(&record);
        self.offered += 1;
        let mut result = Enqueued::Queued;
        if self.entries.len() >= self.capacity {
            self.dropped += 1;
            match self.overflow {
                OverflowPolicy::RejectNew => {
                    return Err(SyncError::QueueFull {
                        capacity: self.capacity,
                        key,
                    })
                }
                OverflowPolicy::DropOldest => {
                    let old = self.entries.pop_front().expect("capacity >= 1");
                    result = Enqueued::DroppedOldest(old.key);
                }
            }
        }
        self.entries.push_back(OutboxEntry {
            record,
            bytes,
            key,
            enqueued_at: now,
            attempts: 0,
        });
        Ok(result)
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head(&self) -> Option<&OutboxEntry> {
        self.entries.front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.entries.iter()
    }

    /// Enqueue attempts, including rejected ones.
    pub fn offered(&self) -> u64 {
        self.offered
    }

    /// Records lost to the overflow policy.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

pub fn queue_depth(q: &Outbox) -> usize {
    q.depth()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SendOutcome {
    Ack { row_index: u64, key: String },
    Nack { reason: String },
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendResult {
    pub outcome: SendOutcome,
    /// Time spent waiting for the outcome.
    pub elapsed: Duration,
}

/// Request/response port to the cloud sink.
pub trait Transport {
    fn send(&mut self, bytes: &[u8], at: Timestamp) -> SendResult;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub key: String,
    pub row_index: u64,
    pub acked_at: Timestamp,
    pub enqueued_at: Timestamp,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLetter {
    pub entry: OutboxEntry,
    pub parked_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlushStep {
    /// Nothing queued.
    Idle,
    Delivered {
        receipt: DeliveryReceipt,
        elapsed: Duration,
    },
    /// The head record failed; retry it after `retry_after`.
    Failed {
        key: String,
        attempt: u32,
        outcome: SendOutcome,
        elapsed: Duration,
        retry_after: Duration,
    },
    /// The head record exhausted its attempts and was parked.
    DeadLettered {
        key: String,
        attempts: u32,
        /// Outcome of the final attempt.
        outcome: SendOutcome,
        elapsed: Duration,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UplinkCounters {
    pub offered: u64,
    pub delivered: u64,
    pub queued: u64,
    pub dead_lettered: u64,
    pub dropped: u64,
    pub attempts: u64,
    pub stale_acks: u64,
}

/// Drains an [`Outbox`] head-of-line through a [`Transport`].
#[derive(Debug)]
pub struct Uplink {
    outbox: Outbox,
    policy: RetryPolicy,
    dead_letters: Vec<DeadLetter>,
    delivered: u64,
    attempts: u64,
    stale_acks: u64,
    jitter: Option<(f64, ChaCha8Rng)>,
}

impl Uplink {
    pub fn new(outbox: Outbox, policy: RetryPolicy) -> Result<Self, SyncError> {
        policy.validate()?;
        Ok(Self {
            outbox,
            policy,
            dead_letters: Vec::new(),
            delivered: 0,
            attempts: 0,
            stale_acks: 0,
            jitter: None,
        })
    }

    /// Stretches each backoff by a uniform factor in `[1, 1 + fraction)`.
    pub fn with_jitter(mut self, fraction: f64, seed: u64) -> Self {
        if fraction > 0.0 {
            self.jitter = Some((fraction, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn enqueue(&mut self, record: CloudRecord, now: Timestamp) -> Result<Enqueued, SyncError> {
        self.outbox.enqueue(record, now)
    }

    pub fn depth(&self) -> usize {
        self.outbox.depth()
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn counters(&self) -> UplinkCounters {
        UplinkCounters {
            offered: self.outbox.offered(),
            delivered: self.delivered,
            queued: self.outbox.depth() as u64,
            dead_lettered: self.dead_letters.len() as u64,
            dropped: self.outbox.dropped(),
            attempts: self.attempts,
            stale_acks: self.stale_acks,
        }
    }

    /// Sends the head record once.
    pub fn step(&mut self, now: Timestamp, transport: &mut dyn Transport) -> FlushStep {
        let Some(head) = self.outbox.entries.front_mut() else {
            return FlushStep::Idle;
        };
        head.attempts += 1;
        self.attempts += 1;
        let attempt = head.attempts;
        let result = transport.send(&head.bytes, now);
        let done_at = now + result.elapsed;

        let outcome = match result.outcome {
            SendOutcome::Ack { row_index, key } if key == head.key => {
                let entry = self.outbox.entries.pop_front().expect("head exists");
                self.delivered += 1;
                return FlushStep::Delivered {
                    receipt: DeliveryReceipt {
                        key: entry.key,
                        row_index,
                        acked_at: done_at,
                        enqueued_at: entry.enqueued_at,
                        attempts: entry.attempts,
                    },
                    elapsed: result.elapsed,
                };
            }
            SendOutcome::Ack { key, .. } => {
                // An ack for some other record (a late reply to an earlier
                // retransmission). The head is still unconfirmed.
                self.stale_acks += 1;
                SendOutcome::Nack {
                    reason: format!("stale ack for {key}"),
                }
            }
            other => other,
        };

        if self.policy.max_attempts.is_some_and(|max| attempt >= max) {
            let entry = self.outbox.entries.pop_front().expect("head exists");
            let key = entry.key.clone();
            self.dead_letters.push(DeadLetter {
                entry,
                parked_at: done_at,
            });
            return FlushStep::DeadLettered {
                key,
                attempts: attempt,
                outcome,
                elapsed: result.elapsed,
            };
        }

        let mut retry_after = backoff_delay(attempt, &self.policy).expect("attempt >= 1");
        if let Some((fraction, rng)) = &mut self.jitter {
            let stretch = 1.0 + rng.random::<f64>() * *fraction;
            retry_after = Duration::from_millis((retry_after.as_millis() as f64 * stretch) as u64);
        }
        let key = self.outbox.entries.front().expect("head exists").key.clone();
        FlushStep::Failed {
            key,
            attempt,
            outcome,
            elapsed: result.elapsed,
            retry_after,
        }
    }

    /// Drains the outbox, sleeping simulated time on `clock`. Stops when the
    /// queue is empty or `until` has passed.
    pub fn flush<'a>(
        &'a mut self,
        transport: &'a mut dyn Transport,
        clock: &'a ManualClock,
        until: Option<Timestamp>,
    ) -> Flush<'a> {
        Flush {
            uplink: self,
            transport,
            clock,
            until,
        }
    }
}

/// Iterator of receipts produced by [`Uplink::flush`].
pub struct Flush<'a> {
    uplink: &'a mut Uplink,
    transport: &'a mut dyn Transport,
    clock: &'a ManualClock,
    until: Option<Timestamp>,
}

impl Iterator for Flush<'_> {
    type Item = DeliveryReceipt;

    fn next(&mut self) -> Option<DeliveryReceipt> {
        loop {
            if self.until.is_some_and(|u| self.clock.now() >= u) {
                return None;
            }
            match self.uplink.step(self.clock.now(), self.transport) {
                FlushStep::Idle => return None,
                FlushStep::Delivered { receipt, elapsed } => {
                    self.clock.advance(elapsed);
                    return Some(receipt);
                }
                FlushStep::Failed {
                    elapsed,
                    retry_after,
                    ..
                } => self.clock.advance(elapsed + retry_after),
                FlushStep::DeadLettered { elapsed, .. } => self.clock.advance(elapsed),
            }
        }
    }
}
