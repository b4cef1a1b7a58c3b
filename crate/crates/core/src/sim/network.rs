//! Network and cloud path between the devices and the in-process sink.

use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::auth::{CloudAuthority, CloudReply, CloudResponse};
use crate::domain::{Timestamp, Uid};
use crate::sink::{CloudSink, SinkError};
use crate::sync::{SendOutcome, SendResult, Transport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("partition must satisfy start < end")]
    EmptyPartition,
    #[error("partition [{start}, {end}) overlaps an existing partition")]
    OverlappingPartition { start: Timestamp, end: Timestamp },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub latency_mean_s: f64,
    pub latency_stddev_s: f64,
    pub latency_floor_s: f64,
    pub drop_prob: f64,
    pub ack_drop_prob: f64,
    pub duplicate_prob: f64,
    partitions: Vec<(Timestamp, Timestamp)>,
    drop_windows: Vec<(Timestamp, Timestamp, f64)>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            latency_mean_s: 1.2,
            latency_stddev_s: 0.3,
            latency_floor_s: 0.05,
            drop_prob: 0.0,
            ack_drop_prob: 0.0,
            duplicate_prob: 0.0,
            partitions: Vec::new(),
            drop_windows: Vec::new(),
        }
    }
}

impl NetworkModel {
    pub fn partitions(&self) -> &[(Timestamp, Timestamp)] {
        &self.partitions
    }

    pub fn is_partitioned(&self, at: Timestamp) -> bool {
        self.partitions.iter().any(|&(s, e)| s <= at && at < e)
    }

    /// Overrides the base drop probability inside `[start, end)`.
    pub fn add_drop_window(&mut self, start: Timestamp, end: Timestamp, p: f64) {
        self.drop_windows.push((start, end, p));
    }

    pub fn drop_prob_at(&self, at: Timestamp) -> f64 {
        self.drop_windows
            .iter()
            .rev()
            .find(|&&(s, e, _)| s <= at && at < e)
            .map_or(self.drop_prob, |w| w.2)
    }
}

/// One round-trip time: normal, truncated below at the floor, whole ms.
pub fn sample_latency(model: &NetworkModel, rng: &mut ChaCha8Rng) -> Duration {
    let z: f64 = rng.sample(StandardNormal);
    let secs = (model.latency_mean_s + model.latency_stddev_s * z).max(model.latency_floor_s);
    Duration::from_millis((secs * 1000.0).round() as u64)
}

/// Every send inside `[start, end)` will time out.
pub fn inject_partition(
    model: &mut NetworkModel,
    start: Timestamp,
    end: Timestamp,
) -> Result<(), NetworkError> {
    if start >= end {
        return Err(NetworkError::EmptyPartition);
    }
    if model.partitions.iter().any(|&(s, e)| start < e && s < end) {
        return Err(NetworkError::OverlappingPartition { start, end });
    }
    model.partitions.push((start, end));
    model.partitions.sort();
    Ok(())
}

/// The shared world outside the devices: network conditions and the sink.
#[derive(Debug, Clone)]
pub struct Fabric {
    pub network: NetworkModel,
    pub sink: CloudSink,
    pub token: String,
    pub sink_outages: Vec<(Timestamp, Timestamp)>,
}

impl Fabric {
    fn sink_down(&self, at: Timestamp) -> bool {
        self.sink_outages.iter().any(|&(s, e)| s <= at && at < e)
    }

    /// Arrival time at the sink for a request sent at `at` with round trip `rtt`.
    fn arrival(at: Timestamp, rtt: Duration) -> Timestamp {
        at + rtt / 2
    }
}

/// One device's view of the fabric, with its own random stream.
pub struct Link<'a> {
    pub fabric: &'a mut Fabric,
    pub rng: &'a mut ChaCha8Rng,
    pub timeout: Duration,
    /// Set by each cloud query for the trace.
    pub last_query: Option<CloudResponse>,
}

impl<'a> Link<'a> {
    pub fn new(fabric: &'a mut Fabric, rng: &'a mut ChaCha8Rng, timeout: Duration) -> Self {
        Self {
            fabric,
            rng,
            timeout,
            last_query: None,
        }
    }

    /// Draws the fate of one exchange. The four draws happen on every call
    /// so the stream stays aligned regardless of outcome.
    fn exchange(&mut self, at: Timestamp) -> Exchange {
        let u_drop: f64 = self.rng.random();
        let rtt = sample_latency(&self.fabric.network, self.rng);
        let u_ack: f64 = self.rng.random();
        let u_dup: f64 = self.rng.random();
        let net = &self.fabric.network;
        if net.is_partitioned(at) || u_drop < net.drop_prob_at(at) {
            return Exchange::Lost;
        }
        let arrive = Fabric::arrival(at, rtt);
        self.fabric.sink.set_unavailable(self.fabric.sink_down(arrive));
        Exchange::Delivered {
            rtt,
            arrive,
            reply_lost: u_ack < net.ack_drop_prob || rtt > self.timeout,
            duplicated: u_dup < net.duplicate_prob,
        }
    }
}

enum Exchange {
    Lost,
    Delivered {
        rtt: Duration,
        arrive: Timestamp,
        reply_lost: bool,
        duplicated: bool,
    },
}

impl Transport for Link<'_> {
    fn send(&mut self, bytes: &[u8], at: Timestamp) -> SendResult {
        let timeout = SendResult {
            outcome: SendOutcome::Timeout,
            elapsed: self.timeout,
        };
        let Exchange::Delivered {
            rtt,
            arrive,
            reply_lost,
            duplicated,
        } = self.exchange(at)
        else {
            return timeout;
        };
        let token = self.fabric.token.clone();
        let result = self.fabric.sink.append(&token, bytes, arrive);
        if duplicated {
            let _ = self.fabric.sink.append(&token, bytes, arrive);
        }
        self.fabric.sink.set_unavailable(false);
        if reply_lost {
            return timeout;
        }
        let outcome = match result {
            Ok(ack) => SendOutcome::Ack {
                row_index: ack.row_index,
                key: ack.key,
            },
            Err(e) => SendOutcome::Nack {
                reason: e.to_string(),
            },
        };
        SendResult {
            outcome,
            elapsed: rtt,
        }
    }
}

impl CloudAuthority for Link<'_> {
    fn query_policy(&mut self, uid: &Uid, at: Timestamp, deadline: Duration) -> CloudResponse {
        let timeout = CloudResponse {
            reply: CloudReply::Timeout,
            elapsed: deadline,
        };
        let resp = match self.exchange(at) {
            Exchange::Lost => timeout,
            Exchange::Delivered { rtt, reply_lost, .. } => {
                let token = self.fabric.token.clone();
                let answer = self.fabric.sink.query_policy(&token, uid);
                self.fabric.sink.set_unavailable(false);
                match answer {
                    _ if reply_lost || rtt > deadline => timeout,
                    Ok(policy) => CloudResponse {
                        reply: CloudReply::Policy(policy),
                        elapsed: rtt,
                    },
                    Err(SinkError::NotFound) => CloudResponse {
                        reply: CloudReply::NotFound,
                        elapsed: rtt,
                    },
                    // An unavailable sink looks like silence to the device.
                    Err(_) => timeout,
                }
            }
        };
        self.last_query = Some(resp.clone());
        resp
    }
}
