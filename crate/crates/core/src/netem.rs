//! Seeded link impairment: delay, jitter, bandwidth and size-dependent loss.
//!
//! Loss is decided per MQTT packet. A packet of `n` bytes spans
//! `ceil(n / segment_size)` segments and is lost if any segment is, so
//! `p_drop(n) = 1 - (1 - p)^segments`. Every decision is a pure function of
//! `(seed, link id, direction, ordinal)` through a counter-based hash, so
//! task scheduling can never change which packets are dropped.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::time::Instant;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("segment_loss_p must be within [0, 1], got {0}")]
    LossOutOfRange(f64),
    #[error("delays must be non-negative")]
    NegativeDelay,
    #[error("jitter ({jitter} ms) must not exceed the one-way delay ({delay} ms)")]
    JitterExceedsDelay { jitter: f64, delay: f64 },
    #[error("segment_size must be positive")]
    ZeroSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Client to broker.
    Up,
    /// Broker to client.
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

/// Which directions of a link the loss probability applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScope {
    #[default]
    Both,
    Up,
    Down,
}

impl LossScope {
    fn applies(self, dir: Direction) -> bool {
        matches!(
            (self, dir),
            (LossScope::Both, _) | (LossScope::Up, Direction::Up) | (LossScope::Down, Direction::Down)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkProfile {
    pub one_way_delay_ms: f64,
    /// Uniform jitter, applied as +/- this many milliseconds.
    pub jitter_ms: f64,
    /// Bytes per second; 0 means unlimited.
    pub bandwidth_bytes_per_s: u64,
    pub segment_size: usize,
    pub segment_loss_p: f64,
    pub loss_scope: LossScope,
    pub seed: u64,
    /// Added once to every connection establishment over this link.
    pub per_connection_overhead_ms: f64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        Self {
            one_way_delay_ms: 0.0,
            jitter_ms: 0.0,
            bandwidth_bytes_per_s: 0,
            segment_size: 1460,
            segment_loss_p: 0.0,
            loss_scope: LossScope::Both,
            seed: 0,
            per_connection_overhead_ms: 0.0,
        }
    }
}

/// Outcome of sending one packet across a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transit {
    Deliver { after: Duration },
    Drop,
}

impl LinkProfile {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn with_delay_ms(delay: f64) -> Self {
        Self {
            one_way_delay_ms: delay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(0.0..=1.0).contains(&self.segment_loss_p) || self.segment_loss_p.is_nan() {
            return Err(ProfileError::LossOutOfRange(self.segment_loss_p));
        }
        if self.one_way_delay_ms < 0.0 || self.jitter_ms < 0.0 || self.per_connection_overhead_ms < 0.0 {
            return Err(ProfileError::NegativeDelay);
        }
        if self.jitter_ms > self.one_way_delay_ms {
            return Err(ProfileError::JitterExceedsDelay {
                jitter: self.jitter_ms,
                delay: self.one_way_delay_ms,
            });
        }
        if self.segment_size == 0 {
            return Err(ProfileError::ZeroSegment);
        }
        Ok(())
    }

    pub fn segments(&self, len: usize) -> u64 {
        len.div_ceil(self.segment_size) as u64
    }

    /// Probability that a packet of `len` bytes is lost.
    pub fn p_drop(&self, len: usize) -> f64 {
        let segments = self.segments(len);
        if self.segment_loss_p >= 1.0 {
            return if segments == 0 { 0.0 } else { 1.0 };
        }
        // 1 - (1-p)^k, computed without cancellation for small p
        -f64::exp_m1(segments as f64 * f64::ln_1p(-self.segment_loss_p))
    }

    pub fn p_drop_dir(&self, len: usize, dir: Direction) -> f64 {
        if self.loss_scope.applies(dir) {
            self.p_drop(len)
        } else {
            0.0
        }
    }

    pub fn connection_overhead(&self) -> Duration {
        Duration::from_secs_f64(self.per_connection_overhead_ms / 1000.0)
    }

    fn serialization_time(&self, len: usize) -> Duration {
        if self.bandwidth_bytes_per_s == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(len as f64 / self.bandwidth_bytes_per_s as f64)
        }
    }

    /// Stateless transit decision: drop, or deliver after propagation plus
    /// serialization delay. Queueing and FIFO are handled by [`LinkLane`].
    pub fn transit(&self, link_key: u64, dir: Direction, len: usize, ordinal: u64) -> Transit {
        let u = unit(counter_hash(self.seed, link_key, dir, ordinal, 0));
        if u < self.p_drop_dir(len, dir) {
            return Transit::Drop;
        }
        Transit::Deliver {
            after: self.propagation(link_key, dir, ordinal) + self.serialization_time(len),
        }
    }

    fn propagation(&self, link_key: u64, dir: Direction, ordinal: u64) -> Duration {
        let jitter = if self.jitter_ms > 0.0 {
            let u = unit(counter_hash(self.seed, link_key, dir, ordinal, 1));
            (2.0 * u - 1.0) * self.jitter_ms
        } else {
            0.0
        };
        Duration::from_secs_f64(((self.one_way_delay_ms + jitter).max(0.0)) / 1000.0)
    }
}

/// Stable 64-bit key for a link id string.
pub fn link_key(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn counter_hash(seed: u64, key: u64, dir: Direction, ordinal: u64, stream: u64) -> u64 {
    let dir = match dir {
        Direction::Up => 1,
        Direction::Down => 2,
    };
    let mut h = splitmix(seed);
    h = splitmix(h ^ key);
    h = splitmix(h ^ (dir << 8 | stream));
    splitmix(h ^ ordinal)
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DropDecision {
    pub link: String,
    pub direction: Direction,
    pub ordinal: u64,
    pub dropped: bool,
}

/// Collects drop decisions from every link of a run.
#[derive(Debug, Clone, Default)]
pub struct DropTrace {
    inner: Arc<Mutex<Vec<DropDecision>>>,
}

impl DropTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, d: DropDecision) {
        self.inner.lock().expect("trace lock poisoned").push(d);
    }

    /// All decisions ordered by (link, direction, ordinal).
    pub fn decisions(&self) -> Vec<DropDecision> {
        let mut all = self.inner.lock().expect("trace lock poisoned").clone();
        all.sort();
        all
    }

    /// Decisions for one link id, in ordinal order per direction.
    pub fn for_link(&self, link: &str) -> Vec<DropDecision> {
        self.decisions().into_iter().filter(|d| d.link == link).collect()
    }

    pub fn dropped_count(&self) -> usize {
        self.inner
            .lock()
            .expect("trace lock poisoned")
            .iter()
            .filter(|d| d.dropped)
            .count()
    }
}

/// One direction of one connection: assigns ordinals, decides drops and
/// keeps delivery times monotone so packets stay in FIFO order.
#[derive(Debug)]
pub struct LinkLane {
    profile: LinkProfile,
    id: String,
    key: u64,
    direction: Direction,
    next_ordinal: u64,
    busy_until: Option<Instant>,
    last_delivery: Option<Instant>,
    trace: Option<DropTrace>,
}

impl LinkLane {
    pub fn new(profile: LinkProfile, id: impl Into<String>, direction: Direction, trace: Option<DropTrace>) -> Self {
        let id = id.into();
        Self {
            key: link_key(&id),
            profile,
            id,
            direction,
            next_ordinal: 0,
            busy_until: None,
            last_delivery: None,
            trace,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Decides the fate of a packet of `len` bytes sent at `now`. Returns the
    /// instant it reaches the far end, or `None` if it is lost.
    pub fn admit(&mut self, len: usize, now: Instant) -> Option<Instant> {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        let transit = self.profile.transit(self.key, self.direction, len, ordinal);
        if let Some(trace) = &self.trace {
            trace.push(DropDecision {
                link: self.id.clone(),
                direction: self.direction,
                ordinal,
                dropped: transit == Transit::Drop,
            });
        }
        let Transit::Deliver { .. } = transit else {
            return None;
        };
        let start = self.busy_until.map_or(now, |b| b.max(now));
        let sent = start + self.profile.serialization_time(len);
        self.busy_until = Some(sent);
        let mut at = sent + self.profile.propagation(self.key, self.direction, ordinal);
        if let Some(last) = self.last_delivery {
            at = at.max(last);
        }
        self.last_delivery = Some(at);
        Some(at)
    }
}
