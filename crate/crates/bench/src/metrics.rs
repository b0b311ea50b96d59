//! Measuring subscriber records and the per-run metric pass.

use std::collections::{BTreeMap, HashSet};

use bridgebench_core::client::{InboundMessage, PublishOutcome};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("message on {0} carries no ts_us/seq stamp")]
    MissingStamp(String),
    #[error("topic {0} does not name a gateway")]
    UnknownTopic(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub arrival_us: u64,
    pub topic: String,
    /// Position in arrival order, starting at 0.
    pub ordinal: u64,
    pub gateway: String,
    pub seq: u64,
    pub publish_us: u64,
    pub payload_bytes: usize,
    pub duplicate: bool,
}

impl MeasurementRecord {
    pub fn latency_ms(&self) -> f64 {
        self.arrival_us.saturating_sub(self.publish_us) as f64 / 1000.0
    }
}

/// `<root>/<provider>/<gateway>/...` → `<provider>/<gateway>`.
pub fn gateway_of(topic: &str) -> Option<String> {
    let mut levels = topic.split('/').skip(1);
    let provider = levels.next().filter(|s| !s.is_empty())?;
    let gateway = levels.next().filter(|s| !s.is_empty())?;
    Some(format!("{provider}/{gateway}"))
}

/// Appends records in arrival order and flags repeated (gateway, seq) pairs.
#[derive(Debug, Default)]
pub struct Recorder {
    records: Vec<MeasurementRecord>,
    seen: HashSet<(String, u64)>,
    unstamped: u64,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, msg: &InboundMessage) -> Result<&MeasurementRecord, MetricsError> {
        let topic = msg.topic.as_str();
        let (Some(publish_us), Some(seq)) = (msg.ts_us(), msg.seq()) else {
            self.unstamped += 1;
            return Err(MetricsError::MissingStamp(topic.to_owned()));
        };
        let Some(gateway) = gateway_of(topic) else {
            self.unstamped += 1;
            return Err(MetricsError::UnknownTopic(topic.to_owned()));
        };
        let duplicate = !self.seen.insert((gateway.clone(), seq));
        self.records.push(MeasurementRecord {
            arrival_us: msg.arrival_us.max(publish_us),
            topic: topic.to_owned(),
            ordinal: self.records.len() as u64,
            gateway,
            seq,
            publish_us,
            payload_bytes: msg.payload.len(),
            duplicate,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    pub fn unstamped(&self) -> u64 {
        self.unstamped
    }

    pub fn into_parts(self) -> (Vec<MeasurementRecord>, u64) {
        (self.records, self.unstamped)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles; the median of an even sample is the mean
    /// of the two middle values.
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            (ms[n / 2 - 1] + ms[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            count: n as u64,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: ms[rank - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub published: u64,
    /// Gateway publishes that completed their handshake (QoS 0: were sent).
    pub published_ok: u64,
    pub received_unique: u64,
    pub received_source: u64,
    pub received_dest: u64,
    pub lost_e2e: u64,
    pub lost_source: u64,
    pub duplicates: u64,
    pub latency: LatencyStats,
    pub mean_payload_bytes: f64,
    pub unstamped: u64,
}

impl MetricSet {
    /// Lost messages per 1000 published.
    pub fn loss_per_1000(&self) -> f64 {
        if self.published == 0 {
            0.0
        } else {
            1000.0 * self.lost_e2e as f64 / self.published as f64
        }
    }
}

/// Per-topic PUBLISH counts seen by the source brokers and the destination
/// broker during one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerTopicCounts {
    pub source: BTreeMap<String, u64>,
    pub dest: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_gateway: BTreeMap<String, MetricSet>,
    pub aggregate: MetricSet,
}

fn per_gateway_counts(topics: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (t, n) in topics {
        if let Some(g) = gateway_of(t) {
            *out.entry(g).or_default() += n;
        }
    }
    out
}

/// Offline pass over one run. Broker counts include retransmitted copies,
/// so subscriber-observed duplicates of a gateway are subtracted to get
/// unique receipts at each broker.
pub fn compute_metrics(
    records: &[MeasurementRecord],
    outcomes: &BTreeMap<String, Vec<PublishOutcome>>,
    brokers: &BrokerTopicCounts,
    unstamped: u64,
) -> RunMetrics {
    let mut per: BTreeMap<String, MetricSet> = BTreeMap::new();
    let mut latencies: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut payload_sum: BTreeMap<String, u64> = BTreeMap::new();
    for (g, outs) in outcomes {
        let m = per.entry(g.clone()).or_default();
        m.published = outs.len() as u64;
        m.published_ok = outs.iter().filter(|o| o.is_ok()).count() as u64;
    }
    for r in records {
        let m = per.entry(r.gateway.clone()).or_default();
        if r.duplicate {
            m.duplicates += 1;
        } else {
            m.received_unique += 1;
            latencies.entry(r.gateway.clone()).or_default().push(r.latency_ms());
            *payload_sum.entry(r.gateway.clone()).or_default() += r.payload_bytes as u64;
        }
    }
    let source = per_gateway_counts(&brokers.source);
    let dest = per_gateway_counts(&brokers.dest);
    for (g, m) in per.iter_mut() {
        m.received_source = source.get(g).copied().unwrap_or(0).saturating_sub(m.duplicates);
        m.received_dest = dest.get(g).copied().unwrap_or(0).saturating_sub(m.duplicates);
        m.lost_e2e = m.published.saturating_sub(m.received_unique);
        m.lost_source = m.published.saturating_sub(m.received_source);
        m.latency = LatencyStats::from_samples(latencies.remove(g).unwrap_or_default());
        if m.received_unique > 0 {
            m.mean_payload_bytes = payload_sum.get(g).copied().unwrap_or(0) as f64 / m.received_unique as f64;
        }
    }

    let mut agg = MetricSet {
        unstamped,
        ..MetricSet::default()
    };
    for m in per.values() {
        agg.published += m.published;
        agg.published_ok += m.published_ok;
        agg.received_unique += m.received_unique;
        agg.received_source += m.received_source;
        agg.received_dest += m.received_dest;
        agg.lost_e2e += m.lost_e2e;
        agg.lost_source += m.lost_source;
        agg.duplicates += m.duplicates;
    }
    let all: Vec<f64> = records
        .iter()
        .filter(|r| !r.duplicate)
        .map(|r| r.latency_ms())
        .collect();
    agg.latency = LatencyStats::from_samples(all);
    if agg.received_unique > 0 {
        agg.mean_payload_bytes = payload_sum.values().sum::<u64>() as f64 / agg.received_unique as f64;
    }
    RunMetrics {
        per_gateway: per,
        aggregate: agg,
    }
}

/// Mean loss per 1000 published for one gateway, averaged over runs that
/// include it.
pub fn per_gateway_loss(runs: &[RunMetrics], provider: &str, gateway: &str) -> f64 {
    let id = format!("{provider}/{gateway}");
    let rates: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.per_gateway.get(&id))
        .map(MetricSet::loss_per_1000)
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}
