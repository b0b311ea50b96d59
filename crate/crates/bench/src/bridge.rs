//! The client-side bridge under test: subscribe on a source broker, unify
//! the payload, republish on the destination broker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bridgebench_core::client::{Client, ClientConfig, ClientError, FailReason, InboundMessage, PublishResult};
use bridgebench_core::codec::{Publish, QoS, SubscribeOptions};
use bridgebench_core::topics::{TopicError, TopicFilter, TopicName};
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, watch};
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::{sleep_until, Instant};

use crate::loadgen::{ProviderSpec, PAYLOAD_COLUMNS, PAYLOAD_MAGIC};

/// Fraction of the input size a unified payload keeps. Always in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UnifyRatio(f64);

impl UnifyRatio {
    pub fn new(r: f64) -> Result<Self, BridgeError> {
        if r > 0.0 && r <= 1.0 {
            Ok(Self(r))
        } else {
            Err(BridgeError::BadRatio(r))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for UnifyRatio {
    type Error = BridgeError;
    fn try_from(r: f64) -> Result<Self, Self::Error> {
        Self::new(r)
    }
}

impl From<UnifyRatio> for f64 {
    fn from(r: UnifyRatio) -> f64 {
        r.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Identity,
    #[default]
    Unify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub mode: TransformMode,
    /// Per-provider ratio; providers not listed keep everything they can.
    pub ratios: BTreeMap<String, UnifyRatio>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            mode: TransformMode::Identity,
            ratios: BTreeMap::new(),
        }
    }

    pub fn unify(ratios: impl IntoIterator<Item = (String, f64)>) -> Result<Self, BridgeError> {
        let ratios = ratios
            .into_iter()
            .map(|(p, r)| Ok((p, UnifyRatio::new(r)?)))
            .collect::<Result<_, BridgeError>>()?;
        Ok(Self {
            mode: TransformMode::Unify,
            ratios,
        })
    }

    pub fn ratio(&self, provider: &str) -> UnifyRatio {
        self.ratios.get(provider).copied().unwrap_or(UnifyRatio(1.0))
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("unify ratio must be in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("topology has no {0}")]
    InvalidTopology(&'static str),
    #[error("wildcard subscriptions need one bridge per provider (AUT 1)")]
    UnsupportedScheme,
    #[error("bridge subscriptions must set no_local")]
    NoLocalRequired,
    #[error("output topic {0} would loop back into subscription {1}")]
    Loop(String, String),
    #[error("topic {topic} does not start with {prefix:?}")]
    Unmapped { topic: String, prefix: String },
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// First line of every unified payload.
pub const UNIFIED_HEADER: &str = "#unified-record-v1";

struct Reading<'a> {
    ts: u64,
    param: &'a str,
    value: f64,
}

fn parse_readings(payload: &[u8]) -> Result<(String, Vec<Reading<'_>>), BridgeError> {
    let bad = |why: &str| BridgeError::MalformedPayload(why.to_owned());
    let text = std::str::from_utf8(payload).map_err(|_| bad("not UTF-8"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let rest = header
        .strip_prefix(PAYLOAD_MAGIC)
        .ok_or_else(|| bad("missing header"))?;
    let hub = rest
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("hub="))
        .ok_or_else(|| bad("header without hub"))?
        .to_owned();
    if lines.next() != Some(PAYLOAD_COLUMNS) {
        return Err(bad("missing column header"));
    }
    let mut readings = Vec::new();
    for line in lines.filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split(';').collect();
        if f.len() != 6 {
            return Err(bad("reading with wrong field count"));
        }
        readings.push(Reading {
            ts: f[0].parse().map_err(|_| bad("bad timestamp"))?,
            param: f[2],
            value: f[3].parse().map_err(|_| bad("bad value"))?,
        });
    }
    Ok((hub, readings))
}

/// Converts a sensor-hub document into the unified record stream, or
/// passes it through untouched in identity mode.
///
/// Unified output is an envelope line followed by canonical records spread
/// evenly over the input, as many as fit in `ratio × input` bytes. The
/// output is always shorter than the input once the input exceeds the
/// envelope.
pub fn transform(spec: &TransformSpec, payload: &[u8], provider: &str) -> Result<Bytes, BridgeError> {
    if spec.mode == TransformMode::Identity {
        return Ok(Bytes::copy_from_slice(payload));
    }
    let (hub, readings) = parse_readings(payload)?;
    let records: Vec<String> = readings
        .iter()
        .map(|r| {
            format!(
                "{{\"hub\":\"{hub}\",\"ts\":{},\"param\":\"{}\",\"value\":{}}}\n",
                r.ts, r.param, r.value
            )
        })
        .collect();
    let mut envelope = format!("{UNIFIED_HEADER} provider={provider} hub={hub} n=");

    let budget = (spec.ratio(provider).get() * payload.len() as f64) as usize;
    let room = budget.min(payload.len().saturating_sub(envelope.len() + 8));
    let total: usize = records.iter().map(String::len).sum();
    let mut k = (records.len() * room)
        .checked_div(total)
        .unwrap_or(0)
        .min(records.len());
    let pick = |k: usize| -> Vec<usize> { (0..k).map(|j| j * records.len() / k).collect() };
    let mut chosen = pick(k);
    while k > 0 && chosen.iter().map(|&i| records[i].len()).sum::<usize>() > room {
        k -= 1;
        chosen = pick(k);
    }
    let _ = writeln!(envelope, "{k}");
    let mut out = envelope.into_bytes();
    for i in chosen {
        out.extend_from_slice(records[i].as_bytes());
    }
    Ok(Bytes::from(out))
}

/// Prefix rewrite from inbound to outbound topics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMap {
    pub from: String,
    pub to: String,
}

impl Default for TopicMap {
    fn default() -> Self {
        Self {
            from: "sensors".into(),
            to: "unified".into(),
        }
    }
}

impl TopicMap {
    pub fn map(&self, t: &TopicName) -> Result<TopicName, BridgeError> {
        let unmapped = || BridgeError::Unmapped {
            topic: t.as_str().to_owned(),
            prefix: self.from.clone(),
        };
        let rest = t.as_str().strip_prefix(self.from.as_str()).ok_or_else(unmapped)?;
        if !rest.is_empty() && !rest.starts_with('/') {
            return Err(unmapped());
        }
        Ok(TopicName::new(format!("{}{rest}", self.to))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepublishMode {
    /// Finish the outbound handshake before taking the next message.
    #[default]
    Sync,
    Async,
}

/// Processing cost of the bridge. Bridges of one deployment share a fixed
/// CPU budget, so each gets `cores_total / bridges` of a core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuModel {
    pub ns_per_byte: f64,
    pub cpu_share: f64,
}

impl CpuModel {
    pub const FREE: CpuModel = CpuModel {
        ns_per_byte: 0.0,
        cpu_share: 1.0,
    };

    pub fn cost(&self, bytes: usize) -> Duration {
        if self.ns_per_byte <= 0.0 {
            return Duration::ZERO;
        }
        Duration::from_nanos((bytes as f64 * self.ns_per_byte / self.cpu_share) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub name: String,
    pub provider: String,
    pub source: SocketAddr,
    pub destination: SocketAddr,
    pub subscriptions: Vec<TopicFilter>,
    pub options: SubscribeOptions,
    pub output: TopicMap,
    pub qos: QoS,
    pub mode: RepublishMode,
    pub transform: TransformSpec,
    pub cpu: CpuModel,
    pub queue_capacity: usize,
}

impl BridgeSpec {
    /// Checks the loop-freedom rules: `no_local` on, and no outbound topic
    /// can match an inbound filter.
    pub fn validate(&self) -> Result<(), BridgeError> {
        if !self.options.no_local {
            return Err(BridgeError::NoLocalRequired);
        }
        for f in &self.subscriptions {
            let first = f.levels().next().unwrap_or_default();
            if first != self.output.from || self.output.to == self.output.from {
                return Err(BridgeError::Loop(self.output.to.clone(), f.as_str().to_owned()));
            }
        }
        Ok(())
    }
}

/// One bridge of a deployment, before broker addresses are known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BridgePlan {
    pub name: String,
    pub provider: String,
    pub subscriptions: Vec<TopicFilter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Aut {
    /// One bridge per provider.
    PerProvider = 1,
    /// One bridge per sensor-hub stream.
    PerHub = 2,
}

impl Aut {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Aut {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Aut::PerProvider),
            2 => Ok(Aut::PerHub),
            _ => Err(format!("aut must be 1 or 2, got {v}")),
        }
    }
}

impl From<Aut> for u8 {
    fn from(a: Aut) -> u8 {
        a as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopicScheme {
    /// `<root>/<provider>/#` per provider.
    #[serde(rename = "wildcard-15")]
    Wildcard,
    /// The full hub topics, listed.
    #[serde(rename = "explicit-29")]
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeploymentPlan {
    pub aut: Aut,
    pub bridges: Vec<BridgePlan>,
    /// Length of the longest subscription topic a bridge uses.
    pub bridge_topic_size: usize,
}

pub fn plan_deployment(
    providers: &[ProviderSpec],
    aut: Aut,
    scheme: TopicScheme,
) -> Result<DeploymentPlan, BridgeError> {
    if providers.is_empty() {
        return Err(BridgeError::InvalidTopology("providers"));
    }
    if providers.iter().all(|p| p.hubs().next().is_none()) {
        return Err(BridgeError::InvalidTopology("hubs"));
    }
    let explicit = |t: &TopicName| TopicFilter::new(t.as_str());
    let mut bridges = Vec::new();
    for p in providers {
        match (aut, scheme) {
            (Aut::PerProvider, TopicScheme::Wildcard) => {
                let Some((_, first)) = p.hubs().next() else { continue };
                let root = first.topic.levels().next().unwrap_or_default();
                bridges.push(BridgePlan {
                    name: format!("bridge-{}", p.id),
                    provider: p.id.clone(),
                    subscriptions: vec![TopicFilter::new(format!("{root}/{}/#", p.id))?],
                });
            }
            (Aut::PerProvider, TopicScheme::Explicit) => {
                let subscriptions = p
                    .hubs()
                    .map(|(_, h)| explicit(&h.topic))
                    .collect::<Result<Vec<_>, _>>()?;
                if !subscriptions.is_empty() {
                    bridges.push(BridgePlan {
                        name: format!("bridge-{}", p.id),
                        provider: p.id.clone(),
                        subscriptions,
                    });
                }
            }
            (Aut::PerHub, TopicScheme::Explicit) => {
                for (g, h) in p.hubs() {
                    bridges.push(BridgePlan {
                        name: format!("bridge-{}-{}", g.id.replace('/', "-"), h.id),
                        provider: p.id.clone(),
                        subscriptions: vec![explicit(&h.topic)?],
                    });
                }
            }
            (Aut::PerHub, TopicScheme::Wildcard) => return Err(BridgeError::UnsupportedScheme),
        }
    }
    let bridge_topic_size = bridges
        .iter()
        .flat_map(|b| &b.subscriptions)
        .map(|f| f.as_str().len())
        .max()
        .unwrap_or(0);
    Ok(DeploymentPlan {
        aut,
        bridges,
        bridge_topic_size,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeStats {
    pub name: String,
    pub received: u64,
    pub forwarded: u64,
    pub transform_failed: u64,
    pub publish_failed: u64,
    pub dropped_queue: u64,
    pub per_topic_in: BTreeMap<String, u64>,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub forward_delay_mean_us: f64,
    pub forward_delay_max_us: u64,
    #[serde(skip)]
    delay_sum_us: u64,
}

impl BridgeStats {
    fn delay(&mut self, us: u64) {
        self.delay_sum_us += us;
        self.forward_delay_max_us = self.forward_delay_max_us.max(us);
        self.forward_delay_mean_us = self.delay_sum_us as f64 / self.forwarded.max(1) as f64;
    }
}

struct Shared {
    spec: BridgeSpec,
    dest_config: ClientConfig,
    dest: tokio::sync::Mutex<Client>,
    stats: Mutex<BridgeStats>,
    /// Messages accepted from the source but not yet republished.
    pending: AtomicUsize,
}

impl Shared {
    fn stats(&self) -> std::sync::MutexGuard<'_, BridgeStats> {
        self.stats.lock().expect("bridge stats poisoned")
    }

    async fn forward(&self, msg: InboundMessage, payload: Bytes) {
        let clock = self.dest_config.clock;
        let topic = match self.spec.output.map(&msg.topic) {
            Ok(t) => t,
            Err(_) => {
                self.stats().transform_failed += 1;
                return;
            }
        };
        let mut p = Publish::new(topic, self.spec.qos, payload.clone());
        p.retain = msg.retain && self.spec.options.retain_as_published;
        p.properties.user = msg.properties.user.clone();

        let dest = self.dest.lock().await.clone();
        let mut outcome = dest.republish(p.clone()).await;
        if matches!(outcome.result, PublishResult::Failed(FailReason::ConnectionLost)) {
            // one reconnect attempt, then the message is lost to the bridge
            let mut dest = self.dest.lock().await;
            if !dest.is_connected() {
                if let Ok(c) = Client::connect(self.dest_config.clone()).await {
                    *dest = c;
                }
            }
            let retry = dest.clone();
            drop(dest);
            outcome = retry.republish(p).await;
        }
        let mut st = self.stats();
        if outcome.is_ok() {
            st.forwarded += 1;
            st.bytes_out += payload.len() as u64;
            st.delay(clock.now_us().saturating_sub(msg.arrival_us));
        } else {
            st.publish_failed += 1;
        }
    }
}

/// A running bridge. Statistics can be sampled at any time; [`stop`] tears
/// both connections down and returns the final numbers.
///
/// [`stop`]: BridgeHandle::stop
pub struct BridgeHandle {
    shared: Arc<Shared>,
    source: Client,
    stop: watch::Sender<bool>,
    worker: JoinHandle<()>,
    intake: JoinHandle<()>,
}

impl BridgeHandle {
    pub fn name(&self) -> &str {
        &self.shared.spec.name
    }

    pub fn stats(&self) -> BridgeStats {
        self.shared.stats().clone()
    }

    /// True when nothing is queued or being republished.
    pub fn is_idle(&self) -> bool {
        self.shared.pending.load(Ordering::SeqCst) == 0
    }

    pub async fn stop(self) -> BridgeStats {
        let _ = self.stop.send(true);
        self.intake.abort();
        let _ = self.worker.await;
        self.source.disconnect().await;
        self.shared.dest.lock().await.disconnect().await;
        self.shared.stats().clone()
    }
}

/// Connects to both brokers, subscribes and starts forwarding.
/// `source` and `destination` carry link, clock and timing settings; their
/// broker addresses and client ids are overridden from `spec`.
pub async fn run_bridge(
    spec: BridgeSpec,
    source: ClientConfig,
    destination: ClientConfig,
) -> Result<BridgeHandle, BridgeError> {
    spec.validate()?;
    let mut dest_config = destination;
    dest_config.broker = spec.destination;
    dest_config.client_id = format!("{}-out", spec.name);
    dest_config.link_id = Some(dest_config.client_id.clone());
    let dest = Client::connect(dest_config.clone()).await?;

    let mut src_config = source;
    src_config.broker = spec.source;
    src_config.client_id = format!("{}-in", spec.name);
    src_config.link_id = Some(src_config.client_id.clone());
    let src = Client::connect(src_config).await?;

    let shared = Arc::new(Shared {
        dest: tokio::sync::Mutex::new(dest),
        dest_config,
        stats: Mutex::new(BridgeStats {
            name: spec.name.clone(),
            ..BridgeStats::default()
        }),
        pending: AtomicUsize::new(0),
        spec,
    });

    let (sink_tx, mut sink_rx) = mpsc::unbounded_channel();
    let (queue_tx, queue_rx) = mpsc::channel(shared.spec.queue_capacity.max(1));
    let filters = shared
        .spec
        .subscriptions
        .iter()
        .map(|f| (f.clone(), shared.spec.options))
        .collect();
    let intake = {
        let shared = shared.clone();
        tokio::spawn(async move {
            while let Some(msg) = sink_rx.recv().await {
                let msg: InboundMessage = msg;
                {
                    let mut st = shared.stats();
                    st.received += 1;
                    st.bytes_in += msg.payload.len() as u64;
                    *st.per_topic_in.entry(msg.topic.as_str().to_owned()).or_default() += 1;
                }
                shared.pending.fetch_add(1, Ordering::SeqCst);
                if queue_tx.try_send(msg).is_err() {
                    shared.pending.fetch_sub(1, Ordering::SeqCst);
                    shared.stats().dropped_queue += 1;
                }
            }
        })
    };
    src.subscribe_many(filters, sink_tx).await?;

    let (stop_tx, stop_rx) = watch::channel(false);
    let worker = tokio::spawn(work(shared.clone(), queue_rx, stop_rx));
    Ok(BridgeHandle {
        shared,
        source: src,
        stop: stop_tx,
        worker,
        intake,
    })
}

async fn work(shared: Arc<Shared>, mut queue: mpsc::Receiver<InboundMessage>, mut stop: watch::Receiver<bool>) {
    let mut inflight = JoinSet::new();
    let mut busy_until = Instant::now();
    loop {
        let msg = tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            m = queue.recv() => match m {
                Some(m) => m,
                None => break,
            },
        };
        while inflight.try_join_next().is_some() {}

        // the bridge's CPU share: costs accumulate and are paid in
        // timer-sized chunks
        let now = Instant::now();
        busy_until = busy_until.max(now) + shared.spec.cpu.cost(msg.payload.len());
        if busy_until > now + Duration::from_micros(500) {
            sleep_until(busy_until).await;
        }

        let payload = match transform(&shared.spec.transform, &msg.payload, &shared.spec.provider) {
            Ok(p) => p,
            Err(_) => {
                shared.stats().transform_failed += 1;
                shared.pending.fetch_sub(1, Ordering::SeqCst);
                continue;
            }
        };
        match shared.spec.mode {
            RepublishMode::Sync => {
                shared.forward(msg, payload).await;
                shared.pending.fetch_sub(1, Ordering::SeqCst);
            }
            RepublishMode::Async => {
                let shared = shared.clone();
                inflight.spawn(async move {
                    shared.forward(msg, payload).await;
                    shared.pending.fetch_sub(1, Ordering::SeqCst);
                });
            }
        }
    }
    inflight.abort_all();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadgen::{generate_payload, HubSpec};

    fn doc(size: usize) -> Vec<u8> {
        let hub = HubSpec {
            id: "hub001".into(),
            payload_size: size,
            topic: TopicName::new("sensors/prov1/gateway1/hub001").unwrap(),
            seed: 1,
        };
        generate_payload(&hub, 0)
    }

    #[test]
    fn identity_is_byte_identical() {
        let input = b"anything at all \x00\xff";
        let out = transform(&TransformSpec::identity(), input, "p").unwrap();
        assert_eq!(&out[..], input);
    }

    #[test]
    fn unify_shrinks_every_realistic_input() {
        let spec = TransformSpec::unify([("p".to_string(), 1.0)]).unwrap();
        for size in [300, 1500, 35_000] {
            let out = transform(&spec, &doc(size), "p").unwrap();
            assert!(out.len() < size, "{size} -> {}", out.len());
            assert!(out.starts_with(UNIFIED_HEADER.as_bytes()));
        }
    }

    #[test]
    fn corrupted_input_is_rejected() {
        let spec = TransformSpec::unify([]).unwrap();
        let mut bad = doc(1500);
        bad[0] = b'X';
        assert!(matches!(
            transform(&spec, &bad, "p"),
            Err(BridgeError::MalformedPayload(_))
        ));
        let mut bad = doc(1500);
        let n = bad.len();
        bad[n / 2] = b';';
        bad[n / 2 + 1] = b';';
        assert!(transform(&spec, &bad, "p").is_err());
    }

    #[test]
    fn ratio_bounds() {
        assert!(UnifyRatio::new(0.0).is_err());
        assert!(UnifyRatio::new(1.0).is_ok());
        assert!(UnifyRatio::new(1.01).is_err());
    }

    #[test]
    fn topic_map_rewrites_prefix_only() {
        let m = TopicMap::default();
        let t = TopicName::new("sensors/prov1/gateway1/hub001").unwrap();
        assert_eq!(m.map(&t).unwrap().as_str(), "unified/prov1/gateway1/hub001");
        assert!(m.map(&TopicName::new("sensorsx/a").unwrap()).is_err());
    }
}
