//! Fan-in load driver: providers own gateways, gateways own sensor hubs,
//! and every hub publishes one synthetic payload per batch.

use std::fmt::Write as _;
use std::time::Duration;

use bridgebench_core::client::{Client, ClientConfig, FailReason, PublishOutcome, PublishResult};
use bridgebench_core::codec::QoS;
use bridgebench_core::topics::TopicName;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::task::JoinSet;
use tokio::time::{sleep_until, Instant};

#[derive(Debug, Clone, PartialEq)]
pub struct HubSpec {
    pub id: String,
    pub payload_size: usize,
    pub topic: TopicName,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cycling {
    /// Connect, publish every hub's payload, disconnect, once per batch.
    #[default]
    PerBatch,
    /// Connect and disconnect around every single message.
    PerMessage,
    /// One connection for the whole run.
    Persistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewaySpec {
    /// Globally unique, e.g. `prov1/gateway1`.
    pub id: String,
    pub provider: String,
    pub hubs: Vec<HubSpec>,
    /// Batches per second.
    pub rate: f64,
    pub messages_per_hub: u32,
    pub cycling: Cycling,
}

impl GatewaySpec {
    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate)
    }

    pub fn total_messages(&self) -> u64 {
        self.hubs.len() as u64 * u64::from(self.messages_per_hub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSpec {
    pub id: String,
    pub gateways: Vec<GatewaySpec>,
}

impl ProviderSpec {
    pub fn hubs(&self) -> impl Iterator<Item = (&GatewaySpec, &HubSpec)> {
        self.gateways.iter().flat_map(|g| g.hubs.iter().map(move |h| (g, h)))
    }
}

const PARAMETERS: [(&str, &str, f64, f64); 10] = [
    ("water_temperature", "degC", -2.0, 30.0),
    ("salinity", "PSU", 30.0, 38.0),
    ("conductivity", "mS/cm", 20.0, 60.0),
    ("pressure", "dbar", 0.0, 200.0),
    ("dissolved_oxygen", "mg/L", 4.0, 12.0),
    ("turbidity", "NTU", 0.0, 50.0),
    ("chlorophyll_a", "ug/L", 0.0, 20.0),
    ("ph", "pH", 7.5, 8.5),
    ("wind_speed", "m/s", 0.0, 35.0),
    ("significant_wave_height", "m", 0.0, 12.0),
];

const QUALITY: [&str; 3] = ["good", "good", "suspect"];

/// First line of every payload; the bridge checks for it.
pub const PAYLOAD_MAGIC: &str = "# sensor-hub v1";
/// Column header line.
pub const PAYLOAD_COLUMNS: &str = "time_ms;hub;parameter;value;unit;quality";
const BASE_EPOCH_MS: u64 = 1_677_628_800_000;
const LONGEST_LINE: usize = 96;

fn payload_rng(seed: u64, hub: &str, seq: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(hub.as_bytes());
    h.update(seq.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Deterministic sensor-text document of exactly `payload_size` bytes:
/// a header, semicolon-separated timestamped readings, and a comment line
/// padding out the remainder.
pub fn generate_payload(hub: &HubSpec, seq: u64) -> Vec<u8> {
    let target = hub.payload_size;
    let mut rng = payload_rng(hub.seed, &hub.id, seq);
    let mut doc = String::with_capacity(target + LONGEST_LINE);
    let _ = writeln!(doc, "{PAYLOAD_MAGIC} hub={} seq={seq}", hub.id);
    doc.push_str(PAYLOAD_COLUMNS);
    doc.push('\n');
    if doc.len() + 2 > target {
        doc.truncate(target);
        return doc.into_bytes();
    }

    let t0 = BASE_EPOCH_MS + seq * 1000;
    let mut i = 0u64;
    while target - doc.len() >= LONGEST_LINE + 2 {
        let (name, unit, lo, hi) = PARAMETERS[(i as usize) % PARAMETERS.len()];
        let value: f64 = rng.gen_range(lo..hi);
        let quality = QUALITY[rng.gen_range(0..QUALITY.len())];
        let _ = writeln!(doc, "{};{};{name};{value:.4};{unit};{quality}", t0 + i * 10, hub.id);
        i += 1;
    }
    let remaining = target - doc.len();
    if remaining > 0 {
        doc.push('#');
        for _ in 0..remaining.saturating_sub(2) {
            doc.push(char::from(b'a' + rng.gen_range(0..26u8)));
        }
        if remaining >= 2 {
            doc.push('\n');
        }
    }
    debug_assert_eq!(doc.len(), target);
    doc.into_bytes()
}

/// Everything a gateway did during one run.
#[derive(Debug, Clone, Default)]
pub struct GatewayRun {
    pub gateway: String,
    /// Ordered by seq; exactly `hubs × messages_per_hub` entries.
    pub outcomes: Vec<PublishOutcome>,
    /// Actual batch start times on the run clock.
    pub batch_starts_us: Vec<u64>,
    pub connections: u64,
    pub connect_attempts: u64,
}

fn failed(seq: u64, qos: QoS, now_us: u64) -> PublishOutcome {
    PublishOutcome {
        seq,
        qos,
        t_publish_us: now_us,
        t_complete_us: now_us,
        retries: 0,
        result: PublishResult::Failed(FailReason::NotConnected),
    }
}

struct Batch {
    outcomes: Vec<PublishOutcome>,
    started_us: u64,
    connections: u64,
    attempts: u64,
}

async fn connect(base: &ClientConfig, id: String) -> Option<Client> {
    let mut cfg = base.clone();
    cfg.link_id = Some(id.clone());
    cfg.client_id = id;
    Client::connect(cfg).await.ok()
}

async fn run_batch(spec: &GatewaySpec, base: &ClientConfig, qos: QoS, k: u64, shared: Option<Client>) -> Batch {
    let clock = base.clock;
    let hubs = spec.hubs.len() as u64;
    let started_us = clock.now_us();
    let mut batch = Batch {
        outcomes: Vec::with_capacity(spec.hubs.len()),
        started_us,
        connections: 0,
        attempts: 0,
    };
    let client_prefix = spec.id.replace('/', "-");
    let per_batch = match (spec.cycling, &shared) {
        (Cycling::PerBatch, _) => {
            let c = connect(base, format!("{client_prefix}-b{k}")).await;
            if let Some(c) = &c {
                batch.connections += 1;
                batch.attempts += u64::from(c.connect_attempts());
            }
            c
        }
        (_, s) => s.clone(),
    };

    for (h, hub) in spec.hubs.iter().enumerate() {
        let seq = k * hubs + h as u64;
        let payload = generate_payload(hub, seq);
        let client = match spec.cycling {
            Cycling::PerMessage => {
                let c = connect(base, format!("{client_prefix}-m{seq}")).await;
                if let Some(c) = &c {
                    batch.connections += 1;
                    batch.attempts += u64::from(c.connect_attempts());
                }
                c
            }
            _ => per_batch.clone(),
        };
        let outcome = match &client {
            Some(c) => c.publish(hub.topic.clone(), payload, qos, Some(seq), vec![]).await,
            None => failed(seq, qos, clock.now_us()),
        };
        batch.outcomes.push(outcome);
        if let (Cycling::PerMessage, Some(c)) = (spec.cycling, client) {
            c.disconnect().await;
        }
    }
    if let (Cycling::PerBatch, Some(c)) = (spec.cycling, per_batch) {
        c.disconnect().await;
    }
    batch
}

/// Runs one gateway to completion. Batch `k` starts at `start + k × period`
/// regardless of how long earlier batches take, so a slow handshake never
/// stretches the offered load.
pub async fn run_gateway(spec: GatewaySpec, base: ClientConfig, qos: QoS, start: Instant) -> GatewayRun {
    let mut run = GatewayRun {
        gateway: spec.id.clone(),
        ..GatewayRun::default()
    };
    if spec.messages_per_hub == 0 || spec.hubs.is_empty() {
        return run;
    }
    let persistent = if spec.cycling == Cycling::Persistent {
        sleep_until(start).await;
        let c = connect(&base, spec.id.replace('/', "-")).await;
        if let Some(c) = &c {
            run.connections += 1;
            run.connect_attempts += u64::from(c.connect_attempts());
        }
        c
    } else {
        None
    };

    let spec = std::sync::Arc::new(spec);
    let base = std::sync::Arc::new(base);
    let period = spec.period();
    let mut tasks = JoinSet::new();
    for k in 0..u64::from(spec.messages_per_hub) {
        let (spec, base, shared) = (spec.clone(), base.clone(), persistent.clone());
        let at = start + period.mul_f64(k as f64);
        tasks.spawn(async move {
            sleep_until(at).await;
            run_batch(&spec, &base, qos, k, shared).await
        });
    }
    let mut starts = Vec::new();
    while let Some(done) = tasks.join_next().await {
        let batch = done.expect("batch task panicked");
        starts.push(batch.started_us);
        run.connections += batch.connections;
        run.connect_attempts += batch.attempts;
        run.outcomes.extend(batch.outcomes);
    }
    if let Some(c) = persistent {
        c.disconnect().await;
    }
    starts.sort_unstable();
    run.batch_starts_us = starts;
    run.outcomes.sort_by_key(|o| o.seq);
    run
}
