//! Repetition lifecycle: brokers, subscriber, bridges, gateways, drain,
//! snapshot, teardown. Raw results go to CSV; tables are rebuilt from them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bridgebench_core::broker::{Broker, BrokerConfig, BrokerCounters};
use bridgebench_core::client::{Client, ClientConfig, ClientError, InboundMessage, PublishOutcome};
use bridgebench_core::clock::RunClock;
use bridgebench_core::codec::{QoS, SubscribeOptions};
use bridgebench_core::netem::{DropDecision, DropTrace, LinkProfile};
use bridgebench_core::topics::TopicFilter;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::{sleep, Instant};
use tracing::{info, warn};

use crate::bridge::{
    plan_deployment, run_bridge, Aut, BridgeError, BridgeSpec, BridgeStats, CpuModel, TopicScheme, TransformSpec,
};
use crate::config::{ConfigError, ScenarioConfig};
use crate::loadgen::{run_gateway, GatewayRun};
use crate::metrics::{compute_metrics, BrokerTopicCounts, MeasurementRecord, Recorder, RunMetrics};
use crate::report::{self, Report, ReportError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("broker failed to start: {0}")]
    BrokerStart(std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bridge: {0}")]
    Bridge(#[from] BridgeError),
    #[error("subscriber: {0}")]
    Subscriber(ClientError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing results: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// One configuration column of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub aut: Aut,
    pub scheme: TopicScheme,
    pub qos: QoS,
}

impl Cell {
    /// Nominal bridge topic size of the scheme.
    pub fn topic_size(&self) -> usize {
        match self.scheme {
            TopicScheme::Wildcard => 15,
            TopicScheme::Explicit => 29,
        }
    }

    pub fn id(&self) -> String {
        format!("aut{}-{}-q{}", self.aut.number(), self.topic_size(), self.qos.level())
    }

    pub fn column(&self) -> String {
        format!(
            "AUT{}-{}B QoS{}",
            self.aut.number(),
            self.topic_size(),
            self.qos.level()
        )
    }

    pub fn of(cfg: &ScenarioConfig) -> Cell {
        Cell {
            aut: cfg.aut,
            scheme: cfg.topic_scheme,
            qos: cfg.qos,
        }
    }

    /// The nine cells: {AUT1-15, AUT1-29, AUT2-29} × {QoS 0, 1, 2}.
    pub fn full_matrix() -> Vec<Cell> {
        let mut cells = Vec::new();
        for (aut, scheme) in [
            (Aut::PerProvider, TopicScheme::Wildcard),
            (Aut::PerProvider, TopicScheme::Explicit),
            (Aut::PerHub, TopicScheme::Explicit),
        ] {
            for qos in [QoS::AtMostOnce, QoS::AtLeastOnce, QoS::ExactlyOnce] {
                cells.push(Cell { aut, scheme, qos });
            }
        }
        cells
    }

    pub fn apply(&self, cfg: &ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig {
            aut: self.aut,
            topic_scheme: self.scheme,
            qos: self.qos,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        *self == RunStatus::Ok
    }
}

/// What one gateway did, without the per-message detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySummary {
    pub gateway: String,
    pub published: u64,
    pub failed: u64,
    pub retries: u64,
    pub connections: u64,
    pub connect_attempts: u64,
    /// Largest relative deviation of an inter-batch gap from the period.
    pub pacing_deviation: f64,
}

impl GatewaySummary {
    fn of(run: &GatewayRun, period: Duration) -> Self {
        let p = period.as_micros() as f64;
        let pacing_deviation = run
            .batch_starts_us
            .windows(2)
            .map(|w| ((w[1] - w[0]) as f64 - p).abs() / p)
            .fold(0.0, f64::max);
        Self {
            gateway: run.gateway.clone(),
            published: run.outcomes.len() as u64,
            failed: run.outcomes.iter().filter(|o| !o.is_ok()).count() as u64,
            retries: run.outcomes.iter().map(|o| u64::from(o.retries)).sum(),
            connections: run.connections,
            connect_attempts: run.connect_attempts,
            pacing_deviation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub run_id: String,
    pub cell: Cell,
    pub repetition: u32,
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub records: Vec<MeasurementRecord>,
    pub outcomes: BTreeMap<String, Vec<PublishOutcome>>,
    pub gateways: Vec<GatewaySummary>,
    pub drops: Vec<DropDecision>,
    pub brokers: BTreeMap<String, BrokerCounters>,
    pub bridges: Vec<BridgeStats>,
    pub bridge_count: usize,
    pub bridge_topic_size: usize,
    pub wall_ms: u64,
}

impl RepetitionResult {
    fn failed(cfg: &ScenarioConfig, rep: u32, why: String) -> Self {
        let cell = Cell::of(cfg);
        Self {
            run_id: run_id(cell, rep),
            cell,
            repetition: rep,
            status: RunStatus::Failed(why),
            metrics: RunMetrics::default(),
            records: Vec::new(),
            outcomes: BTreeMap::new(),
            gateways: Vec::new(),
            drops: Vec::new(),
            brokers: BTreeMap::new(),
            bridges: Vec::new(),
            bridge_count: 0,
            bridge_topic_size: 0,
            wall_ms: 0,
        }
    }
}

pub fn run_id(cell: Cell, rep: u32) -> String {
    format!("{}-r{rep}", cell.id())
}

/// Link seed for one repetition. Cells of a sweep share it, so every
/// configuration sees the same loss pattern for the same packets.
pub fn link_seed(seed: u64, rep: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"link");
    h.update(seed.to_le_bytes());
    h.update(rep.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

fn seeded(profile: &LinkProfile, seed: u64) -> LinkProfile {
    LinkProfile {
        seed,
        ..profile.clone()
    }
}

fn client_config(
    cfg: &ScenarioConfig,
    id: &str,
    broker: std::net::SocketAddr,
    link: LinkProfile,
    clock: RunClock,
) -> ClientConfig {
    let mut c = ClientConfig::new(id, broker);
    c.keep_alive = cfg.client.keep_alive;
    c.ack_timeout = Duration::from_millis(cfg.client.ack_timeout_ms);
    c.connect_timeout = Duration::from_millis(cfg.client.connect_timeout_ms);
    c.connect_attempts = cfg.client.connect_attempts;
    c.max_retries = cfg.client.max_retries.0;
    c.link = link;
    c.clock = clock;
    c
}

struct Brokers {
    sources: BTreeMap<String, Broker>,
    dest: Broker,
}

impl Brokers {
    async fn start(cfg: &ScenarioConfig) -> Result<Self, RunError> {
        let conf = |name: String| BrokerConfig {
            name,
            session: cfg.broker.session(),
            ..BrokerConfig::default()
        };
        let mut sources = BTreeMap::new();
        for p in &cfg.providers {
            let b = Broker::start(conf(format!("source-{}", p.id)))
                .await
                .map_err(RunError::BrokerStart)?;
            sources.insert(p.id.clone(), b);
        }
        let dest = Broker::start(conf("destination".into()))
            .await
            .map_err(RunError::BrokerStart)?;
        Ok(Self { sources, dest })
    }

    fn snapshot(&self) -> (BTreeMap<String, BrokerCounters>, BrokerTopicCounts) {
        let mut all = BTreeMap::new();
        let mut topics = BrokerTopicCounts::default();
        for b in self.sources.values() {
            let c = b.counters_snapshot();
            for (t, n) in &c.per_topic_received {
                *topics.source.entry(t.clone()).or_default() += n;
            }
            all.insert(b.name().to_owned(), c);
        }
        let c = self.dest.counters_snapshot();
        topics.dest = c.per_topic_received.clone();
        all.insert(self.dest.name().to_owned(), c);
        (all, topics)
    }

    async fn shutdown(self) {
        for b in self.sources.into_values() {
            b.shutdown().await;
        }
        self.dest.shutdown().await;
    }
}

/// Drains the subscriber sink into a [`Recorder`] until told to stop.
fn spawn_recorder(
    mut rx: mpsc::UnboundedReceiver<InboundMessage>,
    last_arrival: Arc<AtomicU64>,
) -> (oneshot::Sender<()>, tokio::task::JoinHandle<Recorder>) {
    let (stop_tx, mut stop_rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        let mut rec = Recorder::new();
        loop {
            tokio::select! {
                _ = &mut stop_rx => break,
                m = rx.recv() => match m {
                    Some(m) => {
                        last_arrival.store(m.arrival_us, Ordering::SeqCst);
                        let _ = rec.record(&m);
                    }
                    None => break,
                },
            }
        }
        while let Ok(m) = rx.try_recv() {
            let _ = rec.record(&m);
        }
        rec
    });
    (stop_tx, task)
}

/// Runs one repetition of the configured cell.
pub async fn run_repetition(cfg: &ScenarioConfig, rep: u32) -> Result<RepetitionResult, RunError> {
    cfg.validate()?;
    let cell = Cell::of(cfg);
    let wall = std::time::Instant::now();
    let clock = RunClock::start();
    let seed = link_seed(cfg.seed, rep);
    let trace = DropTrace::new();
    let providers = cfg.provider_specs()?;
    let plan = plan_deployment(&providers, cfg.aut, cfg.topic_scheme)?;

    let brokers = Brokers::start(cfg).await?;
    let mut bridges = Vec::new();
    let outcome = async {
        // subscriber first, so nothing reaches the destination unobserved
        let sub_cfg = client_config(
            cfg,
            "subscriber",
            brokers.dest.local_addr(),
            seeded(&cfg.links.subscriber, seed),
            clock,
        );
        let subscriber = Client::connect(sub_cfg).await.map_err(RunError::Subscriber)?;
        let (sink, rx) = mpsc::unbounded_channel();
        let last_arrival = Arc::new(AtomicU64::new(0));
        let recorder = spawn_recorder(rx, last_arrival.clone());
        let all = TopicFilter::new(format!("{}/#", cfg.bridge.output_prefix)).map_err(ConfigError::from)?;
        let opts = SubscribeOptions {
            max_qos: cfg.qos,
            ..SubscribeOptions::default()
        };
        subscriber
            .subscribe(all, opts, sink)
            .await
            .map_err(RunError::Subscriber)?;

        let share = cfg.bridge.cpu_cores_total / plan.bridges.len().max(1) as f64;
        let transform = match cfg.bridge.transform {
            crate::bridge::TransformMode::Identity => TransformSpec::identity(),
            crate::bridge::TransformMode::Unify => TransformSpec {
                mode: crate::bridge::TransformMode::Unify,
                ratios: cfg.bridge.unify_ratio.clone(),
            },
        };
        for b in &plan.bridges {
            let spec = BridgeSpec {
                name: b.name.clone(),
                provider: b.provider.clone(),
                source: brokers.sources[&b.provider].local_addr(),
                destination: brokers.dest.local_addr(),
                subscriptions: b.subscriptions.clone(),
                options: SubscribeOptions {
                    max_qos: cfg.qos,
                    no_local: true,
                    retain_as_published: true,
                },
                output: cfg.output_map(),
                qos: cfg.qos,
                mode: cfg.republish_mode,
                transform: transform.clone(),
                cpu: CpuModel {
                    ns_per_byte: cfg.bridge.ns_per_byte,
                    cpu_share: share,
                },
                queue_capacity: cfg.bridge.queue_capacity,
            };
            let link = seeded(&cfg.links.bridge, seed);
            let side = |addr| client_config(cfg, "", addr, link.clone(), clock);
            let handle = run_bridge(spec.clone(), side(spec.source), side(spec.destination)).await?;
            bridges.push(handle);
        }

        let gw_link = seeded(&cfg.links.gateway, seed);
        let traced = gw_link.segment_loss_p > 0.0;
        let start = Instant::now() + Duration::from_millis(20);
        let mut tasks = JoinSet::new();
        let mut periods = BTreeMap::new();
        for p in &providers {
            for g in &p.gateways {
                let mut c = client_config(cfg, &g.id, brokers.sources[&p.id].local_addr(), gw_link.clone(), clock);
                if traced {
                    c.trace = Some(trace.clone());
                }
                periods.insert(g.id.clone(), g.period());
                tasks.spawn(run_gateway(g.clone(), c, cfg.qos, start));
            }
        }
        let mut runs = BTreeMap::new();
        while let Some(r) = tasks.join_next().await {
            let r = r.expect("gateway task panicked");
            runs.insert(r.gateway.clone(), r);
        }
        let gateways_done = clock.now_us();

        // drain: quiet for `grace` and every bridge idle
        let grace = cfg.grace_ms * 1000;
        let deadline = Instant::now() + Duration::from_secs(cfg.max_drain_s);
        let mut status = RunStatus::Ok;
        loop {
            sleep(Duration::from_millis((cfg.grace_ms / 5).clamp(5, 200))).await;
            let last = last_arrival.load(Ordering::SeqCst).max(gateways_done);
            let quiet = clock.now_us().saturating_sub(last) >= grace;
            if quiet && bridges.iter().all(|b| b.is_idle()) {
                break;
            }
            if Instant::now() > deadline {
                status = RunStatus::Failed(format!("traffic did not settle within {} s", cfg.max_drain_s));
                break;
            }
        }
        let (counters, topics) = brokers.snapshot();
        let _ = recorder.0.send(());
        let rec = recorder.1.await.expect("recorder panicked");
        subscriber.disconnect().await;
        Ok::<_, RunError>((runs, periods, rec, counters, topics, status))
    }
    .await;

    let mut bridge_stats = Vec::new();
    for b in bridges {
        bridge_stats.push(b.stop().await);
    }
    brokers.shutdown().await;
    let (runs, periods, rec, counters, topics, status) = outcome?;

    let outcomes: BTreeMap<String, Vec<PublishOutcome>> =
        runs.iter().map(|(g, r)| (g.clone(), r.outcomes.clone())).collect();
    let gateways = runs
        .values()
        .map(|r| GatewaySummary::of(r, periods[&r.gateway]))
        .collect();
    let (records, unstamped) = rec.into_parts();
    let metrics = compute_metrics(&records, &outcomes, &topics, unstamped);
    if !status.is_ok() {
        warn!(run = %run_id(cell, rep), ?status, "repetition failed");
    }
    info!(
        run = %run_id(cell, rep),
        published = metrics.aggregate.published,
        received = metrics.aggregate.received_unique,
        latency_ms = metrics.aggregate.latency.mean_ms,
        "repetition done"
    );
    Ok(RepetitionResult {
        run_id: run_id(cell, rep),
        cell,
        repetition: rep,
        status,
        metrics,
        records,
        outcomes,
        gateways,
        drops: trace.decisions(),
        brokers: counters,
        bridges: bridge_stats,
        bridge_count: plan.bridges.len(),
        bridge_topic_size: plan.bridge_topic_size,
        wall_ms: wall.elapsed().as_millis() as u64,
    })
}

/// Every repetition of every cell, in order. Hard errors of a repetition
/// are turned into a failed result so the sweep carries on.
pub async fn execute(cfg: &ScenarioConfig, cells: &[Cell]) -> Vec<RepetitionResult> {
    let mut out = Vec::new();
    for cell in cells {
        let c = cell.apply(cfg);
        for rep in 0..cfg.repetitions {
            let r = match run_repetition(&c, rep).await {
                Ok(r) => r,
                Err(e) => {
                    warn!(cell = %cell.id(), rep, error = %e, "repetition aborted");
                    RepetitionResult::failed(&c, rep, e.to_string())
                }
            };
            out.push(r);
        }
    }
    out
}

#[derive(Debug)]
pub struct RunReport {
    pub repetitions: Vec<RepetitionResult>,
    pub report: Report,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.repetitions.iter().all(|r| r.status.is_ok())
    }
}

/// Runs the configured cell and writes raw and aggregated outputs to `out`.
pub async fn run(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport, RunError> {
    sweep(cfg, &[Cell::of(cfg)], out).await
}

pub async fn sweep(cfg: &ScenarioConfig, cells: &[Cell], out: &Path) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let repetitions = execute(cfg, cells).await;
    write_raw(out, cfg, &repetitions)?;
    let report = report::report(out)?;
    report.write(out)?;
    Ok(RunReport { repetitions, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub cell: String,
    pub aut: u8,
    pub topic_size: usize,
    pub qos: u8,
    pub repetition: u32,
    pub status: String,
    pub bridges: usize,
    pub bridge_topic_size: usize,
    pub published: u64,
    pub published_ok: u64,
    pub received_unique: u64,
    pub received_source: u64,
    pub received_dest: u64,
    pub lost_e2e: u64,
    pub lost_source: u64,
    pub duplicates: u64,
    pub latency_mean_ms: f64,
    pub latency_median_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_count: u64,
    pub mean_payload_bytes: f64,
    pub unstamped: u64,
    pub wall_ms: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRow {
    pub run_id: String,
    pub cell: String,
    pub aut: u8,
    pub topic_size: usize,
    pub qos: u8,
    pub repetition: u32,
    pub status: String,
    pub provider: String,
    pub gateway: String,
    pub published: u64,
    pub received_unique: u64,
    pub received_source: u64,
    pub lost_e2e: u64,
    pub duplicates: u64,
    pub loss_per_1000: f64,
    pub latency_mean_ms: f64,
    pub latency_count: u64,
    pub retries: u64,
    pub connections: u64,
    pub connect_attempts: u64,
    pub pacing_deviation: f64,
}

#[derive(Debug, Serialize)]
struct RecordRow<'a> {
    run_id: &'a str,
    repetition: u32,
    aut: u8,
    qos: u8,
    topic_size: usize,
    provider: &'a str,
    gateway: &'a str,
    seq: u64,
    publish_ts_us: u64,
    arrival_ts_us: u64,
    latency_ms: f64,
    payload_bytes: usize,
    duplicate_flag: u8,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropRow {
    pub run_id: String,
    pub link: String,
    pub direction: String,
    pub ordinal: u64,
    pub dropped: u8,
}

fn status_str(s: &RunStatus) -> String {
    match s {
        RunStatus::Ok => "ok".into(),
        RunStatus::Failed(why) => format!("failed: {why}"),
    }
}

/// Writes results.csv, gateways.csv, records.csv, drops.csv and brokers.json.
pub fn write_raw(dir: &Path, cfg: &ScenarioConfig, reps: &[RepetitionResult]) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    let mut results = csv::Writer::from_path(dir.join("results.csv"))?;
    let mut gateways = csv::Writer::from_path(dir.join("gateways.csv"))?;
    let mut records = csv::Writer::from_path(dir.join("records.csv"))?;
    let mut drops = csv::Writer::from_path(dir.join("drops.csv"))?;
    let mut brokers = BTreeMap::new();
    for r in reps {
        let cell_cfg = r.cell.apply(cfg);
        let digest = cell_cfg.digest();
        let (aut, qos, ts) = (r.cell.aut.number(), r.cell.qos.level(), r.cell.topic_size());
        let m = &r.metrics.aggregate;
        results.serialize(ResultRow {
            run_id: r.run_id.clone(),
            cell: r.cell.id(),
            aut,
            topic_size: ts,
            qos,
            repetition: r.repetition,
            status: status_str(&r.status),
            bridges: r.bridge_count,
            bridge_topic_size: r.bridge_topic_size,
            published: m.published,
            published_ok: m.published_ok,
            received_unique: m.received_unique,
            received_source: m.received_source,
            received_dest: m.received_dest,
            lost_e2e: m.lost_e2e,
            lost_source: m.lost_source,
            duplicates: m.duplicates,
            latency_mean_ms: m.latency.mean_ms,
            latency_median_ms: m.latency.median_ms,
            latency_p95_ms: m.latency.p95_ms,
            latency_count: m.latency.count,
            mean_payload_bytes: m.mean_payload_bytes,
            unstamped: m.unstamped,
            wall_ms: r.wall_ms,
            config_digest: digest,
        })?;
        let summaries: BTreeMap<&str, &GatewaySummary> = r.gateways.iter().map(|g| (g.gateway.as_str(), g)).collect();
        for (g, gm) in &r.metrics.per_gateway {
            let s = summaries.get(g.as_str());
            gateways.serialize(GatewayRow {
                run_id: r.run_id.clone(),
                cell: r.cell.id(),
                aut,
                topic_size: ts,
                qos,
                repetition: r.repetition,
                status: status_str(&r.status),
                provider: g.split('/').next().unwrap_or_default().to_owned(),
                gateway: g.clone(),
                published: gm.published,
                received_unique: gm.received_unique,
                received_source: gm.received_source,
                lost_e2e: gm.lost_e2e,
                duplicates: gm.duplicates,
                loss_per_1000: gm.loss_per_1000(),
                latency_mean_ms: gm.latency.mean_ms,
                latency_count: gm.latency.count,
                retries: s.map_or(0, |s| s.retries),
                connections: s.map_or(0, |s| s.connections),
                connect_attempts: s.map_or(0, |s| s.connect_attempts),
                pacing_deviation: s.map_or(0.0, |s| s.pacing_deviation),
            })?;
        }
        for rec in &r.records {
            let provider = rec.gateway.split('/').next().unwrap_or_default();
            records.serialize(RecordRow {
                run_id: &r.run_id,
                repetition: r.repetition,
                aut,
                qos,
                topic_size: ts,
                provider,
                gateway: &rec.gateway,
                seq: rec.seq,
                publish_ts_us: rec.publish_us,
                arrival_ts_us: rec.arrival_us,
                latency_ms: rec.latency_ms(),
                payload_bytes: rec.payload_bytes,
                duplicate_flag: rec.duplicate as u8,
            })?;
        }
        for d in &r.drops {
            drops.serialize(DropRow {
                run_id: r.run_id.clone(),
                link: d.link.clone(),
                direction: d.direction.to_string(),
                ordinal: d.ordinal,
                dropped: d.dropped as u8,
            })?;
        }
        brokers.insert(
            r.run_id.clone(),
            serde_json::json!({ "brokers": r.brokers, "bridges": r.bridges, "gateways": r.gateways }),
        );
    }
    results.flush()?;
    gateways.flush()?;
    records.flush()?;
    drops.flush()?;
    let json = serde_json::to_string_pretty(&brokers).expect("counters serialize");
    std::fs::write(dir.join("brokers.json"), json)?;
    Ok(())
}
