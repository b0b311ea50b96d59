use std::time::Duration;

use bridgebench::loadgen::{generate_payload, run_gateway, Cycling, GatewaySpec, HubSpec, PAYLOAD_MAGIC};
use bridgebench::presets::load_preset;
use bridgebench_core::broker::{Broker, BrokerConfig};
use bridgebench_core::client::ClientConfig;
use bridgebench_core::codec::QoS;
use bridgebench_core::topics::TopicName;
use tokio::time::Instant;

fn hub(id: &str, size: usize) -> HubSpec {
    HubSpec {
        id: id.into(),
        payload_size: size,
        topic: TopicName::new(format!("sensors/p/g/{id}")).unwrap(),
        seed: 77,
    }
}

#[test]
fn payload_sizes_within_one_percent() {
    for (size, lo, hi) in [
        (125_000, 123_750, 126_250),
        (35_000, 34_650, 35_350),
        (1_500, 1_485, 1_515),
    ] {
        for seq in [0, 1, 999] {
            let n = generate_payload(&hub("h", size), seq).len();
            assert!((lo..=hi).contains(&n), "{size} -> {n}");
        }
    }
}

#[test]
fn payload_is_deterministic_and_structured() {
    let h = hub("hub003", 1_500);
    assert_eq!(generate_payload(&h, 4), generate_payload(&h, 4));
    assert_ne!(generate_payload(&h, 4), generate_payload(&h, 5));
    let other = HubSpec { seed: 78, ..h.clone() };
    assert_ne!(generate_payload(&h, 4), generate_payload(&other, 4));
    let doc = String::from_utf8(generate_payload(&h, 4)).unwrap();
    assert!(doc.starts_with(PAYLOAD_MAGIC));
    assert!(doc.lines().any(|l| l.split(';').count() == 6 && l.contains("hub003")));
}

#[test]
fn paper_topology_publishes_4000() {
    let cfg = load_preset("paper").unwrap();
    let providers = cfg.provider_specs().unwrap();
    let total: u64 = providers
        .iter()
        .flat_map(|p| &p.gateways)
        .map(GatewaySpec::total_messages)
        .sum();
    assert_eq!(total, 4000);
    assert_eq!(cfg.total_messages(), 4000);
    let gw_counts: Vec<u64> = providers
        .iter()
        .flat_map(|p| &p.gateways)
        .map(|g| g.total_messages())
        .collect();
    assert_eq!(gw_counts, [1000, 1000, 2000]);
}

fn gateway(hubs: Vec<HubSpec>, rate: f64, n: u32, cycling: Cycling) -> GatewaySpec {
    GatewaySpec {
        id: "p/g".into(),
        provider: "p".into(),
        hubs,
        rate,
        messages_per_hub: n,
        cycling,
    }
}

#[tokio::test]
async fn paced_batches_with_contiguous_seq() {
    let broker = Broker::start(BrokerConfig::default()).await.unwrap();
    let base = ClientConfig::new("gw", broker.local_addr());
    let spec = gateway(vec![hub("h1", 200), hub("h2", 300)], 20.0, 10, Cycling::PerBatch);
    let start = Instant::now();
    let run = run_gateway(spec.clone(), base, QoS::AtLeastOnce, start).await;
    let elapsed = start.elapsed();

    // 10 batches at 50 ms: the last one starts 450 ms in
    assert!(elapsed >= Duration::from_millis(450), "{elapsed:?}");
    assert_eq!(run.outcomes.len(), 20);
    let seqs: Vec<u64> = run.outcomes.iter().map(|o| o.seq).collect();
    assert_eq!(seqs, (0..20).collect::<Vec<_>>());
    assert!(run.outcomes.iter().all(|o| o.is_ok()));
    assert_eq!(run.connections, 10);

    let period = spec.period().as_micros() as f64;
    for w in run.batch_starts_us.windows(2) {
        let dev = ((w[1] - w[0]) as f64 - period).abs() / period;
        assert!(dev < 0.1, "batch gap {} us", w[1] - w[0]);
    }
    // conservation at the source broker
    let counters = broker.counters_snapshot();
    assert_eq!(counters.publishes_received, 20);
}

#[tokio::test]
async fn persistent_cycling_connects_once() {
    let broker = Broker::start(BrokerConfig::default()).await.unwrap();
    let base = ClientConfig::new("gw", broker.local_addr());
    let spec = gateway(vec![hub("h1", 100)], 100.0, 5, Cycling::Persistent);
    let run = run_gateway(spec, base, QoS::AtMostOnce, Instant::now()).await;
    assert_eq!(run.outcomes.len(), 5);
    assert_eq!(run.connections, 1);
}

#[tokio::test]
async fn zero_messages_gives_no_outcomes() {
    let broker = Broker::start(BrokerConfig::default()).await.unwrap();
    let base = ClientConfig::new("gw", broker.local_addr());
    let spec = gateway(vec![hub("h1", 100)], 10.0, 0, Cycling::PerBatch);
    let run = run_gateway(spec, base, QoS::AtLeastOnce, Instant::now()).await;
    assert!(run.outcomes.is_empty());
}

#[tokio::test]
async fn unreachable_broker_records_failures() {
    let broker = Broker::start(BrokerConfig::default()).await.unwrap();
    let addr = broker.local_addr();
    broker.shutdown().await;
    let mut base = ClientConfig::new("gw", addr);
    base.connect_attempts = 1;
    base.connect_timeout = Duration::from_millis(100);
    let spec = gateway(vec![hub("h1", 100)], 50.0, 3, Cycling::PerBatch);
    let run = run_gateway(spec, base, QoS::AtLeastOnce, Instant::now()).await;
    assert_eq!(run.outcomes.len(), 3);
    assert!(run.outcomes.iter().all(|o| !o.is_ok()));
}
