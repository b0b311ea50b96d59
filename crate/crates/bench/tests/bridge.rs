use std::time::Duration;

use bridgebench::bridge::{
    plan_deployment, run_bridge, transform, Aut, BridgeError, BridgeSpec, BridgeStats, CpuModel, RepublishMode,
    TopicMap, TopicScheme, TransformMode, TransformSpec, UNIFIED_HEADER,
};
use bridgebench::loadgen::{generate_payload, Cycling, GatewaySpec, HubSpec, ProviderSpec};
use bridgebench::presets::load_preset;
use bridgebench_core::broker::{Broker, BrokerConfig};
use bridgebench_core::client::{Client, ClientConfig, InboundMessage};
use bridgebench_core::codec::{QoS, SubscribeOptions};
use bridgebench_core::netem::LinkProfile;
use bridgebench_core::topics::{TopicFilter, TopicName};
use tokio::sync::mpsc;
use tokio::time::timeout;

fn hub(id: &str, size: usize, topic: &str) -> HubSpec {
    HubSpec {
        id: id.into(),
        payload_size: size,
        topic: TopicName::new(topic).unwrap(),
        seed: 9,
    }
}

fn paper_providers() -> Vec<ProviderSpec> {
    load_preset("paper").unwrap().provider_specs().unwrap()
}

#[test]
fn unify_ratio_four_percent_of_125k() {
    let spec = TransformSpec::unify([("prov1".to_string(), 0.04)]).unwrap();
    let input = generate_payload(&hub("hub001", 125_000, "sensors/prov1/gateway1/hub001"), 3);
    let out = transform(&spec, &input, "prov1").unwrap();
    let text = std::str::from_utf8(&out).unwrap();
    let envelope = text.lines().next().unwrap().len() + 1;
    let longest_record = text.lines().skip(1).map(|l| l.len() + 1).max().unwrap();
    // whole records are kept, so the body falls short of 5000 by less than one record
    let body = out.len() - envelope;
    assert!(
        body <= 5_000 && body + longest_record > 5_000,
        "body {body}, envelope {envelope}"
    );
    assert!(text.starts_with(UNIFIED_HEADER));
}

#[test]
fn weighted_mean_output_near_table_value() {
    let cfg = load_preset("paper").unwrap();
    let providers = cfg.provider_specs().unwrap();
    let spec = TransformSpec {
        mode: TransformMode::Unify,
        ratios: cfg.bridge.unify_ratio.clone(),
    };

    // ratio × nominal size, weighted by message count, straight from the config
    let (mut expected, mut measured, mut n) = (0.0, 0.0, 0.0);
    for p in &providers {
        let ratio = cfg.bridge.unify_ratio[&p.id].get();
        for (g, h) in p.hubs() {
            let count = f64::from(g.messages_per_hub);
            expected += count * ratio * h.payload_size as f64;
            let sample: f64 = (0..20)
                .map(|seq| transform(&spec, &generate_payload(h, seq), &p.id).unwrap().len() as f64)
                .sum::<f64>()
                / 20.0;
            measured += count * sample;
            n += count;
        }
    }
    let (expected, measured) = (expected / n, measured / n);
    assert_eq!(n, 4000.0);
    assert!(
        (measured - expected).abs() / expected < 0.02,
        "measured {measured:.0}, expected {expected:.0}"
    );
    // mean payload reported at QoS 1 and 2
    assert!((measured - 5562.0).abs() / 5562.0 < 0.01, "measured {measured:.0}");
}

#[test]
fn plan_cardinalities() {
    let providers = paper_providers();
    let a1w = plan_deployment(&providers, Aut::PerProvider, TopicScheme::Wildcard).unwrap();
    assert_eq!((a1w.bridges.len(), a1w.bridge_topic_size), (2, 15));
    let a1e = plan_deployment(&providers, Aut::PerProvider, TopicScheme::Explicit).unwrap();
    assert_eq!((a1e.bridges.len(), a1e.bridge_topic_size), (2, 29));
    let a2 = plan_deployment(&providers, Aut::PerHub, TopicScheme::Explicit).unwrap();
    assert_eq!((a2.bridges.len(), a2.bridge_topic_size), (4, 29));
    assert!(a2.bridges.iter().all(|b| b.subscriptions.len() == 1));
    assert!(matches!(
        plan_deployment(&providers, Aut::PerHub, TopicScheme::Wildcard),
        Err(BridgeError::UnsupportedScheme)
    ));
    assert!(matches!(
        plan_deployment(&[], Aut::PerProvider, TopicScheme::Wildcard),
        Err(BridgeError::InvalidTopology(_))
    ));
}

#[test]
fn single_hub_plans_coincide() {
    let one = vec![ProviderSpec {
        id: "p".into(),
        gateways: vec![GatewaySpec {
            id: "p/g".into(),
            provider: "p".into(),
            hubs: vec![hub("h", 100, "sensors/p/g/h")],
            rate: 1.0,
            messages_per_hub: 1,
            cycling: Cycling::PerBatch,
        }],
    }];
    let a1 = plan_deployment(&one, Aut::PerProvider, TopicScheme::Explicit).unwrap();
    let a2 = plan_deployment(&one, Aut::PerHub, TopicScheme::Explicit).unwrap();
    assert_eq!(a1.bridges.len(), a2.bridges.len());
    assert_eq!(a1.bridges[0].subscriptions, a2.bridges[0].subscriptions);
}

fn bridge_spec(name: &str, src: &Broker, dst: &Broker, subs: &[&str], qos: QoS) -> BridgeSpec {
    BridgeSpec {
        name: name.into(),
        provider: "prov1".into(),
        source: src.local_addr(),
        destination: dst.local_addr(),
        subscriptions: subs.iter().map(|s| TopicFilter::new(*s).unwrap()).collect(),
        options: SubscribeOptions {
            max_qos: qos,
            no_local: true,
            retain_as_published: true,
        },
        output: TopicMap::default(),
        qos,
        mode: RepublishMode::Sync,
        transform: TransformSpec::identity(),
        cpu: CpuModel::FREE,
        queue_capacity: 100,
    }
}

fn client_cfg(id: &str, b: &Broker) -> ClientConfig {
    let mut c = ClientConfig::new(id, b.local_addr());
    c.ack_timeout = Duration::from_millis(500);
    c
}

async fn collect(rx: &mut mpsc::UnboundedReceiver<InboundMessage>, n: usize) -> Vec<InboundMessage> {
    let mut out = Vec::new();
    while out.len() < n {
        match timeout(Duration::from_secs(5), rx.recv()).await {
            Ok(Some(m)) => out.push(m),
            _ => break,
        }
    }
    out
}

#[tokio::test]
async fn forwards_with_stamps_preserved() {
    let src = Broker::start(BrokerConfig::default()).await.unwrap();
    let dst = Broker::start(BrokerConfig::default()).await.unwrap();
    let sub = Client::connect(client_cfg("sub", &dst)).await.unwrap();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let opts = SubscribeOptions {
        max_qos: QoS::AtLeastOnce,
        ..SubscribeOptions::default()
    };
    sub.subscribe(TopicFilter::new("unified/#").unwrap(), opts, tx)
        .await
        .unwrap();

    let spec = bridge_spec("b", &src, &dst, &["sensors/prov1/#"], QoS::AtLeastOnce);
    let bridge = run_bridge(spec, client_cfg("x", &src), client_cfg("x", &dst))
        .await
        .unwrap();
    let gw = Client::connect(client_cfg("gw", &src)).await.unwrap();
    let topic = TopicName::new("sensors/prov1/gateway1/hub001").unwrap();
    let mut sent = Vec::new();
    for seq in 0..10u64 {
        let out = gw
            .publish(
                topic.clone(),
                vec![seq as u8; 64],
                QoS::AtLeastOnce,
                Some(seq),
                Vec::new(),
            )
            .await;
        assert!(out.is_ok());
        sent.push((out.t_publish_us, seq));
    }
    let got = collect(&mut rx, 10).await;
    assert_eq!(got.len(), 10);
    for m in &got {
        assert_eq!(m.topic.as_str(), "unified/prov1/gateway1/hub001");
        let seq = m.seq().unwrap();
        let ts = m.ts_us().unwrap();
        assert!(
            sent.iter().any(|&(t, s)| s == seq && t.abs_diff(ts) < 1_000),
            "seq {seq} ts {ts}"
        );
        assert_eq!(&m.payload[..], &vec![seq as u8; 64][..]);
    }
    let stats = bridge.stop().await;
    assert_eq!((stats.received, stats.forwarded, stats.transform_failed), (10, 10, 0));
}

#[tokio::test]
async fn malformed_payload_is_counted_not_forwarded() {
    let src = Broker::start(BrokerConfig::default()).await.unwrap();
    let dst = Broker::start(BrokerConfig::default()).await.unwrap();
    let mut spec = bridge_spec("b", &src, &dst, &["sensors/prov1/#"], QoS::AtLeastOnce);
    spec.transform = TransformSpec::unify([]).unwrap();
    let bridge = run_bridge(spec, client_cfg("x", &src), client_cfg("x", &dst))
        .await
        .unwrap();
    let gw = Client::connect(client_cfg("gw", &src)).await.unwrap();
    let topic = TopicName::new("sensors/prov1/gateway1/hub001").unwrap();
    assert!(gw
        .publish(topic, &b"not a sensor document"[..], QoS::AtLeastOnce, None, Vec::new())
        .await
        .is_ok());
    let stats = wait_idle(bridge).await;
    assert_eq!((stats.received, stats.forwarded, stats.transform_failed), (1, 0, 1));
}

async fn wait_idle(bridge: bridgebench::bridge::BridgeHandle) -> BridgeStats {
    for _ in 0..200 {
        tokio::time::sleep(Duration::from_millis(10)).await;
        if bridge.stats().received > 0 && bridge.is_idle() {
            break;
        }
    }
    bridge.stop().await
}

#[tokio::test]
async fn per_hub_bridges_see_only_their_topic() {
    let src = Broker::start(BrokerConfig::default()).await.unwrap();
    let dst = Broker::start(BrokerConfig::default()).await.unwrap();
    let topics = ["sensors/prov2/gateway1/hub003", "sensors/prov2/gateway1/hub004"];
    let mut bridges = Vec::new();
    for (i, t) in topics.iter().enumerate() {
        let spec = bridge_spec(&format!("b{i}"), &src, &dst, &[t], QoS::AtLeastOnce);
        bridges.push(
            run_bridge(spec, client_cfg("x", &src), client_cfg("x", &dst))
                .await
                .unwrap(),
        );
    }
    let gw = Client::connect(client_cfg("gw", &src)).await.unwrap();
    for t in topics {
        for _ in 0..3 {
            let topic = TopicName::new(t).unwrap();
            assert!(gw
                .publish(topic, vec![1u8; 10], QoS::AtLeastOnce, None, Vec::new())
                .await
                .is_ok());
        }
    }
    for (b, t) in bridges.into_iter().zip(topics) {
        let stats = wait_idle(b).await;
        assert_eq!(stats.per_topic_in.keys().collect::<Vec<_>>(), [t]);
        assert_eq!(stats.per_topic_in[t], 3);
    }
}

/// Mean time a bridge spends forwarding one message when its outbound hop
/// has one-way delay `d_ms`.
async fn forward_delay(qos: QoS, d_ms: f64) -> f64 {
    let src = Broker::start(BrokerConfig::default()).await.unwrap();
    let dst = Broker::start(BrokerConfig::default()).await.unwrap();
    let spec = bridge_spec("b", &src, &dst, &["sensors/prov1/#"], qos);
    let mut out_cfg = client_cfg("x", &dst);
    out_cfg.link = LinkProfile {
        one_way_delay_ms: d_ms,
        ..LinkProfile::default()
    };
    let bridge = run_bridge(spec, client_cfg("x", &src), out_cfg).await.unwrap();
    let gw = Client::connect(client_cfg("gw", &src)).await.unwrap();
    let topic = TopicName::new("sensors/prov1/gateway1/hub001").unwrap();
    for _ in 0..5 {
        assert!(gw
            .publish(topic.clone(), vec![0u8; 100], qos, None, Vec::new())
            .await
            .is_ok());
        tokio::time::sleep(Duration::from_millis(150)).await;
    }
    let stats = wait_idle(bridge).await;
    assert_eq!(stats.forwarded, 5);
    stats.forward_delay_mean_us / 1000.0
}

#[tokio::test]
async fn sync_qos2_waits_two_round_trips() {
    let d = 15.0;
    let q0 = forward_delay(QoS::AtMostOnce, d).await;
    let q2 = forward_delay(QoS::ExactlyOnce, d).await;
    // PUBLISH/PUBREC then PUBREL/PUBCOMP, each a full round trip
    let handshake = 2.0 * (2.0 * d);
    assert!(q2 - q0 >= handshake, "qos0 {q0:.1} ms, qos2 {q2:.1} ms");
}
