use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use bridgebench_core::broker::{Broker, BrokerConfig, SessionConfig};
use bridgebench_core::client::{Client, ClientConfig, ClientError, FailReason, InboundMessage, PublishResult};
use bridgebench_core::codec::{self, Connect, ControlPacket, Decoded, Properties, QoS, SubscribeOptions};
use bridgebench_core::netem::{link_key, Direction, LinkProfile, LossScope, Transit};
use bridgebench_core::topics::{TopicFilter, TopicName};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::time::{sleep, timeout};

async fn broker() -> Broker {
    Broker::start(BrokerConfig::default()).await.unwrap()
}

fn cfg(id: &str, b: &Broker) -> ClientConfig {
    let mut c = ClientConfig::new(id, b.local_addr());
    c.ack_timeout = Duration::from_millis(150);
    c.connect_timeout = Duration::from_millis(300);
    c
}

fn topic(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

fn filter(s: &str) -> TopicFilter {
    TopicFilter::new(s).unwrap()
}

fn opts(max_qos: QoS) -> SubscribeOptions {
    SubscribeOptions {
        max_qos,
        ..SubscribeOptions::default()
    }
}

async fn subscriber(b: &Broker, f: &str, max_qos: QoS) -> (Client, mpsc::UnboundedReceiver<InboundMessage>) {
    let c = Client::connect(cfg("sub", b)).await.unwrap();
    let (tx, rx) = mpsc::unbounded_channel();
    c.subscribe(filter(f), opts(max_qos), tx).await.unwrap();
    (c, rx)
}

async fn drain(rx: &mut mpsc::UnboundedReceiver<InboundMessage>, quiet: Duration) -> Vec<InboundMessage> {
    let mut out = Vec::new();
    while let Ok(Some(m)) = timeout(quiet, rx.recv()).await {
        out.push(m);
    }
    out
}

/// Seed for which the given per-direction drop pattern holds, found by
/// evaluating the link's decision function directly.
fn seed_with(profile: &LinkProfile, link: &str, pattern: &[(Direction, u64, bool)], len: usize) -> u64 {
    (0..100_000)
        .find(|&seed| {
            let p = LinkProfile {
                seed,
                ..profile.clone()
            };
            pattern
                .iter()
                .all(|&(dir, ord, drop)| (p.transit(link_key(link), dir, len, ord) == Transit::Drop) == drop)
        })
        .expect("a matching seed exists")
}

#[tokio::test]
async fn qos0_delivers_without_acks() {
    let b = broker().await;
    let (_s, mut rx) = subscriber(&b, "t/#", QoS::ExactlyOnce).await;
    let p = Client::connect(cfg("pub", &b)).await.unwrap();
    let out = p
        .publish(topic("t/1"), &b"hello"[..], QoS::AtMostOnce, Some(7), vec![])
        .await;
    assert!(out.is_ok());
    assert_eq!(out.retries, 0);
    let got = drain(&mut rx, Duration::from_millis(200)).await;
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].seq(), Some(7));
    assert!(got[0].ts_us().is_some());
    // CONNECT + PUBLISH out, only CONNACK back
    let counts = p.link_counts();
    assert_eq!(counts.packets_sent, 2);
    assert_eq!(counts.packets_received, 1);
    b.shutdown().await;
}

#[tokio::test]
async fn qos2_exchanges_four_packets() {
    let b = broker().await;
    let p = Client::connect(cfg("pub", &b)).await.unwrap();
    let before = p.link_counts();
    let out = p.publish(topic("t/1"), &b"x"[..], QoS::ExactlyOnce, None, vec![]).await;
    assert!(out.is_ok());
    let after = p.link_counts();
    let exchanged = (after.packets_sent - before.packets_sent) + (after.packets_received - before.packets_received);
    assert_eq!(exchanged, 4);
    b.shutdown().await;
}

#[tokio::test]
async fn completion_cost_grows_with_qos() {
    let b = broker().await;
    let mut c = cfg("pub", &b);
    c.link = LinkProfile::with_delay_ms(20.0);
    let p = Client::connect(c).await.unwrap();
    let mut cost = BTreeMap::new();
    for q in [QoS::AtMostOnce, QoS::AtLeastOnce, QoS::ExactlyOnce] {
        let o = p.publish(topic("t/1"), &b"x"[..], q, None, vec![]).await;
        cost.insert(q, o.t_complete_us - o.t_publish_us);
    }
    assert_eq!(cost[&QoS::AtMostOnce], 0);
    assert!(cost[&QoS::AtLeastOnce] >= 40_000, "{cost:?}");
    assert!(cost[&QoS::ExactlyOnce] >= 80_000, "{cost:?}");
    b.shutdown().await;
}

#[tokio::test]
async fn four_thousand_qos1_publishes_are_all_received() {
    let b = broker().await;
    let mut tasks = Vec::new();
    for g in 0..4 {
        let c = Client::connect(cfg(&format!("gw{g}"), &b)).await.unwrap();
        tasks.push(tokio::spawn(async move {
            let mut ok = 0;
            for i in 0..1000 {
                ok += c
                    .publish(
                        topic(&format!("t/{g}")),
                        vec![0u8; 64],
                        QoS::AtLeastOnce,
                        Some(i),
                        vec![],
                    )
                    .await
                    .is_ok() as u32;
            }
            ok
        }));
    }
    let mut ok = 0;
    for t in tasks {
        ok += t.await.unwrap();
    }
    assert_eq!(ok, 4000);
    let c = b.counters_snapshot();
    assert_eq!(c.publishes_received, 4000);
    assert_eq!(c.per_topic_received.values().sum::<u64>(), 4000);
    assert_eq!(c.messages_unrouted, 4000);
    b.shutdown().await;
}

#[tokio::test]
async fn no_local_suppresses_own_messages() {
    let b = broker().await;
    let c = Client::connect(cfg("self", &b)).await.unwrap();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let o = SubscribeOptions {
        max_qos: QoS::AtLeastOnce,
        no_local: true,
        retain_as_published: true,
    };
    c.subscribe(filter("loop/#"), o, tx).await.unwrap();
    c.publish(topic("loop/a"), &b"x"[..], QoS::AtLeastOnce, None, vec![])
        .await;
    assert!(drain(&mut rx, Duration::from_millis(200)).await.is_empty());

    let other = Client::connect(cfg("other", &b)).await.unwrap();
    other
        .publish(topic("loop/a"), &b"x"[..], QoS::AtLeastOnce, None, vec![])
        .await;
    assert_eq!(drain(&mut rx, Duration::from_millis(200)).await.len(), 1);
    b.shutdown().await;
}

#[tokio::test]
async fn subscription_max_qos_caps_delivery() {
    let b = broker().await;
    let (_s, mut rx) = subscriber(&b, "providers/p1/#", QoS::AtMostOnce).await;
    let p = Client::connect(cfg("pub", &b)).await.unwrap();
    p.publish(topic("providers/p1/hub1"), &b"x"[..], QoS::ExactlyOnce, None, vec![])
        .await;
    let got = drain(&mut rx, Duration::from_millis(200)).await;
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].qos, QoS::AtMostOnce);
    b.shutdown().await;
}

#[tokio::test]
async fn credentials_are_checked() {
    let bc = BrokerConfig {
        credentials: Some(HashMap::from([("gw".to_string(), "secret".to_string())])),
        ..BrokerConfig::default()
    };
    let b = Broker::start(bc).await.unwrap();

    let mut good = cfg("a", &b);
    good.credentials = Some(("gw".into(), "secret".into()));
    assert!(Client::connect(good).await.is_ok());

    let mut bad = cfg("b", &b);
    bad.credentials = Some(("gw".into(), "wrong".into()));
    assert!(matches!(
        Client::connect(bad).await,
        Err(ClientError::AuthFailure(0x86))
    ));

    let anonymous = cfg("c", &b);
    assert!(matches!(
        Client::connect(anonymous).await,
        Err(ClientError::AuthFailure(_))
    ));
    let counters = b.counters_snapshot();
    assert_eq!((counters.connections_accepted, counters.connections_rejected), (1, 2));
    b.shutdown().await;
}

#[tokio::test]
async fn dropped_connect_is_retried_on_a_new_connection() {
    let b = broker().await;
    let base = LinkProfile {
        segment_loss_p: 0.5,
        loss_scope: LossScope::Up,
        ..LinkProfile::default()
    };
    // CONNECT is the first packet on each attempt's link; its size is well
    // under one segment, so any small length gives the same decision.
    let s1 = seed_with(&base, "gw@1", &[(Direction::Up, 0, true)], 20);
    let seed = (s1..)
        .find(|&s| {
            let p = LinkProfile {
                seed: s,
                ..base.clone()
            };
            p.transit(link_key("gw@1"), Direction::Up, 20, 0) == Transit::Drop
                && p.transit(link_key("gw@2"), Direction::Up, 20, 0) != Transit::Drop
        })
        .unwrap();
    let mut c = cfg("gw", &b);
    c.link = LinkProfile { seed, ..base };
    c.connect_timeout = Duration::from_millis(200);
    let client = Client::connect(c).await.unwrap();
    assert_eq!(client.connect_attempts(), 2);
    assert_eq!(b.counters_snapshot().connections_accepted, 1);
    b.shutdown().await;
}

#[tokio::test]
async fn lost_puback_causes_one_retry_and_a_duplicate() {
    let b = broker().await;
    let base = LinkProfile {
        segment_loss_p: 0.5,
        loss_scope: LossScope::Down,
        ..LinkProfile::default()
    };
    // down ordinals: 0 = CONNACK, 1 = first PUBACK, 2 = PUBACK for the retry
    let seed = seed_with(
        &base,
        "gw@1",
        &[
            (Direction::Down, 0, false),
            (Direction::Down, 1, true),
            (Direction::Down, 2, false),
        ],
        10,
    );
    let (_s, mut rx) = subscriber(&b, "t/#", QoS::AtLeastOnce).await;
    let mut c = cfg("gw", &b);
    c.link = LinkProfile { seed, ..base };
    let p = Client::connect(c).await.unwrap();
    let out = p
        .publish(topic("t/1"), &b"x"[..], QoS::AtLeastOnce, Some(1), vec![])
        .await;
    assert_eq!(out.result, PublishResult::Ok);
    assert_eq!(out.retries, 1);
    assert_eq!(b.counters_snapshot().publishes_received, 2);
    let got = drain(&mut rx, Duration::from_millis(200)).await;
    assert_eq!(got.len(), 2);
    assert!(got.iter().all(|m| m.seq() == Some(1)));
    b.shutdown().await;
}

#[tokio::test]
async fn disconnect_fails_unacked_publish() {
    let b = broker().await;
    let mut c = cfg("gw", &b);
    c.link = LinkProfile::with_delay_ms(150.0);
    c.ack_timeout = Duration::from_secs(5);
    c.connect_timeout = Duration::from_secs(2);
    let p = Client::connect(c).await.unwrap();
    let pending = {
        let p = p.clone();
        tokio::spawn(async move { p.publish(topic("t/1"), &b"x"[..], QoS::AtLeastOnce, None, vec![]).await })
    };
    sleep(Duration::from_millis(30)).await;
    p.disconnect().await;
    let out = pending.await.unwrap();
    assert_eq!(out.result, PublishResult::Failed(FailReason::ConnectionLost));
    assert!(out.t_complete_us >= out.t_publish_us);
    b.shutdown().await;
}

#[tokio::test]
async fn each_connection_cycle_is_counted() {
    let b = broker().await;
    for i in 0..3 {
        let p = Client::connect(cfg("gw", &b)).await.unwrap();
        p.publish(topic("t/1"), &b"x"[..], QoS::AtLeastOnce, Some(i), vec![])
            .await;
        p.disconnect().await;
        assert_eq!(b.counters_snapshot().connections_accepted, i + 1);
    }
    b.shutdown().await;
}

#[tokio::test]
async fn keep_alive_pings_keep_idle_connection_up() {
    let b = broker().await;
    let mut c = cfg("idle", &b);
    c.keep_alive = 1;
    let p = Client::connect(c).await.unwrap();
    sleep(Duration::from_millis(2200)).await;
    assert!(p.is_connected());
    assert!(p.link_counts().packets_sent >= 3, "{:?}", p.link_counts());
    b.shutdown().await;
}

#[tokio::test]
async fn broker_closes_silent_connection_after_keep_alive() {
    let b = broker().await;
    let mut raw = tokio::net::TcpStream::connect(b.local_addr()).await.unwrap();
    let connect = ControlPacket::Connect(Connect {
        client_id: "raw".into(),
        clean_start: true,
        keep_alive: 1,
        username: None,
        password: None,
        properties: Properties::default(),
    });
    raw.write_all(&codec::encode(&connect).unwrap()).await.unwrap();
    let mut buf = Vec::new();
    let read = timeout(Duration::from_secs(3), raw.read_to_end(&mut buf)).await;
    assert!(read.is_ok(), "connection still open after 3 s");
    let Decoded::Complete { packet, consumed } = codec::decode(&buf).unwrap() else {
        panic!()
    };
    assert!(matches!(packet, ControlPacket::ConnAck(_)));
    let Decoded::Complete { packet, .. } = codec::decode(&buf[consumed..]).unwrap() else {
        panic!()
    };
    assert!(matches!(packet, ControlPacket::Disconnect(d) if d.reason == 0x8D));
    b.shutdown().await;
}

#[tokio::test]
async fn same_client_id_takes_over() {
    let b = broker().await;
    let first = Client::connect(cfg("dup", &b)).await.unwrap();
    let _second = Client::connect(cfg("dup", &b)).await.unwrap();
    timeout(Duration::from_secs(1), first.closed()).await.unwrap();
    assert_eq!(b.session_count(), 1);
    b.shutdown().await;
}

#[tokio::test]
async fn queue_overflow_is_counted_exactly() {
    let bc = BrokerConfig {
        session: SessionConfig {
            queue_capacity: 5,
            max_inflight: 1,
            ..SessionConfig::default()
        },
        ..BrokerConfig::default()
    };
    let b = Broker::start(bc).await.unwrap();
    let mut sc = cfg("sub", &b);
    sc.link = LinkProfile::with_delay_ms(100.0);
    let s = Client::connect(sc).await.unwrap();
    let (tx, mut rx) = mpsc::unbounded_channel();
    s.subscribe(filter("t/#"), opts(QoS::AtLeastOnce), tx).await.unwrap();

    let p = Client::connect(cfg("pub", &b)).await.unwrap();
    for i in 0..30 {
        p.publish(topic("t/1"), &b"x"[..], QoS::AtLeastOnce, Some(i), vec![])
            .await;
    }
    let got = drain(&mut rx, Duration::from_millis(600)).await;
    let c = b.counters_snapshot();
    assert_eq!(c.publishes_received, 30);
    assert!(c.messages_dropped_queue > 0);
    assert_eq!(c.messages_forwarded + c.messages_dropped_queue, 30);
    assert_eq!(got.len() as u64, c.messages_forwarded);
    b.shutdown().await;
}

#[tokio::test]
async fn qos2_is_exactly_once_under_loss() {
    let bc = BrokerConfig {
        session: SessionConfig {
            retry_interval: Duration::from_millis(80),
            max_retries: None,
            ..SessionConfig::default()
        },
        ..BrokerConfig::default()
    };
    let b = Broker::start(bc).await.unwrap();
    let lossy = |seed| LinkProfile {
        segment_loss_p: 0.25,
        seed,
        ..LinkProfile::default()
    };
    let mut sc = cfg("sub", &b);
    sc.link = lossy(11);
    sc.max_retries = None;
    sc.connect_attempts = 50;
    let s = Client::connect(sc).await.unwrap();
    let (tx, mut rx) = mpsc::unbounded_channel();
    s.subscribe(filter("t/#"), opts(QoS::ExactlyOnce), tx).await.unwrap();

    let mut pc = cfg("pub", &b);
    pc.link = lossy(12);
    pc.max_retries = None;
    pc.ack_timeout = Duration::from_millis(80);
    pc.connect_attempts = 50;
    let p = Client::connect(pc).await.unwrap();
    for i in 0..40 {
        let o = p
            .publish(topic("t/1"), &b"x"[..], QoS::ExactlyOnce, Some(i), vec![])
            .await;
        assert!(o.is_ok());
    }
    let got = drain(&mut rx, Duration::from_millis(1500)).await;
    let mut seqs: Vec<u64> = got.iter().filter_map(|m| m.seq()).collect();
    seqs.sort();
    assert_eq!(seqs, (0..40).collect::<Vec<_>>());
    assert!(p.link_counts().packets_dropped_up + p.link_counts().packets_dropped_down > 0);
    let c = b.counters_snapshot();
    assert_eq!(
        c.publishes_received,
        c.messages_forwarded
            + c.messages_dropped_queue
            + c.duplicates_suppressed
            + c.messages_unrouted
            + c.messages_abandoned
    );
    b.shutdown().await;
}
