use std::collections::BTreeMap;

use bridgebench::metrics::{compute_metrics, per_gateway_loss, BrokerTopicCounts, MeasurementRecord, RunMetrics};
use bridgebench_core::client::{FailReason, PublishOutcome, PublishResult};
use bridgebench_core::codec::QoS;

fn outcome(seq: u64, ok: bool) -> PublishOutcome {
    PublishOutcome {
        seq,
        qos: QoS::AtMostOnce,
        t_publish_us: 0,
        t_complete_us: 0,
        retries: 0,
        result: if ok {
            PublishResult::Ok
        } else {
            PublishResult::Failed(FailReason::NotConnected)
        },
    }
}

fn record(gateway: &str, seq: u64, duplicate: bool) -> MeasurementRecord {
    MeasurementRecord {
        arrival_us: 2_000 + seq,
        topic: format!("unified/{gateway}/hub"),
        ordinal: 0,
        gateway: gateway.into(),
        seq,
        publish_us: 1_000,
        payload_bytes: 100,
        duplicate,
    }
}

#[test]
fn lost_is_published_minus_unique() {
    let outcomes = BTreeMap::from([("p/g".to_string(), (0..4000).map(|s| outcome(s, true)).collect())]);
    let records: Vec<_> = (0..2004).map(|s| record("p/g", s, false)).collect();
    let m = compute_metrics(&records, &outcomes, &BrokerTopicCounts::default(), 0);
    assert_eq!(m.aggregate.published, 4000);
    assert_eq!(m.aggregate.received_unique, 2004);
    assert_eq!(m.aggregate.lost_e2e, 1996);
}

#[test]
fn full_delivery_has_no_loss() {
    let outcomes = BTreeMap::from([("p/g".to_string(), (0..4000).map(|s| outcome(s, true)).collect())]);
    let records: Vec<_> = (0..4000).map(|s| record("p/g", s, false)).collect();
    let m = compute_metrics(&records, &outcomes, &BrokerTopicCounts::default(), 0);
    assert_eq!(
        (
            m.aggregate.received_unique,
            m.aggregate.lost_e2e,
            m.aggregate.duplicates
        ),
        (4000, 0, 0)
    );
}

#[test]
fn empty_run_is_all_zero() {
    let m = compute_metrics(&[], &BTreeMap::new(), &BrokerTopicCounts::default(), 0);
    assert_eq!(m.aggregate.published, 0);
    assert_eq!(m.aggregate.loss_per_1000(), 0.0);
    assert_eq!(m.aggregate.latency.count, 0);
}

#[test]
fn duplicates_and_broker_counts() {
    let outcomes = BTreeMap::from([
        ("p/a".to_string(), (0..10).map(|s| outcome(s, true)).collect()),
        ("p/b".to_string(), (0..10).map(|s| outcome(s, s < 8)).collect()),
    ]);
    let mut records: Vec<_> = (0..10).map(|s| record("p/a", s, false)).collect();
    records.push(record("p/a", 3, true));
    records.extend((0..7).map(|s| record("p/b", s, false)));
    let brokers = BrokerTopicCounts {
        source: BTreeMap::from([("sensors/p/a/hub".to_string(), 11), ("sensors/p/b/hub".to_string(), 8)]),
        dest: BTreeMap::from([("unified/p/a/hub".to_string(), 11), ("unified/p/b/hub".to_string(), 7)]),
    };
    let m = compute_metrics(&records, &outcomes, &brokers, 2);
    let a = &m.per_gateway["p/a"];
    assert_eq!(
        (a.received_unique, a.duplicates, a.received_source, a.lost_e2e),
        (10, 1, 10, 0)
    );
    let b = &m.per_gateway["p/b"];
    assert_eq!(
        (
            b.published_ok,
            b.received_source,
            b.received_dest,
            b.lost_source,
            b.lost_e2e
        ),
        (8, 8, 7, 2, 3)
    );
    // published = unique + lost everywhere
    for g in m.per_gateway.values().chain([&m.aggregate]) {
        assert_eq!(g.published, g.received_unique + g.lost_e2e);
    }
    assert_eq!(m.aggregate.unstamped, 2);
    assert_eq!(m.aggregate.latency.count, 17);
}

#[test]
fn loss_per_thousand_averages_runs() {
    let run = |lost: u64| {
        let outcomes = BTreeMap::from([(
            "prov1/gateway1".to_string(),
            (0..1000).map(|s| outcome(s, true)).collect(),
        )]);
        let records: Vec<_> = (lost..1000).map(|s| record("prov1/gateway1", s, false)).collect();
        compute_metrics(&records, &outcomes, &BrokerTopicCounts::default(), 0)
    };
    let runs: Vec<RunMetrics> = vec![run(997), run(998)];
    assert!((per_gateway_loss(&runs, "prov1", "gateway1") - 997.5).abs() < 1e-9);
    assert_eq!(per_gateway_loss(&[run(0)], "prov1", "gateway1"), 0.0);
    assert_eq!(per_gateway_loss(&runs, "prov2", "gateway1"), 0.0);
}
