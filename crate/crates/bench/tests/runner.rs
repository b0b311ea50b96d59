use std::process::Command;

use bridgebench::presets::{load_preset, names, source, PresetError};
use bridgebench::report::{report, ReportError};
use bridgebench::runner::{self, Cell};
use bridgebench_core::codec::QoS;

#[test]
fn presets_validate_and_scale() {
    for n in names() {
        let cfg = load_preset(n).unwrap();
        cfg.validate().unwrap();
        assert!(source(n).unwrap().contains("[[providers]]"));
    }
    let paper = load_preset("paper").unwrap();
    assert_eq!(paper.total_messages(), 4000);
    assert_eq!(paper.repetitions, 10);
    assert_eq!(paper.client.keep_alive, 60);
    let desk = load_preset("desk").unwrap();
    assert_eq!(desk.messages_per_hub, 100);
    for (d, p) in desk.providers.iter().zip(&paper.providers) {
        assert_eq!(d.id, p.id);
        let hubs = |c: &bridgebench::config::ProviderConfig| {
            c.gateways
                .iter()
                .map(|g| (g.id.clone(), g.hubs.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(hubs(d), hubs(p));
    }
    let lossless = load_preset("lossless").unwrap();
    let l = &lossless.links;
    assert_eq!(
        [
            l.gateway.segment_loss_p,
            l.bridge.segment_loss_p,
            l.subscriber.segment_loss_p
        ],
        [0.0; 3]
    );
    assert!(matches!(load_preset("nope"), Err(PresetError::UnknownPreset(_))));
}

#[test]
fn toml_round_trip_keeps_digest() {
    let cfg = load_preset("desk").unwrap();
    let again = bridgebench::config::ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.digest(), again.digest());
}

#[tokio::test(flavor = "multi_thread")]
async fn minimal_run_and_pure_report() {
    let mut cfg = load_preset("lossless").unwrap();
    cfg.messages_per_hub = 1;
    cfg.repetitions = 1;
    cfg.grace_ms = 200;
    cfg.qos = QoS::AtLeastOnce;
    let dir = tempfile::tempdir().unwrap();
    let r = runner::run(&cfg, dir.path()).await.unwrap();
    assert!(r.all_ok());
    let m = &r.repetitions[0].metrics.aggregate;
    assert_eq!((m.published, m.received_unique, m.lost_e2e), (4, 4, 0));

    let table = std::fs::read(dir.path().join("table.txt")).unwrap();
    let json = std::fs::read(dir.path().join("results.json")).unwrap();
    let again = report(dir.path()).unwrap();
    again.write(dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("table.txt")).unwrap(), table);
    assert_eq!(std::fs::read(dir.path().join("results.json")).unwrap(), json);
    for f in [
        "results.csv",
        "gateways.csv",
        "records.csv",
        "drops.csv",
        "brokers.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(again.cells.len(), 1);
    assert_eq!(again.cells[0].cell, Cell::of(&cfg).id());
}

#[test]
fn report_on_empty_dir_is_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(report(dir.path()), Err(ReportError::MissingData(_))));
}

#[test]
fn full_matrix_is_nine_cells() {
    let ids: Vec<String> = Cell::full_matrix().iter().map(Cell::id).collect();
    assert_eq!(
        ids,
        [
            "aut1-15-q0",
            "aut1-15-q1",
            "aut1-15-q2",
            "aut1-29-q0",
            "aut1-29-q1",
            "aut1-29-q2",
            "aut2-29-q0",
            "aut2-29-q1",
            "aut2-29-q2"
        ]
    );
}

#[test]
fn cli_validate_prints_plan() {
    let out = Command::new(env!("CARGO_BIN_EXE_bridgebench"))
        .args(["validate", "--profile", "paper"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("messages per repetition: 4000"), "{text}");
    assert!(text.contains("AUT2-29B: 4 bridges"), "{text}");

    let bad = Command::new(env!("CARGO_BIN_EXE_bridgebench"))
        .args(["validate", "--profile", "nope"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
