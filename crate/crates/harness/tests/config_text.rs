use std::fs;
use std::path::PathBuf;

use mph_core::net::sim::DelayModel;
use mph_core::types::{View, MILLIS};
use mph_harness::config::{ConfigError, ExperimentConfig, Protocol};
use mph_harness::runner::{csv_bytes, run_experiment, CSV_HEADER};
use mph_harness::scenario::scenario;

#[test]
fn fuzz_seeds_parse_and_round_trip() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/parse_config");
    for e in fs::read_dir(dir).unwrap() {
        let text = fs::read_to_string(e.unwrap().path()).unwrap();
        let mut c = ExperimentConfig::default();
        c.apply_text(&text).unwrap();
        c.validate().unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
    }
}

#[test]
fn text_overrides_defaults() {
    let mut c = ExperimentConfig::default();
    c.apply_text("protocol = hs\nn = 7\n# comment\ndelay = normal:10:2\nsilent-views = 9\n")
        .unwrap();
    assert_eq!(c.protocol, Protocol::HotStuff);
    assert_eq!(c.n, 7);
    assert!(matches!(c.sim.delay, DelayModel::Normal { .. }));
    assert!(c.sim.faults.silent_leader_views.contains(&View(9)));
}

#[test]
fn bad_text_is_rejected() {
    let mut c = ExperimentConfig::default();
    assert!(matches!(
        c.apply_text("n = 4\nn four"),
        Err(ConfigError::Syntax(2))
    ));
    assert!(c.apply_text("n = four").is_err());
    let mut c = ExperimentConfig::default();
    c.apply_text("n = 4\ncrashes = 2@0,3@0").unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn small_run_writes_csv_row() {
    let mut c = scenario("best-case").unwrap();
    c.views = 30;
    c.arrival_rate = 1000.0;
    c.max_time = 5_000 * MILLIS;
    let out = run_experiment(&c).unwrap();
    assert!(out.metrics.blocks_committed > 0);
    let csv = String::from_utf8(csv_bytes(&[out])).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), CSV_HEADER.len());
    assert_eq!(&row[..4], &["mph", "4", "1", "1"]);
}
