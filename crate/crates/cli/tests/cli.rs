mod common;

use std::fs;
use std::path::Path;

use common::*;
use meterhub::store::Store;
use serde_json::Value;

fn lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

#[test]
fn linkbudget_rows() {
    let out = run(&["analyze", "linkbudget"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows = lines(&text);
    assert_eq!(rows[0], "technology,direction,budget_db");
    for row in ["lorawan,UL,154", "lorawan,DL,150", "lorawan,DL-boosted,163", "sigfox,DL,159", "wisun,UL,134"] {
        assert!(rows.contains(&row), "missing {row}");
    }
}

#[test]
fn bpl_from_campaign_file() {
    let campaign = workspace().join("campus-efs.json");
    let out = run(&["analyze", "bpl", "--campaign", campaign.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("B3,nbiot,DT,47,")));
    assert!(text.lines().any(|l| l.starts_with("B1,sigfox,,unreachable,")));
    // bundled copy gives the same table
    assert_eq!(stdout(&run(&["analyze", "bpl"])), text);
}

#[test]
fn bpl_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    fs::write(&empty, r#"{"samples": [], "reference_map": []}"#).unwrap();
    let out = run(&["analyze", "bpl", "--campaign", empty.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(lines(&stdout(&out)).len(), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"samples": [{"mp": "Q9"}]}"#).unwrap();
    let out = run(&["analyze", "bpl", "--campaign", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["analyze", "bpl", "--campaign", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budgets_and_cost() {
    let text = stdout(&run(&["analyze", "budgets"]));
    assert!(text.contains("sigfox,UL,12,140,unlimited,G1,36"));
    assert!(text.contains("lorawan,UL,51-222,unlimited,30,G1,36"));

    let out = run(&["analyze", "cost", "--fleet", "sigfox=1", "--years", "1"]);
    assert!(stdout(&out).contains("sigfox,1,1,19"));
    let out = run(&["analyze", "cost", "--fleet", "nbiot=1", "--years", "10"]);
    assert!(stdout(&out).contains("nbiot,1,10,23"));
    let out = run(&["analyze", "cost"]);
    assert_eq!(lines(&stdout(&out)).last(), Some(&"total,0,10,0"));
    assert_eq!(run(&["analyze", "cost", "--fleet", "zigbee=3"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "cost", "--fleet", "sigfox=1", "--years", "0"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "pathloss"]).status.code(), Some(2));
    let out = run(&["serve", "--config", "/nonexistent/meterhub.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_rejects_duplicate_device() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dup.json");
    fs::write(
        &path,
        r#"{"connectors": [{"technology": "sigfox"}],
            "devices": [
              {"device_id": "gas-7", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0.01},
              {"device_id": "gas-7", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0.01}]}"#,
    )
    .unwrap();
    let out = run(&["serve", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("duplicate device_id gas-7"), "{}", stderr(&out));
}

#[test]
fn serve_busy_port_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let out = run(&["serve", "--config", sigfox_config(dir.path(), port).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn broker_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = sigfox_config(dir.path(), free_port());
    let out = bin()
        .args(["serve", "--config", config.to_str().unwrap(), "--broker", "127.0.0.1:1883"])
        .env("METERHUB_BROKER", "mqtt://:bad")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mqtt://:bad"));
}

#[test]
fn serve_ingests_and_stops_cleanly_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let server = Server::start(&sigfox_config(dir.path(), port), port);
    for i in 0..5 {
        let (status, body) = post(port, "/ingest/sigfox", &sigfox_uplink(100 + i, 1_709_251_200 + 600 * i as i64));
        assert_eq!(status, 200, "{body}");
    }
    let (status, _) = post(port, "/ingest/sigfox", r#"{"device": "gas-1", "time": 1, "data": "00000000000000000000000000"}"#);
    assert_eq!(status, 422);
    server.signal(libc::SIGINT);
    assert_eq!(server.wait().code(), Some(0));
    assert_eq!(Store::open(dir.path().join("store")).unwrap().len(), 5);
}

fn simulate(scenario: &Path, store: &Path) -> (Value, String) {
    let out = run(&["simulate", "--scenario", scenario.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    (serde_json::from_str(&text).unwrap(), text)
}

#[test]
fn simulate_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let (report, _) = simulate(&workspace().join("scenarios/campus.json"), &store);
    let delivered: u64 = report["devices"].as_array().unwrap().iter().map(|d| d["delivered"].as_u64().unwrap()).sum();
    assert_eq!(delivered, 260);
    let gas = report["devices"].as_array().unwrap().iter().find(|d| d["device_id"] == "gas-b4").unwrap();
    assert_eq!(gas["rejected"]["daily UL cap"], 4);

    let csv = stdout(&run(&["export", "--store", store.to_str().unwrap()]));
    assert_eq!(csv.lines().count(), 1 + 260);
    assert!(csv.starts_with("timestamp,device_id,"));

    let nd = stdout(&run(&["export", "--store", store.to_str().unwrap(), "--format", "ndjson", "--device", "heat-t1"]));
    let rows: Vec<Value> = nd.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 24);

    // independent recomputation of the heat register: 1500 Wh/h with 20 % jitter
    let start = 1_709_251_200.0;
    for r in &rows {
        let t = chrono::DateTime::parse_from_rfc3339(r["timestamp"].as_str().unwrap()).unwrap().timestamp() as f64;
        let hours = (t - start) / 3600.0;
        let v = r["value"].as_f64().unwrap();
        assert!(v >= 12_345_000.0 + 1500.0 * 0.8 * hours - 1.0, "{v} at {hours} h");
        assert!(v <= 12_345_000.0 + 1500.0 * 1.2 * hours + 1.0, "{v} at {hours} h");
    }

    let out_file = dir.path().join("heat.csv");
    let out = run(&[
        "export", "--store", store.to_str().unwrap(), "--device", "heat-t1",
        "--from", "2024-03-01T06:00:00Z", "--to", "2024-03-01T12:00:00Z", "--bucket", "7200",
        "--out", out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(out_file).unwrap().lines().count(), 1 + 3);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = workspace().join("scenarios/campus.json");
    let (_, a) = simulate(&scenario, &dir.path().join("a"));
    let (_, b) = simulate(&scenario, &dir.path().join("b"));
    assert_eq!(a, b);
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let p = entry.unwrap().path();
        let twin = dir.path().join("b").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(twin).unwrap());
    }
}

#[test]
fn empty_scenario_and_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("empty.json");
    fs::write(&scenario, r#"{"devices": [], "duration_s": 86400, "seed": 1}"#).unwrap();
    let store = dir.path().join("store");
    let (report, _) = simulate(&scenario, &store);
    assert_eq!(report["totals"]["generated"], 0);
    assert_eq!(report["devices"].as_array().unwrap().len(), 0);
    let csv = stdout(&run(&["export", "--store", store.to_str().unwrap()]));
    assert_eq!(csv.lines().count(), 1);
    let nd = run(&["export", "--store", store.to_str().unwrap(), "--format", "ndjson"]);
    assert!(nd.status.success());
    assert!(stdout(&nd).is_empty());
}

#[test]
fn export_errors() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    fs::create_dir(&store).unwrap();
    let s = store.to_str().unwrap();
    for args in [
        vec!["export", "--store", s, "--from", "yesterday"],
        vec!["export", "--store", s, "--from", "2024-03-02T00:00:00Z", "--to", "2024-03-01T00:00:00Z"],
        vec!["export", "--store", s, "--bucket", "0"],
        vec!["export", "--store", dir.path().join("nope").to_str().unwrap()],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn simulate_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.json");
    fs::write(
        &scenario,
        r#"{"devices": [{"device_id": "x", "technology": "sigfox", "mp": "Z9", "codec": "compact", "interval_s": 600,
             "meter": {"start": 0, "rate_per_hour": 1}}], "duration_s": 3600, "seed": 1}"#,
    )
    .unwrap();
    let store = dir.path().join("store");
    let out = run(&["simulate", "--scenario", scenario.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = run(&["simulate", "--scenario", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
