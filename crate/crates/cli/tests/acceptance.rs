//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use common::*;
use meterhub::bus::{topic_matches, Bus, TopicFilter};
use meterhub::codecs::{
    decode_compact, decode_mbus, decode_payload, decode_pulse, decode_sml, encode_compact, CompactRecord, DecodeOptions,
    SmlOptions,
};
use meterhub::connectors::ingest_sigfox;
use meterhub::model::{validate_reading, BandPlan, Direction, Medium, Quantity, TechnologyKind, TechnologyLimits, Unit};
use meterhub::radio::{attenuation_factor, duty_cycle_allowance, record_tx, TxBudgetLedger, TxRejection, TxRequest};
use meterhub::sim::{run as run_fleet, SimScenario};
use meterhub::store::{Query, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_link_budgets() -> Check {
    let out = run(&["analyze", "linkbudget"]);
    ensure(out.status.success(), || stderr(&out))?;
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    let expected = [
        "lorawan,UL,154",
        "sigfox,UL,158",
        "nbiot,UL,154",
        "wisun,UL,134",
        "lorawan,DL,150",
        "lorawan,DL-boosted,163",
        "sigfox,DL,159",
        "nbiot,DL,154",
        "wisun,DL,134",
    ];
    for row in expected {
        ensure(rows.contains(&row), || format!("missing row {row}"))?;
    }
    ensure(rows.len() == 1 + expected.len(), || format!("{} rows", rows.len()))?;
    Ok("9 budget values exact".into())
}

const INDOOR: [&str; 10] = ["I1", "B1", "I2", "B2", "I3", "B3", "I4", "B4", "T1", "T2"];

/// Published penetration losses per indoor point; `None` is unreachable.
fn published_bpl() -> Vec<(&'static str, &'static str, &'static str, [Option<f64>; 10])> {
    vec![
        ("lorawan", "", "UL", [Some(23.0), Some(43.0), Some(29.0), Some(54.0), Some(45.0), Some(57.0), Some(9.5), Some(27.5), Some(44.0), None]),
        ("lorawan", "", "DL", [Some(17.5), Some(45.0), Some(29.0), Some(55.0), Some(47.5), Some(60.0), Some(10.0), Some(22.0), Some(43.5), None]),
        ("sigfox", "", "UL", [Some(14.5), None, Some(22.5), Some(43.0), Some(26.0), None, Some(13.0), Some(23.0), None, None]),
        ("nbiot", "DT", "DL", [Some(8.0), Some(29.0), Some(22.0), Some(34.0), Some(27.0), Some(47.0), Some(13.0), Some(21.0), Some(41.0), Some(48.0)]),
        ("nbiot", "Vo", "DL", [Some(10.5), Some(42.0), Some(17.0), Some(39.0), Some(26.0), Some(38.0), Some(7.0), Some(20.0), Some(39.0), Some(45.0)]),
    ]
}

fn c2_bpl_table() -> Check {
    let campaign = workspace().join("campus-efs.json");
    let out = run(&["analyze", "bpl", "--campaign", campaign.to_str().unwrap()]);
    ensure(out.status.success(), || stderr(&out))?;
    let text = stdout(&out);
    let mut cells = HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        cells.insert((f[0].to_string(), f[1].to_string(), f[2].to_string(), f[4].to_string()), f[3].to_string());
    }
    let (mut numeric, mut unreachable) = (0, 0);
    for (tech, variant, dir, row) in published_bpl() {
        for (mp, want) in INDOOR.iter().zip(row) {
            let key = (mp.to_string(), tech.to_string(), variant.to_string(), dir.to_string());
            let got = cells.get(&key).ok_or_else(|| format!("no cell {key:?}"))?;
            match want {
                Some(db) => {
                    let v: f64 = got.parse().map_err(|_| format!("{key:?} = {got}"))?;
                    ensure(v == db, || format!("{key:?}: {v} != {db}"))?;
                    numeric += 1;
                }
                None => {
                    ensure(got == "unreachable", || format!("{key:?}: {got}, expected unreachable"))?;
                    unreachable += 1;
                }
            }
        }
    }
    ensure(cells.len() == numeric + unreachable, || format!("{} extra cells", cells.len() - numeric - unreachable))?;
    Ok(format!("{numeric} numeric cells exact, {unreachable} unreachable markers"))
}

fn c3_attenuation() -> Check {
    let f = attenuation_factor(60.0);
    let rel = (f - 1e6).abs() / 1e6;
    ensure(rel <= 1e-9, || format!("factor {f}"))?;
    Ok(format!("60 dB -> {f:e} (rel err {rel:e})"))
}

fn c4_regulatory() -> Check {
    // 144 scheduled Sigfox uplinks in one day
    let scenario = SimScenario::from_json(
        r#"{"seed": 4, "start": "2024-03-01T00:00:00Z", "duration_s": 86400, "devices": [
            {"device_id": "sf", "technology": "sigfox", "mp": "O1", "codec": "pulse", "pulse_weight": 0.01,
             "medium": "gas", "interval_s": 600, "meter": {"start": 1, "rate_per_hour": 0.5}}]}"#,
    )
    .map_err(|e| e.to_string())?;
    let campaign = scenario.load_campaign().map_err(|e| e.to_string())?;
    let report = run_fleet(&scenario, &campaign, |_| {}).map_err(|e| e.to_string())?;
    let d = report.device("sf").unwrap();
    ensure(d.generated == 144 && d.delivered == 140, || format!("{} scheduled, {} delivered", d.generated, d.delivered))?;

    let thirteen = serde_json::json!({"device": "sf", "time": 1_709_251_200, "data": "00".repeat(13)});
    let err = ingest_sigfox(&thirteen).err().ok_or("13-byte payload accepted")?;
    ensure(err.http_status() == 422, || format!("status {}", err.http_status()))?;

    // fair use: 51 B at 250 bit/s is 1.632 s per frame
    let per_frame = 51.0 * 8.0 / 250.0;
    let limits = TechnologyLimits::builtin(TechnologyKind::Lorawan);
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap();
    let mut ledger = TxBudgetLedger::new("lw", TechnologyKind::Lorawan, t0);
    let mut used = 0.0;
    let mut rejected_at = None;
    for i in 0..40 {
        let tx = TxRequest {
            direction: Direction::Uplink,
            payload_bytes: 51,
            data_rate_kbps: 0.25,
            at: t0 + Duration::minutes(20 * i),
        };
        match record_tx(&mut ledger, &limits, Some(&BandPlan::G1), &tx) {
            Ok(_) => used += per_frame,
            Err(e) => {
                rejected_at = Some((i, e));
                break;
            }
        }
    }
    let (i, e) = rejected_at.ok_or("fair-use limit never hit")?;
    ensure(e == TxRejection::FairUseAirtime, || format!("rejected with {e:?}"))?;
    ensure(used <= 30.0 && used + per_frame > 30.0, || format!("rejected frame {i} after {used} s"))?;

    let g1 = duty_cycle_allowance(&BandPlan::G1, 3600.0);
    ensure(g1 == 36.0, || format!("G1 allowance {g1}"))?;
    Ok(format!("sigfox 144 -> 140, 13 B -> 422, frame {} rejected after {used:.3} s of airtime, G1 36 s/h", i + 1))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn c5_wisun_reachability() -> Check {
    let text = fs::read_to_string(workspace().join("campus-efs.json")).map_err(|e| e.to_string())?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    // Wi-SUN RSSI follows the LoRaWAN downlink column of the campaign
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in doc["samples"].as_array().unwrap() {
        let mp = s["mp"].as_str().unwrap().to_string();
        let entry = samples.entry(mp).or_default();
        if s["technology"] == "lorawan" && s["direction"] == "DL" {
            entry.push(s["rssi_dbm"].as_f64().unwrap());
        }
    }
    let devices: Vec<Value> = samples
        .keys()
        .map(|mp| {
            serde_json::json!({"device_id": format!("ws-{mp}"), "technology": "wisun", "mp": mp, "codec": "compact",
                "medium": "water", "interval_s": 900, "meter": {"start": 10, "rate_per_hour": 0.01}})
        })
        .collect();
    let scenario = SimScenario::from_json(
        &serde_json::json!({"seed": 5, "start": "2024-03-01T00:00:00Z", "duration_s": 86400, "devices": devices}).to_string(),
    )
    .map_err(|e| e.to_string())?;
    let campaign = scenario.load_campaign().map_err(|e| e.to_string())?;
    let report = run_fleet(&scenario, &campaign, |_| {}).map_err(|e| e.to_string())?;
    let (mut dark, mut full) = (0, 0);
    for (mp, values) in samples {
        let d = report.device(&format!("ws-{mp}")).unwrap();
        match median(values) {
            None => {
                ensure(d.delivered == 0, || format!("{mp}: no signal but {} readings", d.delivered))?;
                dark += 1;
            }
            Some(m) if m < -95.0 => {
                ensure(d.delivered == 0, || format!("{mp}: median {m} but {} readings", d.delivered))?;
                dark += 1;
            }
            Some(m) if m >= -92.0 => {
                ensure(d.delivered == 96, || format!("{mp}: median {m} but {} of 96", d.delivered))?;
                full += 1;
            }
            Some(_) => {}
        }
    }
    ensure(dark > 0 && full > 0, || format!("{dark} dark, {full} full"))?;
    Ok(format!("{dark} points silent, {full} points full schedule"))
}

fn c6_pipeline() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario_path = workspace().join("scenarios/campus.json");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let store = dir.path().join(name);
        let out = run(&["simulate", "--scenario", scenario_path.to_str().unwrap(), "--store", store.to_str().unwrap()]);
        ensure(out.status.success(), || stderr(&out))?;
        reports.push(out.stdout);
    }
    ensure(reports[0] == reports[1], || "reports differ".into())?;
    let mut files: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    for f in &files {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).map_err(|e| format!("{f:?}: {e}"))?;
        ensure(a == b, || format!("{f:?} differs"))?;
    }
    ensure(
        fs::read_dir(dir.path().join("b")).unwrap().count() == files.len(),
        || "different file sets".into(),
    )?;

    let (scenario, _) = SimScenario::load(&scenario_path).map_err(|e| e.to_string())?;
    let store = Store::open(dir.path().join("a")).map_err(|e| e.to_string())?;
    let start = scenario.start();
    let mut counts = Vec::new();
    for dev in &scenario.devices {
        let rows = store
            .query(&Query::new(&dev.device_id, start, start + Duration::days(1)))
            .map_err(|e| e.to_string())?;
        for row in &rows {
            let r = &row.reading;
            validate_reading(r).map_err(|v| format!("{}: {v:?}", dev.device_id))?;
            let raw = hex::decode(&r.raw).map_err(|e| e.to_string())?;
            let again = decode_payload(&dev.codec, &raw, dev.medium, DecodeOptions::default()).map_err(|e| e.to_string())?;
            ensure(again.values[0].value == r.value, || format!("{}: {} re-decodes to {}", dev.device_id, r.value, again.values[0].value))?;
        }
        counts.push(rows.len());
    }
    ensure(counts == [24, 140, 96], || format!("counts {counts:?}"))?;
    ensure(store.len() == 260, || format!("store holds {}", store.len()))?;
    Ok("24 + 140 + 96 readings, all valid and re-decodable, byte-identical reruns".into())
}

fn c7_codec_robustness() -> Check {
    let fixture = hex::decode(
        fs::read_to_string(workspace().join("crates/core/tests/fixtures/heat-meter.mbus.hex"))
            .map_err(|e| e.to_string())?
            .trim(),
    )
    .map_err(|e| e.to_string())?;
    ensure(decode_mbus(&fixture).is_ok(), || "fixture does not decode".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Vec<u8>> = (0..10_000)
        .map(|_| {
            let len = rng.gen_range(0..256);
            (0..len).map(|_| rng.gen()).collect()
        })
        .collect();
    let result = catch_unwind(AssertUnwindSafe(|| {
        for b in &inputs {
            let _ = decode_mbus(b);
            let _ = decode_sml(b, SmlOptions::default());
            let _ = decode_sml(b, SmlOptions { strict_crc: true });
            let _ = decode_pulse(b, 0.01, Unit::M3);
            let _ = decode_compact(b);
        }
    }));
    ensure(result.is_ok(), || "a decoder panicked".into())?;

    let mut corrupt_accepted = 0;
    for pos in 0..fixture.len() {
        for delta in 1..=255u8 {
            let mut bad = fixture.clone();
            bad[pos] = bad[pos].wrapping_add(delta);
            if decode_mbus(&bad).is_ok() {
                corrupt_accepted += 1;
            }
        }
    }
    ensure(corrupt_accepted == 0, || format!("{corrupt_accepted} corruptions accepted"))?;

    let media = [Medium::Unknown, Medium::Electricity, Medium::Gas, Medium::Heat, Medium::Water, Medium::Cooling];
    let quantities = [Quantity::Energy, Quantity::Volume, Quantity::Power, Quantity::PulseCount];
    for _ in 0..1000 {
        let rec = CompactRecord {
            medium: media[rng.gen_range(0..media.len())],
            quantity: quantities[rng.gen_range(0..quantities.len())],
            mantissa: i64::from(rng.gen::<i32>()),
            exponent: i32::from(rng.gen::<i8>()),
        };
        let bytes = encode_compact(&rec).map_err(|e| e.to_string())?;
        ensure(decode_compact(&bytes).ok() == Some(rec), || format!("{rec:?} does not round-trip"))?;
    }
    Ok(format!(
        "10000 random inputs x 5 decoders, {} corruptions rejected, 1000 compact round-trips",
        fixture.len() * 255
    ))
}

/// Reference matcher: straightforward recursion over levels.
fn reference_match(filter: &[&str], topic: &[&str]) -> bool {
    match (filter.first(), topic.first()) {
        (Some(&"#"), _) => true,
        (None, None) => true,
        (Some(&"+"), Some(_)) => reference_match(&filter[1..], &topic[1..]),
        (Some(f), Some(t)) => f == t && reference_match(&filter[1..], &topic[1..]),
        _ => false,
    }
}

fn c8_bus() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let words = ["a", "b", "meterhub", "x1"];
    let mut matched = 0;
    for _ in 0..10_000 {
        let tdepth = rng.gen_range(1..=6);
        let topic: Vec<&str> = (0..tdepth).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let fdepth = rng.gen_range(1..=6);
        let mut filter: Vec<&str> = (0..fdepth)
            .map(|_| match rng.gen_range(0..6) {
                0 => "+",
                _ => words[rng.gen_range(0..words.len())],
            })
            .collect();
        if rng.gen_bool(0.25) {
            *filter.last_mut().unwrap() = "#";
        }
        let f = TopicFilter::new(&filter.join("/")).map_err(|e| e.to_string())?;
        let got = topic_matches(&f, &topic.join("/"));
        let want = reference_match(&filter, &topic);
        ensure(got == want, || format!("{} vs {}: {got}, reference {want}", filter.join("/"), topic.join("/")))?;
        matched += usize::from(got);
    }

    let bus = Bus::new();
    let (_sub, rx) = bus.subscribe_channel(TopicFilter::new("meterhub/fifo/+").unwrap());
    let handles: Vec<_> = (0..4)
        .map(|p| {
            let bus = bus.clone();
            thread::spawn(move || {
                for i in 0..1000u32 {
                    bus.publish_bytes(&format!("meterhub/fifo/p{p}"), i.to_be_bytes().to_vec()).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "publisher panicked")?;
    }
    let mut last: HashMap<String, i64> = HashMap::new();
    let mut total = 0;
    for m in rx.try_iter() {
        let i = i64::from(u32::from_be_bytes(m.body[..4].try_into().unwrap()));
        let prev = last.entry(m.topic.clone()).or_insert(-1);
        ensure(i == *prev + 1, || format!("{}: {i} after {prev}", m.topic))?;
        *prev = i;
        total += 1;
    }
    ensure(total == 4000, || format!("{total} of 4000 delivered"))?;
    Ok(format!("10000 pairs agree ({matched} matches), 4 x 1000 FIFO"))
}

fn c9_store_durability() -> Check {
    const N: u32 = 25;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let port = free_port();
    let config = sigfox_config(dir.path(), port);
    let uplinks: Vec<String> = (0..N).map(|i| sigfox_uplink(1000 + i, 1_709_251_200 + 600 * i64::from(i))).collect();

    let server = Server::start(&config, port);
    for u in &uplinks {
        let (status, body) = post(port, "/ingest/sigfox", u);
        ensure(status == 200, || format!("HTTP {status}: {body}"))?;
    }
    server.signal(libc::SIGKILL);
    server.wait();
    let recovered = Store::open(dir.path().join("store")).map_err(|e| e.to_string())?.len();
    ensure(recovered == N as usize, || format!("recovered {recovered} of {N}"))?;

    let server = Server::start(&config, port);
    for u in &uplinks {
        let (status, body) = post(port, "/ingest/sigfox", u);
        ensure(status == 200, || format!("HTTP {status}: {body}"))?;
    }
    server.signal(libc::SIGINT);
    server.wait();
    let after = Store::open(dir.path().join("store")).map_err(|e| e.to_string())?.len();
    ensure(after == N as usize, || format!("{after} after redelivery"))?;

    let store = Store::open(dir.path().join("store")).map_err(|e| e.to_string())?;
    ensure(store.latest("gas-1").is_some(), || "no latest reading".into())?;
    Ok(format!("{N} acknowledged, {recovered} recovered after SIGKILL, {after} after full redelivery"))
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 9] = [
        ("link budgets", c1_link_budgets),
        ("BPL table", c2_bpl_table),
        ("attenuation", c3_attenuation),
        ("regulatory budgets", c4_regulatory),
        ("Wi-SUN reachability", c5_wisun_reachability),
        ("end-to-end pipeline", c6_pipeline),
        ("codec robustness", c7_codec_robustness),
        ("bus semantics", c8_bus),
        ("store durability", c9_store_durability),
    ];
    let started = Instant::now();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = t.elapsed().as_millis();
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail} ({ms} ms)", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL  {name}: {why} ({ms} ms)", i + 1);
                failed.push(i + 1);
            }
        }
    }
    println!("acceptance finished in {:.1} s", started.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
