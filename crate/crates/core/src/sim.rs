//! Deterministic fleet simulator: synthesizes device uplinks in each
//! connector's wire format on a virtual clock.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{Bus, TopicFilter};
use crate::codecs::{encode_compact, encode_mbus, encode_pulse, encode_sml, mbus, sml, CodecSpec, CompactRecord, DecodeOptions, SmlValue};
use crate::config::{build_registry, DeviceEntry};
use crate::connectors::{ingest_lorawan, ingest_sigfox, Dispatcher};
use crate::model::{
    sanitize_level, timestamp, BandPlan, Direction, LinkKey, Medium, MpId, Quantity,
    RssiCampaign, TechnologyKind, TechnologyLimits, Unit,
};
use crate::radio::{median_rssi, record_tx, wisun_reachable, TxBudgetLedger, TxRequest};
use crate::store::Store;

/// Half-width of the uniform RSSI jitter, dB.
pub const RSSI_JITTER_DB: f64 = 3.0;
pub const OUTLIER_PROBABILITY: f64 = 0.01;
pub const OUTLIER_DROP_DB: f64 = 20.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown measurement point {0}")]
    UnknownMp(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("campaign: {0}")]
    Campaign(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterModel {
    pub start: f64,
    pub rate_per_hour: f64,
    /// Relative jitter of each increment, in [0, 1).
    #[serde(default)]
    pub jitter: f64,
}

/// Which campaign column supplies a device's RSSI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssiSource {
    pub technology: TechnologyKind,
    #[serde(default)]
    pub variant: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDevice {
    pub device_id: String,
    pub technology: TechnologyKind,
    #[serde(default)]
    pub variant: String,
    pub mp: MpId,
    #[serde(flatten)]
    pub codec: CodecSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<Medium>,
    pub interval_s: u64,
    pub meter: MeterModel,
    /// Defaults to the technology's lowest uplink rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_rate_kbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi_from: Option<RssiSource>,
}

impl SimDevice {
    /// Campaign column for this device. NB-IoT RSSI is device-side (DL);
    /// Wi-SUN has no campaign column and borrows the LoRaWAN DL one, the
    /// closest 868 MHz link measured at the same points.
    pub fn rssi_source(&self) -> RssiSource {
        if let Some(src) = &self.rssi_from {
            return src.clone();
        }
        match self.technology {
            TechnologyKind::Nbiot => RssiSource {
                technology: TechnologyKind::Nbiot,
                variant: self.variant.clone(),
                direction: Direction::Downlink,
            },
            TechnologyKind::Wisun => RssiSource {
                technology: TechnologyKind::Lorawan,
                variant: String::new(),
                direction: Direction::Downlink,
            },
            t => RssiSource {
                technology: t,
                variant: self.variant.clone(),
                direction: Direction::Uplink,
            },
        }
    }

    pub fn data_rate(&self) -> f64 {
        self.data_rate_kbps
            .unwrap_or_else(|| TechnologyLimits::builtin(self.technology).data_rate_ul_kbps.min_kbps)
    }

    /// The quantity the meter register counts.
    pub fn quantity(&self) -> Quantity {
        match (&self.codec, self.medium) {
            (CodecSpec::Pulse { weight_unit: Unit::Count, .. }, _) => Quantity::PulseCount,
            (CodecSpec::Pulse { .. }, _) => Quantity::Volume,
            (_, Some(Medium::Gas | Medium::Water)) => Quantity::Volume,
            _ => Quantity::Energy,
        }
    }

    pub fn registry_entry(&self) -> DeviceEntry {
        DeviceEntry {
            device_id: self.device_id.clone(),
            technology: self.technology,
            codec: self.codec.clone(),
            medium: self.medium,
        }
    }

    /// Encode the register value in the device's payload format. Fails when
    /// the value does not fit the format.
    pub fn encode(&self, value: f64, frame_no: u64) -> Result<Vec<u8>, String> {
        let over = || format!("codec over-range ({value})");
        let quantity = self.quantity();
        let to_u32 = |x: f64| -> Result<u32, String> {
            let r = x.round();
            if (0.0..=f64::from(u32::MAX)).contains(&r) {
                Ok(r as u32)
            } else {
                Err(over())
            }
        };
        match &self.codec {
            CodecSpec::Mbus => {
                let header = mbus::MbusHeader {
                    medium: self.medium.unwrap_or(Medium::Heat),
                    ..mbus::MbusHeader::default()
                };
                let record = match quantity {
                    Quantity::Volume => mbus::MbusRecordSpec::volume_litres(to_u32(value * 1000.0)?),
                    _ => mbus::MbusRecordSpec::energy_wh(to_u32(value)?),
                };
                encode_mbus(&header, &[record]).ok_or_else(over)
            }
            CodecSpec::Sml => {
                let (mantissa, scaler, unit_code) = match quantity {
                    Quantity::Volume => ((value * 1000.0).round(), -3, sml::UNIT_M3),
                    _ => ((value * 10.0).round(), -1, sml::UNIT_WH),
                };
                if mantissa.is_nan() || mantissa.abs() >= 9.0e18 {
                    return Err(over());
                }
                let v = SmlValue {
                    obis: sml::OBIS_ENERGY_IMPORT,
                    value: mantissa as i64,
                    scaler,
                    unit_code,
                };
                let id = &self.device_id.as_bytes()[..self.device_id.len().min(14)];
                Ok(encode_sml(id, &frame_no.to_be_bytes(), &[v]))
            }
            CodecSpec::Pulse { pulse_weight, .. } => {
                let counter = to_u32((value / pulse_weight + 1e-9).floor())?;
                Ok(encode_pulse(counter).to_vec())
            }
            CodecSpec::Compact => {
                let (scaled, exponent) = match quantity {
                    Quantity::Volume => ((value * 1000.0).round(), -3),
                    _ => (value.round(), 0),
                };
                if scaled.is_nan() || scaled.abs() >= 9.0e18 {
                    return Err(over());
                }
                let record = CompactRecord::normalized(
                    self.medium.unwrap_or(Medium::Unknown),
                    quantity,
                    scaled as i64,
                    exponent,
                );
                encode_compact(&record).map(|b| b.to_vec()).map_err(|_| over())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    /// Campaign file; the bundled campus campaign when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campaign: Option<PathBuf>,
    pub devices: Vec<SimDevice>,
    pub duration_s: u64,
    pub seed: u64,
    /// Virtual clock origin; midnight UTC of 2024-01-01 when absent.
    #[serde(default, with = "crate::model::timestamp::option", skip_serializing_if = "Option::is_none")]
    pub start: Option<DateTime<Utc>>,
    /// Inject occasional deep fades into RSSI draws.
    #[serde(default)]
    pub outliers: bool,
}

pub fn default_start() -> DateTime<Utc> {
    timestamp::parse("2024-01-01T00:00:00Z").expect("valid literal")
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<SimScenario, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load a scenario file and its campaign. A relative campaign path is
    /// resolved against the scenario file's directory.
    pub fn load(path: &Path) -> Result<(SimScenario, RssiCampaign), SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario = SimScenario::from_json(&text)?;
        if let Some(c) = &scenario.campaign {
            if c.is_relative() {
                scenario.campaign = path.parent().map(|d| d.join(c));
            }
        }
        let campaign = scenario.load_campaign()?;
        Ok((scenario, campaign))
    }

    pub fn load_campaign(&self) -> Result<RssiCampaign, SimError> {
        match &self.campaign {
            None => Ok(RssiCampaign::campus_efs()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| SimError::Io {
                    path: p.clone(),
                    source,
                })?;
                RssiCampaign::from_json(&text).map_err(|e| SimError::Campaign(e.to_string()))
            }
        }
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start.unwrap_or_else(default_start)
    }

    pub fn validate(&self, campaign: &RssiCampaign) -> Result<(), SimError> {
        let mut ids = HashSet::new();
        for d in &self.devices {
            let bad = |msg: &str| SimError::Invalid(format!("device {}: {msg}", d.device_id));
            if !ids.insert(&d.device_id) {
                return Err(bad("duplicate device_id"));
            }
            if d.interval_s == 0 {
                return Err(bad("interval_s must be positive"));
            }
            if !campaign.contains_mp(&d.mp) {
                return Err(SimError::UnknownMp(d.mp.to_string()));
            }
            if d.data_rate().is_nan() || d.data_rate() <= 0.0 {
                return Err(bad("data rate must be positive"));
            }
            let m = d.meter;
            if !(m.start.is_finite() && m.rate_per_hour.is_finite()) {
                return Err(bad("meter values must be finite"));
            }
            if !(0.0..1.0).contains(&m.jitter) {
                return Err(bad("meter jitter must be in [0, 1)"));
            }
        }
        build_registry(&self.devices.iter().map(SimDevice::registry_entry).collect::<Vec<_>>())
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssiOptions {
    pub jitter_db: f64,
    pub outliers: bool,
}

impl Default for RssiOptions {
    fn default() -> Self {
        RssiOptions {
            jitter_db: RSSI_JITTER_DB,
            outliers: false,
        }
    }
}

/// Campaign median for the tuple plus uniform jitter; `None` where the
/// campaign has no measurement (unreachable).
pub fn sample_rssi<R: Rng>(
    campaign: &RssiCampaign,
    mp: &MpId,
    link: &LinkKey,
    rng: &mut R,
    options: RssiOptions,
) -> Result<Option<f64>, SimError> {
    if !campaign.contains_mp(mp) {
        return Err(SimError::UnknownMp(mp.to_string()));
    }
    let values = campaign.values(mp, link);
    let Ok(median) = median_rssi(&values) else {
        return Ok(None);
    };
    let mut rssi = median;
    if options.jitter_db > 0.0 {
        rssi += rng.gen_range(-options.jitter_db..=options.jitter_db);
    }
    if options.outliers && rng.gen_bool(OUTLIER_PROBABILITY) {
        rssi -= OUTLIER_DROP_DB;
    }
    Ok(Some(rssi))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: String,
    pub technology: TechnologyKind,
    pub mp: String,
    pub generated: u64,
    pub delivered: u64,
    pub rejected: BTreeMap<String, u64>,
    pub suppressed: u64,
    pub readings_expected: u64,
}

impl DeviceReport {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.generated == self.delivered + self.rejected_total() + self.suppressed
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub generated: u64,
    pub delivered: u64,
    pub rejected: u64,
    pub suppressed: u64,
    pub readings_expected: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    #[serde(with = "crate::model::timestamp")]
    pub start: DateTime<Utc>,
    pub duration_s: u64,
    pub devices: Vec<DeviceReport>,
    pub totals: Totals,
}

impl SimReport {
    pub fn device(&self, device_id: &str) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One uplink as the network would deliver it to a connector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Emission {
    pub technology: TechnologyKind,
    pub device_id: String,
    #[serde(with = "crate::model::timestamp")]
    pub at: DateTime<Utc>,
    /// HTTP path or bus topic the document is delivered to.
    pub route: String,
    pub document: Value,
}

pub fn ingest_topic(technology: TechnologyKind, device_id: &str) -> String {
    format!("meterhub/ingest/{technology}/{}", sanitize_level(device_id))
}

fn round_tenth(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn wire_document(d: &SimDevice, at: DateTime<Utc>, payload: &[u8], rssi: f64, frame_no: u64) -> Emission {
    let ts = timestamp::format(&at);
    let (route, document) = match d.technology {
        TechnologyKind::Lorawan => (
            format!("/ingest/{}", d.technology),
            json!({
                "end_device_ids": {"device_id": d.device_id},
                "received_at": ts,
                "uplink_message": {
                    "f_cnt": frame_no,
                    "frm_payload": base64::engine::general_purpose::STANDARD.encode(payload),
                    "rx_metadata": [{"gateway_ids": {"gateway_id": "campus-gw"}, "rssi": rssi}],
                },
            }),
        ),
        TechnologyKind::Sigfox => (
            format!("/ingest/{}", d.technology),
            json!({
                "device": d.device_id,
                "time": at.timestamp(),
                "data": hex::encode(payload),
                "rssi": rssi,
                "seqNumber": frame_no,
            }),
        ),
        TechnologyKind::Nbiot => (
            ingest_topic(d.technology, &d.device_id),
            json!({"imei": d.device_id, "rssi_dbm": rssi, "payload": hex::encode(payload), "sent_at": ts}),
        ),
        TechnologyKind::Wisun => (
            ingest_topic(d.technology, &d.device_id),
            json!({"device_id": d.device_id, "rssi_dbm": rssi, "payload": hex::encode(payload), "sent_at": ts}),
        ),
    };
    Emission {
        technology: d.technology,
        device_id: d.device_id.clone(),
        at,
        route,
        document,
    }
}

struct DeviceState<'a> {
    device: &'a SimDevice,
    link: LinkKey,
    median: Option<f64>,
    limits: TechnologyLimits,
    band: Option<BandPlan>,
    ledger: TxBudgetLedger,
    rng: ChaCha8Rng,
    value: f64,
    last: DateTime<Utc>,
    report: DeviceReport,
}

impl DeviceState<'_> {
    fn step(&mut self, campaign: &RssiCampaign, at: DateTime<Utc>, frame_no: u64, outliers: bool) -> Option<Emission> {
        let d = self.device;
        self.report.generated += 1;

        let hours = (at - self.last).num_milliseconds() as f64 / 3_600_000.0;
        let u: f64 = self.rng.gen_range(-1.0..=1.0);
        // jitter < 1 keeps the increment on the same side of zero as the rate
        self.value += d.meter.rate_per_hour * hours * (1.0 + d.meter.jitter * u);
        self.last = at;

        let options = RssiOptions {
            jitter_db: RSSI_JITTER_DB,
            outliers,
        };
        let rssi = sample_rssi(campaign, &d.mp, &self.link, &mut self.rng, options)
            .expect("validated scenario");
        let reachable = match (rssi, d.technology) {
            (None, _) => false,
            // a stable connection needs the link itself to clear the threshold,
            // and each frame needs its own draw to clear it too
            (Some(r), TechnologyKind::Wisun) => {
                self.median.is_some_and(wisun_reachable) && wisun_reachable(r)
            }
            (Some(_), _) => true,
        };
        if !reachable {
            self.report.suppressed += 1;
            return None;
        }
        let rssi = round_tenth(rssi.unwrap());

        let payload = match d.encode(self.value, frame_no) {
            Ok(p) => p,
            Err(_) => {
                *self.report.rejected.entry("codec over-range".into()).or_default() += 1;
                return None;
            }
        };
        let tx = TxRequest {
            direction: Direction::Uplink,
            payload_bytes: payload.len(),
            data_rate_kbps: d.data_rate(),
            at,
        };
        if let Err(why) = record_tx(&mut self.ledger, &self.limits, self.band.as_ref(), &tx) {
            *self.report.rejected.entry(why.reason().to_string()).or_default() += 1;
            return None;
        }
        self.report.delivered += 1;
        self.report.readings_expected += 1;
        Some(wire_document(d, at, &payload, rssi, frame_no))
    }
}

fn device_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Run the scenario on a virtual clock, handing each emitted document to
/// `deliver` in timestamp order (ties in device order).
pub fn run<F>(scenario: &SimScenario, campaign: &RssiCampaign, mut deliver: F) -> Result<SimReport, SimError>
where
    F: FnMut(&Emission),
{
    scenario.validate(campaign)?;
    let start = scenario.start();
    let mut states: Vec<DeviceState> = scenario
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let src = d.rssi_source();
            let link = LinkKey::new(src.technology, &src.variant, src.direction);
            let median = median_rssi(&campaign.values(&d.mp, &link)).ok();
            DeviceState {
                device: d,
                link,
                median,
                limits: TechnologyLimits::builtin(d.technology),
                band: BandPlan::uplink_band(d.technology),
                ledger: TxBudgetLedger::new(&d.device_id, d.technology, start),
                rng: device_rng(scenario.seed, i),
                value: d.meter.start,
                last: start,
                report: DeviceReport {
                    device_id: d.device_id.clone(),
                    technology: d.technology,
                    mp: d.mp.to_string(),
                    generated: 0,
                    delivered: 0,
                    rejected: BTreeMap::new(),
                    suppressed: 0,
                    readings_expected: 0,
                },
            }
        })
        .collect();

    let mut events: Vec<(u64, usize, u64)> = Vec::new();
    for (i, d) in scenario.devices.iter().enumerate() {
        let mut k = 0;
        while k * d.interval_s < scenario.duration_s {
            events.push((k * d.interval_s, i, k));
            k += 1;
        }
    }
    events.sort_unstable();

    for (offset, i, k) in events {
        let at = start + Duration::seconds(offset as i64);
        if let Some(emission) = states[i].step(campaign, at, k, scenario.outliers) {
            deliver(&emission);
        }
    }

    let devices: Vec<DeviceReport> = states.into_iter().map(|s| s.report).collect();
    let mut totals = Totals::default();
    for d in &devices {
        totals.generated += d.generated;
        totals.delivered += d.delivered;
        totals.rejected += d.rejected_total();
        totals.suppressed += d.suppressed;
        totals.readings_expected += d.readings_expected;
    }
    Ok(SimReport {
        seed: scenario.seed,
        start,
        duration_s: scenario.duration_s,
        devices,
        totals,
    })
}

/// What the in-process pipeline published while a scenario ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub readings: usize,
    pub dead_letters: usize,
}

/// Run a scenario against in-process connectors, bus and (optionally) store.
pub fn run_pipeline(
    scenario: &SimScenario,
    campaign: &RssiCampaign,
    store: Option<Arc<Store>>,
    options: DecodeOptions,
) -> Result<(SimReport, PipelineStats), SimError> {
    scenario.validate(campaign)?;
    let bus = Bus::new();
    let registry = build_registry(&scenario.devices.iter().map(SimDevice::registry_entry).collect::<Vec<_>>())
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let dispatcher = Dispatcher::new(registry, bus.clone(), options);
    for tech in [TechnologyKind::Nbiot, TechnologyKind::Wisun] {
        let filter = TopicFilter::new(&format!("meterhub/ingest/{tech}/+")).unwrap();
        dispatcher.attach_direct(tech, filter);
    }
    let readings = Arc::new(AtomicUsize::new(0));
    let dead = Arc::new(AtomicUsize::new(0));
    let counter = |c: &Arc<AtomicUsize>| {
        let c = c.clone();
        move |_: &crate::bus::BusMessage| {
            c.fetch_add(1, Ordering::SeqCst);
        }
    };
    bus.subscribe(TopicFilter::new("meterhub/readings/#").unwrap(), counter(&readings));
    bus.subscribe(TopicFilter::new("meterhub/deadletter/+").unwrap(), counter(&dead));
    if let Some(store) = store {
        crate::store::attach(store, &bus);
    }

    let report = run(scenario, campaign, |e| {
        let parsed = match e.technology {
            TechnologyKind::Lorawan => Some(ingest_lorawan(&e.document)),
            TechnologyKind::Sigfox => Some(ingest_sigfox(&e.document)),
            _ => None,
        };
        match parsed {
            Some(Ok(uplink)) => {
                dispatcher.dispatch(&uplink);
            }
            Some(Err(err)) => {
                dispatcher.dead_letter(e.technology, Some(&e.device_id), err.to_string(), &[], e.at);
            }
            None => {
                let body = serde_json::to_vec(&e.document).expect("serializable");
                bus.publish_bytes(&e.route, body).expect("generated topic");
            }
        }
    })?;
    let stats = PipelineStats {
        readings: readings.load(Ordering::SeqCst),
        dead_letters: dead.load(Ordering::SeqCst),
    };
    Ok((report, stats))
}
