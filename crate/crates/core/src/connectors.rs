//! Per-technology ingest: parse each network's delivery document into a
//! [`RawUplink`], then decode, normalize and publish it.

use std::sync::Arc;

use base64::Engine;
use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bus::{Bus, BusMessage, Subscription, TopicFilter};
use crate::codecs::{decode_payload, normalize, DecodeOptions};
use crate::config::Registry;
use crate::model::{
    sanitize_level, timestamp, topic_for, validate_reading, MeterReading, RawUplink, TechnologyKind,
};

pub const SIGFOX_MAX_PAYLOAD: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    /// The document is not shaped like the technology's delivery format.
    #[error("{0}")]
    Structural(String),
    #[error("payload cap: {bytes} bytes exceeds {cap}")]
    PayloadCap { bytes: usize, cap: usize },
}

impl IngestError {
    /// HTTP status for callback-style connectors.
    pub fn http_status(&self) -> u16 {
        match self {
            IngestError::Structural(_) => 400,
            IngestError::PayloadCap { .. } => 422,
        }
    }
}

fn structural(msg: impl Into<String>) -> IngestError {
    IngestError::Structural(msg.into())
}

fn str_field<'a>(doc: &'a Value, path: &[&str]) -> Result<&'a str, IngestError> {
    let mut v = doc;
    for key in path {
        v = v.get(key).ok_or_else(|| structural(format!("missing {}", path.join("."))))?;
    }
    v.as_str()
        .ok_or_else(|| structural(format!("{} must be a string", path.join("."))))
}

/// Numbers may arrive as JSON numbers or as numeric strings.
fn number(v: &Value, name: &str) -> Result<f64, IngestError> {
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    n.filter(|x| x.is_finite())
        .ok_or_else(|| structural(format!("{name} is not a number")))
}

fn optional_number(doc: &Value, key: &str) -> Result<Option<f64>, IngestError> {
    match doc.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => number(v, key).map(Some),
    }
}

fn rfc3339(text: &str, name: &str) -> Result<DateTime<Utc>, IngestError> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| structural(format!("{name} is not an RFC 3339 timestamp")))
}

fn decode_hex(text: &str) -> Result<Vec<u8>, IngestError> {
    hex::decode(text.trim()).map_err(|_| structural("malformed hex payload"))
}

/// Parse a LoRaWAN network-server uplink envelope.
pub fn ingest_lorawan(doc: &Value) -> Result<RawUplink, IngestError> {
    let device_id = str_field(doc, &["end_device_ids", "device_id"])?;
    let frm = str_field(doc, &["uplink_message", "frm_payload"])?;
    let payload = base64::engine::general_purpose::STANDARD
        .decode(frm)
        .map_err(|_| structural("undecodable base-64 frm_payload"))?;
    let received = match doc.get("received_at").and_then(Value::as_str) {
        Some(t) => t,
        None => str_field(doc, &["uplink_message", "received_at"])?,
    };
    let received_at = rfc3339(received, "received_at")?;

    let mut strongest: Option<(f64, Option<f64>)> = None;
    let mut gateways = 0u32;
    if let Some(meta) = doc["uplink_message"].get("rx_metadata") {
        let entries = meta
            .as_array()
            .ok_or_else(|| structural("rx_metadata must be an array"))?;
        for entry in entries {
            let Some(rssi) = optional_number(entry, "rssi")? else {
                continue;
            };
            gateways += 1;
            let snr = optional_number(entry, "snr")?;
            if strongest.is_none_or(|(best, _)| rssi > best) {
                strongest = Some((rssi, snr));
            }
        }
    }
    Ok(RawUplink {
        technology: TechnologyKind::Lorawan,
        device_id: device_id.to_string(),
        payload,
        rssi_dbm: strongest.map(|s| s.0),
        snr_db: strongest.and_then(|s| s.1),
        gateway_count: (gateways > 0).then_some(gateways),
        received_at,
    })
}

/// Parse a Sigfox back-end callback document.
pub fn ingest_sigfox(doc: &Value) -> Result<RawUplink, IngestError> {
    let device_id = str_field(doc, &["device"])?;
    let time = doc.get("time").ok_or_else(|| structural("missing time"))?;
    let secs = number(time, "time")?;
    let received_at = Utc
        .timestamp_opt(secs as i64, 0)
        .single()
        .ok_or_else(|| structural("time out of range"))?;
    let data = match doc.get("data") {
        None | Some(Value::Null) => "",
        Some(v) => v.as_str().ok_or_else(|| structural("data must be a string"))?,
    };
    let payload = decode_hex(data)?;
    if payload.len() > SIGFOX_MAX_PAYLOAD {
        return Err(IngestError::PayloadCap {
            bytes: payload.len(),
            cap: SIGFOX_MAX_PAYLOAD,
        });
    }
    Ok(RawUplink {
        technology: TechnologyKind::Sigfox,
        device_id: device_id.to_string(),
        payload,
        rssi_dbm: optional_number(doc, "rssi")?,
        snr_db: optional_number(doc, "snr")?,
        gateway_count: None,
        received_at,
    })
}

/// Parse a document published by a device that talks to the bus directly:
/// `{imei | device_id, rssi_dbm, payload (hex), sent_at}`. NB-IoT devices
/// identify by `imei`, Wi-SUN devices by `device_id`. `fallback_time` is used
/// when `sent_at` is absent.
pub fn ingest_direct(
    technology: TechnologyKind,
    doc: &Value,
    fallback_time: DateTime<Utc>,
) -> Result<RawUplink, IngestError> {
    let id_key = if technology == TechnologyKind::Nbiot {
        "imei"
    } else {
        "device_id"
    };
    let device_id = str_field(doc, &[id_key])?;
    if device_id.is_empty() {
        return Err(structural(format!("empty {id_key}")));
    }
    let payload = decode_hex(str_field(doc, &["payload"])?)?;
    let received_at = match doc.get("sent_at").and_then(Value::as_str) {
        Some(t) => rfc3339(t, "sent_at")?,
        None => fallback_time,
    };
    Ok(RawUplink {
        technology,
        device_id: device_id.to_string(),
        payload,
        rssi_dbm: optional_number(doc, "rssi_dbm")?,
        snr_db: optional_number(doc, "snr_db")?,
        gateway_count: None,
        received_at,
    })
}

pub fn ingest_nbiot(doc: &Value, fallback_time: DateTime<Utc>) -> Result<RawUplink, IngestError> {
    ingest_direct(TechnologyKind::Nbiot, doc, fallback_time)
}

/// Record of an uplink that could not be turned into readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub technology: TechnologyKind,
    pub device_id: Option<String>,
    pub reason: String,
    /// Lowercase hex of the payload, or of the raw document when it could
    /// not be parsed at all.
    pub raw: String,
    #[serde(with = "crate::model::timestamp")]
    pub received_at: DateTime<Utc>,
}

pub fn deadletter_topic(technology: TechnologyKind) -> String {
    format!("meterhub/deadletter/{technology}")
}

pub fn heartbeat_topic(technology: TechnologyKind, device_id: &str) -> String {
    format!("meterhub/heartbeat/{technology}/{}", sanitize_level(device_id))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchOutcome {
    Published(Vec<MeterReading>),
    DeadLettered(DeadLetter),
    /// Zero-length payload: announced on the heartbeat topic, no reading.
    Heartbeat,
}

impl DispatchOutcome {
    pub fn readings(&self) -> &[MeterReading] {
        match self {
            DispatchOutcome::Published(r) => r,
            _ => &[],
        }
    }
}

/// Routes uplinks through the registry's codecs onto the bus.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    registry: Arc<Registry>,
    bus: Bus,
    options: DecodeOptions,
}

impl Dispatcher {
    pub fn new(registry: Registry, bus: Bus, options: DecodeOptions) -> Dispatcher {
        Dispatcher {
            registry: Arc::new(registry),
            bus,
            options,
        }
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn publish_json<T: Serialize>(&self, topic: &str, value: &T) {
        let body = serde_json::to_vec(value).expect("serializable");
        let msg = BusMessage::new(topic, body).expect("generated topics are valid");
        self.bus.publish(&msg);
    }

    /// Publish a dead letter and return it.
    pub fn dead_letter(
        &self,
        technology: TechnologyKind,
        device_id: Option<&str>,
        reason: impl Into<String>,
        raw: &[u8],
        received_at: DateTime<Utc>,
    ) -> DeadLetter {
        let letter = DeadLetter {
            technology,
            device_id: device_id.map(str::to_string),
            reason: reason.into(),
            raw: hex::encode(raw),
            received_at: crate::model::to_second(received_at),
        };
        log::warn!(
            "dead letter ({}): {} from {:?}",
            technology,
            letter.reason,
            letter.device_id
        );
        self.publish_json(&deadletter_topic(technology), &letter);
        letter
    }

    pub fn dispatch(&self, uplink: &RawUplink) -> DispatchOutcome {
        let tech = uplink.technology;
        let reject = |reason: String| {
            DispatchOutcome::DeadLettered(self.dead_letter(
                tech,
                Some(&uplink.device_id),
                reason,
                &uplink.payload,
                uplink.received_at,
            ))
        };
        let Some(device) = self.registry.get(&uplink.device_id) else {
            return reject("unregistered device".into());
        };
        if device.technology != tech {
            return reject(format!("technology mismatch: registered as {}", device.technology));
        }
        if uplink.payload.is_empty() {
            let doc = serde_json::json!({
                "device_id": uplink.device_id,
                "technology": tech,
                "received_at": timestamp::format(&crate::model::to_second(uplink.received_at)),
                "rssi_dbm": uplink.rssi_dbm,
            });
            self.publish_json(&heartbeat_topic(tech, &uplink.device_id), &doc);
            return DispatchOutcome::Heartbeat;
        }
        let decoded = match decode_payload(&device.codec, &uplink.payload, device.medium, self.options) {
            Ok(d) => d,
            Err(e) => return reject(e.to_string()),
        };
        for w in &decoded.warnings {
            log::warn!("{}: {w}", uplink.device_id);
        }
        if decoded.values.is_empty() {
            return reject("no records".into());
        }
        let readings: Vec<MeterReading> = decoded.values.iter().map(|v| normalize(v, uplink)).collect();
        for r in &readings {
            if let Err(violations) = validate_reading(r) {
                let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return reject(format!("validation failed: {}", text.join("; ")));
            }
        }
        for r in &readings {
            self.publish_json(&topic_for(r), r);
        }
        DispatchOutcome::Published(readings)
    }

    /// Parse a direct-device document and dispatch it; malformed documents
    /// are dead-lettered with the document bytes as `raw`.
    pub fn handle_direct(&self, technology: TechnologyKind, body: &[u8], at: DateTime<Utc>) -> DispatchOutcome {
        let parsed = serde_json::from_slice::<Value>(body)
            .map_err(|e| structural(format!("malformed JSON: {e}")))
            .and_then(|doc| ingest_direct(technology, &doc, at));
        match parsed {
            Ok(uplink) => self.dispatch(&uplink),
            Err(e) => DispatchOutcome::DeadLettered(self.dead_letter(technology, None, e.to_string(), body, at)),
        }
    }

    /// Subscribe a direct-device connector (NB-IoT, Wi-SUN) to `filter`.
    pub fn attach_direct(&self, technology: TechnologyKind, filter: TopicFilter) -> Subscription {
        let this = self.clone();
        self.bus.subscribe(filter, move |msg| {
            this.handle_direct(technology, &msg.body, msg.published_at);
        })
    }
}
