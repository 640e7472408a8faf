//! Binary meter payload formats and their normalization into [`MeterReading`].
//!
//! Byte layouts are documented in `FORMATS.md` at the repository root.

pub mod compact;
pub mod mbus;
pub mod pulse;
pub mod sml;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LinkInfo, Medium, MeterReading, Quantity, RawUplink, Unit, READING_SCHEMA};

pub use compact::{decode_compact, encode_compact, CompactError, CompactRecord};
pub use mbus::{decode_mbus, encode_mbus, MbusError, MbusFrame, MbusRecord};
pub use pulse::{decode_pulse, encode_pulse, PulseError, PulseRecord};
pub use sml::{decode_sml, encode_sml, SmlDecoded, SmlError, SmlOptions, SmlValue};

/// `mantissa * 10^exponent`, dividing for negative exponents so that values
/// like 1000e-3 come out exact.
pub fn scale(mantissa: i64, exponent: i32) -> f64 {
    let m = mantissa as f64;
    if exponent >= 0 {
        m * 10f64.powi(exponent)
    } else {
        m / 10f64.powi(-exponent)
    }
}

/// Which decoder a device's payloads go through, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum CodecSpec {
    Mbus,
    Sml,
    Pulse {
        pulse_weight: f64,
        #[serde(default = "default_weight_unit")]
        weight_unit: Unit,
    },
    Compact,
}

fn default_weight_unit() -> Unit {
    Unit::M3
}

impl CodecSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CodecSpec::Mbus => "mbus",
            CodecSpec::Sml => "sml",
            CodecSpec::Pulse { .. } => "pulse",
            CodecSpec::Compact => "compact",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Mbus(#[from] MbusError),
    #[error(transparent)]
    Sml(#[from] SmlError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Compact(#[from] CompactError),
}

/// One decoded register value, independent of the wire format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedValue {
    pub medium: Medium,
    pub quantity: Quantity,
    pub value: f64,
    pub unit: Unit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decoded {
    pub values: Vec<DecodedValue>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    pub strict_crc: bool,
}

fn sml_quantity(unit_code: u8) -> Option<Quantity> {
    match unit_code {
        sml::UNIT_WH => Some(Quantity::Energy),
        sml::UNIT_W => Some(Quantity::Power),
        sml::UNIT_M3 => Some(Quantity::Volume),
        _ => None,
    }
}

/// Decode a payload with the given codec. `expected_medium` fills in the
/// medium for formats that do not carry one (pulse, SML).
pub fn decode_payload(
    codec: &CodecSpec,
    payload: &[u8],
    expected_medium: Option<Medium>,
    options: DecodeOptions,
) -> Result<Decoded, DecodeError> {
    let mut out = Decoded::default();
    match codec {
        CodecSpec::Mbus => {
            let frame = decode_mbus(payload)?;
            out.warnings = frame.warnings;
            out.values = frame
                .records
                .iter()
                .map(|r| DecodedValue {
                    medium: r.medium,
                    quantity: r.quantity,
                    value: r.value,
                    unit: r.unit,
                })
                .collect();
        }
        CodecSpec::Sml => {
            let decoded = decode_sml(payload, SmlOptions { strict_crc: options.strict_crc })?;
            if !decoded.crc_ok {
                out.warnings.push("SML CRC mismatch".to_string());
            }
            let medium = expected_medium.unwrap_or(Medium::Electricity);
            for v in decoded.values {
                match sml_quantity(v.unit_code) {
                    Some(quantity) => out.values.push(DecodedValue {
                        medium,
                        quantity,
                        value: v.effective(),
                        unit: quantity.unit(),
                    }),
                    None => out.warnings.push(format!(
                        "skipped OBIS {:02x?} with unit code 0x{:02x}",
                        v.obis, v.unit_code
                    )),
                }
            }
        }
        CodecSpec::Pulse {
            pulse_weight,
            weight_unit,
        } => {
            let r = decode_pulse(payload, *pulse_weight, *weight_unit)?;
            out.values.push(DecodedValue {
                medium: expected_medium.unwrap_or(Medium::Unknown),
                quantity: r.quantity,
                value: r.value,
                unit: r.unit,
            });
        }
        CodecSpec::Compact => {
            let r = decode_compact(payload)?;
            out.values.push(DecodedValue {
                medium: r.medium,
                quantity: r.quantity,
                value: r.value(),
                unit: r.unit(),
            });
        }
    }
    Ok(out)
}

/// Build the canonical reading for one decoded value received in `uplink`.
pub fn normalize(value: &DecodedValue, uplink: &RawUplink) -> MeterReading {
    MeterReading {
        schema: READING_SCHEMA.to_string(),
        device_id: uplink.device_id.clone(),
        technology: uplink.technology,
        timestamp: crate::model::to_second(uplink.received_at),
        medium: value.medium,
        quantity: value.quantity,
        value: value.value,
        unit: value.unit,
        link: LinkInfo {
            rssi_dbm: uplink.rssi_dbm,
            snr_db: uplink.snr_db,
            gateway_count: uplink.gateway_count,
        },
        raw: hex::encode(&uplink.payload),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_reading, TechnologyKind};
    use chrono::{TimeZone, Utc};

    fn uplink(technology: TechnologyKind, payload: Vec<u8>, rssi: Option<f64>) -> RawUplink {
        RawUplink {
            technology,
            device_id: "dev-1".into(),
            payload,
            rssi_dbm: rssi,
            snr_db: None,
            gateway_count: rssi.map(|_| 1),
            received_at: Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
        }
    }

    #[test]
    fn mbus_heat_over_lorawan() {
        let frame = encode_mbus(
            &mbus::MbusHeader::default(),
            &[mbus::MbusRecordSpec::energy_wh(12_345_000)],
        )
        .unwrap();
        let up = uplink(TechnologyKind::Lorawan, frame.clone(), Some(-116.0));
        let decoded = decode_payload(&CodecSpec::Mbus, &frame, None, DecodeOptions::default()).unwrap();
        let reading = normalize(&decoded.values[0], &up);
        assert_eq!(reading.medium, Medium::Heat);
        assert_eq!(reading.unit, Unit::Wh);
        assert_eq!(reading.value, 12_345_000.0);
        assert_eq!(reading.link.rssi_dbm, Some(-116.0));
        assert_eq!(reading.raw, hex::encode(&frame));
        assert_eq!(reading.timestamp, up.received_at);
        validate_reading(&reading).unwrap();
    }

    #[test]
    fn pulse_over_sigfox_takes_registry_medium() {
        let codec = CodecSpec::Pulse {
            pulse_weight: 0.01,
            weight_unit: Unit::M3,
        };
        let payload = encode_pulse(300).to_vec();
        let decoded =
            decode_payload(&codec, &payload, Some(Medium::Gas), DecodeOptions::default()).unwrap();
        let reading = normalize(&decoded.values[0], &uplink(TechnologyKind::Sigfox, payload, Some(-124.0)));
        assert_eq!(reading.medium, Medium::Gas);
        assert_eq!(reading.quantity, Quantity::Volume);
        validate_reading(&reading).unwrap();
    }

    #[test]
    fn medium_zero_is_unknown() {
        let bytes = encode_compact(&CompactRecord {
            medium: Medium::Unknown,
            quantity: Quantity::Energy,
            mantissa: 5,
            exponent: 0,
        })
        .unwrap();
        let decoded = decode_payload(&CodecSpec::Compact, &bytes, Some(Medium::Gas), DecodeOptions::default())
            .unwrap();
        let reading = normalize(&decoded.values[0], &uplink(TechnologyKind::Sigfox, bytes.to_vec(), None));
        assert_eq!(reading.medium, Medium::Unknown);
        assert_eq!(reading.link, LinkInfo::default());
    }

    #[test]
    fn sml_energy() {
        let msg = encode_sml(
            b"srv",
            b"t",
            &[SmlValue {
                obis: sml::OBIS_ENERGY_IMPORT,
                value: 123_456,
                scaler: -1,
                unit_code: sml::UNIT_WH,
            }],
        );
        let decoded = decode_payload(&CodecSpec::Sml, &msg, None, DecodeOptions::default()).unwrap();
        assert_eq!(decoded.values.len(), 1);
        assert_eq!(decoded.values[0].medium, Medium::Electricity);
        assert_eq!(decoded.values[0].value, 12345.6);
    }

    #[test]
    fn codec_spec_json() {
        let spec: CodecSpec =
            serde_json::from_str(r#"{"codec":"pulse","pulse_weight":0.01}"#).unwrap();
        assert_eq!(
            spec,
            CodecSpec::Pulse {
                pulse_weight: 0.01,
                weight_unit: Unit::M3
            }
        );
        let spec: CodecSpec = serde_json::from_str(r#"{"codec":"mbus"}"#).unwrap();
        assert_eq!(spec, CodecSpec::Mbus);
    }

    #[test]
    fn scale_is_exact_for_decimal_shifts() {
        assert_eq!(scale(1000, -3), 1.0);
        assert_eq!(scale(12345, 3), 12_345_000.0);
        assert_eq!(scale(123_456, -1), 12345.6);
    }
}
