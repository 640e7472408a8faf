//! Pulse-counter payload: version byte `01` followed by a 32-bit big-endian counter.

use thiserror::Error;

use crate::model::{Quantity, Unit};

pub const PULSE_VERSION: u8 = 0x01;
pub const PULSE_PAYLOAD_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("wrong payload length {0} (expected 5)")]
    WrongLength(usize),
    #[error("unsupported pulse payload version 0x{0:02x}")]
    WrongVersion(u8),
    #[error("pulse weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("pulse weight unit {0} not supported")]
    UnsupportedUnit(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseRecord {
    pub counter: u32,
    pub quantity: Quantity,
    pub value: f64,
    pub unit: Unit,
}

pub fn decode_pulse(payload: &[u8], pulse_weight: f64, weight_unit: Unit) -> Result<PulseRecord, PulseError> {
    if payload.len() != PULSE_PAYLOAD_LEN {
        return Err(PulseError::WrongLength(payload.len()));
    }
    if payload[0] != PULSE_VERSION {
        return Err(PulseError::WrongVersion(payload[0]));
    }
    if !(pulse_weight.is_finite() && pulse_weight > 0.0) {
        return Err(PulseError::BadWeight(pulse_weight));
    }
    let quantity = match weight_unit {
        Unit::M3 => Quantity::Volume,
        Unit::Count => Quantity::PulseCount,
        other => return Err(PulseError::UnsupportedUnit(other.as_str())),
    };
    let counter = u32::from_be_bytes([payload[1], payload[2], payload[3], payload[4]]);
    Ok(PulseRecord {
        counter,
        quantity,
        value: f64::from(counter) * pulse_weight,
        unit: weight_unit,
    })
}

pub fn encode_pulse(counter: u32) -> [u8; PULSE_PAYLOAD_LEN] {
    let c = counter.to_be_bytes();
    [PULSE_VERSION, c[0], c[1], c[2], c[3]]
}
