//! Seven-byte uplink encoding for a single register value, small enough for
//! a Sigfox frame: medium, quantity, signed decimal exponent, and a 32-bit
//! signed big-endian mantissa.

use thiserror::Error;

use crate::model::{Medium, Quantity, Unit};

pub const COMPACT_LEN: usize = 7;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompactError {
    #[error("wrong length {0} (expected 7)")]
    WrongLength(usize),
    #[error("unknown medium byte 0x{0:02x}")]
    UnknownMedium(u8),
    #[error("unknown quantity byte 0x{0:02x}")]
    UnknownQuantity(u8),
    #[error("mantissa {mantissa} or exponent {exponent} out of range")]
    OverRange { mantissa: i64, exponent: i32 },
}

fn medium_byte(medium: Medium) -> u8 {
    match medium {
        Medium::Unknown => 0x00,
        Medium::Electricity => 0x02,
        Medium::Gas => 0x03,
        Medium::Heat => 0x04,
        Medium::Water => 0x07,
        Medium::Cooling => 0x0A,
    }
}

fn medium_from_byte(b: u8) -> Result<Medium, CompactError> {
    Ok(match b {
        0x00 => Medium::Unknown,
        0x02 => Medium::Electricity,
        0x03 => Medium::Gas,
        0x04 => Medium::Heat,
        0x07 => Medium::Water,
        0x0A => Medium::Cooling,
        other => return Err(CompactError::UnknownMedium(other)),
    })
}

fn quantity_byte(quantity: Quantity) -> u8 {
    match quantity {
        Quantity::Energy => 0x01,
        Quantity::Volume => 0x02,
        Quantity::Power => 0x03,
        Quantity::PulseCount => 0x04,
    }
}

fn quantity_from_byte(b: u8) -> Result<Quantity, CompactError> {
    Ok(match b {
        0x01 => Quantity::Energy,
        0x02 => Quantity::Volume,
        0x03 => Quantity::Power,
        0x04 => Quantity::PulseCount,
        other => return Err(CompactError::UnknownQuantity(other)),
    })
}

/// A register value as `mantissa * 10^exponent` in the quantity's unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactRecord {
    pub medium: Medium,
    pub quantity: Quantity,
    pub mantissa: i64,
    pub exponent: i32,
}

impl CompactRecord {
    /// Move trailing decimal zeros of the mantissa into the exponent.
    pub fn normalized(medium: Medium, quantity: Quantity, mut mantissa: i64, mut exponent: i32) -> CompactRecord {
        if mantissa == 0 {
            exponent = 0;
        }
        while mantissa != 0 && mantissa % 10 == 0 {
            mantissa /= 10;
            exponent += 1;
        }
        CompactRecord {
            medium,
            quantity,
            mantissa,
            exponent,
        }
    }

    pub fn value(&self) -> f64 {
        super::scale(self.mantissa, self.exponent)
    }

    pub fn unit(&self) -> Unit {
        self.quantity.unit()
    }
}

pub fn encode_compact(record: &CompactRecord) -> Result<[u8; COMPACT_LEN], CompactError> {
    let over = CompactError::OverRange {
        mantissa: record.mantissa,
        exponent: record.exponent,
    };
    let mantissa = i32::try_from(record.mantissa).map_err(|_| over.clone())?;
    let exponent = i8::try_from(record.exponent).map_err(|_| over)?;
    let m = mantissa.to_be_bytes();
    Ok([
        medium_byte(record.medium),
        quantity_byte(record.quantity),
        exponent as u8,
        m[0],
        m[1],
        m[2],
        m[3],
    ])
}

pub fn decode_compact(bytes: &[u8]) -> Result<CompactRecord, CompactError> {
    let bytes: &[u8; COMPACT_LEN] = bytes
        .try_into()
        .map_err(|_| CompactError::WrongLength(bytes.len()))?;
    Ok(CompactRecord {
        medium: medium_from_byte(bytes[0])?,
        quantity: quantity_from_byte(bytes[1])?,
        exponent: i32::from(bytes[2] as i8),
        mantissa: i64::from(i32::from_be_bytes([bytes[3], bytes[4], bytes[5], bytes[6]])),
    })
}
