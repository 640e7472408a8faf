//! M-Bus long frames carrying a variable-data response (CI = 0x72).
//!
//! Only the record types listed in FORMATS.md are understood: integer and
//! 8-digit BCD data fields, and the energy / volume / power VIF ranges.
//! Records with any other known-length coding but an unrecognized VIF are
//! skipped with a warning.

use thiserror::Error;

use super::scale;
use crate::model::{Medium, Quantity, Unit};

const START: u8 = 0x68;
const STOP: u8 = 0x16;
pub const CI_VARIABLE_DATA: u8 = 0x72;
const FIXED_HEADER_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MbusError {
    #[error("truncated frame")]
    Truncated,
    #[error("bad start bytes")]
    BadStart,
    #[error("length fields disagree ({0} vs {1})")]
    LengthMismatch(u8, u8),
    #[error("bad stop byte 0x{0:02x}")]
    BadStop(u8),
    #[error("checksum mismatch (computed 0x{computed:02x}, frame 0x{found:02x})")]
    ChecksumMismatch { computed: u8, found: u8 },
    #[error("trailing bytes after stop byte ({0})")]
    TrailingBytes(usize),
    #[error("unsupported CI field 0x{0:02x}")]
    UnsupportedCi(u8),
    #[error("unsupported record at offset {offset} (DIF 0x{dif:02x})")]
    UnsupportedRecord { offset: usize, dif: u8 },
    #[error("invalid BCD digits at offset {0}")]
    InvalidBcd(usize),
}

/// Data field coding, the low nibble of the DIF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataCoding {
    Int8,
    Int16,
    Int24,
    Int32,
    Bcd8,
}

impl DataCoding {
    fn from_dif(dif: u8) -> Option<DataCoding> {
        match dif & 0x0F {
            0x01 => Some(DataCoding::Int8),
            0x02 => Some(DataCoding::Int16),
            0x03 => Some(DataCoding::Int24),
            0x04 => Some(DataCoding::Int32),
            0x0C => Some(DataCoding::Bcd8),
            _ => None,
        }
    }

    fn dif(self) -> u8 {
        match self {
            DataCoding::Int8 => 0x01,
            DataCoding::Int16 => 0x02,
            DataCoding::Int24 => 0x03,
            DataCoding::Int32 => 0x04,
            DataCoding::Bcd8 => 0x0C,
        }
    }

    fn len(self) -> usize {
        match self {
            DataCoding::Int8 => 1,
            DataCoding::Int16 => 2,
            DataCoding::Int24 => 3,
            DataCoding::Int32 | DataCoding::Bcd8 => 4,
        }
    }
}

pub fn medium_from_code(code: u8) -> Medium {
    match code {
        0x02 => Medium::Electricity,
        0x03 => Medium::Gas,
        0x04 => Medium::Heat,
        0x0A => Medium::Cooling,
        _ => Medium::Unknown,
    }
}

pub fn medium_code(medium: Medium) -> u8 {
    match medium {
        Medium::Electricity => 0x02,
        Medium::Gas => 0x03,
        Medium::Heat => 0x04,
        Medium::Cooling => 0x0A,
        Medium::Water => 0x07,
        Medium::Unknown => 0x00,
    }
}

/// Quantity and decimal exponent for a primary VIF.
fn interpret_vif(vif: u8) -> Option<(Quantity, i32)> {
    let n = i32::from(vif & 0x07);
    match vif {
        0x00..=0x07 => Some((Quantity::Energy, n - 3)),
        0x10..=0x17 => Some((Quantity::Volume, n - 6)),
        0x28..=0x2F => Some((Quantity::Power, n - 3)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbusRecord {
    pub medium: Medium,
    pub quantity: Quantity,
    pub value: f64,
    pub unit: Unit,
    pub mantissa: u64,
    pub exponent: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbusFrame {
    pub ident: u32,
    pub manufacturer: u16,
    pub version: u8,
    pub medium_code: u8,
    pub medium: Medium,
    pub access: u8,
    pub status: u8,
    pub signature: u16,
    pub records: Vec<MbusRecord>,
    pub warnings: Vec<String>,
}

fn read_bcd(bytes: &[u8], offset: usize) -> Result<u64, MbusError> {
    let mut value = 0u64;
    for &b in bytes.iter().rev() {
        let (hi, lo) = (b >> 4, b & 0x0F);
        if hi > 9 || lo > 9 {
            return Err(MbusError::InvalidBcd(offset));
        }
        value = value * 100 + u64::from(hi) * 10 + u64::from(lo);
    }
    Ok(value)
}

fn read_le(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .rev()
        .fold(0u64, |acc, &b| (acc << 8) | u64::from(b))
}

fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u8, |acc, &b| acc.wrapping_add(b))
}

pub fn decode_mbus(frame: &[u8]) -> Result<MbusFrame, MbusError> {
    if frame.is_empty() {
        return Err(MbusError::Truncated);
    }
    if frame[0] != START {
        return Err(MbusError::BadStart);
    }
    if frame.len() < 4 {
        return Err(MbusError::Truncated);
    }
    if frame[3] != START {
        return Err(MbusError::BadStart);
    }
    let (l1, l2) = (frame[1], frame[2]);
    if l1 != l2 {
        return Err(MbusError::LengthMismatch(l1, l2));
    }
    let l = usize::from(l1);
    let total = l + 6;
    if frame.len() < total {
        return Err(MbusError::Truncated);
    }
    if frame.len() > total {
        return Err(MbusError::TrailingBytes(frame.len() - total));
    }
    if frame[total - 1] != STOP {
        return Err(MbusError::BadStop(frame[total - 1]));
    }
    let body = &frame[4..4 + l];
    let computed = checksum(body);
    let found = frame[4 + l];
    if computed != found {
        return Err(MbusError::ChecksumMismatch { computed, found });
    }
    // C, A, CI
    if l < 3 {
        return Err(MbusError::Truncated);
    }
    let ci = body[2];
    if ci != CI_VARIABLE_DATA {
        return Err(MbusError::UnsupportedCi(ci));
    }
    let user = &body[3..];
    // offsets reported relative to the start of the frame
    let user_offset = 7;
    if user.len() < FIXED_HEADER_LEN {
        return Err(MbusError::Truncated);
    }
    let ident = read_bcd(&user[0..4], user_offset)? as u32;
    let medium_code = user[7];
    let medium = medium_from_code(medium_code);
    let mut out = MbusFrame {
        ident,
        manufacturer: u16::from_le_bytes([user[4], user[5]]),
        version: user[6],
        medium_code,
        medium,
        access: user[8],
        status: user[9],
        signature: u16::from_le_bytes([user[10], user[11]]),
        records: Vec::new(),
        warnings: Vec::new(),
    };

    let mut pos = FIXED_HEADER_LEN;
    while pos < user.len() {
        let offset = user_offset + pos;
        let dif = user[pos];
        let unsupported = MbusError::UnsupportedRecord { offset, dif };
        if dif & 0x80 != 0 {
            return Err(unsupported);
        }
        let coding = DataCoding::from_dif(dif).ok_or(unsupported.clone())?;
        let vif = *user.get(pos + 1).ok_or(MbusError::Truncated)?;
        if vif & 0x80 != 0 {
            return Err(unsupported);
        }
        let data_start = pos + 2;
        let data = user
            .get(data_start..data_start + coding.len())
            .ok_or(MbusError::Truncated)?;
        pos = data_start + coding.len();

        let mantissa = match coding {
            DataCoding::Bcd8 => read_bcd(data, user_offset + data_start)?,
            _ => read_le(data),
        };
        match interpret_vif(vif) {
            Some((quantity, exponent)) => out.records.push(MbusRecord {
                medium,
                quantity,
                value: scale(mantissa as i64, exponent),
                unit: quantity.unit(),
                mantissa,
                exponent,
            }),
            None => {
                let msg = format!("skipped record with unknown VIF 0x{vif:02x} at offset {offset}");
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
        }
    }
    Ok(out)
}

/// One data record to encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbusRecordSpec {
    pub coding: DataCoding,
    pub vif: u8,
    pub mantissa: u64,
}

impl MbusRecordSpec {
    /// Energy register in whole Wh, int32.
    pub fn energy_wh(wh: u32) -> MbusRecordSpec {
        MbusRecordSpec {
            coding: DataCoding::Int32,
            vif: 0x03,
            mantissa: u64::from(wh),
        }
    }

    /// Volume register in litres (10^-3 m3), int32.
    pub fn volume_litres(litres: u32) -> MbusRecordSpec {
        MbusRecordSpec {
            coding: DataCoding::Int32,
            vif: 0x13,
            mantissa: u64::from(litres),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbusHeader {
    /// Meter identification, at most 8 decimal digits.
    pub ident: u32,
    pub manufacturer: u16,
    pub version: u8,
    pub medium: Medium,
    pub access: u8,
    pub address: u8,
}

impl Default for MbusHeader {
    fn default() -> Self {
        MbusHeader {
            ident: 12345678,
            manufacturer: 0x2C2D,
            version: 0x01,
            medium: Medium::Heat,
            access: 0x00,
            address: 0x01,
        }
    }
}

fn write_bcd(mut value: u64, len: usize) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let lo = (value % 10) as u8;
        value /= 10;
        let hi = (value % 10) as u8;
        value /= 10;
        out.push((hi << 4) | lo);
    }
    (value == 0).then_some(out)
}

/// Build a CI=0x72 long frame. Returns `None` when a mantissa does not fit its coding
/// or the frame would exceed the 255-byte length field.
pub fn encode_mbus(header: &MbusHeader, records: &[MbusRecordSpec]) -> Option<Vec<u8>> {
    let mut body = vec![0x08, header.address, CI_VARIABLE_DATA];
    body.extend(write_bcd(u64::from(header.ident), 4)?);
    body.extend(header.manufacturer.to_le_bytes());
    body.push(header.version);
    body.push(medium_code(header.medium));
    body.push(header.access);
    body.push(0x00);
    body.extend([0x00, 0x00]);
    for rec in records {
        body.push(rec.coding.dif());
        body.push(rec.vif);
        match rec.coding {
            DataCoding::Bcd8 => body.extend(write_bcd(rec.mantissa, 4)?),
            coding => {
                let n = coding.len();
                if rec.mantissa >> (8 * n) != 0 {
                    return None;
                }
                body.extend(&rec.mantissa.to_le_bytes()[..n]);
            }
        }
    }
    let l = u8::try_from(body.len()).ok()?;
    let mut frame = vec![START, l, l, START];
    frame.extend(&body);
    frame.push(checksum(&body));
    frame.push(STOP);
    Some(frame)
}
