//! Canonical domain types shared by every part of the pipeline: technologies,
//! radio parameters, the measurement campaign, and the normalized
//! [`MeterReading`] that travels over the bus and into the store.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Schema tag carried by every normalized reading.
pub const READING_SCHEMA: &str = "meterhub.reading.v1";

/// Wire format for timestamps: UTC, whole seconds, `Z` suffix.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TechnologyKind {
    Lorawan,
    Nbiot,
    Sigfox,
    Wisun,
}

impl TechnologyKind {
    pub const ALL: [TechnologyKind; 4] = [
        TechnologyKind::Lorawan,
        TechnologyKind::Sigfox,
        TechnologyKind::Nbiot,
        TechnologyKind::Wisun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TechnologyKind::Lorawan => "lorawan",
            TechnologyKind::Nbiot => "nbiot",
            TechnologyKind::Sigfox => "sigfox",
            TechnologyKind::Wisun => "wisun",
        }
    }
}

impl fmt::Display for TechnologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TechnologyKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lorawan" => Ok(TechnologyKind::Lorawan),
            "nbiot" => Ok(TechnologyKind::Nbiot),
            "sigfox" => Ok(TechnologyKind::Sigfox),
            "wisun" => Ok(TechnologyKind::Wisun),
            other => Err(ModelError::UnknownTechnology(other.to_string())),
        }
    }
}

/// Link direction: uplink (device to network) or downlink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "UL")]
    Uplink,
    #[serde(rename = "DL")]
    Downlink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uplink => "UL",
            Direction::Downlink => "DL",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "UL" | "ul" => Ok(Direction::Uplink),
            "DL" | "dl" => Ok(Direction::Downlink),
            other => Err(ModelError::UnknownDirection(other.to_string())),
        }
    }
}

/// Transmit/receive parameters of one technology, gateway and device side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioProfile {
    pub technology: TechnologyKind,
    pub band_mhz: Vec<f64>,
    pub tx_power_gw_dbm: f64,
    /// Gateway power in the high-power sub-band, where the technology uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_power_gw_boosted_dbm: Option<f64>,
    pub tx_power_dev_dbm: f64,
    pub rx_sens_gw_dbm: f64,
    pub rx_sens_dev_dbm: f64,
}

impl RadioProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidProfile(self.technology, what.to_string()));
        if self.rx_sens_gw_dbm >= 0.0 || self.rx_sens_dev_dbm >= 0.0 {
            return bad("receiver sensitivity must be negative");
        }
        let powers = [
            Some(self.tx_power_gw_dbm),
            self.tx_power_gw_boosted_dbm,
            Some(self.tx_power_dev_dbm),
        ];
        if powers.iter().flatten().any(|p| !(0.0..=30.0).contains(p)) {
            return bad("transmit power outside [0, 30] dBm");
        }
        if let Some(boosted) = self.tx_power_gw_boosted_dbm {
            if boosted < self.tx_power_gw_dbm {
                return bad("boosted gateway power below normal power");
            }
        }
        if self.band_mhz.is_empty() {
            return bad("no carrier band");
        }
        Ok(())
    }

    /// Built-in profile for a technology (European deployment).
    pub fn builtin(technology: TechnologyKind) -> RadioProfile {
        match technology {
            TechnologyKind::Lorawan => RadioProfile {
                technology,
                band_mhz: vec![868.0],
                tx_power_gw_dbm: 14.0,
                tx_power_gw_boosted_dbm: Some(27.0),
                tx_power_dev_dbm: 14.0,
                rx_sens_gw_dbm: -140.0,
                rx_sens_dev_dbm: -136.0,
            },
            TechnologyKind::Sigfox => RadioProfile {
                technology,
                band_mhz: vec![868.0],
                tx_power_gw_dbm: 27.0,
                tx_power_gw_boosted_dbm: None,
                tx_power_dev_dbm: 14.0,
                rx_sens_gw_dbm: -144.0,
                rx_sens_dev_dbm: -132.0,
            },
            TechnologyKind::Nbiot => RadioProfile {
                technology,
                band_mhz: vec![800.0, 900.0],
                tx_power_gw_dbm: 23.0,
                tx_power_gw_boosted_dbm: None,
                tx_power_dev_dbm: 23.0,
                rx_sens_gw_dbm: -131.0,
                rx_sens_dev_dbm: -131.0,
            },
            TechnologyKind::Wisun => RadioProfile {
                technology,
                band_mhz: vec![868.0],
                tx_power_gw_dbm: 14.0,
                tx_power_gw_boosted_dbm: None,
                tx_power_dev_dbm: 14.0,
                rx_sens_gw_dbm: -120.0,
                rx_sens_dev_dbm: -120.0,
            },
        }
    }
}

/// Closed interval of data rates in kbit/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRange {
    pub min_kbps: f64,
    pub max_kbps: f64,
}

/// How a technology's connectivity is billed per device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subscription {
    None,
    PerYear { eur: f64 },
    /// One payment covering a fixed block of years (e.g. a prepaid SIM).
    PerBlock { eur: f64, years: u32 },
}

impl Subscription {
    pub fn annual_equivalent_eur(&self) -> f64 {
        match *self {
            Subscription::None => 0.0,
            Subscription::PerYear { eur } => eur,
            Subscription::PerBlock { eur, years } => eur / f64::from(years),
        }
    }
}

/// Regulatory and operator limits for one technology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechnologyLimits {
    pub technology: TechnologyKind,
    pub data_rate_ul_kbps: RateRange,
    pub data_rate_dl_kbps: RateRange,
    /// Payload cap for technologies without data-rate classes.
    pub configured_payload_cap_bytes: usize,
    pub max_payload_dl_bytes: usize,
    /// `None` means unlimited.
    pub max_ul_msgs_per_day: Option<u32>,
    pub max_dl_msgs_per_day: Option<u32>,
    pub max_airtime_s_per_day: Option<f64>,
    pub subscription: Subscription,
    pub module_cost_eur: f64,
}

/// Cap applied to NB-IoT and Wi-SUN payloads unless configured otherwise.
pub const DEFAULT_PAYLOAD_CAP_BYTES: usize = 512;

impl TechnologyLimits {
    pub fn builtin(technology: TechnologyKind) -> TechnologyLimits {
        match technology {
            TechnologyKind::Lorawan => TechnologyLimits {
                technology,
                data_rate_ul_kbps: RateRange { min_kbps: 0.25, max_kbps: 11.0 },
                data_rate_dl_kbps: RateRange { min_kbps: 0.25, max_kbps: 11.0 },
                configured_payload_cap_bytes: 222,
                max_payload_dl_bytes: 222,
                max_ul_msgs_per_day: None,
                max_dl_msgs_per_day: None,
                max_airtime_s_per_day: Some(30.0),
                subscription: Subscription::None,
                module_cost_eur: 9.0,
            },
            TechnologyKind::Sigfox => TechnologyLimits {
                technology,
                data_rate_ul_kbps: RateRange { min_kbps: 0.1, max_kbps: 0.1 },
                data_rate_dl_kbps: RateRange { min_kbps: 0.1, max_kbps: 0.1 },
                configured_payload_cap_bytes: 12,
                max_payload_dl_bytes: 8,
                max_ul_msgs_per_day: Some(140),
                max_dl_msgs_per_day: Some(4),
                max_airtime_s_per_day: None,
                subscription: Subscription::PerYear { eur: 10.0 },
                module_cost_eur: 9.0,
            },
            TechnologyKind::Nbiot => TechnologyLimits {
                technology,
                // Cat-NB1 peak .. Cat-NB2 peak
                data_rate_ul_kbps: RateRange { min_kbps: 62.0, max_kbps: 159.0 },
                data_rate_dl_kbps: RateRange { min_kbps: 26.0, max_kbps: 127.0 },
                configured_payload_cap_bytes: DEFAULT_PAYLOAD_CAP_BYTES,
                max_payload_dl_bytes: DEFAULT_PAYLOAD_CAP_BYTES,
                max_ul_msgs_per_day: None,
                max_dl_msgs_per_day: None,
                max_airtime_s_per_day: None,
                subscription: Subscription::PerBlock { eur: 11.0, years: 10 },
                module_cost_eur: 12.0,
            },
            TechnologyKind::Wisun => TechnologyLimits {
                technology,
                data_rate_ul_kbps: RateRange { min_kbps: 50.0, max_kbps: 300.0 },
                data_rate_dl_kbps: RateRange { min_kbps: 50.0, max_kbps: 300.0 },
                configured_payload_cap_bytes: DEFAULT_PAYLOAD_CAP_BYTES,
                max_payload_dl_bytes: DEFAULT_PAYLOAD_CAP_BYTES,
                max_ul_msgs_per_day: None,
                max_dl_msgs_per_day: None,
                max_airtime_s_per_day: None,
                subscription: Subscription::None,
                module_cost_eur: 20.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandName {
    G1,
    G3,
    #[serde(rename = "default-868")]
    Default868,
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandName::G1 => "G1",
            BandName::G3 => "G3",
            BandName::Default868 => "default-868",
        })
    }
}

/// A sub-band of the European 868 MHz SRD band with its power and duty-cycle rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    pub name: BandName,
    pub freq_range_mhz: (f64, f64),
    pub max_tx_dbm: f64,
    pub duty_cycle: f64,
}

impl BandPlan {
    pub const G1: BandPlan = BandPlan {
        name: BandName::G1,
        freq_range_mhz: (868.0, 868.6),
        max_tx_dbm: 14.0,
        duty_cycle: 0.01,
    };
    pub const G3: BandPlan = BandPlan {
        name: BandName::G3,
        freq_range_mhz: (869.4, 869.65),
        max_tx_dbm: 27.0,
        duty_cycle: 0.10,
    };
    pub const DEFAULT_868: BandPlan = BandPlan {
        name: BandName::Default868,
        freq_range_mhz: (863.0, 870.0),
        max_tx_dbm: 14.0,
        duty_cycle: 0.001,
    };

    /// Sub-band a device of this technology transmits uplinks in.
    /// `None` for licensed spectrum, where no duty cycle applies.
    pub fn uplink_band(technology: TechnologyKind) -> Option<BandPlan> {
        match technology {
            TechnologyKind::Lorawan | TechnologyKind::Sigfox => Some(BandPlan::G1),
            TechnologyKind::Wisun => Some(BandPlan::DEFAULT_868),
            TechnologyKind::Nbiot => None,
        }
    }

    pub fn downlink_band(technology: TechnologyKind) -> Option<BandPlan> {
        match technology {
            TechnologyKind::Lorawan | TechnologyKind::Sigfox => Some(BandPlan::G3),
            TechnologyKind::Wisun => Some(BandPlan::DEFAULT_868),
            TechnologyKind::Nbiot => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpCategory {
    Outdoor,
    IndoorGround,
    Basement,
    Tunnel,
}

/// Measurement point label such as `O2`, `B3` or `T1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MpId(String);

impl MpId {
    pub fn new(id: &str) -> Result<MpId, ModelError> {
        let mut chars = id.chars();
        let valid = matches!(chars.next(), Some('O' | 'I' | 'B' | 'T'))
            && !chars.as_str().is_empty()
            && chars.all(|c| c.is_ascii_digit());
        if valid {
            Ok(MpId(id.to_string()))
        } else {
            Err(ModelError::InvalidMeasurementPoint(id.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn category(&self) -> MpCategory {
        match self.0.as_bytes()[0] {
            b'O' => MpCategory::Outdoor,
            b'I' => MpCategory::IndoorGround,
            b'B' => MpCategory::Basement,
            _ => MpCategory::Tunnel,
        }
    }

    pub fn is_outdoor(&self) -> bool {
        self.category() == MpCategory::Outdoor
    }
}

impl TryFrom<String> for MpId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        MpId::new(&value)
    }
}

impl From<MpId> for String {
    fn from(value: MpId) -> Self {
        value.0
    }
}

impl fmt::Display for MpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Technology + variant + direction: one column of the RSSI campaign.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey {
    pub technology: TechnologyKind,
    /// Free-form label, e.g. the NB-IoT operator ("DT", "Vo"). Empty when unused.
    #[serde(default)]
    pub variant: String,
    pub direction: Direction,
}

impl LinkKey {
    pub fn new(technology: TechnologyKind, variant: &str, direction: Direction) -> LinkKey {
        LinkKey {
            technology,
            variant: variant.to_string(),
            direction,
        }
    }
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant.is_empty() {
            write!(f, "{} {}", self.technology, self.direction)
        } else {
            write!(f, "{} {} {}", self.technology, self.variant, self.direction)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssiSample {
    pub mp: MpId,
    pub technology: TechnologyKind,
    #[serde(default)]
    pub variant: String,
    pub direction: Direction,
    pub rssi_dbm: f64,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::model::timestamp::option"
    )]
    pub captured_at: Option<DateTime<Utc>>,
}

impl RssiSample {
    pub fn link(&self) -> LinkKey {
        LinkKey::new(self.technology, &self.variant, self.direction)
    }
}

/// Maps an indoor measurement point, for one link, to its outdoor reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub indoor: MpId,
    pub technology: TechnologyKind,
    #[serde(default)]
    pub variant: String,
    pub direction: Direction,
    pub outdoor: MpId,
}

impl ReferenceEntry {
    pub fn link(&self) -> LinkKey {
        LinkKey::new(self.technology, &self.variant, self.direction)
    }
}

/// An indoor point deliberately left without an outdoor reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmappedEntry {
    pub indoor: MpId,
    pub technology: TechnologyKind,
    #[serde(default)]
    pub variant: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RssiCampaign {
    #[serde(default)]
    pub samples: Vec<RssiSample>,
    #[serde(default)]
    pub reference_map: Vec<ReferenceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmapped: Vec<UnmappedEntry>,
}

static CAMPUS_EFS_JSON: &str = include_str!("../data/campus-efs.json");

impl RssiCampaign {
    /// The shipped campus campaign (medians per point and link, plus the
    /// indoor-to-outdoor reference mapping).
    pub fn campus_efs() -> RssiCampaign {
        RssiCampaign::from_json(CAMPUS_EFS_JSON).expect("shipped campaign is valid")
    }

    pub fn campus_efs_json() -> &'static str {
        CAMPUS_EFS_JSON
    }

    pub fn from_json(text: &str) -> Result<RssiCampaign, ModelError> {
        let campaign: RssiCampaign =
            serde_json::from_str(text).map_err(|e| ModelError::Campaign(e.to_string()))?;
        campaign.validate()?;
        Ok(campaign)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for sample in &self.samples {
            if !sample.rssi_dbm.is_finite() || !(-150.0..=0.0).contains(&sample.rssi_dbm) {
                return Err(ModelError::Campaign(format!(
                    "RSSI {} dBm at {} ({}) outside [-150, 0]",
                    sample.rssi_dbm,
                    sample.mp,
                    sample.link()
                )));
            }
        }
        let mut mapped = BTreeSet::new();
        for entry in &self.reference_map {
            if entry.indoor.is_outdoor() {
                return Err(ModelError::Campaign(format!(
                    "reference source {} is an outdoor point",
                    entry.indoor
                )));
            }
            if !entry.outdoor.is_outdoor() {
                return Err(ModelError::Campaign(format!(
                    "reference target {} for {} is not an outdoor point",
                    entry.outdoor, entry.indoor
                )));
            }
            if !mapped.insert((entry.indoor.clone(), entry.link())) {
                return Err(ModelError::Campaign(format!(
                    "duplicate reference for {} ({})",
                    entry.indoor,
                    entry.link()
                )));
            }
        }
        let unmapped: BTreeSet<_> = self
            .unmapped
            .iter()
            .map(|u| (u.indoor.clone(), LinkKey::new(u.technology, &u.variant, u.direction)))
            .collect();
        for sample in self.samples.iter().filter(|s| !s.mp.is_outdoor()) {
            let key = (sample.mp.clone(), sample.link());
            if !mapped.contains(&key) && !unmapped.contains(&key) {
                return Err(ModelError::Campaign(format!(
                    "indoor point {} ({}) has no outdoor reference",
                    sample.mp,
                    sample.link()
                )));
            }
        }
        Ok(())
    }

    /// All RSSI values recorded for a point and link, in file order.
    pub fn values(&self, mp: &MpId, link: &LinkKey) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| &s.mp == mp && s.technology == link.technology)
            .filter(|s| s.variant == link.variant && s.direction == link.direction)
            .map(|s| s.rssi_dbm)
            .collect()
    }

    pub fn contains_mp(&self, mp: &MpId) -> bool {
        self.samples.iter().any(|s| &s.mp == mp)
            || self
                .reference_map
                .iter()
                .any(|r| &r.indoor == mp || &r.outdoor == mp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Heat,
    Cooling,
    Gas,
    Electricity,
    Water,
    Unknown,
}

impl Medium {
    pub fn as_str(self) -> &'static str {
        match self {
            Medium::Heat => "heat",
            Medium::Cooling => "cooling",
            Medium::Gas => "gas",
            Medium::Electricity => "electricity",
            Medium::Water => "water",
            Medium::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Energy,
    Volume,
    Power,
    PulseCount,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Energy => "energy",
            Quantity::Volume => "volume",
            Quantity::Power => "power",
            Quantity::PulseCount => "pulse_count",
        }
    }

    /// The only unit a reading of this quantity may carry.
    pub fn unit(self) -> Unit {
        match self {
            Quantity::Energy => Unit::Wh,
            Quantity::Volume => Unit::M3,
            Quantity::Power => Unit::W,
            Quantity::PulseCount => Unit::Count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    Wh,
    #[serde(rename = "m3")]
    M3,
    W,
    #[serde(rename = "count")]
    Count,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Wh => "Wh",
            Unit::M3 => "m3",
            Unit::W => "W",
            Unit::Count => "count",
        }
    }
}

impl FromStr for Unit {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Wh" => Ok(Unit::Wh),
            "m3" => Ok(Unit::M3),
            "W" => Ok(Unit::W),
            "count" => Ok(Unit::Count),
            other => Err(ModelError::UnknownUnit(other.to_string())),
        }
    }
}

/// Radio metadata attached to a reading. Absent fields are omitted on the wire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway_count: Option<u32>,
}

/// The normalized reading every connector produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterReading {
    pub schema: String,
    pub device_id: String,
    pub technology: TechnologyKind,
    #[serde(with = "crate::model::timestamp")]
    pub timestamp: DateTime<Utc>,
    pub medium: Medium,
    pub quantity: Quantity,
    pub value: f64,
    pub unit: Unit,
    #[serde(default)]
    pub link: LinkInfo,
    /// Lowercase hex of the payload the reading was decoded from.
    pub raw: String,
}

impl MeterReading {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reading serializes")
    }

    pub fn from_json(text: &str) -> Result<MeterReading, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Reading(e.to_string()))
    }
}

/// Payload as received by a connector, before decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawUplink {
    pub technology: TechnologyKind,
    pub device_id: String,
    pub payload: Vec<u8>,
    pub rssi_dbm: Option<f64>,
    pub snr_db: Option<f64>,
    pub gateway_count: Option<u32>,
    pub received_at: DateTime<Utc>,
}

impl RawUplink {
    pub fn link_info(&self) -> LinkInfo {
        LinkInfo {
            rssi_dbm: self.rssi_dbm,
            snr_db: self.snr_db,
            gateway_count: self.gateway_count,
        }
    }
}

const TOPIC_ROOT: &str = "meterhub/readings";

/// Bus topic for a reading: `meterhub/readings/<technology>/<device_id>`.
pub fn topic_for(reading: &MeterReading) -> String {
    format!(
        "{TOPIC_ROOT}/{}/{}",
        reading.technology,
        sanitize_level(&reading.device_id)
    )
}

/// Replace characters that would break a single topic level.
pub fn sanitize_level(level: &str) -> String {
    let cleaned: String = level
        .chars()
        .map(|c| if matches!(c, '/' | '+' | '#') { '_' } else { c })
        .collect();
    if cleaned.is_empty() {
        "_".to_string()
    } else {
        cleaned
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownSchema(String),
    UnitMismatch { quantity: Quantity, unit: Unit },
    NonFiniteValue,
    MalformedTimestamp(String),
    MalformedRaw,
    EmptyDeviceId,
    /// Candidate JSON did not have the reading shape at all.
    Malformed(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownSchema(s) => write!(f, "unknown schema {s:?}"),
            Violation::UnitMismatch { quantity, unit } => write!(
                f,
                "unit mismatch: {} requires {}, got {}",
                quantity.as_str(),
                quantity.unit().as_str(),
                unit.as_str()
            ),
            Violation::NonFiniteValue => f.write_str("non-finite value"),
            Violation::MalformedTimestamp(s) => write!(f, "malformed timestamp {s:?}"),
            Violation::MalformedRaw => f.write_str("raw is not lowercase hex"),
            Violation::EmptyDeviceId => f.write_str("empty device_id"),
            Violation::Malformed(s) => write!(f, "malformed reading: {s}"),
        }
    }
}

/// Collect every invariant violation of a reading. An empty list means valid.
pub fn validate_reading(candidate: &MeterReading) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if candidate.schema != READING_SCHEMA {
        violations.push(Violation::UnknownSchema(candidate.schema.clone()));
    }
    if candidate.device_id.is_empty() {
        violations.push(Violation::EmptyDeviceId);
    }
    if candidate.quantity.unit() != candidate.unit {
        violations.push(Violation::UnitMismatch {
            quantity: candidate.quantity,
            unit: candidate.unit,
        });
    }
    if !candidate.value.is_finite() {
        violations.push(Violation::NonFiniteValue);
    }
    if candidate.timestamp.nanosecond() != 0 {
        violations.push(Violation::MalformedTimestamp(
            candidate.timestamp.to_rfc3339(),
        ));
    }
    if !is_lower_hex(&candidate.raw) {
        violations.push(Violation::MalformedRaw);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Like [`validate_reading`] but starting from untyped JSON, so malformed
/// timestamps and unknown enum labels surface as violations too.
pub fn validate_reading_json(value: &serde_json::Value) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut candidate = value.clone();
    if let Some(ts) = value.get("timestamp") {
        let text = ts.as_str().unwrap_or_default();
        if timestamp::parse(text).is_none() {
            violations.push(Violation::MalformedTimestamp(ts.to_string()));
            candidate["timestamp"] = serde_json::Value::from("1970-01-01T00:00:00Z");
        }
    }
    if let Some(v) = value.get("value") {
        if v.is_null() {
            violations.push(Violation::NonFiniteValue);
            candidate["value"] = serde_json::Value::from(0.0);
        }
    }
    match serde_json::from_value::<MeterReading>(candidate) {
        Ok(reading) => {
            if let Err(more) = validate_reading(&reading) {
                violations.extend(more);
            }
        }
        Err(e) => violations.push(Violation::Malformed(e.to_string())),
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn is_lower_hex(s: &str) -> bool {
    s.len().is_multiple_of(2) && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Second-resolution UTC timestamps in `YYYY-MM-DDTHH:MM:SSZ` form.
pub mod timestamp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn format(ts: &DateTime<Utc>) -> String {
        ts.format(TIMESTAMP_FORMAT).to_string()
    }

    pub fn parse(text: &str) -> Option<DateTime<Utc>> {
        NaiveDateTime::parse_from_str(text, TIMESTAMP_FORMAT)
            .ok()
            .filter(|_| text.len() == 20)
            .map(|naive| naive.and_utc())
    }

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text)
            .ok_or_else(|| serde::de::Error::custom(format!("malformed timestamp {text:?}")))
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(
            ts: &Option<DateTime<Utc>>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            match ts {
                Some(ts) => super::serialize(ts, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DateTime<Utc>>, D::Error> {
            let text: Option<String> = Option::deserialize(d)?;
            text.map(|t| {
                parse(&t).ok_or_else(|| serde::de::Error::custom(format!("malformed timestamp {t:?}")))
            })
            .transpose()
        }
    }
}

/// Truncate to whole seconds.
pub fn to_second(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.with_nanosecond(0).unwrap_or(ts)
}
