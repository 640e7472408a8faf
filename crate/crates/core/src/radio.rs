//! Radio arithmetic: link budgets, penetration loss from an RSSI campaign,
//! and the regulatory/operator transmit budgets that gate every uplink.

use std::collections::VecDeque;
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::model::{
    BandPlan, Direction, LinkKey, MpId, RadioProfile, RssiCampaign, Subscription,
    TechnologyKind, TechnologyLimits,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("{0} has no boosted gateway transmit power")]
    NoBoostedPower(TechnologyKind),
    #[error("median of an empty sample set")]
    EmptySamples,
    #[error("outdoor reference {outdoor} for {indoor} ({link}) has no samples")]
    MissingReference {
        indoor: MpId,
        outdoor: MpId,
        link: LinkKey,
    },
    #[error("contradictory floor arguments: {0} ceilings up and basement")]
    ContradictoryFloors(u32),
    #[error("data rate must be positive, got {0} kbit/s")]
    NonPositiveRate(f64),
    #[error("unknown data-rate class {class:?} for {technology}")]
    UnknownClass {
        technology: TechnologyKind,
        class: String,
    },
    #[error("years must be at least 1")]
    ZeroYears,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkBudget {
    pub technology: TechnologyKind,
    pub direction: Direction,
    pub budget_db: f64,
    /// Downlink budget with the gateway in its high-power sub-band.
    pub boosted_budget_db: Option<f64>,
}

/// Maximum tolerable path loss, transmitter power minus receiver sensitivity,
/// with 0 dBi antennas. `boosted` selects the high-power gateway setting and
/// is only meaningful on the downlink.
pub fn link_budget(
    profile: &RadioProfile,
    direction: Direction,
    boosted: bool,
) -> Result<LinkBudget, RadioError> {
    let (budget_db, boosted_budget_db) = match direction {
        Direction::Uplink => {
            if boosted {
                return Err(RadioError::NoBoostedPower(profile.technology));
            }
            (profile.tx_power_dev_dbm - profile.rx_sens_gw_dbm, None)
        }
        Direction::Downlink => {
            let boosted_db = profile
                .tx_power_gw_boosted_dbm
                .map(|p| p - profile.rx_sens_dev_dbm);
            let normal = profile.tx_power_gw_dbm - profile.rx_sens_dev_dbm;
            if boosted {
                let b = boosted_db.ok_or(RadioError::NoBoostedPower(profile.technology))?;
                (b, Some(b))
            } else {
                (normal, boosted_db)
            }
        }
    };
    Ok(LinkBudget {
        technology: profile.technology,
        direction,
        budget_db,
        boosted_budget_db,
    })
}

/// Median; even-length sets use the mean of the two middle values.
pub fn median_rssi(samples: &[f64]) -> Result<f64, RadioError> {
    if samples.is_empty() {
        return Err(RadioError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Ok(sorted[mid])
    } else {
        Ok((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}

/// Building penetration loss: outdoor RSSI minus indoor RSSI.
pub fn bpl(outdoor_rssi: f64, indoor_rssi: f64) -> f64 {
    outdoor_rssi - indoor_rssi
}

/// Round to the 0.5 dB grid the campaign is reported on.
pub fn round_half_db(db: f64) -> f64 {
    (db * 2.0).round() / 2.0 + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BplCell {
    Loss(f64),
    Unreachable,
}

impl fmt::Display for BplCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BplCell::Loss(db) => write!(f, "{db}"),
            BplCell::Unreachable => f.write_str("unreachable"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BplRow {
    pub mp: MpId,
    pub link: LinkKey,
    pub outdoor: MpId,
    pub cell: BplCell,
}

/// Penetration loss per indoor point and link, in reference-map order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BplTable {
    pub rows: Vec<BplRow>,
}

pub const BPL_CSV_HEADER: &str = "mp,technology,variant,bpl_db,direction,outdoor";

impl BplTable {
    pub fn get(&self, mp: &str, link: &LinkKey) -> Option<BplCell> {
        self.rows
            .iter()
            .find(|r| r.mp.as_str() == mp && &r.link == link)
            .map(|r| r.cell)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BPL_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.mp, row.link.technology, row.link.variant, row.cell, row.link.direction, row.outdoor
            ));
        }
        out
    }
}

pub fn bpl_table(campaign: &RssiCampaign) -> Result<BplTable, RadioError> {
    let mut rows = Vec::with_capacity(campaign.reference_map.len());
    for entry in &campaign.reference_map {
        let link = entry.link();
        let indoor = campaign.values(&entry.indoor, &link);
        let cell = if indoor.is_empty() {
            BplCell::Unreachable
        } else {
            let outdoor = campaign.values(&entry.outdoor, &link);
            if outdoor.is_empty() {
                return Err(RadioError::MissingReference {
                    indoor: entry.indoor.clone(),
                    outdoor: entry.outdoor.clone(),
                    link,
                });
            }
            let loss = bpl(median_rssi(&outdoor)?, median_rssi(&indoor)?);
            BplCell::Loss(round_half_db(loss))
        };
        rows.push(BplRow {
            mp: entry.indoor.clone(),
            link,
            outdoor: entry.outdoor.clone(),
            cell,
        });
    }
    Ok(BplTable { rows })
}

/// Linear power ratio for a loss in dB.
pub fn attenuation_factor(bpl_db: f64) -> f64 {
    10f64.powf(bpl_db / 10.0)
}

pub const CEILING_LOSS_DB: f64 = 10.0;
pub const BASEMENT_LOSS_DB: f64 = 55.0;

/// Expected RSSI on another floor of a building with an indoor gateway.
pub fn indoor_floor_rssi(
    ref_rssi: f64,
    ceilings_up: u32,
    to_basement: bool,
) -> Result<f64, RadioError> {
    match (ceilings_up, to_basement) {
        (n, true) if n > 0 => Err(RadioError::ContradictoryFloors(n)),
        (_, true) => Ok(ref_rssi - BASEMENT_LOSS_DB),
        (n, false) => Ok(ref_rssi - CEILING_LOSS_DB * f64::from(n)),
    }
}

/// Weakest RSSI at which a Wi-SUN link was still stable.
pub const WISUN_MIN_RSSI_DBM: f64 = -95.0;

pub fn wisun_reachable(rssi_dbm: f64) -> bool {
    rssi_dbm >= WISUN_MIN_RSSI_DBM
}

/// Idealized time on air: payload bits over the raw bit rate, no preamble or
/// coding overhead.
pub fn airtime_s(payload_bytes: usize, data_rate_kbps: f64) -> Result<f64, RadioError> {
    if data_rate_kbps.is_nan() || data_rate_kbps <= 0.0 {
        return Err(RadioError::NonPositiveRate(data_rate_kbps));
    }
    Ok(payload_bytes as f64 * 8.0 / (data_rate_kbps * 1000.0))
}

pub const DUTY_CYCLE_WINDOW_S: i64 = 3600;

pub fn duty_cycle_allowance(band: &BandPlan, window_s: f64) -> f64 {
    window_s * band.duty_cycle
}

/// Nominal EU868 LoRaWAN bit rates for DR0..DR6, kbit/s.
pub const LORAWAN_DR_KBPS: [f64; 7] = [0.25, 0.44, 0.98, 1.76, 3.125, 5.47, 11.0];

/// Highest LoRaWAN data rate whose nominal bit rate does not exceed `kbps`.
pub fn lorawan_dr_for_rate(kbps: f64) -> Option<u8> {
    LORAWAN_DR_KBPS
        .iter()
        .rposition(|&nominal| nominal <= kbps + 1e-9)
        .map(|dr| dr as u8)
}

/// Maximum application payload. `class` is a LoRaWAN data-rate label
/// (`DR0`..`DR6`); other technologies take `-` or an empty label.
pub fn payload_cap(
    limits: &TechnologyLimits,
    class: &str,
    direction: Direction,
) -> Result<usize, RadioError> {
    let unknown = || RadioError::UnknownClass {
        technology: limits.technology,
        class: class.to_string(),
    };
    match limits.technology {
        TechnologyKind::Lorawan => {
            let dr: u8 = class
                .strip_prefix("DR")
                .and_then(|n| n.parse().ok())
                .ok_or_else(unknown)?;
            match dr {
                0..=2 => Ok(51),
                3 => Ok(115),
                4..=6 => Ok(222),
                _ => Err(unknown()),
            }
        }
        _ if !(class.is_empty() || class == "-") => Err(unknown()),
        TechnologyKind::Sigfox => Ok(match direction {
            Direction::Uplink => limits.configured_payload_cap_bytes,
            Direction::Downlink => limits.max_payload_dl_bytes,
        }),
        TechnologyKind::Nbiot | TechnologyKind::Wisun => Ok(match direction {
            Direction::Uplink => limits.configured_payload_cap_bytes,
            Direction::Downlink => limits.max_payload_dl_bytes,
        }),
    }
}

/// Payload cap for a transmission at a concrete bit rate.
pub fn payload_cap_at_rate(
    limits: &TechnologyLimits,
    data_rate_kbps: f64,
    direction: Direction,
) -> Result<usize, RadioError> {
    if limits.technology == TechnologyKind::Lorawan {
        let dr = lorawan_dr_for_rate(data_rate_kbps).ok_or(RadioError::UnknownClass {
            technology: limits.technology,
            class: format!("{data_rate_kbps} kbit/s"),
        })?;
        payload_cap(limits, &format!("DR{dr}"), direction)
    } else {
        payload_cap(limits, "-", direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum TxRejection {
    PayloadTooLarge { bytes: usize, cap: usize },
    DailyUlCap,
    DailyDlCap,
    FairUseAirtime,
    DutyCycle,
    InvalidRate,
    BeforeWindow,
}

impl TxRejection {
    /// Stable short label, used as a report key.
    pub fn reason(&self) -> &'static str {
        match self {
            TxRejection::PayloadTooLarge { .. } => "payload too large",
            TxRejection::DailyUlCap => "daily UL cap",
            TxRejection::DailyDlCap => "daily DL cap",
            TxRejection::FairUseAirtime => "fair-use airtime",
            TxRejection::DutyCycle => "duty cycle",
            TxRejection::InvalidRate => "invalid data rate",
            TxRejection::BeforeWindow => "timestamp before ledger window",
        }
    }
}

impl fmt::Display for TxRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TxRejection::PayloadTooLarge { bytes, cap } => {
                write!(f, "payload too large ({bytes} B > {cap} B)")
            }
            other => f.write_str(other.reason()),
        }
    }
}

/// Per-device transmit accounting. Message counts and fair-use airtime reset
/// at the UTC day boundary; the duty cycle is checked over a rolling hour.
#[derive(Debug, Clone, PartialEq)]
pub struct TxBudgetLedger {
    pub device_id: String,
    pub technology: TechnologyKind,
    pub window_start: DateTime<Utc>,
    pub airtime_used_s: f64,
    pub ul_count: u32,
    pub dl_count: u32,
    recent: VecDeque<(DateTime<Utc>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxRequest {
    pub direction: Direction,
    pub payload_bytes: usize,
    pub data_rate_kbps: f64,
    pub at: DateTime<Utc>,
}

fn day_start(at: DateTime<Utc>) -> DateTime<Utc> {
    at.date_naive()
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
}

const EPS: f64 = 1e-9;

impl TxBudgetLedger {
    pub fn new(device_id: &str, technology: TechnologyKind, at: DateTime<Utc>) -> TxBudgetLedger {
        TxBudgetLedger {
            device_id: device_id.to_string(),
            technology,
            window_start: day_start(at),
            airtime_used_s: 0.0,
            ul_count: 0,
            dl_count: 0,
            recent: VecDeque::new(),
        }
    }

    /// Airtime spent in the rolling duty-cycle hour ending at `at`.
    pub fn airtime_last_hour(&self, at: DateTime<Utc>) -> f64 {
        let cutoff = at - Duration::seconds(DUTY_CYCLE_WINDOW_S);
        self.recent
            .iter()
            .filter(|(t, _)| *t > cutoff)
            .map(|(_, a)| a)
            .sum()
    }

    fn roll(&mut self, at: DateTime<Utc>) {
        let today = day_start(at);
        if today > self.window_start {
            self.window_start = today;
            self.airtime_used_s = 0.0;
            self.ul_count = 0;
            self.dl_count = 0;
        }
        let cutoff = at - Duration::seconds(DUTY_CYCLE_WINDOW_S);
        while self.recent.front().is_some_and(|(t, _)| *t <= cutoff) {
            self.recent.pop_front();
        }
    }
}

/// Account for one transmission, or explain why it may not go out.
/// Returns the frame's airtime in seconds on success.
pub fn record_tx(
    ledger: &mut TxBudgetLedger,
    limits: &TechnologyLimits,
    band: Option<&BandPlan>,
    tx: &TxRequest,
) -> Result<f64, TxRejection> {
    if tx.at < ledger.window_start {
        return Err(TxRejection::BeforeWindow);
    }
    ledger.roll(tx.at);

    let cap = payload_cap_at_rate(limits, tx.data_rate_kbps, tx.direction)
        .map_err(|_| TxRejection::InvalidRate)?;
    if tx.payload_bytes > cap {
        return Err(TxRejection::PayloadTooLarge {
            bytes: tx.payload_bytes,
            cap,
        });
    }
    let airtime = airtime_s(tx.payload_bytes, tx.data_rate_kbps).map_err(|_| TxRejection::InvalidRate)?;

    match tx.direction {
        Direction::Uplink => {
            if limits.max_ul_msgs_per_day.is_some_and(|cap| ledger.ul_count >= cap) {
                return Err(TxRejection::DailyUlCap);
            }
        }
        Direction::Downlink => {
            if limits.max_dl_msgs_per_day.is_some_and(|cap| ledger.dl_count >= cap) {
                return Err(TxRejection::DailyDlCap);
            }
        }
    }
    if let Some(max) = limits.max_airtime_s_per_day {
        if ledger.airtime_used_s + airtime > max + EPS {
            return Err(TxRejection::FairUseAirtime);
        }
    }
    if let Some(band) = band {
        let allowance = duty_cycle_allowance(band, DUTY_CYCLE_WINDOW_S as f64);
        if ledger.airtime_last_hour(tx.at) + airtime > allowance + EPS {
            return Err(TxRejection::DutyCycle);
        }
    }

    match tx.direction {
        Direction::Uplink => ledger.ul_count += 1,
        Direction::Downlink => ledger.dl_count += 1,
    }
    ledger.airtime_used_s += airtime;
    ledger.recent.push_back((tx.at, airtime));
    Ok(airtime)
}

/// Module price plus connectivity over `years` for a fleet.
pub fn fleet_cost_eur(
    fleet: &[(TechnologyKind, u32)],
    years: u32,
) -> Result<f64, RadioError> {
    if years == 0 {
        return Err(RadioError::ZeroYears);
    }
    let total = fleet
        .iter()
        .map(|&(tech, count)| {
            let limits = TechnologyLimits::builtin(tech);
            let subscription = match limits.subscription {
                Subscription::None => 0.0,
                Subscription::PerYear { eur } => eur * f64::from(years),
                Subscription::PerBlock { eur, years: block } => {
                    eur * f64::from(years.div_ceil(block))
                }
            };
            f64::from(count) * (limits.module_cost_eur + subscription)
        })
        .sum();
    Ok(total)
}
