//! Table output for `meterhub analyze`.

use std::collections::BTreeMap;

use meterhub::model::{BandPlan, Direction, RadioProfile, RssiCampaign, TechnologyKind, TechnologyLimits};
use meterhub::radio::{bpl_table, duty_cycle_allowance, fleet_cost_eur, link_budget, payload_cap_at_rate, RadioError, DUTY_CYCLE_WINDOW_S};

/// A header plus rows, printable as CSV or as aligned text.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Table {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "unlimited".to_string(), |v| v.to_string())
}

pub fn linkbudget() -> Result<Table, RadioError> {
    let mut t = Table::new(&["technology", "direction", "budget_db"]);
    for tech in TechnologyKind::ALL {
        let profile = RadioProfile::builtin(tech);
        let up = link_budget(&profile, Direction::Uplink, false)?;
        t.push(vec![tech.to_string(), "UL".into(), num(up.budget_db)]);
        let down = link_budget(&profile, Direction::Downlink, false)?;
        t.push(vec![tech.to_string(), "DL".into(), num(down.budget_db)]);
        if let Some(b) = down.boosted_budget_db {
            t.push(vec![tech.to_string(), "DL-boosted".into(), num(b)]);
        }
    }
    Ok(t)
}

pub fn bpl(campaign: &RssiCampaign) -> Result<Table, RadioError> {
    let table = bpl_table(campaign)?;
    let mut t = Table::new(&["mp", "technology", "variant", "bpl_db", "direction", "outdoor"]);
    for r in table.rows {
        t.push(vec![
            r.mp.to_string(),
            r.link.technology.to_string(),
            r.link.variant,
            r.cell.to_string(),
            r.link.direction.to_string(),
            r.outdoor.to_string(),
        ]);
    }
    Ok(t)
}

pub fn budgets() -> Result<Table, RadioError> {
    let mut t = Table::new(&[
        "technology",
        "direction",
        "payload_bytes",
        "msgs_per_day",
        "airtime_s_per_day",
        "band",
        "duty_cycle_s_per_hour",
    ]);
    for tech in TechnologyKind::ALL {
        let limits = TechnologyLimits::builtin(tech);
        for direction in [Direction::Uplink, Direction::Downlink] {
            let (rates, msgs, band) = match direction {
                Direction::Uplink => (limits.data_rate_ul_kbps, limits.max_ul_msgs_per_day, BandPlan::uplink_band(tech)),
                Direction::Downlink => (limits.data_rate_dl_kbps, limits.max_dl_msgs_per_day, BandPlan::downlink_band(tech)),
            };
            let lo = payload_cap_at_rate(&limits, rates.min_kbps, direction)?;
            let hi = payload_cap_at_rate(&limits, rates.max_kbps, direction)?;
            let payload = if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") };
            // fair use counts uplink airtime only
            let airtime = match direction {
                Direction::Uplink => opt(limits.max_airtime_s_per_day),
                Direction::Downlink => opt(None::<f64>),
            };
            t.push(vec![
                tech.to_string(),
                direction.to_string(),
                payload,
                opt(msgs),
                airtime,
                band.map_or_else(|| "licensed".to_string(), |b| b.name.to_string()),
                band.map_or_else(
                    || "unlimited".to_string(),
                    |b| num(duty_cycle_allowance(&b, DUTY_CYCLE_WINDOW_S as f64)),
                ),
            ]);
        }
    }
    Ok(t)
}

/// Parse `lorawan=10,sigfox=5`.
pub fn parse_fleet(text: &str) -> Result<BTreeMap<TechnologyKind, u32>, String> {
    let mut fleet = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (tech, count) = part
            .split_once('=')
            .ok_or_else(|| format!("fleet entry {part:?} is not technology=count"))?;
        let tech: TechnologyKind = tech.trim().parse().map_err(|e| format!("{e}"))?;
        let count: u32 = count
            .trim()
            .parse()
            .map_err(|_| format!("bad device count in {part:?}"))?;
        *fleet.entry(tech).or_default() += count;
    }
    Ok(fleet)
}

pub fn cost(fleet: &BTreeMap<TechnologyKind, u32>, years: u32) -> Result<Table, RadioError> {
    let mut t = Table::new(&["technology", "devices", "years", "cost_eur"]);
    let mut total = 0.0;
    for (&tech, &count) in fleet {
        let eur = fleet_cost_eur(&[(tech, count)], years)?;
        total += eur;
        t.push(vec![tech.to_string(), count.to_string(), years.to_string(), num(eur)]);
    }
    let devices: u32 = fleet.values().sum();
    t.push(vec!["total".into(), devices.to_string(), years.to_string(), num(total)]);
    Ok(t)
}
