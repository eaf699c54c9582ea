//! File formats: market.json, bidders.csv, traces.csv and the CSV outputs of
//! every pipeline stage. All numeric output goes through a fixed 12
//! significant-digit formatter so artifacts diff cleanly, and files are
//! written atomically (temp + rename).

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cluster::FrequencyClusters;
use crate::error::{invalid, Result};
use crate::market::{BidTrace, PositionWeights, TraceDay};
use crate::regret::RegretReport;
use crate::sim::{AgentSpec, AllowanceMode, DayResult, RegionConfig};

/// market.json: auction parameters plus optional simulator fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketFile {
    pub reserve: f64,
    pub gamma: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_views_thousands: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub days_in_month: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weekday_multipliers: Option<[f64; 7]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_daily_volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowance_mode: Option<AllowanceMode>,
}

impl MarketFile {
    pub fn weights(&self) -> Result<PositionWeights> {
        PositionWeights::new(self.gamma)
    }

    pub fn region_config(&self) -> Result<RegionConfig> {
        let config = RegionConfig {
            reserve: self.reserve,
            weights: self.weights()?,
            days_in_month: self.days_in_month.unwrap_or(30),
            weekday_multipliers: self.weekday_multipliers.unwrap_or([1.0; 7]),
            base_daily_volume: self.base_daily_volume.unwrap_or(5290.0),
            allowance_mode: self.allowance_mode.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_region_config(config: &RegionConfig, page_views_thousands: Option<f64>) -> Self {
        Self {
            reserve: config.reserve,
            gamma: *config.weights.gamma(),
            page_views_thousands,
            days_in_month: Some(config.days_in_month),
            weekday_multipliers: Some(config.weekday_multipliers),
            base_daily_volume: Some(config.base_daily_volume),
            allowance_mode: Some(config.allowance_mode),
        }
    }
}

pub fn read_market(path: &Path) -> Result<MarketFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let market: MarketFile =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(market)
}

pub fn write_market(path: &Path, market: &MarketFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(market)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Format with 12 significant digits, plain decimal for ordinary magnitudes
/// and scientific notation at the extremes. Deterministic for equal inputs.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-12..=14).contains(&exp) {
        return format!("{x:.11e}");
    }
    let decimals = (11 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| invalid(format!("line {line}: bad {what} {field:?}")))
}

fn parse_date(field: &str, line: usize) -> Result<NaiveDate> {
    field
        .trim()
        .parse()
        .map_err(|_| invalid(format!("line {line}: bad date {field:?} (want ISO-8601)")))
}

/// bidders.csv: agent_id, bid, monthly_budget, start_date, end_date, priority.
pub fn read_bidders(path: &Path) -> Result<Vec<AgentSpec>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let expected = [
        "agent_id",
        "bid",
        "monthly_budget",
        "start_date",
        "end_date",
        "priority",
    ];
    if headers.iter().ne(expected) {
        return Err(invalid(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != 6 {
            return Err(invalid(format!("line {line}: expected 6 fields")));
        }
        out.push(AgentSpec {
            agent_id: record[0].to_string(),
            bid: parse_f64(&record[1], "bid", line)?,
            monthly_budget: parse_f64(&record[2], "monthly_budget", line)?,
            start_date: parse_date(&record[3], line)?,
            end_date: parse_date(&record[4], line)?,
            priority: record[5]
                .trim()
                .parse()
                .map_err(|_| invalid(format!("line {line}: bad priority {:?}", &record[5])))?,
        });
    }
    Ok(out)
}

pub fn write_bidders(path: &Path, agents: &[AgentSpec]) -> Result<()> {
    let mut buf = String::from("agent_id,bid,monthly_budget,start_date,end_date,priority\n");
    for a in agents {
        buf.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_escape(&a.agent_id),
            fmt_sig(a.bid),
            fmt_sig(a.monthly_budget),
            a.start_date,
            a.end_date,
            a.priority
        ));
    }
    atomic_write(path, buf.as_bytes())
}

/// traces.csv: agent_id, date, bid, recommended_bid (blank when none).
/// A row's presence marks the agent active that day.
pub fn read_traces(path: &Path) -> Result<Vec<BidTrace>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let expected = ["agent_id", "date", "bid", "recommended_bid"];
    if headers.iter().ne(expected) {
        return Err(invalid(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    let mut by_agent: std::collections::BTreeMap<String, Vec<TraceDay>> = Default::default();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != 4 {
            return Err(invalid(format!("line {line}: expected 4 fields")));
        }
        let reco = if record[3].trim().is_empty() {
            None
        } else {
            Some(parse_f64(&record[3], "recommended_bid", line)?)
        };
        by_agent
            .entry(record[0].to_string())
            .or_default()
            .push(TraceDay {
                date: parse_date(&record[1], line)?,
                bid: parse_f64(&record[2], "bid", line)?,
                available_daily_budget: None,
                recommended_bid: reco,
                active: true,
            });
    }
    by_agent
        .into_iter()
        .map(|(id, mut days)| {
            days.sort_by_key(|d| d.date);
            BidTrace::new(id, days)
        })
        .collect()
}

pub fn write_traces(path: &Path, traces: &[BidTrace]) -> Result<()> {
    let mut buf = String::from("agent_id,date,bid,recommended_bid\n");
    for t in traces {
        for d in t.days.iter().filter(|d| d.active) {
            buf.push_str(&format!(
                "{},{},{},{}\n",
                csv_escape(&t.agent_id),
                d.date,
                fmt_sig(d.bid),
                d.recommended_bid.map(fmt_sig).unwrap_or_default()
            ));
        }
    }
    atomic_write(path, buf.as_bytes())
}

/// pacing.csv: one solved market.
pub fn write_pacing(
    path: &Path,
    market: &crate::market::ActiveMarket,
    solution: &crate::pacing::PacingSolution,
) -> Result<()> {
    let mut buf = String::from("agent_id,pi,ecpm,eq,unconditional_spend\n");
    for (i, b) in market.bidders().iter().enumerate() {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_escape(&b.id),
            fmt_sig(solution.pi.as_slice()[i]),
            fmt_sig(solution.outcomes.ecpm[i]),
            fmt_sig(solution.outcomes.eq[i]),
            fmt_sig(solution.outcomes.unconditional_spend(i)),
        ));
    }
    atomic_write(path, buf.as_bytes())
}

/// outcomes.csv: date, agent_id, pi, eq, ecpm, spend, volume over a replay.
pub fn write_outcomes(path: &Path, days: &[DayResult]) -> Result<()> {
    let mut buf = String::from("date,agent_id,pi,eq,ecpm,spend,volume\n");
    for day in days {
        if let Some(sol) = &day.solution {
            for (i, b) in day.market.bidders().iter().enumerate() {
                buf.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    day.date,
                    csv_escape(&b.id),
                    fmt_sig(sol.pi.as_slice()[i]),
                    fmt_sig(sol.outcomes.eq[i]),
                    fmt_sig(sol.outcomes.ecpm[i]),
                    fmt_sig(day.spend_of(&b.id)),
                    fmt_sig(day.volume),
                ));
            }
        }
    }
    atomic_write(path, buf.as_bytes())
}

/// ledgers.csv: date, agent_id, allowance, carryover, available, spend.
pub fn write_ledgers(path: &Path, days: &[DayResult]) -> Result<()> {
    let mut buf = String::from("date,agent_id,allowance,carryover,available,spend\n");
    for day in days {
        for (id, row) in &day.ledgers {
            buf.push_str(&format!(
                "{},{},{},{},{},{}\n",
                day.date,
                csv_escape(id),
                fmt_sig(row.allowance),
                fmt_sig(row.carryover),
                fmt_sig(row.available),
                fmt_sig(row.spend),
            ));
        }
    }
    atomic_write(path, buf.as_bytes())
}

/// clusters.csv: agent_id, frequency, cluster (1 = fewest bid changes).
pub fn write_clusters(path: &Path, clusters: &FrequencyClusters) -> Result<()> {
    let mut buf = String::from("agent_id,frequency,cluster\n");
    for (id, (freq, cluster)) in &clusters.agents {
        buf.push_str(&format!(
            "{},{},{cluster}\n",
            csv_escape(id),
            fmt_sig(*freq)
        ));
    }
    atomic_write(path, buf.as_bytes())
}

/// report.csv: per-agent inference results.
pub fn write_reports(path: &Path, reports: &[RegretReport]) -> Result<()> {
    let mut buf = String::from(
        "agent_id,v_star,eps_star,per_impression_regret,eps_reco,classification,budget_constrained_flag\n",
    );
    for r in reports {
        buf.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_escape(&r.agent_id),
            fmt_sig(r.v_star),
            fmt_sig(r.eps_star),
            if r.per_impression_regret.is_finite() {
                fmt_sig(r.per_impression_regret)
            } else {
                String::new()
            },
            r.eps_reco.map(fmt_sig).unwrap_or_default(),
            r.classification.map(|c| c.to_string()).unwrap_or_default(),
            r.budget_constrained,
        ));
    }
    atomic_write(path, buf.as_bytes())
}

/// Adherence curve rows, plot-ready.
pub fn write_adherence(path: &Path, curve: &crate::regret::AdherenceCurve) -> Result<()> {
    let mut buf = String::from("cluster,month,fraction,agents\n");
    for p in &curve.overall {
        buf.push_str(&format!(
            "all,{},{},{}\n",
            p.month,
            fmt_sig(p.fraction),
            p.agents
        ));
    }
    for (c, points) in &curve.per_cluster {
        for p in points {
            buf.push_str(&format!(
                "{c},{},{},{}\n",
                p.month,
                fmt_sig(p.fraction),
                p.agents
            ));
        }
    }
    atomic_write(path, buf.as_bytes())
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Write via a sibling temp file and rename, so readers never observe a
/// half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(path);
    let mut name = tmp
        .file_name()
        .ok_or_else(|| invalid("output path has no file name"))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
