//! Daily replay of a region: budgets with carryover, pacing, outcomes and
//! impression-volume modulation.
//!
//! Budget months are per-agent blocks of `days_in_month` days starting at the
//! agent's start date; carryover resets at month boundaries. The default
//! daily allowance spreads the not-yet-granted budget over the remaining
//! days of the month, so it self-corrects after under-spend; a fixed
//! monthly/days allowance is available behind the config switch.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::engine::FilterVector;
use crate::error::{invalid, Error, Result};
use crate::market::{ActiveMarket, BidTrace, Bidder, MarketSnapshot, PositionWeights};
use crate::pacing::{solve_pacing, PacingSolution, SolveOptions};
use crate::regret::{AgentDay, AgentHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllowanceMode {
    /// allowance = (budget not yet granted this month) / (days left in month)
    #[default]
    RemainingOverRemainingDays,
    /// allowance = monthly budget / days_in_month
    FixedDaily,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfig {
    pub reserve: f64,
    pub weights: PositionWeights,
    #[serde(default = "default_days_in_month")]
    pub days_in_month: u32,
    /// Monday..Sunday factors, positive, mean 1 within 1e-9.
    #[serde(default = "default_multipliers")]
    pub weekday_multipliers: [f64; 7],
    /// Impression opportunities per day before modulation.
    #[serde(default = "default_volume")]
    pub base_daily_volume: f64,
    #[serde(default)]
    pub allowance_mode: AllowanceMode,
}

fn default_days_in_month() -> u32 {
    30
}

fn default_multipliers() -> [f64; 7] {
    [1.0; 7]
}

fn default_volume() -> f64 {
    5290.0
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days_in_month == 0 {
            return Err(invalid("days_in_month must be positive"));
        }
        if self.base_daily_volume < 0.0 || !self.base_daily_volume.is_finite() {
            return Err(invalid("base_daily_volume must be nonnegative"));
        }
        if self.weekday_multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(invalid("weekday multipliers must be positive"));
        }
        let mean: f64 = self.weekday_multipliers.iter().sum::<f64>() / 7.0;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(invalid(format!(
                "weekday multipliers must average 1, got {mean}"
            )));
        }
        Ok(())
    }
}

/// base volume x the weekday's multiplier.
pub fn modulate_volume(config: &RegionConfig, date: NaiveDate) -> f64 {
    config.base_daily_volume
        * config.weekday_multipliers[date.weekday().num_days_from_monday() as usize]
}

/// Static description of one agent, as read from bidders.csv.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub bid: f64,
    pub monthly_budget: f64,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub priority: u32,
}

/// Per-agent running ledger state.
#[derive(Debug, Clone, Default)]
struct LedgerState {
    month_index: i64,
    spent_this_month: f64,
    carryover: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LedgerRow {
    pub allowance: f64,
    pub carryover: f64,
    pub available: f64,
    pub spend: f64,
}

/// The running ledgers of every agent.
#[derive(Debug, Clone, Default)]
pub struct LedgerBook {
    states: BTreeMap<String, LedgerState>,
}

impl LedgerBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allowance + carryover available to `agent` on `date`, rolling the
    /// agent's month if the date crossed a boundary.
    fn open_day(
        &mut self,
        config: &RegionConfig,
        agent: &AgentSpec,
        date: NaiveDate,
    ) -> (f64, f64, f64) {
        let state = self.states.entry(agent.agent_id.clone()).or_default();
        let day_offset = (date - agent.start_date).num_days();
        let month_index = day_offset.div_euclid(config.days_in_month as i64);
        if month_index != state.month_index {
            // unspent budget does not roll across months
            state.month_index = month_index;
            state.spent_this_month = 0.0;
            state.carryover = 0.0;
        }
        let day_in_month = day_offset.rem_euclid(config.days_in_month as i64) as u32;
        let allowance = match config.allowance_mode {
            AllowanceMode::FixedDaily => agent.monthly_budget / config.days_in_month as f64,
            AllowanceMode::RemainingOverRemainingDays => {
                let ungranted =
                    (agent.monthly_budget - state.spent_this_month - state.carryover).max(0.0);
                ungranted / (config.days_in_month - day_in_month) as f64
            }
        };
        (allowance, state.carryover, allowance + state.carryover)
    }

    fn charge(&mut self, agent_id: &str, available: f64, spend: f64) {
        let state = self.states.get_mut(agent_id).expect("opened");
        state.spent_this_month += spend;
        state.carryover = (available - spend).max(0.0);
    }
}

/// Everything that happened in one simulated day.
#[derive(Debug, Clone)]
pub struct DayResult {
    pub date: NaiveDate,
    pub volume: f64,
    /// Canonically sorted active market (bids at or above the reserve).
    pub market: ActiveMarket,
    /// Pacing at the day's per-mille budgets; None when there was no
    /// auction (no active bidders or zero volume).
    pub solution: Option<PacingSolution>,
    /// False when pacing ran out of iterations; the day still counts with
    /// the best probabilities found.
    pub pacing_converged: bool,
    /// Ledger rows for every agent active that day (also the ones below the
    /// reserve, who spend nothing).
    pub ledgers: BTreeMap<String, LedgerRow>,
    /// Per-mille budgets handed to the market, by agent.
    pub budgets_per_mille: BTreeMap<String, f64>,
}

impl DayResult {
    /// Money charged to `agent_id` on this day.
    pub fn spend_of(&self, agent_id: &str) -> f64 {
        self.ledgers.get(agent_id).map_or(0.0, |l| l.spend)
    }
}

/// One day's auction: convert available budgets to per-mille, pace, compute
/// outcomes, charge the ledgers.
pub fn run_day(
    config: &RegionConfig,
    date: NaiveDate,
    book: &mut LedgerBook,
    agents: &[(AgentSpec, f64)],
    pacing: &SolveOptions,
) -> Result<DayResult> {
    let volume = modulate_volume(config, date);
    let mut ledgers = BTreeMap::new();
    let mut budgets = BTreeMap::new();
    let mut bidders = Vec::new();

    for (agent, bid) in agents {
        let (allowance, carryover, available) = book.open_day(config, agent, date);
        ledgers.insert(
            agent.agent_id.clone(),
            LedgerRow {
                allowance,
                carryover,
                available,
                spend: 0.0,
            },
        );
        let per_mille = if volume > 0.0 {
            available * 1000.0 / volume
        } else {
            0.0
        };
        budgets.insert(agent.agent_id.clone(), per_mille);
        bidders.push(Bidder::new(
            agent.agent_id.clone(),
            *bid,
            per_mille,
            agent.priority,
        ));
    }

    let market = MarketSnapshot::new(bidders, config.reserve, config.weights).canonicalize()?;
    let (solution, converged) = if market.is_empty() || volume <= 0.0 {
        (None, true)
    } else {
        let sol = solve_pacing(&market, pacing)?;
        let ok = sol.converged;
        (Some(sol), ok)
    };

    if let Some(sol) = &solution {
        for (i, b) in market.bidders().iter().enumerate() {
            let row = ledgers.get_mut(&b.id).expect("ledger opened");
            let spend = (sol.outcomes.unconditional_spend(i) * volume / 1000.0).min(row.available);
            row.spend = spend;
        }
    }
    for (id, row) in &ledgers {
        book.charge(id, row.available, row.spend);
    }

    Ok(DayResult {
        date,
        volume,
        market,
        solution,
        pacing_converged: converged,
        ledgers,
        budgets_per_mille: budgets,
    })
}

/// Bid source for a replay: the static bid from bidders.csv over the agent's
/// active window, or the day-by-day bids of a trace when one exists.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    traces: BTreeMap<String, BidTrace>,
}

impl TraceSet {
    pub fn new(traces: Vec<BidTrace>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in traces {
            if map.insert(t.agent_id.clone(), t).is_some() {
                return Err(invalid("duplicate agent in traces"));
            }
        }
        Ok(Self { traces: map })
    }

    pub fn get(&self, agent_id: &str) -> Option<&BidTrace> {
        self.traces.get(agent_id)
    }

    pub fn traces(&self) -> impl Iterator<Item = &BidTrace> {
        self.traces.values()
    }
}

/// Replay a region day by day. With traces, an agent is active exactly on
/// her trace dates at the traced bid; without, she is active on
/// [start_date, end_date] at the static bid.
pub fn replay(
    config: &RegionConfig,
    agents: &[AgentSpec],
    traces: Option<&TraceSet>,
    pacing: &SolveOptions,
) -> Result<Vec<DayResult>> {
    config.validate()?;
    let mut ids = std::collections::BTreeSet::new();
    for a in agents {
        if !ids.insert(&a.agent_id) {
            return Err(invalid(format!("duplicate agent id {}", a.agent_id)));
        }
        if a.end_date < a.start_date {
            return Err(invalid(format!(
                "agent {} ends before it starts",
                a.agent_id
            )));
        }
    }

    let (first, last) = match (
        agents.iter().map(|a| a.start_date).min(),
        agents.iter().map(|a| a.end_date).max(),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(Vec::new()),
    };

    let mut book = LedgerBook::new();
    let mut days = Vec::new();
    let mut date = first;
    while date <= last {
        let mut roster: Vec<(AgentSpec, f64)> = Vec::new();
        for agent in agents {
            let bid = match traces.and_then(|t| t.get(&agent.agent_id)) {
                Some(trace) => trace
                    .days
                    .iter()
                    .find(|d| d.date == date && d.active)
                    .map(|d| d.bid),
                None => (agent.start_date <= date && date <= agent.end_date).then_some(agent.bid),
            };
            if let Some(bid) = bid {
                roster.push((agent.clone(), bid));
            }
        }
        days.push(run_day(config, date, &mut book, &roster, pacing)?);
        date = date
            .succ_opt()
            .ok_or_else(|| invalid("date range overflow"))?;
    }
    Ok(days)
}

/// Assemble the inference history of one agent from a replay and her trace.
/// Every active trace day must exist in the replay.
pub fn build_agent_history(
    agent: &AgentSpec,
    trace: &BidTrace,
    days: &[DayResult],
) -> Result<AgentHistory> {
    let by_date: BTreeMap<NaiveDate, &DayResult> = days.iter().map(|d| (d.date, d)).collect();
    let mut out = Vec::new();
    for td in trace.days.iter().filter(|d| d.active) {
        let day = by_date.get(&td.date).ok_or_else(|| {
            Error::Misaligned(format!(
                "trace of {} has {} but the replay does not",
                agent.agent_id, td.date
            ))
        })?;
        let (opponents, opponent_pi, own_pi) = split_market(day, &agent.agent_id)?;
        out.push(AgentDay {
            date: td.date,
            opponents,
            opponent_pi,
            own_bid: td.bid,
            own_pi,
            own_budget_per_mille: day
                .budgets_per_mille
                .get(&agent.agent_id)
                .copied()
                .unwrap_or(0.0),
            own_priority: agent.priority,
            recommended_bid: td.recommended_bid,
            volume: day.volume,
        });
    }
    if out.is_empty() {
        return Err(invalid(format!(
            "agent {} has no active days",
            agent.agent_id
        )));
    }
    Ok(AgentHistory {
        agent_id: agent.agent_id.clone(),
        days: out,
    })
}

fn split_market(day: &DayResult, agent_id: &str) -> Result<(ActiveMarket, FilterVector, f64)> {
    let pi: Vec<f64> = match &day.solution {
        Some(sol) => sol.pi.as_slice().to_vec(),
        None => vec![1.0; day.market.len()],
    };
    match day.market.index_of(agent_id) {
        Some(idx) => {
            let opponents = day.market.without(idx);
            let mut pis = pi;
            let own = pis.remove(idx);
            let fv = FilterVector::new(pis, &opponents)?;
            Ok((opponents, fv, own))
        }
        None => {
            let fv = FilterVector::new(pi, &day.market)?;
            Ok((day.market.clone(), fv, 1.0))
        }
    }
}
