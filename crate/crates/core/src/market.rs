//! Domain types shared by every other module: position weights, bidders,
//! market snapshots, budget conversion and per-agent bid traces.
//!
//! All monetary quantities are `f64` in per-mille units (money per 1000
//! impression opportunities) unless a field name says otherwise.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Slots shown per page; rank `j` is displayed with probability `3 * gamma[j]`.
pub const SLOTS_PER_PAGE: f64 = 3.0;

/// Number of ranks that can win impressions.
pub const MAX_RANKS: usize = 4;

/// The per-rank impression shares. Exactly four entries, nonincreasing,
/// each in `[0, 1/3]`, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PositionWeights {
    gamma: [f64; MAX_RANKS],
}

impl PositionWeights {
    pub fn new(gamma: [f64; MAX_RANKS]) -> Result<Self> {
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("gamma must sum to 1, got {sum}")));
        }
        for w in gamma.windows(2) {
            if w[1] > w[0] {
                return Err(invalid("gamma must be nonincreasing"));
            }
        }
        if gamma
            .iter()
            .any(|&g| !(0.0..=1.0).contains(&g) || !g.is_finite())
        {
            return Err(invalid("gamma entries must lie in [0, 1]"));
        }
        // 3*gamma[0] is a display probability, so the top weight is capped at 1/3.
        if SLOTS_PER_PAGE * gamma[0] > 1.0 + 1e-12 {
            return Err(invalid(format!(
                "top weight {} makes the rank-1 display probability exceed 1",
                gamma[0]
            )));
        }
        Ok(Self { gamma })
    }

    /// The production weights: 0.33, 0.28, 0.22, 0.17.
    pub fn standard() -> Self {
        Self {
            gamma: [0.33, 0.28, 0.22, 0.17],
        }
    }

    pub fn gamma(&self) -> &[f64; MAX_RANKS] {
        &self.gamma
    }

    /// Probability that the bidder ranked `rank` (0-based) appears on a page.
    pub fn shown_probability(&self, rank: usize) -> f64 {
        if rank < MAX_RANKS {
            SLOTS_PER_PAGE * self.gamma[rank]
        } else {
            0.0
        }
    }
}

impl TryFrom<[f64; 4]> for PositionWeights {
    type Error = crate::error::Error;
    fn try_from(gamma: [f64; 4]) -> Result<Self> {
        Self::new(gamma)
    }
}

impl From<PositionWeights> for [f64; 4] {
    fn from(w: PositionWeights) -> [f64; 4] {
        w.gamma
    }
}

/// One participant in a market. `priority` is the explicit tiebreak rank
/// standing in for the near-1 quality score: lower value ranks first among
/// equal bids, and priorities must be unique within a market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bidder {
    pub id: String,
    /// Bid, money per 1000 impression opportunities.
    pub bid: f64,
    /// Per-mille budget B_i.
    pub budget_per_mille: f64,
    pub priority: u32,
}

impl Bidder {
    pub fn new(id: impl Into<String>, bid: f64, budget_per_mille: f64, priority: u32) -> Self {
        Self {
            id: id.into(),
            bid,
            budget_per_mille,
            priority,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.bid.is_finite() || self.bid < 0.0 {
            return Err(invalid(format!("bidder {}: bid must be >= 0", self.id)));
        }
        if !self.budget_per_mille.is_finite() || self.budget_per_mille < 0.0 {
            return Err(invalid(format!("bidder {}: budget must be >= 0", self.id)));
        }
        Ok(())
    }
}

/// One day's eligible bidders plus the auction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketSnapshot {
    pub bidders: Vec<Bidder>,
    pub reserve: f64,
    pub weights: PositionWeights,
}

impl MarketSnapshot {
    pub fn new(bidders: Vec<Bidder>, reserve: f64, weights: PositionWeights) -> Self {
        Self {
            bidders,
            reserve,
            weights,
        }
    }

    /// Canonically sort the active set (bid >= reserve): bid descending, then
    /// priority, then id. A bid exactly at the reserve stays active.
    ///
    /// Duplicate priorities among active bidders are rejected so the order is
    /// total and deterministic.
    pub fn canonicalize(&self) -> Result<ActiveMarket> {
        if !self.reserve.is_finite() || self.reserve < 0.0 {
            return Err(invalid("reserve must be a nonnegative finite number"));
        }
        let mut active: Vec<Bidder> = Vec::new();
        for b in &self.bidders {
            b.validate()?;
            if b.bid >= self.reserve {
                active.push(b.clone());
            }
        }
        let mut priorities: Vec<u32> = active.iter().map(|b| b.priority).collect();
        priorities.sort_unstable();
        if priorities.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate priorities in market"));
        }
        active.sort_by(|a, b| {
            b.bid
                .partial_cmp(&a.bid)
                .expect("bids are finite")
                .then_with(|| a.priority.cmp(&b.priority))
                .then_with(|| a.id.cmp(&b.id))
        });
        Ok(ActiveMarket {
            bidders: active,
            reserve: self.reserve,
            weights: self.weights,
        })
    }
}

/// A canonically sorted active market: what the auction engine consumes.
/// Construction via [`MarketSnapshot::canonicalize`] guarantees the sort
/// order and the reserve filter.
#[derive(Debug, Clone)]
pub struct ActiveMarket {
    bidders: Vec<Bidder>,
    reserve: f64,
    weights: PositionWeights,
}

impl ActiveMarket {
    pub fn bidders(&self) -> &[Bidder] {
        &self.bidders
    }

    pub fn reserve(&self) -> f64 {
        self.reserve
    }

    pub fn weights(&self) -> &PositionWeights {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.bidders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bidders.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.bidders.iter().position(|b| b.id == id)
    }

    /// The same market without bidder `index` (order is preserved).
    pub fn without(&self, index: usize) -> ActiveMarket {
        let mut bidders = self.bidders.clone();
        bidders.remove(index);
        ActiveMarket {
            bidders,
            reserve: self.reserve,
            weights: self.weights,
        }
    }
}

/// Monthly budget plus projected page views, convertible to a per-mille budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetConversion {
    pub monthly_budget: f64,
    /// NP: page views in thousands over the budget period.
    pub page_views_thousands: f64,
}

impl BudgetConversion {
    pub fn per_mille(&self) -> Result<f64> {
        convert_budget(self.monthly_budget, self.page_views_thousands)
    }
}

/// B = 3 * monthly / NP: each page carries three slots, so a bidder competes
/// for one slot per page view.
pub fn convert_budget(monthly_budget: f64, page_views_thousands: f64) -> Result<f64> {
    if !(page_views_thousands > 0.0) {
        return Err(invalid(format!(
            "page views (thousands) must be positive, got {page_views_thousands}"
        )));
    }
    if !monthly_budget.is_finite() || monthly_budget < 0.0 {
        return Err(invalid("monthly budget must be >= 0"));
    }
    Ok(SLOTS_PER_PAGE * monthly_budget / page_views_thousands)
}

/// One day of an agent's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDay {
    pub date: NaiveDate,
    pub bid: f64,
    pub available_daily_budget: Option<f64>,
    pub recommended_bid: Option<f64>,
    pub active: bool,
}

/// Per-day bid/budget/recommendation history of one agent. Dates are strictly
/// increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BidTrace {
    pub agent_id: String,
    pub days: Vec<TraceDay>,
}

impl BidTrace {
    pub fn new(agent_id: impl Into<String>, days: Vec<TraceDay>) -> Result<Self> {
        if days.windows(2).any(|w| w[1].date <= w[0].date) {
            return Err(invalid("trace dates must be strictly increasing"));
        }
        Ok(Self {
            agent_id: agent_id.into(),
            days,
        })
    }

    pub fn active_days(&self) -> usize {
        self.days.iter().filter(|d| d.active).count()
    }

    pub fn first_active_date(&self) -> Option<NaiveDate> {
        self.days.iter().find(|d| d.active).map(|d| d.date)
    }

    /// Days on which the bid differs from the previous active day's bid.
    pub fn change_days(&self) -> Vec<NaiveDate> {
        let mut out = Vec::new();
        let mut prev: Option<f64> = None;
        for d in self.days.iter().filter(|d| d.active) {
            if let Some(p) = prev {
                if d.bid != p {
                    out.push(d.date);
                }
            }
            prev = Some(d.bid);
        }
        out
    }

    /// (#days the bid differs from the previous day) / (#active days).
    pub fn change_frequency(&self) -> f64 {
        let active = self.active_days();
        if active == 0 {
            return 0.0;
        }
        self.change_days().len() as f64 / active as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn standard_weights_are_valid() {
        let w = PositionWeights::standard();
        assert_eq!(w.gamma(), &[0.33, 0.28, 0.22, 0.17]);
        assert!((w.shown_probability(0) - 0.99).abs() < 1e-15);
        let total: f64 = (0..4).map(|r| w.shown_probability(r)).sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_reject_bad_vectors() {
        assert!(PositionWeights::new([0.4, 0.3, 0.2, 0.1]).is_err()); // 3*0.4 > 1
        assert!(PositionWeights::new([0.2, 0.3, 0.3, 0.2]).is_err()); // increasing
        assert!(PositionWeights::new([0.3, 0.3, 0.3, 0.2]).is_err()); // sums to 1.1
    }

    #[test]
    fn convert_budget_matches_formula() {
        assert_eq!(convert_budget(300.0, 100.0).unwrap(), 9.0);
        assert_eq!(convert_budget(0.0, 50.0).unwrap(), 0.0);
        assert_eq!(convert_budget(100.0, 3.0).unwrap(), 100.0);
        assert!(convert_budget(10.0, 0.0).is_err());
        assert!(convert_budget(10.0, -1.0).is_err());
        // linear in the budget, inversely proportional to the page views
        let base = convert_budget(120.0, 40.0).unwrap();
        assert_eq!(convert_budget(240.0, 40.0).unwrap(), 2.0 * base);
        assert_eq!(convert_budget(120.0, 80.0).unwrap(), base / 2.0);
        let bc = BudgetConversion {
            monthly_budget: 120.0,
            page_views_thousands: 40.0,
        };
        assert_eq!(bc.per_mille().unwrap(), base);
    }

    #[test]
    fn canonical_sort_filters_and_orders() {
        let m = MarketSnapshot::new(
            vec![
                Bidder::new("a", 20.0, 0.0, 1),
                Bidder::new("b", 30.0, 0.0, 2),
                Bidder::new("c", 10.0, 0.0, 3),
            ],
            15.0,
            PositionWeights::standard(),
        );
        let active = m.canonicalize().unwrap();
        let bids: Vec<f64> = active.bidders().iter().map(|b| b.bid).collect();
        assert_eq!(bids, vec![30.0, 20.0]);
    }

    #[test]
    fn equal_bids_break_on_priority() {
        let m = MarketSnapshot::new(
            vec![
                Bidder::new("x", 20.0, 0.0, 2),
                Bidder::new("y", 20.0, 0.0, 1),
            ],
            5.0,
            PositionWeights::standard(),
        );
        let active = m.canonicalize().unwrap();
        assert_eq!(active.bidders()[0].id, "y");
    }

    #[test]
    fn duplicate_priorities_rejected() {
        let m = MarketSnapshot::new(
            vec![
                Bidder::new("x", 20.0, 0.0, 1),
                Bidder::new("y", 25.0, 0.0, 1),
            ],
            5.0,
            PositionWeights::standard(),
        );
        assert!(m.canonicalize().is_err());
    }

    #[test]
    fn empty_market_is_fine() {
        let m = MarketSnapshot::new(vec![], 5.0, PositionWeights::standard());
        assert!(m.canonicalize().unwrap().is_empty());
    }

    #[test]
    fn bid_at_reserve_stays_active() {
        let m = MarketSnapshot::new(
            vec![Bidder::new("x", 5.0, 0.0, 1)],
            5.0,
            PositionWeights::standard(),
        );
        assert_eq!(m.canonicalize().unwrap().len(), 1);
    }

    #[test]
    fn change_frequency_counts_transitions() {
        let mk = |d: &str, bid: f64| TraceDay {
            date: date(d),
            bid,
            available_daily_budget: None,
            recommended_bid: None,
            active: true,
        };
        let t = BidTrace::new(
            "a",
            vec![
                mk("2023-01-01", 10.0),
                mk("2023-01-02", 10.0),
                mk("2023-01-03", 12.0),
                mk("2023-01-04", 12.0),
            ],
        )
        .unwrap();
        assert_eq!(t.change_days().len(), 1);
        assert!((t.change_frequency() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn trace_rejects_unsorted_dates() {
        let mk = |d: &str| TraceDay {
            date: date(d),
            bid: 1.0,
            available_daily_budget: None,
            recommended_bid: None,
            active: true,
        };
        assert!(BidTrace::new("a", vec![mk("2023-01-02"), mk("2023-01-01")]).is_err());
    }
}
