//! The platform's bid-recommendation tool: maximize expected impressions for
//! a budget, back out budgets and bids from impression goals, optimize
//! several bidders' goals simultaneously, and run the integrity checks that
//! any rank-based recommendation must satisfy.
//!
//! Market arguments hold the querying bidder's *opponents*; the querying
//! bidder is injected as an unfiltered probe at each candidate bid.

use serde::{Deserialize, Serialize};

use crate::engine::{outcomes_dp, FilterVector, ProbeTable};
use crate::error::{invalid, Error, Result};
use crate::market::{ActiveMarket, Bidder, MarketSnapshot};
use crate::pacing::{solve_pacing_with_fixed, SolveOptions};

/// How opponents' filtering reacts while probing candidate bids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    /// Re-solve the opponents' balanced-budget probabilities at every probe
    /// bid, with the querying bidder pinned unfiltered.
    #[default]
    Full,
    /// Solve pacing once without the querying bidder and freeze those
    /// probabilities across the whole grid.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct RecommendOptions {
    pub coupling: Coupling,
    pub pacing: SolveOptions,
    /// Grid offset around opponent bids; `None` picks
    /// max(1e-6, 1e-6 * max bid), clamped below half the minimum gap
    /// between distinct opponent bids.
    pub epsilon: Option<f64>,
    /// Opponents held at pi = 1 in every pacing solve (the other members of
    /// a simultaneous optimization).
    pub pinned_unfiltered: Vec<String>,
}

impl Default for RecommendOptions {
    fn default() -> Self {
        Self {
            coupling: Coupling::Full,
            pacing: SolveOptions::default(),
            epsilon: None,
            pinned_unfiltered: Vec::new(),
        }
    }
}

fn pins_for(market: &ActiveMarket, opts: &RecommendOptions) -> Vec<Option<f64>> {
    market
        .bidders()
        .iter()
        .map(|b| {
            if opts.pinned_unfiltered.contains(&b.id) {
                Some(1.0)
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bid: f64,
    pub eq: f64,
    pub ecpm: f64,
    /// Expected unconditional impression share at this bid for the given
    /// budget: eQ when affordable, Budget * eQ / eCPM once pacing kicks in.
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcpmCurve {
    pub points: Vec<CurvePoint>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CornerCase {
    None,
    TopBidder,
    BottomBidder,
}

impl std::fmt::Display for CornerCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CornerCase::None => write!(f, "none"),
            CornerCase::TopBidder => write!(f, "top-bidder"),
            CornerCase::BottomBidder => write!(f, "bottom-bidder"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recommendation {
    pub bid: f64,
    pub expected_share: f64,
    pub expected_spend: f64,
    pub corner_case: CornerCase,
}

#[derive(Debug, Clone, Copy)]
pub struct GoalRequest {
    pub goal: f64,
    pub inventory: f64,
}

impl GoalRequest {
    pub fn target_share(&self) -> Result<f64> {
        if !(self.inventory > 0.0) {
            return Err(invalid("inventory must be positive"));
        }
        if self.goal < 0.0 {
            return Err(invalid("goal must be nonnegative"));
        }
        if self.goal > self.inventory {
            return Err(invalid(format!(
                "goal {} exceeds inventory {}: a share above 1 is unreachable",
                self.goal, self.inventory
            )));
        }
        Ok(self.goal / self.inventory)
    }
}

#[derive(Debug, Clone)]
pub struct GoalRecommendation {
    pub bid: f64,
    pub budget_per_mille: f64,
    pub monthly_budget: f64,
    pub expected_share: f64,
    pub corner_case: CornerCase,
}

/// Grid offset actually used for a market (requested value clamped below
/// half the minimum gap between distinct opponent bids).
pub fn grid_epsilon(opponents: &ActiveMarket, requested: Option<f64>) -> f64 {
    let max_bid = opponents
        .bidders()
        .iter()
        .map(|b| b.bid)
        .fold(opponents.reserve(), f64::max);
    let mut eps = requested.unwrap_or_else(|| (1e-6 * max_bid).max(1e-6));
    let mut bids: Vec<f64> = opponents.bidders().iter().map(|b| b.bid).collect();
    bids.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    bids.dedup();
    let min_gap = bids
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if min_gap.is_finite() {
        eps = eps.min(min_gap / 2.0);
    }
    eps
}

/// Candidate bids: every opponent bid +/- epsilon, the reserve, and any
/// finite extras (e.g. the querying bidder's budget). Strictly increasing,
/// clipped below at the reserve.
pub fn candidate_grid(opponents: &ActiveMarket, eps: f64, extras: &[f64]) -> Vec<f64> {
    let mut grid = vec![opponents.reserve()];
    for b in opponents.bidders() {
        grid.push(b.bid - eps);
        grid.push(b.bid + eps);
    }
    for &x in extras {
        if x.is_finite() {
            grid.push(x);
        }
    }
    grid.retain(|&b| b >= opponents.reserve());
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    grid.dedup();
    grid
}

fn prob_for_budget(eq: f64, ecpm: f64, budget: f64) -> f64 {
    if ecpm <= budget {
        eq
    } else if ecpm > 0.0 {
        budget * eq / ecpm
    } else {
        0.0
    }
}

/// Priority that ranks the probe below every opponent on equal bids.
fn probe_priority(opponents: &ActiveMarket) -> u32 {
    opponents
        .bidders()
        .iter()
        .map(|b| b.priority)
        .max()
        .map_or(0, |p| p + 1)
}

/// (eQ, eCPM) for an unfiltered probe at `bid`, re-solving the opponents'
/// pacing with the probe in place when coupling is Full.
fn probe_at(
    opponents: &ActiveMarket,
    frozen: &ProbeTable,
    bid: f64,
    opts: &RecommendOptions,
) -> Result<(f64, f64)> {
    match opts.coupling {
        Coupling::Frozen => Ok(frozen.eval(bid)),
        Coupling::Full => {
            if bid < opponents.reserve() {
                return Ok((0.0, 0.0));
            }
            let mut bidders: Vec<Bidder> = opponents.bidders().to_vec();
            let probe_id = "__probe__";
            bidders.push(Bidder::new(probe_id, bid, 0.0, probe_priority(opponents)));
            let combined = MarketSnapshot::new(bidders, opponents.reserve(), *opponents.weights())
                .canonicalize()?;
            let k = combined.index_of(probe_id).expect("probe is active");
            let mut fixed = pins_for(&combined, opts);
            fixed[k] = Some(1.0);
            let sol = solve_pacing_with_fixed(&combined, &fixed, &opts.pacing)?;
            if !sol.converged {
                return Err(Error::NonConvergence {
                    context: format!("pacing while probing bid {bid}"),
                    iterations: sol.iterations,
                    residual: sol.residual_inf_norm,
                });
            }
            Ok((sol.outcomes.eq[k], sol.outcomes.ecpm[k]))
        }
    }
}

/// Evaluate the (eQ, eCPM, Prob) curve over the candidate grid with the
/// opponents' filtering held at `pi`.
pub fn build_curve(
    opponents: &ActiveMarket,
    pi: &FilterVector,
    budget: f64,
    epsilon: Option<f64>,
) -> Result<EcpmCurve> {
    let eps = grid_epsilon(opponents, epsilon);
    let grid = candidate_grid(opponents, eps, &[budget]);
    let probe = ProbeTable::build(opponents, pi)?;
    let points = grid
        .into_iter()
        .map(|bid| {
            let (eq, ecpm) = probe.eval(bid);
            CurvePoint {
                bid,
                eq,
                ecpm,
                prob: prob_for_budget(eq, ecpm, budget),
            }
        })
        .collect();
    Ok(EcpmCurve {
        points,
        epsilon: eps,
    })
}

/// Recommend the bid maximizing the expected number of impressions for the
/// budget. Opponents' probabilities come from balanced-budget pacing with
/// the querying bidder included at each probe bid (Full coupling).
pub fn recommend_bid(
    opponents: &ActiveMarket,
    budget: f64,
    opts: &RecommendOptions,
) -> Result<Recommendation> {
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(invalid("budget must be a nonnegative finite number"));
    }
    let eps = grid_epsilon(opponents, opts.epsilon);
    let grid = candidate_grid(opponents, eps, &[budget]);

    let frozen_pi = if matches!(opts.coupling, Coupling::Frozen) {
        solve_pacing_with_fixed(opponents, &pins_for(opponents, opts), &opts.pacing)?.pi
    } else {
        FilterVector::ones(opponents)
    };
    let frozen = ProbeTable::build(opponents, &frozen_pi)?;

    let mut evals = Vec::with_capacity(grid.len());
    for &bid in &grid {
        let (eq, ecpm) = probe_at(opponents, &frozen, bid, opts)?;
        evals.push(CurvePoint {
            bid,
            eq,
            ecpm,
            prob: prob_for_budget(eq, ecpm, budget),
        });
    }

    Ok(select_recommendation(&evals, budget, opponents, eps))
}

/// Argmax of Prob over the evaluated grid plus the corner rules. Among tied
/// maximizers the highest bid still inside the budget wins (the point where
/// the spend curve meets the budget line); when every maximizer is already
/// paced, the lowest one.
fn select_recommendation(
    evals: &[CurvePoint],
    budget: f64,
    opponents: &ActiveMarket,
    eps: f64,
) -> Recommendation {
    let best_prob = evals.iter().map(|p| p.prob).fold(0.0, f64::max);
    if best_prob <= 0.0 {
        // no bid yields positive expected spend or share
        return Recommendation {
            bid: opponents.reserve(),
            expected_share: 0.0,
            expected_spend: 0.0,
            corner_case: CornerCase::BottomBidder,
        };
    }
    let ties: Vec<&CurvePoint> = evals.iter().filter(|p| p.prob >= best_prob).collect();
    let chosen = ties
        .iter()
        .rev()
        .find(|p| p.ecpm <= budget)
        .or_else(|| ties.first())
        .expect("ties nonempty");

    let max_opp_bid = opponents
        .bidders()
        .iter()
        .map(|b| b.bid)
        .fold(f64::NAN, f64::max);
    let top_position = max_opp_bid.is_nan() || chosen.bid > max_opp_bid;
    if top_position && chosen.ecpm <= budget && (max_opp_bid.is_nan() || budget >= max_opp_bid) {
        let floor = if max_opp_bid.is_nan() {
            opponents.reserve()
        } else {
            max_opp_bid + eps
        };
        return Recommendation {
            bid: budget.max(floor),
            expected_share: chosen.prob,
            expected_spend: chosen.ecpm.min(budget),
            corner_case: CornerCase::TopBidder,
        };
    }

    Recommendation {
        bid: chosen.bid,
        expected_share: chosen.prob,
        expected_spend: chosen.ecpm.min(budget),
        corner_case: CornerCase::None,
    }
}

/// Fast-mode recommendation: opponents' filtering is taken as given and not
/// re-solved while probing. One probe table serves the whole grid.
pub fn recommend_bid_frozen(
    opponents: &ActiveMarket,
    pi: &FilterVector,
    budget: f64,
    epsilon: Option<f64>,
) -> Result<Recommendation> {
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(invalid("budget must be a nonnegative finite number"));
    }
    let curve = build_curve(opponents, pi, budget, epsilon)?;
    Ok(select_recommendation(
        &curve.points,
        budget,
        opponents,
        curve.epsilon,
    ))
}

/// Smallest bid meeting an impression goal, with the budget that sustains
/// it. The querying bidder is unfiltered; opponents' probabilities are
/// balanced-budget (re-solved per probe under Full coupling).
pub fn recommend_for_goal(
    opponents: &ActiveMarket,
    goal: &GoalRequest,
    opts: &RecommendOptions,
) -> Result<GoalRecommendation> {
    let target = goal.target_share()?;
    let eps = grid_epsilon(opponents, opts.epsilon);
    let grid = candidate_grid(opponents, eps, &[]);

    let frozen_pi = if matches!(opts.coupling, Coupling::Frozen) {
        solve_pacing_with_fixed(opponents, &pins_for(opponents, opts), &opts.pacing)?.pi
    } else {
        FilterVector::ones(opponents)
    };
    let frozen = ProbeTable::build(opponents, &frozen_pi)?;

    let mut evals = Vec::with_capacity(grid.len());
    for &bid in &grid {
        let (eq, ecpm) = probe_at(opponents, &frozen, bid, opts)?;
        evals.push((bid, eq, ecpm));
    }

    let finish = |bid: f64, eq: f64, budget: f64, corner: CornerCase| GoalRecommendation {
        bid,
        budget_per_mille: budget,
        monthly_budget: budget * goal.inventory / 1000.0,
        expected_share: eq,
        corner_case: corner,
    };

    let max_eq = evals.iter().map(|e| e.1).fold(0.0, f64::max);
    let min_eq = evals.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let slack = 1e-12;

    if max_eq < target - slack {
        // even the top of the grid cannot reach the goal: bid at the top and
        // budget at the bid, which never binds
        let &(bid, eq, _) = evals.last().expect("grid nonempty");
        return Ok(finish(bid, eq, bid, CornerCase::TopBidder));
    }
    if min_eq > target + slack {
        // any bid over-delivers; scale the budget down so pacing meets the
        // goal exactly at the bottom of the grid
        let &(bid, eq, ecpm) = evals.first().expect("grid nonempty");
        let budget = if eq > 0.0 { target * ecpm / eq } else { 0.0 };
        return Ok(finish(bid, eq, budget, CornerCase::BottomBidder));
    }
    let &(bid, eq, ecpm) = evals
        .iter()
        .find(|&&(_, eq, _)| eq >= target - slack)
        .expect("max_eq >= target implies a grid point qualifies");
    Ok(finish(bid, eq, ecpm, CornerCase::None))
}

/// Jointly recommend bids for the subset `members` of the market, each with
/// an impression goal, by block fixed-point sweeps of the single-bidder
/// solver. Every member is pinned unfiltered; outsiders keep balanced-budget
/// pacing.
pub fn recommend_simultaneous(
    market: &ActiveMarket,
    members: &[(String, GoalRequest)],
    opts: &RecommendOptions,
) -> Result<Vec<(String, GoalRecommendation)>> {
    if members.is_empty() {
        return Err(invalid("the optimized subset must be nonempty"));
    }
    let mut total_share = 0.0;
    for (_, g) in members {
        total_share += g.target_share()?;
    }
    if total_share > 1.0 + 1e-12 {
        return Err(invalid(format!(
            "joint goals are infeasible: total target share {total_share} exceeds 1"
        )));
    }
    let member_idx: Vec<usize> = members
        .iter()
        .map(|(id, _)| {
            market
                .index_of(id)
                .ok_or_else(|| invalid(format!("unknown member {id}")))
        })
        .collect::<Result<_>>()?;

    let mut bidders: Vec<Bidder> = market.bidders().to_vec();
    let bid_tol = 1e-9 * bidders.iter().map(|b| b.bid).fold(1.0, f64::max);
    let max_sweeps = 100;

    let solve_member = |bidders: &[Bidder], m: usize, idx: usize| -> Result<GoalRecommendation> {
        // opponents = everyone else at their current bids, with the other
        // members pinned unfiltered
        let opp: Vec<Bidder> = bidders
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, b)| b.clone())
            .collect();
        let opp_market =
            MarketSnapshot::new(opp, market.reserve(), *market.weights()).canonicalize()?;
        let member_opts = RecommendOptions {
            pinned_unfiltered: members
                .iter()
                .map(|(id, _)| id.clone())
                .filter(|id| *id != members[m].0)
                .collect(),
            ..opts.clone()
        };
        recommend_for_goal(&opp_market, &members[m].1, &member_opts)
    };

    for _ in 0..max_sweeps {
        let mut max_move = 0.0_f64;
        for (m, &idx) in member_idx.iter().enumerate() {
            let rec = solve_member(&bidders, m, idx)?;
            max_move = max_move.max((rec.bid - bidders[idx].bid).abs());
            bidders[idx].bid = rec.bid;
            bidders[idx].budget_per_mille = rec.budget_per_mille;
        }
        if max_move <= bid_tol {
            // converged: report each member against the final bids
            let mut out = Vec::with_capacity(members.len());
            for (m, &idx) in member_idx.iter().enumerate() {
                out.push((members[m].0.clone(), solve_member(&bidders, m, idx)?));
            }
            return Ok(out);
        }
    }
    Err(Error::NonConvergence {
        context: "simultaneous bid recommendation sweeps".into(),
        iterations: max_sweeps,
        residual: f64::NAN,
    })
}

/// Maximal cross-multiplied violation of "eQ/eCPM weakly decreasing in bid"
/// over consecutive curve points: positive means a violation.
pub fn ratio_monotonicity_violation(points: &[(f64, f64, f64)]) -> f64 {
    let mut worst = 0.0_f64;
    for w in points.windows(2) {
        let (_, eq_lo, ecpm_lo) = w[0];
        let (_, eq_hi, ecpm_hi) = w[1];
        // eq_hi/ecpm_hi <= eq_lo/ecpm_lo, cross-multiplied to dodge zeros
        worst = worst.max(eq_hi * ecpm_lo - eq_lo * ecpm_hi);
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrityReport {
    /// max |eQ(tau b, tau reserve) - eQ(b, reserve)| over bidders and taus
    pub share_invariance: f64,
    /// max |eCPM(tau b, tau reserve) - tau eCPM(b, reserve)|
    pub spend_scaling: f64,
    /// max |bid or per-mille budget change| when goals and inventory scale
    pub goal_scale_invariance: f64,
    /// max positive violation of the eQ/eCPM ratio monotonicity on the grid
    pub ratio_monotonicity: f64,
    pub tolerance: f64,
}

impl IntegrityReport {
    pub fn passed(&self) -> bool {
        self.share_invariance <= self.tolerance
            && self.spend_scaling <= self.tolerance
            && self.goal_scale_invariance <= self.tolerance
            && self.ratio_monotonicity <= self.tolerance
    }
}

/// Run the four integrity tests on a market with fixed filtering
/// probabilities (from one balanced-budget solve), for each scale factor.
pub fn integrity_suite(
    market: &ActiveMarket,
    taus: &[f64],
    opts: &RecommendOptions,
) -> Result<IntegrityReport> {
    if taus.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(invalid("scale factors must be positive"));
    }
    let base_sol = solve_pacing_with_fixed(market, &vec![None; market.len()], &opts.pacing)?;
    let pi = base_sol.pi.clone();
    let base_out = outcomes_dp(market, &pi)?;

    let mut share_invariance = 0.0_f64;
    let mut spend_scaling = 0.0_f64;
    let mut goal_scale_invariance = 0.0_f64;

    let goal = GoalRequest {
        goal: 100.0,
        inventory: 1000.0,
    };
    let goal_opts = RecommendOptions {
        coupling: Coupling::Frozen,
        ..opts.clone()
    };
    let base_goal = recommend_for_goal(market, &goal, &goal_opts)?;

    for &tau in taus {
        let scaled_bidders = market
            .bidders()
            .iter()
            .map(|b| Bidder::new(b.id.clone(), b.bid * tau, b.budget_per_mille, b.priority))
            .collect();
        let scaled = MarketSnapshot::new(scaled_bidders, market.reserve() * tau, *market.weights())
            .canonicalize()?;
        let scaled_out = outcomes_dp(
            &scaled,
            &FilterVector::new(pi.as_slice().to_vec(), &scaled)?,
        )?;
        for i in 0..market.len() {
            share_invariance = share_invariance.max((scaled_out.eq[i] - base_out.eq[i]).abs());
            spend_scaling = spend_scaling.max((scaled_out.ecpm[i] - tau * base_out.ecpm[i]).abs());
        }

        let scaled_goal = GoalRequest {
            goal: goal.goal * tau,
            inventory: goal.inventory * tau,
        };
        let got = recommend_for_goal(market, &scaled_goal, &goal_opts)?;
        goal_scale_invariance = goal_scale_invariance
            .max((got.bid - base_goal.bid).abs())
            .max((got.budget_per_mille - base_goal.budget_per_mille).abs());
    }

    let curve = build_curve(market, &pi, f64::INFINITY, opts.epsilon)?;
    let pts: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.bid, p.eq, p.ecpm)).collect();
    let ratio_monotonicity = ratio_monotonicity_violation(&pts).max(0.0);

    Ok(IntegrityReport {
        share_invariance,
        spend_scaling,
        goal_scale_invariance,
        ratio_monotonicity,
        tolerance: 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::PositionWeights;

    fn opponents(specs: &[(f64, f64)], reserve: f64) -> ActiveMarket {
        let bidders = specs
            .iter()
            .enumerate()
            .map(|(i, &(bid, budget))| Bidder::new(format!("o{i}"), bid, budget, i as u32))
            .collect();
        MarketSnapshot::new(bidders, reserve, PositionWeights::standard())
            .canonicalize()
            .unwrap()
    }

    #[test]
    fn curve_no_opponents_single_step() {
        let m = opponents(&[], 5.0);
        let curve = build_curve(&m, &FilterVector::ones(&m), 100.0, None).unwrap();
        assert_eq!(curve.points.len(), 2); // reserve and the budget point
        let p = &curve.points[0];
        assert_eq!(p.bid, 5.0);
        assert!((p.eq - 0.33).abs() < 1e-15);
        assert!((p.ecpm - 1.65).abs() < 1e-12);
    }

    #[test]
    fn curve_one_opponent_two_steps() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let curve = build_curve(&m, &FilterVector::ones(&m), f64::INFINITY, None).unwrap();
        let eps = curve.epsilon;
        let bids: Vec<f64> = curve.points.iter().map(|p| p.bid).collect();
        assert!(bids.contains(&(10.0 - eps)));
        assert!(bids.contains(&(10.0 + eps)));
        let below = curve.points.iter().find(|p| p.bid == 10.0 - eps).unwrap();
        assert!((below.eq - 0.28).abs() < 1e-15);
        assert!((below.ecpm - 1.4).abs() < 1e-12);
        let above = curve.points.iter().find(|p| p.bid == 10.0 + eps).unwrap();
        assert!((above.eq - 0.33).abs() < 1e-15);
        assert!((above.ecpm - 3.3).abs() < 1e-9);
    }

    #[test]
    fn recommend_no_opponents_top_corner() {
        let m = opponents(&[], 5.0);
        let rec = recommend_bid(&m, 10.0, &RecommendOptions::default()).unwrap();
        assert_eq!(rec.corner_case, CornerCase::TopBidder);
        assert_eq!(rec.bid, 10.0);
        assert!((rec.expected_spend - 1.65).abs() < 1e-12);
        assert!(rec.expected_spend <= 10.0 + 1e-9);
    }

    #[test]
    fn recommend_small_budget_stays_below_opponent() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_bid(&m, 2.0, &RecommendOptions::default()).unwrap();
        let eps = grid_epsilon(&m, None);
        assert!((rec.bid - (10.0 - eps)).abs() < 1e-15, "bid {}", rec.bid);
        assert!((rec.expected_share - 0.28).abs() < 1e-12);
        assert_eq!(rec.corner_case, CornerCase::None);
    }

    #[test]
    fn recommend_larger_budget_outbids() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_bid(&m, 3.5, &RecommendOptions::default()).unwrap();
        let eps = grid_epsilon(&m, None);
        assert!((rec.bid - (10.0 + eps)).abs() < 1e-15, "bid {}", rec.bid);
        assert!((rec.expected_share - 0.33).abs() < 1e-12);
        assert!((rec.expected_spend - 3.3).abs() < 1e-9);
    }

    #[test]
    fn recommend_zero_budget_bottoms_out() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_bid(&m, 0.0, &RecommendOptions::default()).unwrap();
        assert_eq!(rec.corner_case, CornerCase::BottomBidder);
        assert_eq!(rec.bid, 5.0);
        assert_eq!(rec.expected_spend, 0.0);
    }

    #[test]
    fn recommend_rejects_negative_budget() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        assert!(recommend_bid(&m, -1.0, &RecommendOptions::default()).is_err());
    }

    #[test]
    fn goal_zero_scales_budget_to_zero() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_for_goal(
            &m,
            &GoalRequest {
                goal: 0.0,
                inventory: 1000.0,
            },
            &RecommendOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.corner_case, CornerCase::BottomBidder);
        assert_eq!(rec.budget_per_mille, 0.0);
    }

    #[test]
    fn goal_exact_share_outbids_opponent() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_for_goal(
            &m,
            &GoalRequest {
                goal: 330.0,
                inventory: 1000.0,
            },
            &RecommendOptions::default(),
        )
        .unwrap();
        let eps = grid_epsilon(&m, None);
        assert!((rec.bid - (10.0 + eps)).abs() < 1e-15);
        assert!((rec.budget_per_mille - 3.3).abs() < 1e-9);
        assert_eq!(rec.corner_case, CornerCase::None);
    }

    #[test]
    fn goal_above_reach_hits_top_corner() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        let rec = recommend_for_goal(
            &m,
            &GoalRequest {
                goal: 500.0,
                inventory: 1000.0,
            },
            &RecommendOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.corner_case, CornerCase::TopBidder);
        let eps = grid_epsilon(&m, None);
        assert!((rec.bid - (10.0 + eps)).abs() < 1e-15);
        assert_eq!(rec.budget_per_mille, rec.bid);
    }

    #[test]
    fn goal_above_inventory_rejected() {
        let m = opponents(&[(10.0, 1e9)], 5.0);
        assert!(recommend_for_goal(
            &m,
            &GoalRequest {
                goal: 2000.0,
                inventory: 1000.0,
            },
            &RecommendOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn simultaneous_single_member_matches_single_solver() {
        let bidders = vec![
            Bidder::new("j", 12.0, 4.0, 0),
            Bidder::new("o1", 10.0, 1e9, 1),
        ];
        let m = MarketSnapshot::new(bidders, 5.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let goal = GoalRequest {
            goal: 330.0,
            inventory: 1000.0,
        };
        let joint =
            recommend_simultaneous(&m, &[("j".to_string(), goal)], &RecommendOptions::default())
                .unwrap();
        let single =
            recommend_for_goal(&m.without(0), &goal, &RecommendOptions::default()).unwrap();
        assert_eq!(joint[0].1.bid, single.bid);
        assert_eq!(joint[0].1.budget_per_mille, single.budget_per_mille);
    }

    #[test]
    fn simultaneous_symmetric_market_equal_bids() {
        let bidders = vec![
            Bidder::new("a", 12.0, 4.0, 0),
            Bidder::new("b", 12.0, 4.0, 1),
            Bidder::new("o", 10.0, 1e9, 2),
        ];
        let m = MarketSnapshot::new(bidders, 5.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let goal = GoalRequest {
            goal: 280.0,
            inventory: 1000.0,
        };
        let joint = recommend_simultaneous(
            &m,
            &[("a".to_string(), goal), ("b".to_string(), goal)],
            &RecommendOptions::default(),
        )
        .unwrap();
        // equality at grid resolution: the sweeps land both members on the
        // same step of the shared curve
        let eps = grid_epsilon(&m, None);
        assert!(
            (joint[0].1.bid - joint[1].1.bid).abs() <= 2.0 * eps,
            "bids {} vs {}",
            joint[0].1.bid,
            joint[1].1.bid
        );
        // substitution: both goal equations hold at the joint solution
        for (_, rec) in &joint {
            assert!((rec.expected_share - 0.28).abs() < 1e-9);
        }
    }

    #[test]
    fn simultaneous_solution_verified_by_enumeration_oracle() {
        // rebuild the final market at the recommended bids, pin the members,
        // let everyone else pace, and check each member's share with the
        // exponential engine
        let bidders = vec![
            Bidder::new("a", 12.0, 4.0, 0),
            Bidder::new("b", 14.0, 4.0, 1),
            Bidder::new("o1", 10.0, 1e9, 2),
            Bidder::new("o2", 9.0, 2.0, 3),
        ];
        let m = MarketSnapshot::new(bidders.clone(), 5.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let goals = [
            (
                "a".to_string(),
                GoalRequest {
                    goal: 280.0,
                    inventory: 1000.0,
                },
            ),
            (
                "b".to_string(),
                GoalRequest {
                    goal: 330.0,
                    inventory: 1000.0,
                },
            ),
        ];
        let joint = recommend_simultaneous(&m, &goals, &RecommendOptions::default()).unwrap();

        let mut final_bidders = bidders;
        for (id, rec) in &joint {
            let slot = final_bidders.iter_mut().find(|b| b.id == *id).unwrap();
            slot.bid = rec.bid;
            slot.budget_per_mille = rec.budget_per_mille;
        }
        let final_market = MarketSnapshot::new(final_bidders, 5.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let fixed: Vec<Option<f64>> = final_market
            .bidders()
            .iter()
            .map(|b| (b.id == "a" || b.id == "b").then_some(1.0))
            .collect();
        let sol = solve_pacing_with_fixed(&final_market, &fixed, &SolveOptions::default()).unwrap();
        let oracle = crate::engine::outcomes_oracle(&final_market, &sol.pi, None).unwrap();
        for (id, goal) in &goals {
            let k = final_market.index_of(id).unwrap();
            let target = goal.goal / goal.inventory;
            assert!(
                (oracle.eq[k] - target).abs() < 1e-6,
                "{id}: oracle share {} vs target {target}",
                oracle.eq[k]
            );
        }
    }

    #[test]
    fn simultaneous_infeasible_goals_rejected() {
        let bidders = vec![
            Bidder::new("a", 12.0, 4.0, 0),
            Bidder::new("b", 12.0, 4.0, 1),
        ];
        let m = MarketSnapshot::new(bidders, 5.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let g = GoalRequest {
            goal: 600.0,
            inventory: 1000.0,
        };
        assert!(recommend_simultaneous(
            &m,
            &[("a".to_string(), g), ("b".to_string(), g)],
            &RecommendOptions::default(),
        )
        .is_err());
    }

    #[test]
    fn integrity_identity_scaling_is_exact() {
        let m = opponents(&[(30.0, 2.0), (20.0, 5.0), (15.0, 1.0)], 10.0);
        let report = integrity_suite(&m, &[1.0], &RecommendOptions::default()).unwrap();
        assert_eq!(report.share_invariance, 0.0);
        assert_eq!(report.spend_scaling, 0.0);
        assert_eq!(report.goal_scale_invariance, 0.0);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn integrity_scaling_passes() {
        let m = opponents(&[(30.0, 2.0), (20.0, 5.0), (15.0, 1.0)], 10.0);
        let report = integrity_suite(&m, &[0.5, 2.0, 10.0], &RecommendOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn mock_curve_fails_ratio_test() {
        // eQ jumps while eCPM stays flat: ratio increases with the bid
        let pts = vec![(5.0, 0.1, 2.0), (6.0, 0.3, 2.0)];
        assert!(ratio_monotonicity_violation(&pts) > 0.0);
    }

    #[test]
    fn curve_monotone_and_prob_unimodal_on_random_markets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let reserve = rng.gen_range(0.5..8.0);
            let specs: Vec<(f64, f64)> = (0..n)
                .map(|_| (reserve + rng.gen_range(0.0..25.0), rng.gen_range(0.2..9.0)))
                .collect();
            let m = opponents(&specs, reserve);
            let budget = rng.gen_range(0.1..10.0);
            let sol = crate::pacing::solve_pacing(&m, &SolveOptions::default()).unwrap();
            let curve = build_curve(&m, &sol.pi, budget, None).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[1].bid > w[0].bid, "grid not strictly increasing");
                assert!(w[1].eq >= w[0].eq - 1e-12);
                assert!(w[1].ecpm >= w[0].ecpm - 1e-9);
            }
            // Prob rises to its peak and never rises again after falling
            let probs: Vec<f64> = curve.points.iter().map(|p| p.prob).collect();
            let peak = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            for w in probs[..=peak].windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{probs:?}");
            }
            for w in probs[peak..].windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{probs:?}");
            }
        }
    }

    #[test]
    fn recommended_spend_never_exceeds_budget_on_random_markets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(23);
        for _ in 0..40 {
            let n = rng.gen_range(0..=5);
            let reserve = rng.gen_range(0.5..8.0);
            let specs: Vec<(f64, f64)> = (0..n)
                .map(|_| (reserve + rng.gen_range(0.0..25.0), rng.gen_range(0.2..9.0)))
                .collect();
            let m = opponents(&specs, reserve);
            let budget = rng.gen_range(0.0..10.0);
            let rec = recommend_bid(&m, budget, &RecommendOptions::default()).unwrap();
            assert!(
                rec.expected_spend <= budget + 1e-9,
                "spend {} over budget {budget}",
                rec.expected_spend
            );
        }
    }
}
