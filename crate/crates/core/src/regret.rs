//! Average-regret computation, rationalizable-set construction, support
//! function evaluation, minimum-regret value extraction, and the comparison
//! against the always-follow-the-recommendation counterfactual.
//!
//! Per-day utility of bidding `b` at value `v` is
//! `u_t(b, v) = v * eQ_t(b) - eCPM_t(b)`, evaluated with that day's
//! opponents and their filtering probabilities held fixed. A candidate bid
//! `b'` and a value `v` rationalize the observed sequence with regret
//! `eps >= v * dEQ(b') - dECPM(b')`, where the delta curves average the
//! outcome differences over days; the rationalizable set is the envelope of
//! those half-planes.

use chrono::NaiveDate;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::cluster::FrequencyClusters;
use crate::engine::{FilterVector, ProbeTable};
use crate::error::{invalid, Result};
use crate::market::{ActiveMarket, BidTrace};
use crate::pacing::{solve_pacing, SolveOptions};

/// One day of history for a single agent: the opponents with their solved
/// filtering probabilities, the agent's own play, that day's volume and the
/// platform's recommendation. The agent may be inactive (bid below the
/// reserve), in which case she simply isn't part of the opponents' auction.
#[derive(Debug, Clone)]
pub struct AgentDay {
    pub date: NaiveDate,
    pub opponents: ActiveMarket,
    pub opponent_pi: FilterVector,
    pub own_bid: f64,
    pub own_pi: f64,
    /// Budget and priority carried along so the counterfactual replay can
    /// re-insert the agent.
    pub own_budget_per_mille: f64,
    pub own_priority: u32,
    pub recommended_bid: Option<f64>,
    /// Impression opportunities arriving that day.
    pub volume: f64,
}

impl AgentDay {
    /// Probe table over the day's opponents with their filtering fixed.
    fn probe(&self) -> Result<ProbeTable> {
        ProbeTable::build(&self.opponents, &self.opponent_pi)
    }
}

#[derive(Debug, Clone)]
pub struct AgentHistory {
    pub agent_id: String,
    pub days: Vec<AgentDay>,
}

impl AgentHistory {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

/// Day-averaged outcome differences of a fixed candidate bid against the
/// played sequence, on a shared candidate grid.
#[derive(Debug, Clone)]
pub struct DeltaCurves {
    pub grid: Vec<f64>,
    pub d_eq: Vec<f64>,
    pub d_ecpm: Vec<f64>,
    pub days: usize,
}

/// Uniform candidate points added on top of the opponent-bid grid.
pub const UNIFORM_GRID_POINTS: usize = 64;

/// Build the candidate-bid grid and the delta curves for one agent: every
/// opponent bid +/- epsilon on every day, the reserve, and 64 uniform points
/// spanning [reserve, 1.5 * max observed bid].
pub fn build_delta_curves(history: &AgentHistory) -> Result<DeltaCurves> {
    if history.is_empty() {
        return Err(invalid("at least one day of history is required"));
    }
    let mut max_bid = 0.0_f64;
    let mut reserve = f64::INFINITY;
    for day in &history.days {
        reserve = reserve.min(day.opponents.reserve());
        for b in day.opponents.bidders() {
            max_bid = max_bid.max(b.bid);
        }
        max_bid = max_bid.max(day.own_bid);
    }
    let eps = (1e-6 * max_bid).max(1e-6);

    let mut grid = vec![reserve];
    for day in &history.days {
        for b in day.opponents.bidders() {
            grid.push(b.bid - eps);
            grid.push(b.bid + eps);
        }
    }
    let top = 1.5 * max_bid;
    if top > reserve {
        for k in 0..UNIFORM_GRID_POINTS {
            grid.push(reserve + (top - reserve) * (k as f64 + 1.0) / UNIFORM_GRID_POINTS as f64);
        }
    }
    grid.retain(|&b| b >= reserve);
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    grid.dedup();
    if reserve > 0.0 {
        // staying out (any bid below the reserve) is a legitimate fixed
        // strategy: zero impressions, zero spend
        grid.insert(0, 0.0);
    }

    delta_curves_on_grid(history, grid)
}

/// Delta curves over a caller-supplied grid.
pub fn delta_curves_on_grid(history: &AgentHistory, grid: Vec<f64>) -> Result<DeltaCurves> {
    if grid.is_empty() {
        return Err(invalid("candidate grid is empty"));
    }
    if history.is_empty() {
        return Err(invalid("at least one day of history is required"));
    }
    let t = history.len() as f64;
    let mut d_eq = vec![0.0; grid.len()];
    let mut d_ecpm = vec![0.0; grid.len()];
    for day in &history.days {
        let probe = day.probe()?;
        let (eq_played, ecpm_played) = probe.eval(day.own_bid);
        for (k, &b) in grid.iter().enumerate() {
            let (eq, ecpm) = probe.eval(b);
            d_eq[k] += (eq - eq_played) / t;
            d_ecpm[k] += (ecpm - ecpm_played) / t;
        }
    }
    Ok(DeltaCurves {
        grid,
        d_eq,
        d_ecpm,
        days: history.len(),
    })
}

/// Average regret of the played sequence against the fixed bid `b_prime` at
/// value `v`: mean utility of always bidding `b_prime` minus mean utility of
/// the actual play.
pub fn average_regret(history: &AgentHistory, v: f64, b_prime: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(invalid("at least one day of history is required"));
    }
    let t = history.len() as f64;
    let mut total = 0.0;
    for day in &history.days {
        let probe = day.probe()?;
        let (eq_c, ecpm_c) = probe.eval(b_prime);
        let (eq_p, ecpm_p) = probe.eval(day.own_bid);
        total += (v * eq_c - ecpm_c) - (v * eq_p - ecpm_p);
    }
    Ok(total / t)
}

/// Upper envelope of lines y = slope*x + intercept, slopes ascending.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
    /// x coordinate where active line i hands over to line i+1.
    pub breakpoints: Vec<f64>,
}

impl Envelope {
    pub fn build(lines: &[(f64, f64)]) -> Result<Envelope> {
        if lines.is_empty() {
            return Err(invalid("no half-planes to build an envelope from"));
        }
        let mut sorted: Vec<(f64, f64)> = lines.to_vec();
        sorted.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite")
                .then(a.1.partial_cmp(&b.1).expect("finite"))
        });
        // among equal slopes only the largest intercept can be active
        let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        for l in sorted {
            if let Some(last) = dedup.last_mut() {
                if last.0 == l.0 {
                    last.1 = l.1;
                    continue;
                }
            }
            dedup.push(l);
        }

        let cross = |a: &(f64, f64), b: &(f64, f64)| (a.1 - b.1) / (b.0 - a.0);
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(dedup.len());
        for l in dedup {
            while hull.len() >= 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                // b is buried if l overtakes a before b does
                if cross(&a, &l) <= cross(&a, &b) {
                    hull.pop();
                } else {
                    break;
                }
            }
            if hull.len() == 1 && cross(&hull[0], &l).is_nan() {
                hull.pop();
            }
            hull.push(l);
        }
        let breakpoints = hull.windows(2).map(|w| cross(&w[0], &w[1])).collect();
        Ok(Envelope {
            slopes: hull.iter().map(|l| l.0).collect(),
            intercepts: hull.iter().map(|l| l.1).collect(),
            breakpoints,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(m, b)| m * x + b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_slope(&self) -> f64 {
        *self.slopes.last().expect("nonempty")
    }

    pub fn min_slope(&self) -> f64 {
        self.slopes[0]
    }

    /// Minimize over x >= 0; ties resolve to the smallest x. The envelope is
    /// convex, so it suffices to look at 0, the nonnegative breakpoints, and
    /// one extra candidate (the value-grid bound, covering a tail that keeps
    /// falling past every breakpoint).
    pub fn minimize_nonnegative(&self, extra: f64) -> (f64, f64) {
        let mut candidates: Vec<f64> = vec![0.0];
        candidates.extend(
            self.breakpoints
                .iter()
                .copied()
                .filter(|b| *b > 0.0 && b.is_finite()),
        );
        if extra > 0.0 && extra.is_finite() {
            candidates.push(extra);
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mut best = (candidates[0], self.eval(candidates[0]));
        for &x in &candidates[1..] {
            let y = self.eval(x);
            if y < best.1 - 1e-15 * best.1.abs().max(1.0) {
                best = (x, y);
            }
        }
        best
    }
}

/// The rationalizable set for one agent: the family of half-planes
/// `v * d_eq(b') - d_ecpm(b') <= eps` indexed by the candidate grid, its
/// envelope, and the minimum-regret point.
#[derive(Debug, Clone)]
pub struct RationalizableSet {
    pub curves: DeltaCurves,
    pub envelope: Envelope,
    pub v_star: f64,
    pub eps_star: f64,
    /// No candidate bid gains impressions on average: the regret envelope
    /// never rises with the value, so the data put no upper bound on it and
    /// `v_star` reports the value-grid upper bound instead of an estimate.
    pub budget_constrained: bool,
    /// Upper bound of the value grid used for the flagged case.
    pub value_upper_bound: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValueGridConfig {
    /// Upper bound for reported values; defaults to the top of the candidate
    /// bid grid (values and bids share units).
    pub v_max: Option<f64>,
}

pub fn build_rationalizable_set(
    history: &AgentHistory,
    cfg: &ValueGridConfig,
) -> Result<RationalizableSet> {
    let curves = build_delta_curves(history)?;
    rationalizable_from_curves(curves, cfg)
}

pub fn rationalizable_from_curves(
    curves: DeltaCurves,
    cfg: &ValueGridConfig,
) -> Result<RationalizableSet> {
    let lines: Vec<(f64, f64)> = curves
        .d_eq
        .iter()
        .zip(&curves.d_ecpm)
        .map(|(&a, &c)| (a, -c))
        .collect();
    let envelope = Envelope::build(&lines)?;
    let v_max = cfg
        .v_max
        .unwrap_or_else(|| curves.grid.last().copied().unwrap_or(0.0).max(1.0));

    // No candidate bid gains impressions on average: the envelope never
    // rises with the value, so the data put no upper bound on it. When the
    // envelope still attains its minimum at a kink we report that point,
    // otherwise the value-grid bound stands in.
    let budget_constrained = envelope.max_slope() <= 1e-12;
    let (v_star, eps_star) =
        envelope.minimize_nonnegative(if budget_constrained { v_max } else { 0.0 });
    Ok(RationalizableSet {
        curves,
        envelope,
        v_star,
        eps_star,
        budget_constrained,
        value_upper_bound: v_max,
    })
}

impl RationalizableSet {
    /// eps(v): the smallest regret rationalizing value v.
    pub fn regret_at(&self, v: f64) -> f64 {
        self.envelope.eval(v)
    }
}

/// Support function of the rationalizable set in direction `u` (unit norm):
/// finite only below the value axis and within the slope range of the
/// half-plane family, +infinity otherwise. The finite branch is the exact
/// support of the half-plane intersection, evaluated at its vertices.
pub fn support_function(curves: &DeltaCurves, u: [f64; 2]) -> Result<f64> {
    let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "direction must have unit norm, got {norm}"
        )));
    }
    if u[1] >= 0.0 {
        return Ok(f64::INFINITY);
    }
    let lines: Vec<(f64, f64)> = curves
        .d_eq
        .iter()
        .zip(&curves.d_ecpm)
        .map(|(&a, &c)| (a, -c))
        .collect();
    let env = Envelope::build(&lines)?;
    let scale = -u[1];
    let a = u[0] / scale;
    let tol = 1e-12 * (1.0 + a.abs());
    if a < env.min_slope() - tol || a > env.max_slope() + tol {
        return Ok(f64::INFINITY);
    }
    // sup over the set of u1*v + u2*eps = scale * sup_v (a*v - eps(v));
    // the inner sup is attained at an envelope vertex (or along an edge of
    // matching slope, where both endpoints agree).
    let mut best = f64::NEG_INFINITY;
    if env.breakpoints.is_empty() {
        best = a * 0.0 - env.eval(0.0);
    }
    for &bp in &env.breakpoints {
        best = best.max(a * bp - env.eval(bp));
    }
    Ok(scale * best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Worse,
    Better,
    Equal,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Classification::Worse => write!(f, "worse"),
            Classification::Better => write!(f, "better"),
            Classification::Equal => write!(f, "equal"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegretReport {
    pub agent_id: String,
    pub v_star: f64,
    pub eps_star: f64,
    /// eps_star / v_star, when v_star > 0.
    pub relative_regret: Option<f64>,
    /// eps_star * T / total impressions won by the actual play.
    pub per_impression_regret: f64,
    pub eps_reco: Option<f64>,
    pub classification: Option<Classification>,
    pub budget_constrained: bool,
}

fn won_impressions(history: &AgentHistory) -> Result<f64> {
    let mut total = 0.0;
    for day in &history.days {
        let probe = day.probe()?;
        let (eq, _) = probe.eval(day.own_bid);
        total += day.own_pi * eq * day.volume;
    }
    Ok(total)
}

/// Minimum-regret inference for one agent, without the counterfactual.
pub fn infer_regret(history: &AgentHistory, cfg: &ValueGridConfig) -> Result<RegretReport> {
    let set = build_rationalizable_set(history, cfg)?;
    let won = won_impressions(history)?;
    let t = history.len() as f64;
    Ok(RegretReport {
        agent_id: history.agent_id.clone(),
        v_star: set.v_star,
        eps_star: set.eps_star,
        relative_regret: (set.v_star > 0.0).then(|| set.eps_star / set.v_star),
        per_impression_regret: if won > 0.0 {
            set.eps_star * t / won
        } else {
            f64::INFINITY
        },
        eps_reco: None,
        classification: None,
        budget_constrained: set.budget_constrained,
    })
}

/// Replay the always-recommended counterfactual: each day the agent's bid is
/// replaced by that day's recommendation and the whole market's pacing is
/// re-solved around it.
pub fn counterfactual_history(
    history: &AgentHistory,
    pacing: &SolveOptions,
) -> Result<AgentHistory> {
    let mut days = Vec::with_capacity(history.days.len());
    for day in &history.days {
        let reco = day.recommended_bid.ok_or_else(|| {
            invalid(format!(
                "agent {} has no recommended bid on {}",
                history.agent_id, day.date
            ))
        })?;
        let mut bidders = day.opponents.bidders().to_vec();
        bidders.push(crate::market::Bidder::new(
            history.agent_id.clone(),
            reco,
            day.own_budget_per_mille,
            day.own_priority,
        ));
        let market = crate::market::MarketSnapshot::new(
            bidders,
            day.opponents.reserve(),
            *day.opponents.weights(),
        )
        .canonicalize()?;
        let sol = solve_pacing(&market, pacing)?;
        let (opponents, opponent_pi, own_pi) = match market.index_of(&history.agent_id) {
            Some(idx) => {
                let opponents = market.without(idx);
                let mut pis = sol.pi.as_slice().to_vec();
                let own = pis.remove(idx);
                (opponents.clone(), FilterVector::new(pis, &opponents)?, own)
            }
            // the recommendation fell below the reserve: the agent sits out
            None => (market, sol.pi, 1.0),
        };
        days.push(AgentDay {
            date: day.date,
            opponents,
            opponent_pi,
            own_bid: reco,
            own_pi,
            own_budget_per_mille: day.own_budget_per_mille,
            own_priority: day.own_priority,
            recommended_bid: Some(reco),
            volume: day.volume,
        });
    }
    Ok(AgentHistory {
        agent_id: history.agent_id.clone(),
        days,
    })
}

/// Compare the agent's own play against the always-recommended sequence at
/// the agent's own minimum-regret value; classify with tolerance `delta`.
pub fn compare_with_recommendation(
    history: &AgentHistory,
    cfg: &ValueGridConfig,
    pacing: &SolveOptions,
    delta: f64,
) -> Result<RegretReport> {
    let mut report = infer_regret(history, cfg)?;
    let cf = counterfactual_history(history, pacing)?;
    let cf_curves = build_delta_curves(&cf)?;
    let cf_env = Envelope::build(
        &cf_curves
            .d_eq
            .iter()
            .zip(&cf_curves.d_ecpm)
            .map(|(&a, &c)| (a, -c))
            .collect::<Vec<_>>(),
    )?;
    let eps_reco = cf_env.eval(report.v_star);
    let diff = report.eps_star - eps_reco;
    report.eps_reco = Some(eps_reco);
    report.classification = Some(if diff > delta {
        Classification::Worse
    } else if diff < -delta {
        Classification::Better
    } else {
        Classification::Equal
    });
    Ok(report)
}

/// One bucket of the adherence curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdherencePoint {
    /// Months (30-day blocks) since the agent's first active day.
    pub month: usize,
    /// Mean over agents of the fraction of bid changes matching that day's
    /// recommendation.
    pub fraction: f64,
    pub agents: usize,
}

#[derive(Debug, Clone)]
pub struct AdherenceCurve {
    pub overall: Vec<AdherencePoint>,
    pub per_cluster: BTreeMap<usize, Vec<AdherencePoint>>,
}

/// Fraction of an agent's bid-change events whose new bid equals that day's
/// recommendation, within 1e-9. None when the agent never changes bids.
pub fn agent_adherence(trace: &BidTrace) -> Option<f64> {
    let (mut events, mut matches) = (0usize, 0usize);
    let mut prev: Option<f64> = None;
    for d in trace.days.iter().filter(|d| d.active) {
        if let Some(p) = prev {
            if d.bid != p {
                events += 1;
                if let Some(r) = d.recommended_bid {
                    if (d.bid - r).abs() <= 1e-9 {
                        matches += 1;
                    }
                }
            }
        }
        prev = Some(d.bid);
    }
    (events > 0).then(|| matches as f64 / events as f64)
}

fn bucketed_fractions(traces: &[&BidTrace]) -> Vec<AdherencePoint> {
    // per month: per-agent (events, matches)
    let mut months: BTreeMap<usize, BTreeMap<&str, (usize, usize)>> = BTreeMap::new();
    for trace in traces {
        let Some(first) = trace.first_active_date() else {
            continue;
        };
        let mut prev: Option<f64> = None;
        for d in trace.days.iter().filter(|d| d.active) {
            if let Some(p) = prev {
                if d.bid != p {
                    let month = ((d.date - first).num_days() / 30).max(0) as usize;
                    let slot = months
                        .entry(month)
                        .or_default()
                        .entry(trace.agent_id.as_str())
                        .or_insert((0, 0));
                    slot.0 += 1;
                    if let Some(r) = d.recommended_bid {
                        if (d.bid - r).abs() <= 1e-9 {
                            slot.1 += 1;
                        }
                    }
                }
            }
            prev = Some(d.bid);
        }
    }
    months
        .into_iter()
        .map(|(month, agents)| {
            let fractions: Vec<f64> = agents
                .values()
                .map(|&(events, matches)| matches as f64 / events as f64)
                .collect();
            AdherencePoint {
                month,
                fraction: fractions.iter().sum::<f64>() / fractions.len() as f64,
                agents: fractions.len(),
            }
        })
        .collect()
}

/// Adherence by tenure month, overall and per cluster when a clustering is
/// supplied.
pub fn adherence_curve(
    traces: &[BidTrace],
    clusters: Option<&FrequencyClusters>,
) -> AdherenceCurve {
    let refs: Vec<&BidTrace> = traces.iter().collect();
    let overall = bucketed_fractions(&refs);
    let mut per_cluster = BTreeMap::new();
    if let Some(fc) = clusters {
        for c in 1..=fc.k {
            let members: Vec<&BidTrace> = traces
                .iter()
                .filter(|t| fc.agents.get(&t.agent_id).map(|&(_, k)| k) == Some(c))
                .collect();
            per_cluster.insert(c, bucketed_fractions(&members));
        }
    }
    AdherenceCurve {
        overall,
        per_cluster,
    }
}
