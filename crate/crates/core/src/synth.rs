//! Synthetic region generation: agent populations drawn from configurable
//! distributions, scripted bid-change policies, and per-day recommendation
//! recording. Deterministic given the seed.

use chrono::{Datelike, NaiveDate};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use std::collections::BTreeMap;

use crate::engine::FilterVector;
use crate::error::{invalid, Result};
use crate::market::{BidTrace, PositionWeights, TraceDay};
use crate::pacing::SolveOptions;
use crate::recommend::{candidate_grid, grid_epsilon, recommend_bid_frozen};
use crate::sim::{run_day, AgentSpec, LedgerBook, RegionConfig};

/// Mean/std target for a lognormal population parameter.
#[derive(Debug, Clone, Copy)]
pub struct TargetDist {
    pub mean: f64,
    pub std: f64,
}

impl TargetDist {
    fn lognormal(&self) -> Result<LogNormal<f64>> {
        if !(self.mean > 0.0) {
            return Err(invalid("distribution mean must be positive"));
        }
        let ratio = self.std / self.mean;
        let sigma2 = (1.0 + ratio * ratio).ln();
        let mu = self.mean.ln() - sigma2 / 2.0;
        LogNormal::new(mu, sigma2.sqrt()).map_err(|e| invalid(format!("lognormal: {e}")))
    }

    fn beta(&self) -> Result<Beta<f64>> {
        let m = self.mean;
        if !(0.0 < m && m < 1.0) {
            return Err(invalid("beta mean must lie in (0, 1)"));
        }
        // cap the variance below the feasibility bound m(1-m)
        let var = (self.std * self.std).min(0.9 * m * (1.0 - m));
        let s = m * (1.0 - m) / var - 1.0;
        Beta::new(m * s, (1.0 - m) * s).map_err(|e| invalid(format!("beta: {e}")))
    }
}

/// How an agent adjusts her bid on the days she logs in.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Never moves.
    Fixed,
    /// Multiplicative random walk.
    RandomWalk { sigma: f64 },
    /// Each login, best-respond to a planted per-mille value against the
    /// morning market, then jitter the bid by +/- noise.
    MyopicBestResponse { value: f64, noise: f64 },
    /// Each login, adopt the morning recommendation with a probability that
    /// ramps up with tenure, otherwise take a random-walk step.
    Follower {
        ramp_start: f64,
        ramp_per_month: f64,
        sigma: f64,
    },
    /// Deterministic weekday pattern: the base bid is scaled up on the
    /// configured days (exploits volume modulation; ignores login draws).
    WeekdayAware {
        high_multiplier: f64,
        high_days: [bool; 7],
    },
}

/// Relative frequency of each policy in the generated population.
#[derive(Debug, Clone, Copy)]
pub struct PolicyMix {
    pub fixed: f64,
    pub random_walk: f64,
    pub myopic: f64,
    pub follower: f64,
    pub weekday_aware: f64,
}

impl Default for PolicyMix {
    fn default() -> Self {
        Self {
            fixed: 0.2,
            random_walk: 0.3,
            myopic: 0.2,
            follower: 0.3,
            weekday_aware: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMarketSpec {
    pub agent_count: TargetDist,
    pub bids: TargetDist,
    pub daily_budgets: TargetDist,
    pub active_duration_days: TargetDist,
    pub bid_change_rate: TargetDist,
    pub reserve: TargetDist,
    pub start_date: NaiveDate,
    pub horizon_days: u32,
    pub days_in_month: u32,
    pub weekday_multipliers: [f64; 7],
    pub base_daily_volume: f64,
    pub policy_mix: PolicyMix,
    /// Planted per-mille value of myopic best responders, as a multiple of
    /// the mean bid.
    pub planted_value_multiple: f64,
    /// Follower adoption ramp: starting probability and gain per tenure
    /// month, capped at 1.
    pub follower_ramp: (f64, f64),
}

impl Default for SyntheticMarketSpec {
    fn default() -> Self {
        Self {
            agent_count: TargetDist {
                mean: 10.74,
                std: 5.32,
            },
            bids: TargetDist {
                mean: 18.79,
                std: 9.71,
            },
            daily_budgets: TargetDist {
                mean: 9.22,
                std: 4.96,
            },
            active_duration_days: TargetDist {
                mean: 96.04,
                std: 20.74,
            },
            bid_change_rate: TargetDist {
                mean: 0.22,
                std: 0.28,
            },
            reserve: TargetDist {
                mean: 13.39,
                std: 9.55,
            },
            start_date: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
            horizon_days: 150,
            days_in_month: 30,
            // Sundays and Mondays run hot, midweek runs cold
            weekday_multipliers: [1.08, 0.96, 0.94, 0.94, 0.96, 1.00, 1.12],
            base_daily_volume: 5290.0,
            policy_mix: PolicyMix::default(),
            planted_value_multiple: 1.4,
            follower_ramp: (0.3, 0.15),
        }
    }
}

/// One sampled agent: the static spec, her policy, and the sampled login
/// rate driving bid-change frequency.
#[derive(Debug, Clone)]
pub struct SynthAgent {
    pub spec: AgentSpec,
    pub policy: Policy,
    pub login_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SynthRegion {
    pub config: RegionConfig,
    pub agents: Vec<SynthAgent>,
    pub traces: Vec<BidTrace>,
}

impl SynthRegion {
    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        self.agents.iter().map(|a| a.spec.clone()).collect()
    }
}

fn policy_of(kind: usize, spec: &SyntheticMarketSpec, mean_bid: f64) -> Policy {
    match kind {
        0 => Policy::Fixed,
        1 => Policy::RandomWalk { sigma: 0.08 },
        2 => Policy::MyopicBestResponse {
            value: spec.planted_value_multiple * mean_bid,
            noise: 0.02,
        },
        3 => Policy::WeekdayAware {
            high_multiplier: 1.25,
            // bid up where the volume multipliers run hot
            high_days: {
                let mut days = [false; 7];
                for (d, flag) in days.iter_mut().enumerate() {
                    *flag = spec.weekday_multipliers[d] > 1.0;
                }
                days
            },
        },
        _ => Policy::Follower {
            ramp_start: spec.follower_ramp.0,
            ramp_per_month: spec.follower_ramp.1,
            sigma: 0.08,
        },
    }
}

/// Assign policies by login-rate rank: the least active agents sit still,
/// the most active follow the tool. Frequent bid changers adopting the
/// recommendation sooner is the cohort shape the whole pipeline reproduces.
fn assign_policies(
    mix: &PolicyMix,
    spec: &SyntheticMarketSpec,
    mean_bid: f64,
    login_rates: &[f64],
) -> Vec<Policy> {
    let n = login_rates.len();
    let weights = [
        mix.fixed,
        mix.random_walk,
        mix.myopic,
        mix.weekday_aware,
        mix.follower,
    ];
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| login_rates[a].partial_cmp(&login_rates[b]).expect("finite"));
    let mut policies = vec![Policy::Fixed; n];
    let mut cum = 0.0;
    let mut next = 0usize;
    for (kind, w) in weights.iter().enumerate() {
        cum += w;
        let upto = ((cum / total) * n as f64).round() as usize;
        while next < upto.min(n) {
            policies[order[next]] = policy_of(kind, spec, mean_bid);
            next += 1;
        }
    }
    while next < n {
        policies[order[next]] = policy_of(4, spec, mean_bid);
        next += 1;
    }
    policies
}

/// Generate a full synthetic region: agent population, daily replay with
/// policy-driven bid changes, and traces carrying the morning
/// recommendations. Bitwise deterministic for a given spec and seed.
pub fn generate_market(spec: &SyntheticMarketSpec, seed: u64) -> Result<SynthRegion> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (config, agents) = sample_population(spec, &mut rng)?;
    let traces = script_traces(
        &config,
        &agents,
        spec.start_date,
        spec.horizon_days,
        &mut rng,
    )?;
    Ok(SynthRegion {
        config,
        agents,
        traces,
    })
}

/// Draw the region parameters and the agent population.
fn sample_population(
    spec: &SyntheticMarketSpec,
    rng: &mut StdRng,
) -> Result<(RegionConfig, Vec<SynthAgent>)> {
    if spec.horizon_days < 7 {
        return Err(invalid("horizon must cover at least a week"));
    }
    let bid_dist = spec.bids.lognormal()?;
    let budget_dist = spec.daily_budgets.lognormal()?;
    let duration_dist = spec.active_duration_days.lognormal()?;
    let count_dist = spec.agent_count.lognormal()?;
    let reserve_dist = spec.reserve.lognormal()?;
    let rate_dist = spec.bid_change_rate.beta()?;

    let reserve = reserve_dist.sample(rng);
    let config = RegionConfig {
        reserve,
        weights: PositionWeights::standard(),
        days_in_month: spec.days_in_month,
        weekday_multipliers: spec.weekday_multipliers,
        base_daily_volume: spec.base_daily_volume,
        allowance_mode: Default::default(),
    };
    config.validate()?;

    let n = (count_dist.sample(rng).round() as usize).max(2);
    let horizon_end = spec.start_date + chrono::Days::new(spec.horizon_days as u64 - 1);
    let login_rates: Vec<f64> = (0..n).map(|_| rate_dist.sample(rng)).collect();
    let policies = assign_policies(&spec.policy_mix, spec, spec.bids.mean, &login_rates);
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let bid = bid_dist.sample(rng);
        let daily_budget = budget_dist.sample(rng);
        let duration = duration_dist.sample(rng).round().max(3.0) as u64;
        let latest_start = spec.horizon_days.saturating_sub(7).max(1);
        let start_offset = rng.gen_range(0..latest_start) as u64;
        let start_date = spec.start_date + chrono::Days::new(start_offset);
        let end_date = (start_date + chrono::Days::new(duration - 1)).min(horizon_end);
        agents.push(SynthAgent {
            spec: AgentSpec {
                agent_id: format!("agent{i:03}"),
                bid,
                monthly_budget: daily_budget * spec.days_in_month as f64,
                start_date,
                end_date,
                priority: i as u32,
            },
            policy: policies[i].clone(),
            login_rate: login_rates[i],
        });
    }
    Ok((config, agents))
}

/// Run the day loop applying policies, recording bids and morning
/// recommendations.
fn script_traces(
    config: &RegionConfig,
    agents: &[SynthAgent],
    start: NaiveDate,
    horizon_days: u32,
    rng: &mut StdRng,
) -> Result<Vec<BidTrace>> {
    let pacing = SolveOptions::default();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut book = LedgerBook::new();
    let mut current_bid: BTreeMap<String, f64> = agents
        .iter()
        .map(|a| (a.spec.agent_id.clone(), a.spec.bid))
        .collect();
    let mut rows: BTreeMap<String, Vec<TraceDay>> = BTreeMap::new();

    for offset in 0..horizon_days {
        let date = start + chrono::Days::new(offset as u64);
        let active: Vec<&SynthAgent> = agents
            .iter()
            .filter(|a| a.spec.start_date <= date && date <= a.spec.end_date)
            .collect();
        if active.is_empty() {
            continue;
        }

        // morning market at yesterday's closing bids and today's budgets
        let morning_roster: Vec<(AgentSpec, f64)> = active
            .iter()
            .map(|a| (a.spec.clone(), current_bid[&a.spec.agent_id]))
            .collect();
        let mut morning_book = book.clone();
        let morning = run_day(config, date, &mut morning_book, &morning_roster, &pacing)?;

        // morning recommendations, one probe per agent over frozen filtering
        let mut recs: BTreeMap<String, f64> = BTreeMap::new();
        for a in &active {
            let id = &a.spec.agent_id;
            let budget = morning.budgets_per_mille.get(id).copied().unwrap_or(0.0);
            let pis: Vec<f64> = match &morning.solution {
                Some(sol) => sol.pi.as_slice().to_vec(),
                None => vec![1.0; morning.market.len()],
            };
            let (opponents, opp_pi) = match morning.market.index_of(id) {
                Some(idx) => {
                    let opp = morning.market.without(idx);
                    let mut p = pis.clone();
                    p.remove(idx);
                    let fv = FilterVector::new(p, &opp)?;
                    (opp, fv)
                }
                None => (
                    morning.market.clone(),
                    FilterVector::new(pis.clone(), &morning.market)?,
                ),
            };
            let rec = recommend_bid_frozen(&opponents, &opp_pi, budget, None)?;
            recs.insert(id.clone(), rec.bid);
        }

        // policy updates (skip each agent's first day: the initial bid is
        // the day-one play)
        for a in &active {
            let id = &a.spec.agent_id;
            if date == a.spec.start_date {
                continue;
            }
            let bid = current_bid[id];
            let new_bid = match &a.policy {
                Policy::WeekdayAware {
                    high_multiplier,
                    high_days,
                } => {
                    let base = a.spec.bid;
                    if high_days[date.weekday().num_days_from_monday() as usize] {
                        base * high_multiplier
                    } else {
                        base
                    }
                }
                _ if rng.gen::<f64>() >= a.login_rate => bid,
                Policy::Fixed => bid,
                Policy::RandomWalk { sigma } => {
                    walk_step(bid, *sigma, config.reserve, rng, &normal)
                }
                Policy::MyopicBestResponse { value, noise } => {
                    let br = best_response(&morning, id, *value)?;
                    br * (1.0 + rng.gen_range(-*noise..=*noise))
                }
                Policy::Follower {
                    ramp_start,
                    ramp_per_month,
                    sigma,
                } => {
                    let months = (date - a.spec.start_date).num_days() / 30;
                    let p = (ramp_start + ramp_per_month * months as f64).min(1.0);
                    if rng.gen::<f64>() < p {
                        recs[id]
                    } else {
                        walk_step(bid, *sigma, config.reserve, rng, &normal)
                    }
                }
            };
            current_bid.insert(id.clone(), new_bid);
        }

        // closing auction with the day's bids charges the ledgers
        let closing_roster: Vec<(AgentSpec, f64)> = active
            .iter()
            .map(|a| (a.spec.clone(), current_bid[&a.spec.agent_id]))
            .collect();
        let closing = run_day(config, date, &mut book, &closing_roster, &pacing)?;

        for a in &active {
            let id = &a.spec.agent_id;
            rows.entry(id.clone()).or_default().push(TraceDay {
                date,
                bid: current_bid[id],
                available_daily_budget: closing.ledgers.get(id).map(|l| l.available),
                recommended_bid: recs.get(id).copied(),
                active: true,
            });
        }
    }

    rows.into_iter()
        .map(|(id, days)| BidTrace::new(id, days))
        .collect()
}

fn walk_step(bid: f64, sigma: f64, reserve: f64, rng: &mut StdRng, normal: &Normal<f64>) -> f64 {
    let stepped = bid * (sigma * normal.sample(rng)).exp();
    // keep walkers in a sane band around the market
    stepped.clamp(reserve * 0.5, reserve.max(1.0) * 20.0)
}

/// Utility-maximizing bid against the morning market over the candidate
/// grid, treating the agent as unfiltered. Sits out (below the reserve)
/// when every active bid loses money.
fn best_response(morning: &crate::sim::DayResult, agent_id: &str, value: f64) -> Result<f64> {
    let pis: Vec<f64> = match &morning.solution {
        Some(sol) => sol.pi.as_slice().to_vec(),
        None => vec![1.0; morning.market.len()],
    };
    let (opponents, opp_pi) = match morning.market.index_of(agent_id) {
        Some(idx) => {
            let opp = morning.market.without(idx);
            let mut p = pis;
            p.remove(idx);
            let fv = FilterVector::new(p, &opp)?;
            (opp, fv)
        }
        None => (
            morning.market.clone(),
            FilterVector::new(pis, &morning.market)?,
        ),
    };
    let probe = crate::engine::ProbeTable::build(&opponents, &opp_pi)?;
    let eps = grid_epsilon(&opponents, None);
    let grid = candidate_grid(&opponents, eps, &[value]);
    let mut best = (opponents.reserve() * 0.8, 0.0);
    for b in grid {
        if b > value {
            // bidding above the value can only lose money in a GSP
            continue;
        }
        let (eq, ecpm) = probe.eval(b);
        let u = value * eq - ecpm;
        if u > best.1 + 1e-15 {
            best = (b, u);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_region() {
        let spec = SyntheticMarketSpec {
            horizon_days: 30,
            agent_count: TargetDist {
                mean: 5.0,
                std: 1.0,
            },
            ..Default::default()
        };
        let a = generate_market(&spec, 99).unwrap();
        let b = generate_market(&spec, 99).unwrap();
        assert_eq!(a.agents.len(), b.agents.len());
        assert_eq!(a.config.reserve.to_bits(), b.config.reserve.to_bits());
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            assert_eq!(ta.agent_id, tb.agent_id);
            assert_eq!(ta.days.len(), tb.days.len());
            for (da, db) in ta.days.iter().zip(&tb.days) {
                assert_eq!(da.bid.to_bits(), db.bid.to_bits());
                assert_eq!(
                    da.recommended_bid.map(f64::to_bits),
                    db.recommended_bid.map(f64::to_bits)
                );
            }
        }
    }

    #[test]
    fn population_means_track_targets() {
        // long horizon so sampled durations are not clipped by the window
        let spec = SyntheticMarketSpec {
            horizon_days: 1000,
            ..Default::default()
        };
        let mut sums = [0.0f64; 6]; // bids, budgets, reserve, count, duration, rate
        let mut agents_total = 0usize;
        let regions = 120;
        for seed in 0..regions {
            let mut rng = StdRng::seed_from_u64(seed);
            // sample the population only (the scripted day loop is not
            // needed for calibration)
            let (config, agents) = sample_population(&spec, &mut rng).unwrap();
            sums[2] += config.reserve;
            sums[3] += agents.len() as f64;
            agents_total += agents.len();
            for a in &agents {
                sums[0] += a.spec.bid;
                sums[1] += a.spec.monthly_budget / spec.days_in_month as f64;
                sums[4] += (a.spec.end_date - a.spec.start_date).num_days() as f64 + 1.0;
                sums[5] += a.login_rate;
            }
        }
        let per_agent = |x: f64| x / agents_total as f64;
        for (name, mean, target) in [
            ("bids", per_agent(sums[0]), 18.79),
            ("budgets", per_agent(sums[1]), 9.22),
            ("reserve", sums[2] / regions as f64, 13.39),
            ("agents", sums[3] / regions as f64, 10.74),
            ("duration", per_agent(sums[4]), 96.04),
            ("change rate", per_agent(sums[5]), 0.22),
        ] {
            assert!(
                (mean - target).abs() / target < 0.15,
                "{name}: sampled mean {mean} vs target {target}"
            );
        }
    }

    #[test]
    fn follower_ramp_raises_adherence_with_tenure() {
        let spec = SyntheticMarketSpec {
            horizon_days: 120,
            agent_count: TargetDist {
                mean: 6.0,
                std: 0.5,
            },
            policy_mix: PolicyMix {
                fixed: 0.0,
                random_walk: 0.0,
                myopic: 0.0,
                follower: 1.0,
                weekday_aware: 0.0,
            },
            bid_change_rate: TargetDist {
                mean: 0.5,
                std: 0.1,
            },
            follower_ramp: (0.1, 0.3),
            ..Default::default()
        };
        let region = generate_market(&spec, 7).unwrap();
        let curve = crate::regret::adherence_curve(&region.traces, None);
        let months: Vec<f64> = curve
            .overall
            .iter()
            .filter(|p| p.agents >= 2)
            .map(|p| p.fraction)
            .collect();
        assert!(months.len() >= 3, "not enough tenure months: {curve:?}");
        assert!(
            months.last().unwrap() > months.first().unwrap(),
            "adherence should ramp up: {months:?}"
        );
    }
}
