//! Expected auction outcomes under independent filtering.
//!
//! For a sorted active market and a vector of filtering probabilities, every
//! bidder has a conditional expected impression share `eQ` (share of
//! opportunities won, conditional on not being filtered) and a conditional
//! expected cost `eCPM` (money per 1000 opportunities, same conditioning).
//! Unconditional values multiply by the bidder's own pi.
//!
//! Two routes compute the same table: [`outcomes_dp`] runs in linear time
//! after sorting, and [`outcomes_oracle`] enumerates every filter
//! configuration exactly and serves as the ground-truth cross-check.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{invalid, Error, Result};
use crate::market::{ActiveMarket, MAX_RANKS};

/// Below this distance from 1, a pi is treated as "never filtered" when
/// choosing between the rolling CPM update and the direct price recursion.
const PI_ONE_GUARD: f64 = 1e-12;

/// The rolling CPM update divides by (1 - pi); closer than this it loses
/// precision and the price is recomputed directly.
const PI_ROLLING_GUARD: f64 = 1e-4;

/// Rounding error compounds by 1/(1 - pi) across consecutive rolling
/// updates; once the accumulated amplification passes this bound the price
/// is recomputed directly and the tracker resets.
const MAX_AMPLIFICATION: f64 = 1e3;

/// Remaining probability mass below this cannot move the price at the
/// accuracy the engine promises, so the direct scan stops early (keeping the
/// total work linear) and closes with the reserve.
const NEGLIGIBLE_MASS: f64 = 1e-18;

/// Default cap on active bidders for the enumeration oracle.
pub const DEFAULT_ORACLE_CAP: usize = 20;

/// Per-bidder filtering probabilities, aligned with the canonical order of
/// the market they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterVector {
    pi: Vec<f64>,
}

impl FilterVector {
    pub fn new(pi: Vec<f64>, market: &ActiveMarket) -> Result<Self> {
        if pi.len() != market.len() {
            return Err(invalid(format!(
                "filter vector has {} entries for {} active bidders",
                pi.len(),
                market.len()
            )));
        }
        if pi
            .iter()
            .any(|p| !(0.0..=1.0).contains(p) || !p.is_finite())
        {
            return Err(invalid("filtering probabilities must lie in [0, 1]"));
        }
        Ok(Self { pi })
    }

    pub fn ones(market: &ActiveMarket) -> Self {
        Self {
            pi: vec![1.0; market.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

/// Per-bidder expected outcomes, aligned with the market's canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTable {
    pub eq: Vec<f64>,
    pub ecpm: Vec<f64>,
    pub pi: Vec<f64>,
}

impl OutcomeTable {
    pub fn len(&self) -> usize {
        self.eq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eq.is_empty()
    }

    pub fn unconditional_share(&self, i: usize) -> f64 {
        self.pi[i] * self.eq[i]
    }

    pub fn unconditional_spend(&self, i: usize) -> f64 {
        self.pi[i] * self.ecpm[i]
    }

    fn empty() -> Self {
        Self {
            eq: Vec::new(),
            ecpm: Vec::new(),
            pi: Vec::new(),
        }
    }
}

/// Probability table over "how many of the first k bidders are unfiltered",
/// truncated at MAX_RANKS - 1 survivors (beyond that the bidder below wins
/// nothing). `rows[k][r]` = P(exactly r of bidders 0..k unfiltered), r < 4.
#[derive(Debug, Clone)]
struct RankPrefix {
    rows: Vec<[f64; MAX_RANKS]>,
}

impl RankPrefix {
    fn build(pi: &[f64]) -> Self {
        let mut rows = Vec::with_capacity(pi.len() + 1);
        let mut cur = [0.0; MAX_RANKS];
        cur[0] = 1.0;
        rows.push(cur);
        for &p in pi {
            let mut next = [0.0; MAX_RANKS];
            next[0] = (1.0 - p) * cur[0];
            for r in 1..MAX_RANKS {
                next[r] = (1.0 - p) * cur[r] + p * cur[r - 1];
            }
            rows.push(next);
            cur = next;
        }
        Self { rows }
    }

    /// eQ for a bidder with `k` higher-ranked opponents.
    fn eq_at(&self, k: usize, gamma: &[f64; MAX_RANKS]) -> f64 {
        let row = &self.rows[k];
        (0..MAX_RANKS).map(|r| gamma[r] * row[r]).sum()
    }
}

/// Expected price per impression paid by a bidder whose next lower-ranked
/// opponent is at index `k`: `prices[k]` = E[first unfiltered bid in k..n,
/// falling back to the reserve]. The implicit agent "I+1" bidding the reserve
/// and never filtered closes the recursion.
fn price_suffix(market: &ActiveMarket, pi: &[f64]) -> Vec<f64> {
    let n = market.len();
    let mut prices = vec![market.reserve(); n + 1];
    for k in (0..n).rev() {
        prices[k] = pi[k] * market.bidders()[k].bid + (1.0 - pi[k]) * prices[k + 1];
    }
    prices
}

/// Linear-time computation of eQ and eCPM for every bidder.
///
/// The survivor-count distribution is carried forward by one dynamic-
/// programming row per bidder; the expected price per impression is carried
/// by the rolling update `CPM_i = (CPM_{i-1} - pi_i * b_i) / (1 - pi_i)`,
/// falling back to the direct recursion for the top bidder, for bidders with
/// pi at 1, and whenever the subtraction would lose precision.
pub fn outcomes_dp(market: &ActiveMarket, pi: &FilterVector) -> Result<OutcomeTable> {
    if pi.len() != market.len() {
        return Err(invalid("filter vector not aligned with market"));
    }
    let n = market.len();
    if n == 0 {
        return Ok(OutcomeTable::empty());
    }
    let pis = pi.as_slice();
    let bidders = market.bidders();
    let gamma = market.weights().gamma();
    let reserve = market.reserve();

    let mut eq = vec![0.0; n];
    let mut ecpm = vec![0.0; n];

    // Direct price recursion: expected first unfiltered bid at or below
    // index `j`, scanning until the surviving probability mass is spent.
    let cpm_direct = |j0: usize| -> f64 {
        let mut cpm = 0.0;
        let mut survive_all = 1.0; // P(everyone in j0..j filtered)
        for j in j0..n {
            cpm += survive_all * pis[j] * bidders[j].bid;
            survive_all *= 1.0 - pis[j];
            if survive_all < NEGLIGIBLE_MASS {
                break;
            }
        }
        cpm + survive_all * reserve
    };

    let mut rank = [0.0; MAX_RANKS];
    rank[0] = 1.0;
    let mut cpm_prev = 0.0;
    let mut amplification = 1.0;
    for i in 0..n {
        eq[i] = (0..MAX_RANKS).map(|r| gamma[r] * rank[r]).sum();

        let mut direct = i == 0 || pis[i] >= 1.0 - PI_ONE_GUARD;
        if !direct {
            let shrink = 1.0 - pis[i];
            amplification /= shrink;
            direct = shrink < PI_ROLLING_GUARD || amplification > MAX_AMPLIFICATION;
        }
        let cpm = if direct {
            amplification = 1.0;
            cpm_direct(i + 1)
        } else {
            let rolled = (cpm_prev - pis[i] * bidders[i].bid) / (1.0 - pis[i]);
            if rolled < -1e-9 {
                amplification = 1.0;
                cpm_direct(i + 1)
            } else {
                rolled
            }
        };
        ecpm[i] = eq[i] * cpm;
        cpm_prev = cpm;

        // advance the survivor-count distribution past bidder i
        let p = pis[i];
        let mut next = [0.0; MAX_RANKS];
        next[0] = (1.0 - p) * rank[0];
        for r in 1..MAX_RANKS {
            next[r] = (1.0 - p) * rank[r] + p * rank[r - 1];
        }
        rank = next;
    }

    Ok(OutcomeTable {
        eq,
        ecpm,
        pi: pis.to_vec(),
    })
}

/// Exact expectations by enumerating every opponent filter configuration.
/// Exponential in the bidder count; refuses markets above `cap`
/// ([`DEFAULT_ORACLE_CAP`] when `None`).
pub fn outcomes_oracle(
    market: &ActiveMarket,
    pi: &FilterVector,
    cap: Option<usize>,
) -> Result<OutcomeTable> {
    if pi.len() != market.len() {
        return Err(invalid("filter vector not aligned with market"));
    }
    let cap = cap.unwrap_or(DEFAULT_ORACLE_CAP);
    let n = market.len();
    if n > cap {
        return Err(Error::OracleCap { active: n, cap });
    }
    if n == 0 {
        return Ok(OutcomeTable::empty());
    }
    let pis = pi.as_slice();
    let bidders = market.bidders();
    let gamma = market.weights().gamma();
    let reserve = market.reserve();

    let mut eq = vec![0.0; n];
    let mut ecpm = vec![0.0; n];
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let m = others.len();
        for mask in 0u64..(1u64 << m) {
            let mut weight = 1.0;
            let mut higher = 0usize;
            let mut price = reserve;
            let mut found_lower = false;
            for (bit, &j) in others.iter().enumerate() {
                let unfiltered = mask & (1 << bit) != 0;
                weight *= if unfiltered { pis[j] } else { 1.0 - pis[j] };
                if unfiltered {
                    if j < i {
                        higher += 1;
                    } else if !found_lower {
                        price = bidders[j].bid;
                        found_lower = true;
                    }
                }
            }
            if weight == 0.0 || higher >= MAX_RANKS {
                continue;
            }
            let reward = gamma[higher];
            eq[i] += weight * reward;
            ecpm[i] += weight * reward * price;
        }
    }

    Ok(OutcomeTable {
        eq,
        ecpm,
        pi: pis.to_vec(),
    })
}

/// Precomputed tables for evaluating a hypothetical extra bidder ("probe")
/// against a fixed opponent market without re-running the full engine.
/// The probe is treated as never filtered and loses ties against opponents.
#[derive(Debug, Clone)]
pub struct ProbeTable {
    rank: RankPrefix,
    prices: Vec<f64>,
    opponent_bids: Vec<f64>,
    reserve: f64,
    gamma: [f64; MAX_RANKS],
}

impl ProbeTable {
    pub fn build(opponents: &ActiveMarket, pi: &FilterVector) -> Result<Self> {
        if pi.len() != opponents.len() {
            return Err(invalid("filter vector not aligned with market"));
        }
        Ok(Self {
            rank: RankPrefix::build(pi.as_slice()),
            prices: price_suffix(opponents, pi.as_slice()),
            opponent_bids: opponents.bidders().iter().map(|b| b.bid).collect(),
            reserve: opponents.reserve(),
            gamma: *opponents.weights().gamma(),
        })
    }

    /// Index the probe would occupy: opponents with bid >= probe rank above it.
    fn insertion(&self, bid: f64) -> usize {
        self.opponent_bids.partition_point(|&b| b >= bid)
    }

    /// (eQ, eCPM) of an unfiltered probe bidding `bid`. A probe below the
    /// reserve is inactive and gets (0, 0).
    pub fn eval(&self, bid: f64) -> (f64, f64) {
        if bid < self.reserve {
            return (0.0, 0.0);
        }
        let k = self.insertion(bid);
        let eq = self.rank.eq_at(k, &self.gamma);
        (eq, eq * self.prices[k])
    }
}

/// Realized allocation of one page view: which bidders were shown and the
/// per-mille price each pays.
#[derive(Debug, Clone, PartialEq)]
pub struct PageOutcome {
    /// (bidder index in canonical order, per-mille price charged)
    pub shown: Vec<(usize, f64)>,
}

impl PageOutcome {
    /// Money charged to bidder `i` on this page: price is per-mille, one
    /// impression delivered per shown slot.
    pub fn spend(&self, i: usize) -> f64 {
        self.shown
            .iter()
            .filter(|(j, _)| *j == i)
            .map(|(_, p)| p / 1000.0)
            .sum()
    }
}

/// Sample the auction for one page view: eligibility drawn independently per
/// bidder, survivors ranked, the rank-j survivor shown with probability
/// 3*gamma[j] (exactly three of the top four shown when four survive), each
/// shown bidder charged the next surviving bid or the reserve.
pub fn sample_impression(
    market: &ActiveMarket,
    pi: &FilterVector,
    rng: &mut StdRng,
) -> Result<PageOutcome> {
    if pi.len() != market.len() {
        return Err(invalid("filter vector not aligned with market"));
    }
    let bidders = market.bidders();
    let survivors: Vec<usize> = (0..market.len())
        .filter(|&i| rng.gen::<f64>() < pi.as_slice()[i])
        .collect();

    let price_below = |rank_idx: usize| -> f64 {
        survivors
            .get(rank_idx + 1)
            .map(|&j| bidders[j].bid)
            .unwrap_or(market.reserve())
    };

    let weights = market.weights();
    let mut shown = Vec::new();
    if survivors.len() >= MAX_RANKS {
        // exactly three of the top four appear; rank j is omitted with
        // probability 1 - 3*gamma[j], which sums to one over the four ranks
        let mut u = rng.gen::<f64>();
        let mut omitted = MAX_RANKS - 1;
        for j in 0..MAX_RANKS {
            let p_omit = 1.0 - weights.shown_probability(j);
            if u < p_omit {
                omitted = j;
                break;
            }
            u -= p_omit;
        }
        for j in 0..MAX_RANKS {
            if j != omitted {
                shown.push((survivors[j], price_below(j)));
            }
        }
    } else {
        for (j, &idx) in survivors.iter().enumerate() {
            if rng.gen::<f64>() < weights.shown_probability(j) {
                shown.push((idx, price_below(j)));
            }
        }
    }
    Ok(PageOutcome { shown })
}

/// Convenience wrapper seeding its own generator.
pub fn sample_impressions(
    market: &ActiveMarket,
    pi: &FilterVector,
    seed: u64,
    pages: usize,
) -> Result<Vec<PageOutcome>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..pages)
        .map(|_| sample_impression(market, pi, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Bidder, MarketSnapshot, PositionWeights};

    fn market(bids: &[f64], reserve: f64) -> ActiveMarket {
        let bidders = bids
            .iter()
            .enumerate()
            .map(|(i, &b)| Bidder::new(format!("a{i}"), b, 0.0, i as u32))
            .collect();
        MarketSnapshot::new(bidders, reserve, PositionWeights::standard())
            .canonicalize()
            .unwrap()
    }

    fn filters(m: &ActiveMarket, pi: &[f64]) -> FilterVector {
        FilterVector::new(pi.to_vec(), m).unwrap()
    }

    #[test]
    fn single_bidder() {
        let m = market(&[30.0], 10.0);
        let out = outcomes_dp(&m, &filters(&m, &[1.0])).unwrap();
        assert!((out.eq[0] - 0.33).abs() < 1e-15);
        assert!((out.ecpm[0] - 3.3).abs() < 1e-12);
    }

    #[test]
    fn two_bidders_no_filtering() {
        let m = market(&[30.0, 20.0], 10.0);
        let out = outcomes_dp(&m, &filters(&m, &[1.0, 1.0])).unwrap();
        assert!((out.eq[0] - 0.33).abs() < 1e-15);
        assert!((out.eq[1] - 0.28).abs() < 1e-15);
        assert!((out.ecpm[0] - 6.6).abs() < 1e-12);
        assert!((out.ecpm[1] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn three_bidders_partial_filtering() {
        // Bidder 1 pays 0.5*20 + 0.5*15 = 17.5 per impression.
        let m = market(&[30.0, 20.0, 15.0], 10.0);
        let pi = filters(&m, &[1.0, 0.5, 1.0]);
        for out in [
            outcomes_dp(&m, &pi).unwrap(),
            outcomes_oracle(&m, &pi, None).unwrap(),
        ] {
            assert!((out.eq[0] - 0.33).abs() < 1e-12);
            assert!((out.eq[1] - 0.28).abs() < 1e-12);
            assert!((out.eq[2] - 0.25).abs() < 1e-12);
            assert!((out.ecpm[0] - 5.775).abs() < 1e-12);
            assert!((out.ecpm[1] - 4.2).abs() < 1e-12);
            assert!((out.ecpm[2] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_empty_market() {
        let m = market(&[], 10.0);
        let out = outcomes_oracle(&m, &filters(&m, &[]), None).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn oracle_refuses_above_cap() {
        let bids: Vec<f64> = (0..25).map(|i| 20.0 + i as f64).collect();
        let m = market(&bids, 10.0);
        let pi = FilterVector::ones(&m);
        match outcomes_oracle(&m, &pi, None) {
            Err(Error::OracleCap { active: 25, cap }) => assert_eq!(cap, DEFAULT_ORACLE_CAP),
            other => panic!("expected cap refusal, got {other:?}"),
        }
    }

    #[test]
    fn dp_matches_oracle_on_random_markets() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let reserve = rng.gen_range(1.0..20.0);
            let bids: Vec<f64> = (0..n).map(|_| reserve + rng.gen_range(0.0..40.0)).collect();
            let m = market(&bids, reserve);
            let pis: Vec<f64> = (0..m.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let pi = filters(&m, &pis);
            let a = outcomes_dp(&m, &pi).unwrap();
            let b = outcomes_oracle(&m, &pi, None).unwrap();
            for i in 0..m.len() {
                assert!((a.eq[i] - b.eq[i]).abs() < 1e-9, "eq mismatch at {i}");
                assert!((a.ecpm[i] - b.ecpm[i]).abs() < 1e-9, "ecpm mismatch at {i}");
            }
        }
    }

    #[test]
    fn rolling_update_guard_near_one() {
        let m = market(&[30.0, 25.0, 20.0, 15.0], 10.0);
        for eps in [0.0, 1e-13, 1e-10, 1e-7] {
            let pis = [1.0, 1.0 - eps, 0.7, 1.0 - eps];
            let pi = filters(&m, &pis);
            let a = outcomes_dp(&m, &pi).unwrap();
            let b = outcomes_oracle(&m, &pi, None).unwrap();
            for i in 0..m.len() {
                assert!((a.ecpm[i] - b.ecpm[i]).abs() < 1e-9, "eps={eps} i={i}");
            }
        }
    }

    #[test]
    fn share_conservation() {
        let m = market(&[30.0, 25.0, 20.0, 15.0, 12.0], 10.0);
        let pi = FilterVector::ones(&m);
        let out = outcomes_dp(&m, &pi).unwrap();
        let total: f64 = (0..m.len()).map(|i| out.unconditional_share(i)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probe_matches_inserted_bidder() {
        let m = market(&[30.0, 20.0, 15.0], 10.0);
        let pi = filters(&m, &[0.8, 0.5, 0.9]);
        let probe = ProbeTable::build(&m, &pi).unwrap();
        for bid in [11.0, 17.0, 25.0, 40.0] {
            let (eq, ecpm) = probe.eval(bid);
            // insert a real bidder and compare against the engine
            let mut bidders: Vec<Bidder> = m.bidders().to_vec();
            bidders.push(Bidder::new("probe", bid, 0.0, 99));
            let m2 = MarketSnapshot::new(bidders, 10.0, PositionWeights::standard())
                .canonicalize()
                .unwrap();
            let k = m2.index_of("probe").unwrap();
            let mut pis2: Vec<f64> = pi.as_slice().to_vec();
            pis2.insert(k, 1.0);
            let out = outcomes_dp(&m2, &filters(&m2, &pis2)).unwrap();
            assert!((eq - out.eq[k]).abs() < 1e-12, "bid {bid}");
            assert!((ecpm - out.ecpm[k]).abs() < 1e-12, "bid {bid}");
        }
        // below the reserve the probe is inactive
        assert_eq!(probe.eval(9.0), (0.0, 0.0));
    }

    #[test]
    fn sampler_zero_pi_spends_nothing() {
        let m = market(&[30.0, 20.0], 10.0);
        let pi = filters(&m, &[0.0, 0.0]);
        for page in sample_impressions(&m, &pi, 3, 100).unwrap() {
            assert!(page.shown.is_empty());
        }
    }

    #[test]
    fn sampler_single_bidder_frequency() {
        let m = market(&[30.0], 10.0);
        let pi = FilterVector::ones(&m);
        let pages = sample_impressions(&m, &pi, 11, 200_000).unwrap();
        let freq = pages.iter().filter(|p| !p.shown.is_empty()).count() as f64 / pages.len() as f64;
        assert!((freq - 0.99).abs() < 0.005, "freq {freq}");
    }
}
