//! Property tests for the engine, pacing and market invariants.

use proptest::prelude::*;

use gspsim_core::engine::{outcomes_dp, outcomes_oracle, FilterVector};
use gspsim_core::market::{Bidder, MarketSnapshot, PositionWeights};
use gspsim_core::pacing::{solve_pacing, SolveOptions};

fn market_from(bids: &[f64], budgets: &[f64], reserve: f64) -> gspsim_core::market::ActiveMarket {
    let bidders = bids
        .iter()
        .zip(budgets)
        .enumerate()
        .map(|(i, (&bid, &budget))| Bidder::new(format!("a{i}"), bid, budget, i as u32))
        .collect();
    MarketSnapshot::new(bidders, reserve, PositionWeights::standard())
        .canonicalize()
        .unwrap()
}

prop_compose! {
    fn arb_market()(n in 1usize..8)(
        bids in prop::collection::vec(0.1f64..50.0, n),
        pis in prop::collection::vec(0.0f64..=1.0, n),
        reserve in 0.1f64..20.0,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        (bids, pis, reserve)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dp_agrees_with_enumeration((bids, pis, reserve) in arb_market()) {
        let m = market_from(&bids, &vec![0.0; bids.len()], reserve);
        let pi = FilterVector::new(pis[..m.len()].to_vec(), &m).unwrap();
        let a = outcomes_dp(&m, &pi).unwrap();
        let b = outcomes_oracle(&m, &pi, None).unwrap();
        for i in 0..m.len() {
            prop_assert!((a.eq[i] - b.eq[i]).abs() < 1e-9);
            prop_assert!((a.ecpm[i] - b.ecpm[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_covariance((bids, pis, reserve) in arb_market(), tau in prop::sample::select(vec![0.5f64, 2.0, 10.0])) {
        let m = market_from(&bids, &vec![0.0; bids.len()], reserve);
        let pi = FilterVector::new(pis[..m.len()].to_vec(), &m).unwrap();
        let base = outcomes_dp(&m, &pi).unwrap();

        let scaled_bids: Vec<f64> = m.bidders().iter().map(|b| b.bid * tau).collect();
        let ms = market_from(&scaled_bids, &vec![0.0; scaled_bids.len()], reserve * tau);
        prop_assert_eq!(ms.len(), m.len());
        let pis2 = FilterVector::new(pi.as_slice().to_vec(), &ms).unwrap();
        let scaled = outcomes_dp(&ms, &pis2).unwrap();
        for i in 0..m.len() {
            prop_assert!((scaled.eq[i] - base.eq[i]).abs() < 1e-9);
            prop_assert!((scaled.ecpm[i] - tau * base.ecpm[i]).abs() < 1e-9 * tau.max(1.0));
        }
    }

    #[test]
    fn share_is_conserved((bids, pis, reserve) in arb_market()) {
        let m = market_from(&bids, &vec![0.0; bids.len()], reserve);
        let pi = FilterVector::new(pis[..m.len()].to_vec(), &m).unwrap();
        let out = outcomes_dp(&m, &pi).unwrap();
        let total: f64 = (0..m.len()).map(|i| out.unconditional_share(i)).sum();
        prop_assert!(total <= 1.0 + 1e-12);
        let max_bid = m.bidders().iter().map(|b| b.bid).fold(0.0, f64::max);
        for i in 0..m.len() {
            prop_assert!(out.eq[i] <= 0.33 + 1e-12);
            prop_assert!(out.ecpm[i] >= -1e-12);
            // the price per impression never exceeds the highest bid
            prop_assert!(out.ecpm[i] <= out.eq[i] * max_bid + 1e-12);
        }
    }

    #[test]
    fn raising_own_bid_weakly_raises_outcomes(
        (bids, pis, reserve) in arb_market(),
        which in 0usize..8,
        bump in 0.1f64..10.0,
    ) {
        let m = market_from(&bids, &vec![0.0; bids.len()], reserve);
        prop_assume!(!m.is_empty());
        let which = which % m.len();
        let pi = FilterVector::new(pis[..m.len()].to_vec(), &m).unwrap();
        let base = outcomes_dp(&m, &pi).unwrap();

        // push one bidder's bid up, keeping everyone else fixed
        let mut bidders: Vec<Bidder> = m.bidders().to_vec();
        let id = bidders[which].id.clone();
        bidders[which].bid += bump;
        let m2 = MarketSnapshot::new(bidders, reserve, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let j = m2.index_of(&id).unwrap();
        // realign pi with the re-sorted order
        let mut pis2 = vec![0.0; m2.len()];
        for (k, b) in m2.bidders().iter().enumerate() {
            let orig = m.index_of(&b.id).unwrap();
            pis2[k] = pi.as_slice()[orig];
        }
        let out2 = outcomes_dp(&m2, &FilterVector::new(pis2, &m2).unwrap()).unwrap();
        prop_assert!(out2.eq[j] >= base.eq[which] - 1e-12);
        prop_assert!(out2.ecpm[j] >= base.ecpm[which] - 1e-9);
    }

    #[test]
    fn canonical_sort_is_permutation_invariant(
        bids in prop::collection::vec(0.1f64..50.0, 1..8),
        seed in any::<u64>(),
    ) {
        let bidders: Vec<Bidder> = bids
            .iter()
            .enumerate()
            .map(|(i, &b)| Bidder::new(format!("a{i}"), b, 0.0, i as u32))
            .collect();
        let sorted1 = MarketSnapshot::new(bidders.clone(), 1.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        // deterministic shuffle of the input order
        let mut shuffled = bidders;
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let sorted2 = MarketSnapshot::new(shuffled, 1.0, PositionWeights::standard())
            .canonicalize()
            .unwrap();
        let ids1: Vec<&str> = sorted1.bidders().iter().map(|b| b.id.as_str()).collect();
        let ids2: Vec<&str> = sorted2.bidders().iter().map(|b| b.id.as_str()).collect();
        prop_assert_eq!(ids1, ids2);
    }

    #[test]
    fn pacing_respects_budgets(
        n in 1usize..7,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let reserve = rng.gen_range(1.0..10.0);
        let bids: Vec<f64> = (0..n).map(|_| reserve + rng.gen_range(0.0..30.0)).collect();
        let budgets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..10.0)).collect();
        let m = market_from(&bids, &budgets, reserve);
        let opts = SolveOptions { tol: 1e-11, max_iter: 3000, ..Default::default() };
        let sol = solve_pacing(&m, &opts).unwrap();
        prop_assume!(sol.converged);
        for i in 0..m.len() {
            let spend = sol.pi.as_slice()[i] * sol.outcomes.ecpm[i];
            prop_assert!(spend <= m.bidders()[i].budget_per_mille + 1e-8);
        }
    }
}
