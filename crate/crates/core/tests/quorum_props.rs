// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

use flashbft::ids::ReplicaId;
use flashbft::quorum::{compute_weight_config, fast_threshold, identity_ranking, Mode, ModeThresholds, QuorumScheme, WeightConfig};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn ids(v: &[u16]) -> Vec<ReplicaId> {
    v.iter().map(|&i| ReplicaId(i)).collect()
}

/// n, t_eff and a shuffled ranking.
fn config() -> impl Strategy<Value = (WeightConfig, Vec<ReplicaId>)> {
    (4usize..=40)
        .prop_flat_map(|n| (Just(n), 1..=(n - 1) / 3, Just((0..n as u16).collect::<Vec<_>>()).prop_shuffle()))
        .prop_map(|(n, t, order)| {
            let ranking = ids(&order);
            (compute_weight_config(n, t, &ranking).unwrap(), ranking)
        })
}

/// Members in ascending weight order.
fn lightest_first(cfg: &WeightConfig) -> Vec<ReplicaId> {
    let mut v = cfg.members().to_vec();
    v.sort_by_key(|r| cfg.units_of(*r));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn two_quorums_share_more_than_t((cfg, _) in config(), pick in any::<u64>()) {
        // Adversarial pair: the heaviest replicas in Q1 ∪ Q2 split so that the overlap is minimal.
        let n = cfg.n;
        let heavy_first: Vec<ReplicaId> = lightest_first(&cfg).into_iter().rev().collect();
        let mut q1 = Vec::new();
        for r in &heavy_first {
            if cfg.is_quorum(&q1) { break; }
            q1.push(*r);
        }
        let mut q2: Vec<ReplicaId> = heavy_first.iter().filter(|r| !q1.contains(r)).copied().collect();
        let mut i = (pick as usize) % n;
        while !cfg.is_quorum(&q2) {
            let r = heavy_first[i % n];
            if !q2.contains(&r) { q2.push(r); }
            i += 1;
        }
        let shared = q1.iter().filter(|r| q2.contains(r)).count();
        prop_assert!(shared > cfg.t, "n={n} t={} shared {shared}", cfg.t);
    }

    #[test]
    fn any_t_crashes_leave_a_quorum((cfg, _) in config()) {
        let heaviest: Vec<ReplicaId> = lightest_first(&cfg).into_iter().rev().take(cfg.t).collect();
        let rest: Vec<ReplicaId> = cfg.members().iter().filter(|r| !heaviest.contains(r)).copied().collect();
        prop_assert!(cfg.is_quorum(&rest));
    }

    #[test]
    fn cardinality_bounds_match_greedy_extremes((cfg, _) in config()) {
        prop_assert_eq!(cfg.min_quorum_cardinality(), 2 * cfg.t + 1);
        prop_assert_eq!(cfg.max_quorum_cardinality(), cfg.n - cfg.t);
        let mut light = Vec::new();
        for r in lightest_first(&cfg) {
            if cfg.is_quorum(&light) { break; }
            light.push(r);
        }
        prop_assert_eq!(light.len(), cfg.n - cfg.t);
    }

    #[test]
    fn ranking_decides_only_who_is_heavy((cfg, ranking) in config()) {
        let high = &ranking[..2 * cfg.t];
        for r in cfg.members() {
            let expected = if high.contains(r) { cfg.vmax_units } else { cfg.low_units };
            prop_assert_eq!(cfg.units_of(*r), expected);
        }
        prop_assert_eq!(cfg.total_units(), 2 * cfg.t as u64 * cfg.vmax_units + (cfg.n - 2 * cfg.t) as u64 * cfg.low_units);
    }

    #[test]
    fn random_subsets_agree_with_unit_arithmetic((cfg, _) in config(), set in subsequence((0..40u16).collect::<Vec<_>>(), 0..40)) {
        let set: Vec<ReplicaId> = ids(&set).into_iter().filter(|r| r.idx() < cfg.n).collect();
        let units: u64 = set.iter().map(|r| cfg.units_of(*r)).sum();
        prop_assert_eq!(cfg.is_quorum(&set), units >= cfg.quorum_units);
    }
}

#[test]
fn n21_fast_accept_arithmetic() {
    let cfg = ModeThresholds::new(Mode::Fast, QuorumScheme::Wheat, &identity_ranking(21), 6, &identity_ranking(21)).unwrap();
    assert_eq!(cfg.t_eff, fast_threshold(6));
    let high: Vec<ReplicaId> = cfg.config.high().to_vec();
    let low: Vec<ReplicaId> = cfg.config.members().iter().filter(|r| !high.contains(r)).copied().collect();
    let six_plus_one: Vec<ReplicaId> = high[..6].iter().chain(&low[..1]).copied().collect();
    assert_eq!(cfg.config.weight_of(&six_plus_one), 87);
    assert!(cfg.config.is_quorum(&six_plus_one));
    assert!(!cfg.config.is_quorum(&high[..6]));
    assert_eq!(cfg.config.weight_of(&low[..7]), 21);
    assert!(!cfg.config.is_quorum(&low[..7]));
    assert_eq!(cfg.fast_final_count(), 17);
    assert_eq!(cfg.config.weak_units(), 45);
}

#[test]
fn conservative_final_weights() {
    let n21 = compute_weight_config(21, 6, &identity_ranking(21)).unwrap();
    assert_eq!(n21.quorum_units, 102);
    let n4 = compute_weight_config(4, 1, &identity_ranking(4)).unwrap();
    assert!(n4.is_quorum(&ids(&[0, 2, 3])));
    assert!(!n4.is_quorum(&ids(&[1, 3])));
}

#[test]
fn egalitarian_matches_majority_rule() {
    for n in 4..=30 {
        for t in 1..=(n - 1) / 3 {
            let cfg = WeightConfig::egalitarian(&identity_ranking(n), t).unwrap();
            let need = (n + t + 1).div_ceil(2);
            assert!(cfg.is_quorum(&identity_ranking(n)[..need]));
            assert!(!cfg.is_quorum(&identity_ranking(n)[..need - 1]));
        }
    }
}
