// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Bimodal weighted quorums and the reply thresholds derived from them.
//!
//! Weights are integer units scaled by the effective threshold `t`: a low
//! replica holds `t` units and each of the `2t` best-ranked replicas holds
//! `t + Δ` units, where `Δ = n - 3t - 1`. A quorum needs
//! `t (2t + 2Δ + 1)` units.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::ReplicaId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuorumScheme {
    /// Bimodal weights with `2t` high-weight replicas.
    Wheat,
    /// Classical equal weights with quorums of `⌈(n + t + 1) / 2⌉`.
    Egalitarian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Conservative,
    Fast,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Conservative => "conservative",
            Mode::Fast => "fast",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuorumError {
    #[error("n = {n} cannot tolerate t = {t} (needs n >= 3t + 1)")]
    Infeasible { n: usize, t: usize },
    #[error("ranking is not a permutation of the membership")]
    BadRanking,
    #[error("membership contains duplicate replica ids")]
    DuplicateMember,
}

/// Optimal resilience for `n` replicas.
pub fn optimal_threshold(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Fast-mode threshold `⌈t / 2⌉`.
pub fn fast_threshold(t: usize) -> usize {
    t.div_ceil(2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightConfig {
    pub scheme: QuorumScheme,
    pub n: usize,
    pub t: usize,
    pub delta: usize,
    pub vmax_units: u64,
    pub low_units: u64,
    pub quorum_units: u64,
    members: Vec<ReplicaId>,
    high: Vec<ReplicaId>,
    units: Vec<u64>,
}

fn check_members(members: &[ReplicaId]) -> Result<(), QuorumError> {
    let set: BTreeSet<_> = members.iter().collect();
    if set.len() != members.len() {
        return Err(QuorumError::DuplicateMember);
    }
    Ok(())
}

fn units_table(members: &[ReplicaId]) -> Vec<u64> {
    let len = members.iter().map(|r| r.idx() + 1).max().unwrap_or(0);
    vec![0; len]
}

impl WeightConfig {
    /// Bimodal weights over an arbitrary membership; the first `2t` entries
    /// of `ranking` receive the high weight.
    pub fn wheat(members: &[ReplicaId], t: usize, ranking: &[ReplicaId]) -> Result<Self, QuorumError> {
        check_members(members)?;
        let n = members.len();
        if n < 3 * t + 1 {
            return Err(QuorumError::Infeasible { n, t });
        }
        let ranked: BTreeSet<_> = ranking.iter().collect();
        if ranking.len() != n || ranked.len() != n || !members.iter().all(|m| ranked.contains(m)) {
            return Err(QuorumError::BadRanking);
        }
        let delta = n - 3 * t - 1;
        let (low_units, vmax_units, quorum_units) = if t == 0 {
            (1, 1, 1)
        } else {
            let t64 = t as u64;
            let d64 = delta as u64;
            (t64, t64 + d64, t64 * (2 * t64 + 2 * d64 + 1))
        };
        let mut units = units_table(members);
        for m in members {
            units[m.idx()] = low_units;
        }
        let mut high: Vec<ReplicaId> = ranking[..2 * t].to_vec();
        for h in &high {
            units[h.idx()] = vmax_units;
        }
        high.sort();
        let mut members = members.to_vec();
        members.sort();
        Ok(Self { scheme: QuorumScheme::Wheat, n, t, delta, vmax_units, low_units, quorum_units, members, high, units })
    }

    /// Equal weights with quorums of `⌈(n + t + 1) / 2⌉` replicas.
    pub fn egalitarian(members: &[ReplicaId], t: usize) -> Result<Self, QuorumError> {
        check_members(members)?;
        let n = members.len();
        if n < 3 * t + 1 {
            return Err(QuorumError::Infeasible { n, t });
        }
        let mut units = units_table(members);
        for m in members {
            units[m.idx()] = 1;
        }
        let mut members = members.to_vec();
        members.sort();
        Ok(Self {
            scheme: QuorumScheme::Egalitarian,
            n,
            t,
            delta: n - 3 * t - 1,
            vmax_units: 1,
            low_units: 1,
            quorum_units: (n + t + 1).div_ceil(2) as u64,
            members,
            high: Vec::new(),
            units,
        })
    }

    pub fn members(&self) -> &[ReplicaId] {
        &self.members
    }

    /// High-weight replicas, ascending.
    pub fn high(&self) -> &[ReplicaId] {
        &self.high
    }

    pub fn is_member(&self, r: ReplicaId) -> bool {
        self.units_of(r) > 0
    }

    pub fn units_of(&self, r: ReplicaId) -> u64 {
        self.units.get(r.idx()).copied().unwrap_or(0)
    }

    pub fn total_units(&self) -> u64 {
        self.members.iter().map(|&m| self.units_of(m)).sum()
    }

    /// Units held by a set of replicas; duplicates and non-members add nothing.
    pub fn weight_of<'a>(&self, set: impl IntoIterator<Item = &'a ReplicaId>) -> u64 {
        let distinct: BTreeSet<ReplicaId> = set.into_iter().copied().collect();
        distinct.iter().map(|&r| self.units_of(r)).sum()
    }

    pub fn is_quorum<'a>(&self, set: impl IntoIterator<Item = &'a ReplicaId>) -> bool {
        self.weight_of(set) >= self.quorum_units
    }

    /// Units a `t`-faulty coalition can hold at most.
    pub fn max_faulty_units(&self) -> u64 {
        let mut w: Vec<u64> = self.members.iter().map(|&m| self.units_of(m)).collect();
        w.sort_unstable_by(|a, b| b.cmp(a));
        w.iter().take(self.t).sum()
    }

    /// Reply weight for the weak level: `t·V_max + 1` votes.
    pub fn weak_units(&self) -> u64 {
        match self.scheme {
            QuorumScheme::Egalitarian => self.t as u64 + 1,
            QuorumScheme::Wheat if self.t == 0 => 1,
            QuorumScheme::Wheat => self.t as u64 * self.vmax_units + self.low_units,
        }
    }

    /// Smallest quorum, found by taking the heaviest replicas first.
    pub fn min_quorum_cardinality(&self) -> usize {
        self.greedy_cardinality(true)
    }

    /// Largest minimal quorum, found by taking the lightest replicas first.
    pub fn max_quorum_cardinality(&self) -> usize {
        self.greedy_cardinality(false)
    }

    fn greedy_cardinality(&self, heaviest_first: bool) -> usize {
        let mut w: Vec<u64> = self.members.iter().map(|&m| self.units_of(m)).collect();
        w.sort_unstable();
        if heaviest_first {
            w.reverse();
        }
        let mut acc = 0;
        for (i, u) in w.iter().enumerate() {
            acc += u;
            if acc >= self.quorum_units {
                return i + 1;
            }
        }
        usize::MAX
    }

    pub fn descriptor(&self) -> QuorumDesc {
        QuorumDesc { scheme: self.scheme, t: self.t, members: self.members.clone(), high: self.high.clone() }
    }
}

/// Weight config over ids `0..n` with the given ranking.
pub fn compute_weight_config(n: usize, t_eff: usize, ranking: &[ReplicaId]) -> Result<WeightConfig, QuorumError> {
    let members: Vec<ReplicaId> = (0..n as u16).map(ReplicaId).collect();
    WeightConfig::wheat(&members, t_eff, ranking)
}

/// Id-ordered ranking `0..n`.
pub fn identity_ranking(n: usize) -> Vec<ReplicaId> {
    (0..n as u16).map(ReplicaId).collect()
}

/// Self-contained description of a weight config, carried inside proofs so
/// they can be checked from the evidence alone.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuorumDesc {
    pub scheme: QuorumScheme,
    pub t: usize,
    pub members: Vec<ReplicaId>,
    pub high: Vec<ReplicaId>,
}

impl QuorumDesc {
    pub fn build(&self) -> Result<WeightConfig, QuorumError> {
        match self.scheme {
            QuorumScheme::Egalitarian => WeightConfig::egalitarian(&self.members, self.t),
            QuorumScheme::Wheat => {
                if self.high.len() != 2 * self.t {
                    return Err(QuorumError::BadRanking);
                }
                let mut ranking = self.high.clone();
                ranking.extend(self.members.iter().filter(|m| !self.high.contains(m)));
                WeightConfig::wheat(&self.members, self.t, &ranking)
            }
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u8(match self.scheme {
            QuorumScheme::Wheat => 0,
            QuorumScheme::Egalitarian => 1,
        });
        e.u16(self.t as u16);
        e.u16(self.members.len() as u16);
        for m in &self.members {
            e.u16(m.0);
        }
        e.u16(self.high.len() as u16);
        for h in &self.high {
            e.u16(h.0);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let scheme = match d.u8()? {
            0 => QuorumScheme::Wheat,
            1 => QuorumScheme::Egalitarian,
            tag => return Err(DecodeError::BadTag { what: "scheme", tag }),
        };
        let t = d.u16()? as usize;
        let nm = d.u16()? as usize;
        let members = (0..nm).map(|_| d.u16().map(ReplicaId)).collect::<Result<_, _>>()?;
        let nh = d.u16()? as usize;
        let high = (0..nh).map(|_| d.u16().map(ReplicaId)).collect::<Result<_, _>>()?;
        Ok(Self { scheme, t, members, high })
    }
}

/// Thresholds in force for one mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeThresholds {
    pub mode: Mode,
    pub t_eff: usize,
    pub config: WeightConfig,
}

impl ModeThresholds {
    /// Builds the thresholds for `mode` given the conservative threshold `t`.
    pub fn new(
        mode: Mode,
        scheme: QuorumScheme,
        members: &[ReplicaId],
        t: usize,
        ranking: &[ReplicaId],
    ) -> Result<Self, QuorumError> {
        let t_eff = match mode {
            Mode::Conservative => t,
            Mode::Fast => fast_threshold(t),
        };
        let config = match scheme {
            QuorumScheme::Wheat => WeightConfig::wheat(members, t_eff, ranking)?,
            QuorumScheme::Egalitarian => WeightConfig::egalitarian(members, t_eff)?,
        };
        Ok(Self { mode, t_eff, config })
    }

    /// Matching-reply count that finalizes a fast-mode operation.
    pub fn fast_final_count(&self) -> usize {
        self.config.n.saturating_sub(self.t_eff + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u16]) -> Vec<ReplicaId> {
        v.iter().copied().map(ReplicaId).collect()
    }

    #[test]
    fn n21_t6_units() {
        let c = compute_weight_config(21, 6, &identity_ranking(21)).unwrap();
        assert_eq!((c.delta, c.vmax_units, c.low_units, c.quorum_units), (2, 8, 6, 102));
        assert_eq!(c.min_quorum_cardinality(), 13);
        assert_eq!(c.max_quorum_cardinality(), 15);
        assert_eq!(c.total_units(), 6 * (21 + 4));
    }

    #[test]
    fn n21_t3_units_and_quorum_examples() {
        let c = compute_weight_config(21, 3, &identity_ranking(21)).unwrap();
        assert_eq!((c.delta, c.vmax_units, c.low_units, c.quorum_units), (11, 14, 3, 87));
        assert_eq!(c.min_quorum_cardinality(), 7);
        assert_eq!(c.max_quorum_cardinality(), 18);
        assert!(c.is_quorum(&ids(&[0, 1, 2, 3, 4, 5, 20])));
        assert!(!c.is_quorum(&ids(&[0, 1, 2, 3, 4, 5])));
        assert!(c.is_quorum(&identity_ranking(21)));
        assert_eq!(c.weak_units(), 45);
    }

    #[test]
    fn n4_t1_is_egalitarian() {
        let c = compute_weight_config(4, 1, &identity_ranking(4)).unwrap();
        assert_eq!(c.delta, 0);
        assert!(c.members().iter().all(|&m| c.units_of(m) == 1));
        assert_eq!((c.min_quorum_cardinality(), c.max_quorum_cardinality()), (3, 3));
    }

    #[test]
    fn infeasible_and_bad_ranking() {
        assert_eq!(
            compute_weight_config(9, 3, &identity_ranking(9)),
            Err(QuorumError::Infeasible { n: 9, t: 3 })
        );
        assert_eq!(compute_weight_config(4, 1, &ids(&[0, 1, 2, 2])), Err(QuorumError::BadRanking));
    }

    #[test]
    fn ranking_selects_high_set() {
        let c = compute_weight_config(7, 2, &ids(&[6, 5, 4, 3, 0, 1, 2])).unwrap();
        assert_eq!(c.high(), &ids(&[3, 4, 5, 6])[..]);
        assert_eq!(c.units_of(ReplicaId(6)), 2);
        assert_eq!(c.units_of(ReplicaId(0)), 2);
        let c = compute_weight_config(10, 2, &ids(&[9, 8, 7, 6, 0, 1, 2, 3, 4, 5])).unwrap();
        assert_eq!(c.units_of(ReplicaId(9)), 5);
        assert_eq!(c.units_of(ReplicaId(0)), 2);
    }

    #[test]
    fn sparse_membership_after_expulsion() {
        let members = ids(&[0, 2, 3, 5, 6, 8, 9]);
        let c = WeightConfig::wheat(&members, 2, &members).unwrap();
        assert_eq!(c.units_of(ReplicaId(1)), 0);
        assert_eq!(c.high(), &ids(&[0, 2, 3, 5])[..]);
        assert!(!c.is_member(ReplicaId(4)));
    }

    #[test]
    fn egalitarian_baseline_quorum() {
        let c = WeightConfig::egalitarian(&identity_ranking(21), 6).unwrap();
        assert_eq!(c.quorum_units, 14);
        assert_eq!(c.min_quorum_cardinality(), 14);
        assert_eq!(c.weak_units(), 7);
    }

    #[test]
    fn descriptor_round_trip() {
        let c = compute_weight_config(10, 2, &ids(&[9, 8, 7, 6, 0, 1, 2, 3, 4, 5])).unwrap();
        let d = c.descriptor();
        assert_eq!(d.build().unwrap(), c);
        let mut e = Encoder::new();
        d.encode(&mut e);
        let buf = e.finish();
        let mut dec = Decoder::new(&buf);
        assert_eq!(QuorumDesc::decode(&mut dec).unwrap(), d);
    }

    #[test]
    fn fast_thresholds() {
        assert_eq!(fast_threshold(6), 3);
        assert_eq!(fast_threshold(3), 2);
        assert_eq!(fast_threshold(1), 1);
        let m = identity_ranking(21);
        let f = ModeThresholds::new(Mode::Fast, QuorumScheme::Wheat, &m, 6, &m).unwrap();
        assert_eq!(f.t_eff, 3);
        assert_eq!(f.config.delta, 11);
        assert_eq!(f.fast_final_count(), 17);
    }
}
