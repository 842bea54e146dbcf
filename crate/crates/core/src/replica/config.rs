// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Replicated cluster configuration: membership, tuned placement, leaders.

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::{Regency, ReplicaId};
use crate::messages::{decode_ids, encode_ids, Tuning, ViewDesc};
use crate::quorum::{fast_threshold, optimal_threshold, Mode, ModeThresholds, QuorumScheme};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterConfig {
    pub epoch: u64,
    pub scheme: QuorumScheme,
    pub members: Vec<ReplicaId>,
    /// Conservative threshold. Fixed by the deployment until an expulsion.
    pub t: usize,
    pub cons_ranking: Vec<ReplicaId>,
    pub fast_ranking: Vec<ReplicaId>,
    pub cons_leader: ReplicaId,
    pub fast_leader: ReplicaId,
    /// Regency in which the tuned leaders apply; later regencies rotate.
    pub tuned_at: Regency,
}

impl ClusterConfig {
    pub fn initial(members: Vec<ReplicaId>, t: usize, scheme: QuorumScheme) -> Self {
        let first = members[0];
        Self {
            epoch: 0,
            scheme,
            cons_ranking: members.clone(),
            fast_ranking: members.clone(),
            members,
            t,
            cons_leader: first,
            fast_leader: first,
            tuned_at: 0,
        }
    }

    pub fn t_fast(&self) -> usize {
        fast_threshold(self.t)
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn is_member(&self, r: ReplicaId) -> bool {
        self.members.contains(&r)
    }

    pub fn thresholds(&self, mode: Mode) -> ModeThresholds {
        let ranking = match mode {
            Mode::Conservative => &self.cons_ranking,
            Mode::Fast => &self.fast_ranking,
        };
        ModeThresholds::new(mode, self.scheme, &self.members, self.t, ranking).expect("configuration is feasible")
    }

    /// Leader of a regency. In the tuned regency the mode's tuned leader
    /// leads; every later regency rotates round-robin from the conservative one.
    pub fn leader(&self, regency: Regency, mode: Mode) -> ReplicaId {
        if regency == self.tuned_at {
            return match mode {
                Mode::Conservative => self.cons_leader,
                Mode::Fast => self.fast_leader,
            };
        }
        let n = self.members.len() as u64;
        let pos = self.members.iter().position(|&m| m == self.cons_leader).unwrap_or(0) as u64;
        let steps = regency.saturating_sub(self.tuned_at) % n;
        self.members[((pos + steps) % n) as usize]
    }

    pub fn valid_tuning(&self, t: &Tuning) -> bool {
        let perm = |r: &[ReplicaId]| {
            let mut a = r.to_vec();
            a.sort();
            a == self.members
        };
        perm(&t.cons_ranking) && perm(&t.fast_ranking) && self.is_member(t.cons_leader) && self.is_member(t.fast_leader)
    }

    pub fn apply_tuning(&mut self, t: &Tuning, regency: Regency) {
        self.cons_ranking = t.cons_ranking.clone();
        self.fast_ranking = t.fast_ranking.clone();
        self.cons_leader = t.cons_leader;
        self.fast_leader = t.fast_leader;
        self.tuned_at = regency;
        self.epoch += 1;
    }

    /// Removes culprits and recomputes the threshold. Returns false if the
    /// expulsion would leave no feasible membership.
    pub fn expel(&mut self, culprits: &[ReplicaId]) -> bool {
        let remaining: Vec<ReplicaId> = self.members.iter().copied().filter(|m| !culprits.contains(m)).collect();
        if remaining.len() < 1 || remaining.len() == self.members.len() {
            return false;
        }
        let next_alive = |leader: ReplicaId| -> ReplicaId {
            if remaining.contains(&leader) {
                return leader;
            }
            let pos = self.members.iter().position(|&m| m == leader).unwrap_or(0);
            (1..=self.members.len())
                .map(|k| self.members[(pos + k) % self.members.len()])
                .find(|m| remaining.contains(m))
                .expect("remaining is non-empty")
        };
        self.cons_leader = next_alive(self.cons_leader);
        self.fast_leader = next_alive(self.fast_leader);
        self.cons_ranking.retain(|m| remaining.contains(m));
        self.fast_ranking.retain(|m| remaining.contains(m));
        self.t = optimal_threshold(remaining.len());
        self.members = remaining;
        self.epoch += 1;
        true
    }

    pub fn view(&self) -> ViewDesc {
        ViewDesc {
            epoch: self.epoch,
            cons: self.thresholds(Mode::Conservative).config.descriptor(),
            fast: self.thresholds(Mode::Fast).config.descriptor(),
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.epoch).u8(matches!(self.scheme, QuorumScheme::Egalitarian) as u8).u16(self.t as u16);
        encode_ids(e, &self.members);
        encode_ids(e, &self.cons_ranking);
        encode_ids(e, &self.fast_ranking);
        e.u16(self.cons_leader.0).u16(self.fast_leader.0).u64(self.tuned_at);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let epoch = d.u64()?;
        let scheme = if d.u8()? == 1 { QuorumScheme::Egalitarian } else { QuorumScheme::Wheat };
        let t = d.u16()? as usize;
        Ok(Self {
            epoch,
            scheme,
            t,
            members: decode_ids(d)?,
            cons_ranking: decode_ids(d)?,
            fast_ranking: decode_ids(d)?,
            cons_leader: ReplicaId(d.u16()?),
            fast_leader: ReplicaId(d.u16()?),
            tuned_at: d.u64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quorum::identity_ranking;

    #[test]
    fn rotation_after_tuned_regency() {
        let mut c = ClusterConfig::initial(identity_ranking(4), 1, QuorumScheme::Wheat);
        c.fast_leader = ReplicaId(2);
        assert_eq!(c.leader(0, Mode::Fast), ReplicaId(2));
        assert_eq!(c.leader(0, Mode::Conservative), ReplicaId(0));
        assert_eq!(c.leader(1, Mode::Fast), ReplicaId(1));
        assert_eq!(c.leader(5, Mode::Conservative), ReplicaId(1));
    }

    #[test]
    fn expulsion_recomputes_threshold() {
        let mut c = ClusterConfig::initial(identity_ranking(10), 3, QuorumScheme::Wheat);
        assert!(c.expel(&[ReplicaId(0), ReplicaId(4), ReplicaId(7)]));
        assert_eq!(c.n(), 7);
        assert_eq!(c.t, 2);
        assert_eq!(c.t_fast(), 1);
        assert_eq!(c.cons_leader, ReplicaId(1));
        assert_eq!(c.thresholds(Mode::Conservative).config.n, 7);
        let mut e = Encoder::new();
        c.encode(&mut e);
        let b = e.finish();
        assert_eq!(ClusterConfig::decode(&mut Decoder::new(&b)).unwrap(), c);
    }
}
