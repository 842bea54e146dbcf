// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Latency prediction for three-step and seven-step agreement patterns and
//! simulated annealing over weight assignment and leader placement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{us_to_ms, Micros, ReplicaId};
use crate::netsim::matrix::LatencyMatrix;
use crate::quorum::{QuorumScheme, WeightConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    /// PROPOSE, all-to-all WRITE, all-to-all ACCEPT.
    ThreeStep,
    /// Leader-collected votes with certificate redistribution, three rounds.
    SevenStep,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::ThreeStep => "three",
            Pattern::SevenStep => "seven",
        }
    }
}

#[derive(Clone, Copy)]
pub struct PredictionInput<'a> {
    pub matrix: &'a LatencyMatrix,
    pub cfg: &'a WeightConfig,
    pub leader: ReplicaId,
    pub pattern: Pattern,
}

/// Earliest time at which the arrivals accumulate a quorum.
fn quorum_completion(cfg: &WeightConfig, arrivals: &mut [(Micros, ReplicaId)]) -> Micros {
    arrivals.sort_unstable();
    let mut acc = 0;
    for &(at, r) in arrivals.iter() {
        acc += cfg.units_of(r);
        if acc >= cfg.quorum_units {
            return at;
        }
    }
    Micros::MAX
}

/// Per-member decision times, relative to the leader starting the instance.
pub fn decision_times_us(input: PredictionInput<'_>) -> Vec<(ReplicaId, Micros)> {
    let PredictionInput { matrix: m, cfg, leader, pattern } = input;
    let members = cfg.members();
    let mut buf = Vec::with_capacity(members.len());
    match pattern {
        Pattern::ThreeStep => {
            let prop: Vec<Micros> = members.iter().map(|&j| m.d(leader, j)).collect();
            let accept: Vec<Micros> = members
                .iter()
                .zip(&prop)
                .map(|(&i, &p)| {
                    buf.clear();
                    buf.extend(members.iter().zip(&prop).map(|(&j, &pj)| (pj + m.d(j, i), j)));
                    p.max(quorum_completion(cfg, &mut buf))
                })
                .collect();
            members
                .iter()
                .zip(&prop)
                .map(|(&i, &p)| {
                    buf.clear();
                    buf.extend(members.iter().zip(&accept).map(|(&j, &aj)| (aj.saturating_add(m.d(j, i)), j)));
                    (i, p.max(quorum_completion(cfg, &mut buf)))
                })
                .collect()
        }
        Pattern::SevenStep => {
            buf.extend(members.iter().map(|&j| (m.d(leader, j) + m.d(j, leader), j)));
            let round = quorum_completion(cfg, &mut buf);
            let decide = round.saturating_mul(3);
            members.iter().map(|&i| (i, if i == leader { decide } else { decide.saturating_add(m.d(leader, i)) })).collect()
        }
    }
}

/// Leader-gated consensus latency in microseconds.
pub fn predict_latency_us(input: PredictionInput<'_>) -> Micros {
    decision_times_us(input).into_iter().find(|(r, _)| *r == input.leader).map(|(_, t)| t).unwrap_or(Micros::MAX)
}

/// Leader-gated consensus latency in milliseconds.
pub fn predict_latency(input: PredictionInput<'_>) -> f64 {
    us_to_ms(predict_latency_us(input))
}

/// An optimized configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tuned {
    pub cfg: WeightConfig,
    pub leader: ReplicaId,
    pub latency_us: Micros,
}

impl Tuned {
    pub fn latency_ms(&self) -> f64 {
        us_to_ms(self.latency_us)
    }

    /// High-weight replicas first, then the rest, each ascending.
    pub fn ranking(&self) -> Vec<ReplicaId> {
        let mut r = self.cfg.high().to_vec();
        r.extend(self.cfg.members().iter().filter(|m| !self.cfg.high().contains(m)));
        r
    }
}

/// Search space description.
#[derive(Clone, Debug)]
pub struct SearchSpace<'a> {
    pub matrix: &'a LatencyMatrix,
    pub members: &'a [ReplicaId],
    pub t: usize,
    pub scheme: QuorumScheme,
    pub pattern: Pattern,
}

impl SearchSpace<'_> {
    fn build(&self, high: &[bool]) -> WeightConfig {
        match self.scheme {
            QuorumScheme::Egalitarian => WeightConfig::egalitarian(self.members, self.t).expect("feasible"),
            QuorumScheme::Wheat => {
                let mut ranking: Vec<ReplicaId> = self.members.iter().zip(high).filter(|(_, &h)| h).map(|(&m, _)| m).collect();
                ranking.extend(self.members.iter().zip(high).filter(|(_, &h)| !h).map(|(&m, _)| m));
                WeightConfig::wheat(self.members, self.t, &ranking).expect("feasible")
            }
        }
    }

    fn eval(&self, cfg: &WeightConfig, leader: usize) -> Micros {
        predict_latency_us(PredictionInput { matrix: self.matrix, cfg, leader: self.members[leader], pattern: self.pattern })
    }

    fn high_count(&self) -> usize {
        match self.scheme {
            QuorumScheme::Wheat => 2 * self.t,
            QuorumScheme::Egalitarian => 0,
        }
    }

    /// Id-ordered weights with the first member leading.
    pub fn initial(&self) -> Tuned {
        let k = self.high_count();
        let high: Vec<bool> = (0..self.members.len()).map(|i| i < k).collect();
        let cfg = self.build(&high);
        let latency_us = self.eval(&cfg, 0);
        Tuned { cfg, leader: self.members[0], latency_us }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AnnealParams {
    pub iterations: usize,
    pub cooling: f64,
    pub cooling_every: usize,
    /// Initial temperature as a fraction of the initial latency.
    pub initial_temperature: f64,
    pub seed: u64,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self { iterations: 10_000, cooling: 0.98, cooling_every: 25, initial_temperature: 0.5, seed: 1 }
    }
}

/// Simulated annealing. Returns the best configuration visited, which is
/// never worse than the initial one.
pub fn anneal(space: &SearchSpace<'_>, params: AnnealParams) -> Tuned {
    let n = space.members.len();
    let k = space.high_count();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut high: Vec<bool> = (0..n).map(|i| i < k).collect();
    let mut leader = 0usize;
    let mut cfg = space.build(&high);
    let mut cur = space.eval(&cfg, leader);
    let mut best = Tuned { cfg: cfg.clone(), leader: space.members[leader], latency_us: cur };
    let mut temp = params.initial_temperature * cur as f64;
    let can_swap = k > 0 && k < n;
    for it in 0..params.iterations {
        if it > 0 && it % params.cooling_every == 0 {
            temp *= params.cooling;
        }
        let swap = can_swap && (n < 2 || rng.gen_bool(0.5));
        let (cand_high, cand_leader) = if swap {
            let hi: Vec<usize> = (0..n).filter(|&i| high[i]).collect();
            let lo: Vec<usize> = (0..n).filter(|&i| !high[i]).collect();
            let mut h = high.clone();
            h[hi[rng.gen_range(0..hi.len())]] = false;
            h[lo[rng.gen_range(0..lo.len())]] = true;
            (h, leader)
        } else if n > 1 {
            let mut l = rng.gen_range(0..n - 1);
            if l >= leader {
                l += 1;
            }
            (high.clone(), l)
        } else {
            break;
        };
        let cand_cfg = if swap { space.build(&cand_high) } else { cfg.clone() };
        let v = space.eval(&cand_cfg, cand_leader);
        let accept = v <= cur || (temp > 0.0 && rng.gen::<f64>() < (-((v - cur) as f64) / temp).exp());
        if accept {
            high = cand_high;
            leader = cand_leader;
            cfg = cand_cfg;
            cur = v;
            if cur < best.latency_us {
                best = Tuned { cfg: cfg.clone(), leader: space.members[leader], latency_us: cur };
            }
        }
    }
    best
}

/// Exhaustive search over every high-weight set and leader.
pub fn exhaustive(space: &SearchSpace<'_>) -> Tuned {
    let n = space.members.len();
    let k = space.high_count();
    let mut best = space.initial();
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let mut high = vec![false; n];
        for &c in &combo {
            high[c] = true;
        }
        let cfg = space.build(&high);
        for l in 0..n {
            let v = space.eval(&cfg, l);
            if v < best.latency_us {
                best = Tuned { cfg: cfg.clone(), leader: space.members[l], latency_us: v };
            }
        }
        // next k-combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if combo[i] < n - k + i {
                combo[i] += 1;
                for j in i + 1..k {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Predicted latency of the best conservative configuration.
pub fn expectation_threshold(matrix: &LatencyMatrix, conservative: &WeightConfig, pattern: Pattern) -> f64 {
    let space =
        SearchSpace { matrix, members: conservative.members(), t: conservative.t, scheme: conservative.scheme, pattern };
    anneal(&space, AnnealParams::default()).latency_ms()
}
