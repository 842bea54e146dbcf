// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Mode control: when to run fast, when to fall back, and how the history
//! handed to a new leader is chosen.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::auth::{digest, Digest, SignatureScheme};
use crate::forensics::Poc;
use crate::ids::{Instance, Regency, ReplicaId};
use crate::messages::{Prepared, StableCheckpoint, Stop, StopData};
use crate::quorum::Mode;
use crate::replica::log::{LogEntry, SignedLog};
use crate::replica::{decode_state, Variant};

/// Mode of `instance` in a regency whose first instance is `regency_start`.
pub fn mode_for(variant: Variant, instance: Instance, regency_start: Instance, theta: u64) -> Mode {
    if variant == Variant::Flash && instance >= regency_start + theta {
        Mode::Fast
    } else {
        Mode::Conservative
    }
}

/// True when the observed latency is worse than expected.
pub fn latency_watchdog(observed_ms: f64, expectation_ms: f64) -> bool {
    observed_ms > expectation_ms
}

/// Sliding window of observed fast-mode latencies.
#[derive(Clone, Debug)]
pub struct LatencyWatchdog {
    window: VecDeque<f64>,
    cap: usize,
}

impl LatencyWatchdog {
    pub fn new(cap: usize) -> Self {
        Self { window: VecDeque::with_capacity(cap), cap: cap.max(1) }
    }

    pub fn observe(&mut self, ms: f64) {
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back(ms);
    }

    /// Median of the window once it is full.
    pub fn full_median(&self) -> Option<f64> {
        if self.window.len() < self.cap {
            return None;
        }
        let mut v: Vec<f64> = self.window.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 0 { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }
}

/// Synchronization bookkeeping of one replica.
#[derive(Default, Clone)]
pub struct SyncState {
    pub active: bool,
    pub stop_sent: Regency,
    pub stops: BTreeMap<Regency, BTreeMap<ReplicaId, Stop>>,
    pub collected: BTreeMap<ReplicaId, StopData>,
    pub early: BTreeMap<Regency, BTreeMap<ReplicaId, StopData>>,
    pub aborted_fast: bool,
    pub forensics: bool,
    pub forensics_done: bool,
    pub extra_waited: bool,
    pub finalized: bool,
    pub poc: Option<Arc<Poc>>,
    pub culprits: BTreeSet<ReplicaId>,
    pub attempts: u32,
    pub installed: Regency,
}

/// Inputs that fix how StopData is judged.
pub struct HistoryRules<'a> {
    pub scheme: &'a dyn SignatureScheme,
    pub min_t: usize,
    pub genesis: Digest,
    pub cert_need: usize,
    pub members: &'a [ReplicaId],
}

/// History adopted at the end of a synchronization.
#[derive(Clone, Debug)]
pub struct HistoryChoice {
    pub base: StableCheckpoint,
    pub entries: Vec<LogEntry>,
    pub prepared: Option<Prepared>,
}

impl HistoryChoice {
    pub fn end(&self) -> Instance {
        self.entries.last().map_or(self.base.instance, |e| e.instance)
    }
}

pub fn valid_checkpoint(cp: &StableCheckpoint, rules: &HistoryRules<'_>) -> bool {
    if digest(&cp.snapshot) != cp.digest {
        return false;
    }
    if cp.instance == 0 {
        return cp.digest == rules.genesis;
    }
    let mut signers = BTreeSet::new();
    for m in &cp.cert {
        if m.instance == cp.instance && m.digest == cp.digest && rules.members.contains(&m.replica) && m.verify(rules.scheme) {
            signers.insert(m.replica);
        }
    }
    signers.len() >= rules.cert_need
}

fn log_is_sound(log: &SignedLog, owner: ReplicaId, rules: &HistoryRules<'_>) -> bool {
    log.owner == owner
        && log.verify_signature(rules.scheme)
        && log.is_contiguous()
        && log.entries.iter().all(|e| e.verify(rules.scheme, rules.min_t).is_ok())
}

/// Whether a log extends the base checkpoint. The log's entries folded onto
/// its owner's certified checkpoint must reproduce the base's hash chain.
/// Logs that end before the base contribute nothing and pass.
fn extends_base(d: &StopData, base: &StableCheckpoint, base_chain: Digest, rules: &HistoryRules<'_>) -> bool {
    if d.log.entry(base.instance + 1).is_none() {
        return true;
    }
    if d.stable.instance == base.instance {
        return d.stable.digest == base.digest;
    }
    if d.stable.instance > base.instance || !valid_checkpoint(&d.stable, rules) {
        return false;
    }
    let Some((mut app, _)) = decode_state(&d.stable.snapshot) else { return false };
    for i in d.stable.instance + 1..=base.instance {
        let Some(e) = d.log.entry(i) else { return false };
        app.fold(e.digest());
    }
    app.chain() == base_chain
}

/// Chooses the history from a set of StopData.
///
/// The base is the highest valid stable checkpoint. Only logs that extend
/// the base take part. Each following instance
/// takes the entry held by most still-consistent logs (ties go to the
/// smallest digest); logs that disagree drop out. The prepared value for
/// the next instance is the one with the highest regency, then the most
/// votes, then the smallest digest.
pub fn select_history(data: &[&StopData], rules: &HistoryRules<'_>) -> Option<HistoryChoice> {
    let base = data
        .iter()
        .map(|d| &d.stable)
        .filter(|cp| valid_checkpoint(cp, rules))
        .max_by(|a, b| a.instance.cmp(&b.instance).then(b.digest.cmp(&a.digest)))?
        .clone();
    let base_chain = decode_state(&base.snapshot)?.0.chain();
    let mut alive: Vec<&SignedLog> = data
        .iter()
        .filter(|d| log_is_sound(&d.log, d.replica, rules) && extends_base(d, &base, base_chain, rules))
        .map(|d| &d.log)
        .collect();
    let mut entries = Vec::new();
    let mut i = base.instance + 1;
    loop {
        let mut counts: BTreeMap<Digest, (usize, &LogEntry)> = BTreeMap::new();
        for l in &alive {
            if let Some(e) = l.entry(i) {
                counts.entry(e.digest()).or_insert((0, e)).0 += 1;
            }
        }
        let Some((&chosen, &(_, entry))) = counts.iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0))) else {
            break;
        };
        entries.push(entry.clone());
        alive.retain(|l| l.entry(i).is_some_and(|e| e.digest() == chosen));
        i += 1;
    }
    let prepared = data
        .iter()
        .filter_map(|d| d.prepared.as_ref())
        .filter(|p| p.instance == i && p.quorum.t >= rules.min_t && p.verify(rules.scheme))
        .max_by(|a, b| {
            a.regency.cmp(&b.regency).then(a.votes.len().cmp(&b.votes.len())).then(b.digest().cmp(&a.digest()))
        })
        .cloned();
    Some(HistoryChoice { base, entries, prepared })
}
