// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Leader change: STOP, StopData, SYNC and the installation of the chosen
//! history.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::auth::Signature;
use crate::forensics::{audit_pair, find_invalid_proof, verify_poc, Poc};
use crate::ids::{ProcessId, Regency, ReplicaId};
use crate::messages::{Command, Message, StopData, StopReason, SyncMsg};
use crate::modes::{select_history, HistoryChoice, HistoryRules};
use crate::quorum::Mode;

use super::log::SignedLog;
use super::{Env, JournalEntry, Note, Outbox, Replica, Timer, TuningPolicy};

fn blank_sig(id: ReplicaId) -> Signature {
    Signature { signer: ProcessId::Replica(id), tag: [0; 32] }
}

/// Searches StopData logs for a proof of culpability.
pub fn find_conflict(data: &[&StopData], scheme: &dyn crate::auth::SignatureScheme, min_t: usize) -> Option<Poc> {
    for d in data {
        if let Some(p) = find_invalid_proof(&d.log, scheme, min_t) {
            return Some(p);
        }
    }
    for (x, a) in data.iter().enumerate() {
        for b in &data[x + 1..] {
            if let Some(p) = audit_pair(&a.log, &b.log, scheme, min_t) {
                return Some(p);
            }
        }
    }
    None
}

impl Replica {
    fn sync_timeout(&self) -> u64 {
        self.params.request_timeout << self.sync.attempts.min(6)
    }

    fn cert_need(&self) -> usize {
        self.config.n() - self.config.t
    }

    pub(crate) fn handle_stop(&mut self, env: &Env<'_>, s: &crate::messages::Stop, out: &mut Outbox) {
        if !s.verify(&*self.scheme) || !self.config.is_member(s.replica) || s.target <= self.regency {
            return;
        }
        if let Some(poc) = &s.poc {
            if self.known_poc.is_none() && verify_poc(poc, &*self.scheme, self.min_t).is_ok() {
                self.known_poc = Some(poc.clone());
            }
        }
        let target = s.target;
        self.sync.stops.entry(target).or_default().entry(s.replica).or_insert_with(|| s.clone());
        if self.sync.stops[&target].len() > self.config.t {
            self.enter_sync(env, target, out);
        }
    }

    pub(crate) fn enter_sync(&mut self, env: &Env<'_>, target: Regency, out: &mut Outbox) {
        if target <= self.regency {
            return;
        }
        if !self.sync.active {
            self.sync.aborted_fast = self.is_fast_now();
        }
        let substantive = self.sync.stops.get(&target).is_some_and(|m| {
            m.values().any(|s| !matches!(s.reason, StopReason::LatencyDisappointment | StopReason::Joined))
        });
        self.sync.forensics = self.sync.aborted_fast && (substantive || self.known_poc.is_some());
        self.send_stop(target, StopReason::Joined, None, out);
        self.regency = target;
        self.sync.active = true;
        self.sync.collected.clear();
        self.sync.forensics_done = false;
        self.sync.extra_waited = false;
        self.sync.finalized = false;
        self.sync.poc = self.known_poc.clone();
        self.flush_reset();
        let next = self.last_executed + 1;
        let prepared = self.last_prepared.clone().filter(|p| p.instance == next);
        self.drop_undecided();
        self.reset_watchdog();
        let data = StopData {
            regency: target,
            replica: self.id,
            stable: self.stable.clone(),
            log: SignedLog::new(&self.key, &*self.scheme, self.id, self.log.entries().to_vec()),
            prepared,
            aborted_fast: self.sync.aborted_fast,
            forensics: self.sync.forensics,
            sig: blank_sig(self.id),
        }
        .sign(&self.key, &*self.scheme);
        let leader = self.config.leader(target, Mode::Conservative);
        out.send(vec![ProcessId::Replica(leader)], Message::StopData(Box::new(data)));
        self.sync.attempts += 1;
        out.timer_in(self.sync_timeout(), Timer::Sync { regency: target });
        if leader == self.id {
            if self.sync.aborted_fast {
                out.timeline("abort", format!("fast mode left at instance {}", self.last_executed + 1));
            }
            out.timeline(
                "sync_start",
                format!("regency {target} leader {} after instance {}{}", self.id, self.last_executed, if self.sync.aborted_fast { " (fast abort)" } else { "" }),
            );
            if let Some(early) = self.sync.early.remove(&target) {
                for (_, d) in early {
                    self.sync.collected.entry(d.replica).or_insert(d);
                }
                self.try_finalize_sync(env, out);
            }
        }
        self.sync.early.retain(|r, _| *r > target);
    }

    pub(crate) fn sync_timer(&mut self, regency: Regency, out: &mut Outbox) {
        if self.sync.active && self.regency == regency {
            self.send_stop(regency + 1, StopReason::TimerExpired, None, out);
        }
    }

    pub(crate) fn extra_logs_timer(&mut self, env: &Env<'_>, regency: Regency, out: &mut Outbox) {
        if self.sync.active && self.regency == regency && !self.sync.finalized {
            self.sync.extra_waited = true;
            self.try_finalize_sync(env, out);
        }
    }

    pub(crate) fn handle_stopdata(&mut self, env: &Env<'_>, s: &StopData, out: &mut Outbox) {
        if !s.verify(&*self.scheme) || !self.config.is_member(s.replica) {
            return;
        }
        if s.regency > self.regency {
            self.sync.early.entry(s.regency).or_default().entry(s.replica).or_insert_with(|| s.clone());
            return;
        }
        if s.regency < self.regency || !self.sync.active || self.sync.finalized {
            return;
        }
        if self.config.leader(s.regency, Mode::Conservative) != self.id {
            return;
        }
        self.sync.collected.entry(s.replica).or_insert_with(|| s.clone());
        self.try_finalize_sync(env, out);
    }

    fn try_finalize_sync(&mut self, _env: &Env<'_>, out: &mut Outbox) {
        let need = self.cert_need();
        if self.sync.finalized || self.sync.collected.len() < need {
            return;
        }
        if !self.sync.forensics_done {
            self.sync.forensics_done = true;
            let wanted = self.sync.forensics || self.sync.collected.values().any(|d| d.forensics);
            if wanted && self.sync.poc.is_none() {
                let data: Vec<&StopData> = self.sync.collected.values().collect();
                if let Some(poc) = find_conflict(&data, &*self.scheme, self.min_t) {
                    out.timeline("poc", format!("{} found {} against {:?}", self.id, poc.kind().as_str(), poc.culprits.iter().map(|c| c.0).collect::<Vec<_>>()));
                    self.sync.poc = Some(Arc::new(poc));
                }
            }
            self.sync.culprits = match &self.sync.poc {
                Some(p) => verify_poc(p, &*self.scheme, self.min_t).unwrap_or_default(),
                None => BTreeSet::new(),
            };
            if !self.sync.culprits.is_empty() && self.clean_count() < need {
                out.timer_in(self.params.request_timeout, Timer::ExtraLogs { regency: self.regency });
                return;
            }
        }
        if !self.sync.culprits.is_empty() && self.clean_count() < need && !self.sync.extra_waited {
            return;
        }
        self.sync.finalized = true;
        let msg = SyncMsg {
            regency: self.regency,
            leader: self.id,
            data: self.sync.collected.values().cloned().collect(),
            poc: self.sync.poc.clone(),
            sig: blank_sig(self.id),
        }
        .sign(&self.key, &*self.scheme);
        out.send(self.members(), Message::Sync(Arc::new(msg)));
    }

    fn clean_count(&self) -> usize {
        self.sync.collected.keys().filter(|r| !self.sync.culprits.contains(r)).count()
    }

    pub(crate) fn handle_sync(&mut self, env: &Env<'_>, msg: &Arc<SyncMsg>, out: &mut Outbox) {
        if msg.regency < self.regency || msg.regency <= self.sync.installed || !msg.verify(&*self.scheme) {
            return;
        }
        if msg.regency == self.regency && !self.sync.active {
            return;
        }
        if msg.leader != self.config.leader(msg.regency, Mode::Conservative) {
            return;
        }
        let culprits = match &msg.poc {
            Some(p) => match verify_poc(p, &*self.scheme, self.min_t) {
                Ok(c) => c,
                Err(_) => return,
            },
            None => BTreeSet::new(),
        };
        let mut seen = BTreeSet::new();
        for d in &msg.data {
            if d.regency != msg.regency || !self.config.is_member(d.replica) || !seen.insert(d.replica) || !d.verify(&*self.scheme) {
                return;
            }
        }
        if msg.data.len() < self.cert_need() {
            return;
        }
        let data: Vec<&StopData> = msg.data.iter().filter(|d| !culprits.contains(&d.replica)).collect();
        let members = self.config.members.clone();
        let rules = HistoryRules {
            scheme: &*self.scheme,
            min_t: self.min_t,
            genesis: self.genesis,
            cert_need: self.cert_need(),
            members: &members,
        };
        let Some(choice) = select_history(&data, &rules) else { return };
        if msg.regency > self.regency {
            self.regency = msg.regency;
            self.drop_undecided();
        }
        self.install(env, choice, msg.poc.clone(), culprits, out);
    }

    fn install(&mut self, env: &Env<'_>, choice: HistoryChoice, poc: Option<Arc<Poc>>, culprits: BTreeSet<ReplicaId>, out: &mut Outbox) {
        let base = &choice.base;
        let base_matches = (base.instance == self.stable.instance && base.digest == self.stable.digest)
            || self.own_ckpts.get(&base.instance).is_some_and(|(d, _)| *d == base.digest);
        let upto = self.last_executed.min(choice.end());
        let consistent = base_matches
            && self.last_executed >= base.instance
            && self.last_executed <= choice.end()
            && (base.instance + 1..=upto).all(|i| {
                let mine = self.log.get(i).map(|e| e.digest());
                let theirs = choice.entries.get((i - base.instance - 1) as usize).map(|e| e.digest());
                mine.is_some() && mine == theirs
            });
        if !consistent {
            let reverted: Vec<_> = self.log.entries().iter().flat_map(|e| e.batch.requests().cloned().collect::<Vec<_>>()).collect();
            let from = self.last_executed;
            let agreed = self.stable.instance.min(base.instance);
            if !self.restore(&base.snapshot) {
                return;
            }
            self.log.clear();
            // Entries past the last certified checkpoint may come from a discarded
            // history; the adopted state's sessions stand in for them.
            self.journal.retain(|j| j.instance <= agreed);
            let adopted = self.app.sessions().filter(|(_, s)| s.instance > agreed && s.instance <= base.instance);
            let adopted: Vec<JournalEntry> = adopted.map(|(client, s)| JournalEntry { instance: s.instance, client, seq: s.seq, result: s.result.clone() }).collect();
            self.journal.extend(adopted);
            self.stable = base.clone();
            self.last_executed = base.instance;
            self.own_ckpts.clear();
            self.ckpt_votes.retain(|i, _| *i > base.instance);
            let me = self.id;
            for votes in self.ckpt_votes.values_mut() {
                votes.remove(&me);
            }
            self.ckpt_triggered.retain(|i| *i > base.instance);
            if from > base.instance {
                out.note(Note::Rollback { to: base.instance });
                out.timeline("rollback", format!("{} from {from} to {}", self.id, base.instance));
            }
            for r in reverted {
                self.requeue(r);
            }
        }
        let end = choice.end();
        self.ckpt_votes.retain(|i, _| *i <= end);
        for e in &choice.entries {
            if e.instance <= self.last_executed {
                continue;
            }
            out.note(Note::Decided { instance: e.instance, digest: e.digest(), fast: false });
            self.apply_entry(e, false, out);
            self.log.push(e.clone());
            self.last_executed = e.instance;
            if e.instance % self.params.checkpoint_interval == 0 {
                self.take_checkpoint(e.instance, out);
            }
        }
        for e in &choice.entries {
            for cmd in &e.batch.commands {
                if let Command::Op(r) = cmd {
                    self.forget_pending(r.key());
                }
            }
        }
        self.sync.active = false;
        self.sync.installed = self.regency;
        self.sync.attempts = 0;
        self.sync.collected.clear();
        let reg = self.regency;
        self.sync.stops.retain(|r, _| *r > reg);
        self.regency_start = self.last_executed + 1;
        self.last_prepared = None;
        self.retune_due = self.params.tuning == TuningPolicy::Aware;
        self.forced = choice.prepared.filter(|p| p.instance == self.last_executed + 1).map(|p| p.batch);
        if let Some(p) = poc {
            let live: Vec<ReplicaId> = culprits.iter().copied().filter(|c| self.config.is_member(*c)).collect();
            if !live.is_empty() {
                self.pending_reconfigure = Some((culprits.iter().copied().collect(), p.clone()));
            }
            self.known_poc = Some(p);
        }
        self.rearm_pending(out);
        self.reset_watchdog();
        if self.config.leader(self.regency, Mode::Conservative) == self.id {
            out.timeline(
                "sync_done",
                format!(
                    "regency {} history up to {}{}{}",
                    self.regency,
                    self.last_executed,
                    if self.forced.is_some() { " + prepared value" } else { "" },
                    if culprits.is_empty() { String::new() } else { format!(" culprits {:?}", culprits.iter().map(|c| c.0).collect::<Vec<_>>()) }
                ),
            );
        }
        self.replay_future(env, out);
        self.maybe_propose(env, out);
    }

    pub(crate) fn handle_poc(&mut self, env: &Env<'_>, poc: Arc<Poc>, out: &mut Outbox) {
        let Ok(culprits) = verify_poc(&poc, &*self.scheme, self.min_t) else { return };
        if !culprits.iter().any(|c| self.config.is_member(*c)) {
            return;
        }
        if self.known_poc.is_none() {
            self.known_poc = Some(poc.clone());
            out.note(Note::PocVerified { culprits: culprits.iter().copied().collect() });
            out.send(self.members(), Message::Poc(poc.clone()));
        }
        if self.sync.active {
            if self.sync.poc.is_none() {
                self.sync.poc = Some(poc);
            }
            return;
        }
        if self.is_fast_now() {
            self.request_abort(env, StopReason::ValidPoc, Some(poc), out);
        } else if self.pending_reconfigure.is_none() {
            self.pending_reconfigure = Some((culprits.into_iter().collect(), poc));
            self.maybe_propose(env, out);
        }
    }
}
