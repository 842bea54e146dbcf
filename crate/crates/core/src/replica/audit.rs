// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Log audits started by checkpoint mismatches and client panics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::forensics::{audit_logs, audit_pair, panic_is_genuine};
use crate::ids::{ClientId, Instance, ProcessId, ReplicaId};
use crate::messages::{LogFetch, Message, PanicMessage};

use super::log::SignedLog;
use super::{Env, Outbox, Replica, Timer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditCause {
    Checkpoint(Instance),
    Panic(ClientId, u64),
}

#[derive(Clone)]
pub(crate) struct Audit {
    cause: AuditCause,
    from: Instance,
    to: Instance,
    targets: BTreeSet<ReplicaId>,
    logs: Vec<Arc<SignedLog>>,
}

/// Open audits of one replica.
#[derive(Default, Clone)]
pub struct AuditBook {
    next: u64,
    open: BTreeMap<u64, Audit>,
    panics: BTreeSet<(ClientId, u64)>,
    pub started: u64,
    pub rejected_panics: u64,
}

impl AuditBook {
    pub fn expire(&mut self, id: u64) {
        self.open.remove(&id);
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    /// Cancels checkpoint audits covered by a stable checkpoint at `upto`.
    pub fn cancel_checkpoint_audits(&mut self, upto: Instance) {
        self.open.retain(|_, a| !matches!(a.cause, AuditCause::Checkpoint(i) if i <= upto));
    }
}

impl Replica {
    pub(crate) fn start_audit(&mut self, cause: AuditCause, from: Instance, to: Instance, targets: BTreeSet<ReplicaId>, out: &mut Outbox) {
        let book = &mut self.audits;
        book.next += 1;
        book.started += 1;
        let id = book.next;
        let to_vec: Vec<ProcessId> = targets.iter().filter(|&&r| r != self.id).map(|&r| ProcessId::Replica(r)).collect();
        book.open.insert(id, Audit { cause, from, to, targets, logs: Vec::new() });
        out.send(to_vec, Message::LogFetch(LogFetch { audit: id, from, to }));
        out.timer_in(self.params.request_timeout * 4, Timer::Audit { id });
    }

    pub(crate) fn handle_panic(&mut self, p: &PanicMessage, out: &mut Outbox) {
        if !self.is_fast_now() {
            return;
        }
        if !panic_is_genuine(p, &*self.scheme) {
            self.audits.rejected_panics += 1;
            return;
        }
        if !self.audits.panics.insert((p.client, p.seq)) {
            return;
        }
        let to = p.replies.iter().map(|r| r.instance).max().unwrap_or(self.last_executed).max(self.last_executed);
        let from = self.stable.instance + 1;
        let targets: BTreeSet<ReplicaId> = self.config.members.iter().copied().collect();
        out.timeline("panic_audit", format!("{} for {}#{}", self.id, p.client, p.seq));
        self.start_audit(AuditCause::Panic(p.client, p.seq), from, to, targets, out);
    }

    pub(crate) fn handle_log_fetch(&mut self, from: ProcessId, f: &LogFetch, out: &mut Outbox) {
        let ProcessId::Replica(r) = from else { return };
        if !self.config.is_member(r) {
            return;
        }
        let entries = self.log.range(f.from, f.to);
        let log = SignedLog::new(&self.key, &*self.scheme, self.id, entries);
        out.send(vec![from], Message::LogSegment { audit: f.audit, log: Arc::new(log) });
    }

    pub(crate) fn handle_log_segment(&mut self, env: &Env<'_>, from: ProcessId, id: u64, log: &Arc<SignedLog>, out: &mut Outbox) {
        let ProcessId::Replica(r) = from else { return };
        let Some(audit) = self.audits.open.get_mut(&id) else { return };
        if !audit.targets.contains(&r) || log.owner != r || !log.verify_signature(&*self.scheme) {
            return;
        }
        let mine = self.log.range(audit.from, audit.to);
        let mut poc = audit_logs(&mine, log, &*self.scheme, self.min_t);
        if poc.is_none() {
            poc = audit.logs.iter().find_map(|other| audit_pair(other, log, &*self.scheme, self.min_t));
        }
        audit.logs.push(log.clone());
        if let Some(poc) = poc {
            self.audits.open.remove(&id);
            if self.known_poc.is_some() {
                return;
            }
            out.timeline("poc", format!("{} found {} against {:?}", self.id, poc.kind().as_str(), poc.culprits.iter().map(|c| c.0).collect::<Vec<_>>()));
            self.handle_poc(env, Arc::new(poc), out);
        }
    }
}
