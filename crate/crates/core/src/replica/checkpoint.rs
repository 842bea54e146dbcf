// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Periodic checkpoints and log truncation.

use std::collections::BTreeSet;

use crate::auth::digest;
use crate::ids::{Instance, ReplicaId};
use crate::messages::{CheckpointMsg, Message, StableCheckpoint};

use super::audit::AuditCause;
use super::{Note, Outbox, Replica};

impl Replica {
    pub(crate) fn take_checkpoint(&mut self, instance: Instance, out: &mut Outbox) {
        let snapshot = self.snapshot();
        let d = digest(&snapshot);
        self.own_ckpts.insert(instance, (d, snapshot));
        let msg = CheckpointMsg::new(&self.key, &*self.scheme, instance, d, self.id);
        out.send(self.members(), Message::Checkpoint(msg));
        self.evaluate_checkpoint(instance, out);
    }

    pub(crate) fn handle_checkpoint(&mut self, msg: &CheckpointMsg, out: &mut Outbox) {
        if msg.instance <= self.stable.instance || !self.config.is_member(msg.replica) || !msg.verify(&*self.scheme) {
            return;
        }
        self.ckpt_votes.entry(msg.instance).or_default().insert(msg.replica, msg.clone());
        self.evaluate_checkpoint(msg.instance, out);
    }

    fn evaluate_checkpoint(&mut self, instance: Instance, out: &mut Outbox) {
        let Some((own, snapshot)) = self.own_ckpts.get(&instance).cloned() else { return };
        let Some(votes) = self.ckpt_votes.get(&instance) else { return };
        let others: BTreeSet<ReplicaId> = votes.values().filter(|m| m.digest != own).map(|m| m.replica).collect();
        let matching: Vec<CheckpointMsg> = votes.values().filter(|m| m.digest == own).cloned().collect();
        if !others.is_empty() && self.ckpt_triggered.insert(instance) {
            out.note(Note::AuditTrigger { instance });
            out.timeline("checkpoint_mismatch", format!("{} at {instance} vs {:?}", self.id, others.iter().map(|r| r.0).collect::<Vec<_>>()));
            let from = instance.saturating_sub(self.params.checkpoint_interval) + 1;
            self.start_audit(AuditCause::Checkpoint(instance), from, instance, others, out);
        }
        if matching.len() >= self.config.n() - self.config.t {
            self.stable = StableCheckpoint { instance, digest: own, snapshot, cert: matching };
            self.log.truncate_upto(instance);
            self.own_ckpts.retain(|i, _| *i > instance);
            self.ckpt_votes.retain(|i, _| *i > instance);
            self.ckpt_triggered.retain(|i| *i > instance);
            self.audits.cancel_checkpoint_audits(instance);
        }
    }
}
