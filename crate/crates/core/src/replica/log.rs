// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Decision proofs and the decision log.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::auth::{Digest, Signature, SignatureScheme, SigningKey};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::{Instance, ProcessId, Regency, ReplicaId};
use crate::messages::{decode_digest, Batch, ConsensusKind, ConsensusMessage};
use crate::quorum::QuorumDesc;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProofError {
    #[error("quorum descriptor is malformed")]
    BadQuorum,
    #[error("vote {0} does not match the decision")]
    Mismatch(usize),
    #[error("vote {0} has an invalid signature")]
    BadSignature(usize),
    #[error("replica {0} voted twice")]
    Duplicate(ReplicaId),
    #[error("signers hold {have} units, quorum needs {need}")]
    Underweight { have: u64, need: u64 },
    #[error("batch digest does not match the proof")]
    BatchMismatch,
}

/// A weighted quorum of signed ACCEPTs for one value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionProof {
    pub instance: Instance,
    pub regency: Regency,
    pub value_digest: Digest,
    pub accepts: Vec<ConsensusMessage>,
    pub quorum: QuorumDesc,
}

impl DecisionProof {
    pub fn signers(&self) -> BTreeSet<ReplicaId> {
        self.accepts.iter().filter_map(|a| a.sender()).collect()
    }

    /// Checks the proof. `min_t` is the smallest effective threshold the
    /// deployment ever uses; descriptors below it are rejected.
    pub fn verify(&self, scheme: &dyn SignatureScheme, min_t: usize) -> Result<(), ProofError> {
        if self.quorum.t < min_t {
            return Err(ProofError::BadQuorum);
        }
        let cfg = self.quorum.build().map_err(|_| ProofError::BadQuorum)?;
        let mut seen = BTreeSet::new();
        for (i, a) in self.accepts.iter().enumerate() {
            if a.kind != ConsensusKind::Accept
                || a.instance != self.instance
                || a.regency != self.regency
                || a.value_digest != self.value_digest
            {
                return Err(ProofError::Mismatch(i));
            }
            if !a.verify(scheme) {
                return Err(ProofError::BadSignature(i));
            }
            let s = a.sender().ok_or(ProofError::BadSignature(i))?;
            if !seen.insert(s) {
                return Err(ProofError::Duplicate(s));
            }
        }
        let have = cfg.weight_of(&seen);
        if have < cfg.quorum_units {
            return Err(ProofError::Underweight { have, need: cfg.quorum_units });
        }
        Ok(())
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.instance).u64(self.regency).raw(&self.value_digest.0);
        e.u32(self.accepts.len() as u32);
        for a in &self.accepts {
            a.encode(e);
        }
        self.quorum.encode(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let instance = d.u64()?;
        let regency = d.u64()?;
        let value_digest = decode_digest(d)?;
        let n = d.u32()? as usize;
        let accepts = (0..n).map(|_| ConsensusMessage::decode(d)).collect::<Result<_, _>>()?;
        Ok(Self { instance, regency, value_digest, accepts, quorum: QuorumDesc::decode(d)? })
    }
}

/// One decided instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub instance: Instance,
    pub batch: Arc<Batch>,
    pub proof: DecisionProof,
    pub fast: bool,
}

impl LogEntry {
    pub fn digest(&self) -> Digest {
        self.batch.digest()
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme, min_t: usize) -> Result<(), ProofError> {
        if self.batch.digest() != self.proof.value_digest || self.instance != self.proof.instance {
            return Err(ProofError::BatchMismatch);
        }
        self.proof.verify(scheme, min_t)
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.instance).bytes(&self.batch.to_bytes());
        self.proof.encode(e);
        e.bool(self.fast);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let instance = d.u64()?;
        let batch = Arc::new(Batch::from_bytes(d.bytes()?)?);
        let proof = DecisionProof::decode(d)?;
        Ok(Self { instance, batch, proof, fast: d.bool()? })
    }
}

/// A contiguous log segment signed by its owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedLog {
    pub owner: ReplicaId,
    pub entries: Vec<LogEntry>,
    pub sig: Signature,
}

impl SignedLog {
    fn signing_bytes(owner: ReplicaId, entries: &[LogEntry]) -> Vec<u8> {
        let mut e = Encoder::with_domain("log");
        e.u16(owner.0).u32(entries.len() as u32);
        for en in entries {
            en.encode(&mut e);
        }
        e.finish()
    }

    pub fn new(key: &SigningKey, scheme: &dyn SignatureScheme, owner: ReplicaId, entries: Vec<LogEntry>) -> Self {
        let sig = scheme.attest(key, &Self::signing_bytes(owner, &entries));
        Self { owner, entries, sig }
    }

    pub fn verify_signature(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.owner), &Self::signing_bytes(self.owner, &self.entries), &self.sig)
    }

    pub fn entry(&self, instance: Instance) -> Option<&LogEntry> {
        let first = self.entries.first()?.instance;
        let e = self.entries.get(instance.checked_sub(first)? as usize)?;
        (e.instance == instance).then_some(e)
    }

    /// Instances are contiguous and ascending.
    pub fn is_contiguous(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].instance == w[0].instance + 1)
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u16(self.owner.0).u32(self.entries.len() as u32);
        for en in &self.entries {
            en.encode(e);
        }
        self.sig.encode(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let owner = ReplicaId(d.u16()?);
        let n = d.u32()? as usize;
        let entries = (0..n).map(|_| LogEntry::decode(d)).collect::<Result<_, _>>()?;
        Ok(Self { owner, entries, sig: Signature::decode(d)? })
    }
}

/// Decisions after the last stable checkpoint.
#[derive(Clone, Debug, Default)]
pub struct DecisionLog {
    entries: Vec<LogEntry>,
}

impl DecisionLog {
    pub fn push(&mut self, entry: LogEntry) {
        if let Some(last) = self.entries.last() {
            assert_eq!(entry.instance, last.instance + 1, "decision log must stay contiguous");
        }
        self.entries.push(entry);
    }

    pub fn get(&self, instance: Instance) -> Option<&LogEntry> {
        let first = self.entries.first()?.instance;
        self.entries.get(instance.checked_sub(first)? as usize)
    }

    /// Drops entries up to and including `instance`.
    pub fn truncate_upto(&mut self, instance: Instance) {
        self.entries.retain(|e| e.instance > instance);
    }

    /// Drops entries after `instance`.
    pub fn truncate_after(&mut self, instance: Instance) {
        self.entries.retain(|e| e.instance <= instance);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn range(&self, from: Instance, to: Instance) -> Vec<LogEntry> {
        self.entries.iter().filter(|e| e.instance >= from && e.instance <= to).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
