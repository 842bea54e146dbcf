// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Proofs of culpability: construction from diverging logs and
//! evidence-only verification.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::auth::{digest, Digest, SignatureScheme};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::{Instance, Regency, ReplicaId};
use crate::messages::{PanicMessage, Reply};
use crate::replica::log::{DecisionProof, LogEntry, SignedLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PocKind {
    InvalidProof,
    DoubleAccept,
}

impl PocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PocKind::InvalidProof => "invalid_proof",
            PocKind::DoubleAccept => "double_accept",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PocEvidence {
    /// A signed log whose entry at `instance` carries an invalid proof.
    InvalidProof { log: SignedLog, instance: Instance },
    /// Two valid proofs for different values in the same instance and regency.
    DoubleAccept { a: DecisionProof, b: DecisionProof },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Poc {
    pub evidence: PocEvidence,
    pub culprits: Vec<ReplicaId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PocError {
    #[error("log signature does not verify")]
    BadLogSignature,
    #[error("log has no entry for instance {0}")]
    MissingEntry(Instance),
    #[error("the accused proof is valid")]
    ProofIsValid,
    #[error("proof {0} does not verify")]
    InvalidProof(char),
    #[error("proofs are for different instances or regencies")]
    NotComparable,
    #[error("proofs agree on the value")]
    NoConflict,
    #[error("only {have} double signers, need {need}")]
    TooFewCulprits { have: usize, need: usize },
    #[error("claimed culprits differ from the evidence")]
    CulpritMismatch,
}

impl Poc {
    pub fn kind(&self) -> PocKind {
        match self.evidence {
            PocEvidence::InvalidProof { .. } => PocKind::InvalidProof,
            PocEvidence::DoubleAccept { .. } => PocKind::DoubleAccept,
        }
    }

    pub fn instance(&self) -> Instance {
        match &self.evidence {
            PocEvidence::InvalidProof { instance, .. } => *instance,
            PocEvidence::DoubleAccept { a, .. } => a.instance,
        }
    }

    pub fn regency(&self) -> Option<Regency> {
        match &self.evidence {
            PocEvidence::InvalidProof { log, instance } => log.entry(*instance).map(|e| e.proof.regency),
            PocEvidence::DoubleAccept { a, .. } => Some(a.regency),
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        match &self.evidence {
            PocEvidence::InvalidProof { log, instance } => {
                e.u8(0).u64(*instance);
                log.encode(e);
            }
            PocEvidence::DoubleAccept { a, b } => {
                e.u8(1);
                a.encode(e);
                b.encode(e);
            }
        }
        crate::messages::encode_ids(e, &self.culprits);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let evidence = match d.u8()? {
            0 => {
                let instance = d.u64()?;
                PocEvidence::InvalidProof { log: SignedLog::decode(d)?, instance }
            }
            1 => PocEvidence::DoubleAccept { a: DecisionProof::decode(d)?, b: DecisionProof::decode(d)? },
            tag => return Err(DecodeError::BadTag { what: "poc", tag }),
        };
        Ok(Self { evidence, culprits: crate::messages::decode_ids(d)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

/// Replicas that signed ACCEPTs in both proofs.
pub fn double_signers(a: &DecisionProof, b: &DecisionProof) -> Vec<ReplicaId> {
    let sa = a.signers();
    b.signers().intersection(&sa).copied().collect()
}

/// Re-derives the culprit set from the evidence alone.
pub fn verify_poc(poc: &Poc, scheme: &dyn SignatureScheme, min_t: usize) -> Result<BTreeSet<ReplicaId>, PocError> {
    let derived: BTreeSet<ReplicaId> = match &poc.evidence {
        PocEvidence::InvalidProof { log, instance } => {
            if !log.verify_signature(scheme) {
                return Err(PocError::BadLogSignature);
            }
            let entry = log.entry(*instance).ok_or(PocError::MissingEntry(*instance))?;
            if entry.verify(scheme, min_t).is_ok() {
                return Err(PocError::ProofIsValid);
            }
            [log.owner].into()
        }
        PocEvidence::DoubleAccept { a, b } => {
            a.verify(scheme, min_t).map_err(|_| PocError::InvalidProof('a'))?;
            b.verify(scheme, min_t).map_err(|_| PocError::InvalidProof('b'))?;
            if a.instance != b.instance || a.regency != b.regency {
                return Err(PocError::NotComparable);
            }
            if a.value_digest == b.value_digest {
                return Err(PocError::NoConflict);
            }
            let culprits: BTreeSet<_> = double_signers(a, b).into_iter().collect();
            let need = a.quorum.t.min(b.quorum.t) + 1;
            if culprits.len() < need {
                return Err(PocError::TooFewCulprits { have: culprits.len(), need });
            }
            culprits
        }
    };
    let claimed: BTreeSet<ReplicaId> = poc.culprits.iter().copied().collect();
    if claimed != derived {
        return Err(PocError::CulpritMismatch);
    }
    Ok(derived)
}

fn double_accept(a: &DecisionProof, b: &DecisionProof) -> Option<Poc> {
    if a.instance != b.instance || a.regency != b.regency || a.value_digest == b.value_digest {
        return None;
    }
    let culprits = double_signers(a, b);
    if culprits.len() < a.quorum.t.min(b.quorum.t) + 1 {
        return None;
    }
    Some(Poc { evidence: PocEvidence::DoubleAccept { a: a.clone(), b: b.clone() }, culprits })
}

/// Scans a signed log for an entry whose proof fails verification.
pub fn find_invalid_proof(log: &SignedLog, scheme: &dyn SignatureScheme, min_t: usize) -> Option<Poc> {
    let bad = log.entries.iter().find(|e| e.verify(scheme, min_t).is_err())?;
    Some(Poc {
        evidence: PocEvidence::InvalidProof { log: log.clone(), instance: bad.instance },
        culprits: vec![log.owner],
    })
}

/// Compares two sets of decisions and returns a PoC for the first diverging
/// instance, if the divergence is attributable.
///
/// `mine` is trusted to hold valid proofs; `theirs` is a signed log from
/// another replica.
pub fn audit_logs(mine: &[LogEntry], theirs: &SignedLog, scheme: &dyn SignatureScheme, min_t: usize) -> Option<Poc> {
    if !theirs.verify_signature(scheme) {
        return None;
    }
    if let Some(poc) = find_invalid_proof(theirs, scheme, min_t) {
        return Some(poc);
    }
    for own in mine {
        if let Some(other) = theirs.entry(own.instance) {
            if other.digest() != own.digest() {
                return double_accept(&own.proof, &other.proof);
            }
        }
    }
    None
}

/// Compares two signed logs from other replicas.
pub fn audit_pair(a: &SignedLog, b: &SignedLog, scheme: &dyn SignatureScheme, min_t: usize) -> Option<Poc> {
    for log in [a, b] {
        if !log.verify_signature(scheme) {
            return None;
        }
        if let Some(poc) = find_invalid_proof(log, scheme, min_t) {
            return Some(poc);
        }
    }
    for ea in &a.entries {
        if let Some(eb) = b.entry(ea.instance) {
            if ea.digest() != eb.digest() {
                return double_accept(&ea.proof, &eb.proof);
            }
        }
    }
    None
}

/// Checks the preconditions of a panic message.
pub fn panic_is_genuine(p: &PanicMessage, scheme: &dyn SignatureScheme) -> bool {
    let [a, b]: &[Reply; 2] = &p.replies;
    a.verify(scheme)
        && b.verify(scheme)
        && a.client == p.client
        && b.client == p.client
        && a.seq == p.seq
        && b.seq == p.seq
        && a.fast
        && b.fast
        && a.result != b.result
}
