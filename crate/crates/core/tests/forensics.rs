// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

use flashbft::auth::{digest, Digest, TrustedSetup};
use flashbft::forensics::{audit_pair, verify_poc, Poc, PocError, PocEvidence, PocKind};
use flashbft::ids::{ProcessId, ReplicaId};
use flashbft::messages::{Batch, Command, ConsensusKind, ConsensusMessage};
use flashbft::quorum::{compute_weight_config, identity_ranking};
use flashbft::replica::log::{DecisionProof, LogEntry, SignedLog};
use std::sync::Arc;

const N: usize = 10;
const T_FAST: usize = 2;

fn setup() -> TrustedSetup {
    TrustedSetup::new(3, (0..N as u16).map(|i| ProcessId::Replica(ReplicaId(i))))
}

fn batch(tag: u64) -> Arc<Batch> {
    Arc::new(Batch::new(vec![Command::Noop(tag)]))
}

fn proof(setup: &TrustedSetup, value: Digest, signers: &[u16]) -> DecisionProof {
    let scheme = setup.verifier();
    let accepts = signers
        .iter()
        .map(|&i| {
            let key = setup.key(ProcessId::Replica(ReplicaId(i))).unwrap();
            ConsensusMessage::new(&key, &*scheme, ConsensusKind::Accept, 40, 0, value, None)
        })
        .collect();
    let quorum = compute_weight_config(N, T_FAST, &identity_ranking(N)).unwrap().descriptor();
    DecisionProof { instance: 40, regency: 0, value_digest: value, accepts, quorum }
}

/// Two 22-unit quorums that overlap exactly on replicas 0, 1 and 2.
fn conflicting(setup: &TrustedSetup) -> (LogEntry, LogEntry) {
    let (a, b) = (batch(1), batch(2));
    let pa = proof(setup, a.digest(), &[0, 1, 2, 3, 4]);
    let pb = proof(setup, b.digest(), &[0, 1, 2, 5, 6, 7, 8]);
    (LogEntry { instance: 40, batch: a, proof: pa, fast: true }, LogEntry { instance: 40, batch: b, proof: pb, fast: true })
}

fn signed_log(setup: &TrustedSetup, owner: u16, entries: Vec<LogEntry>) -> SignedLog {
    let key = setup.key(ProcessId::Replica(ReplicaId(owner))).unwrap();
    SignedLog::new(&key, &*setup.verifier(), ReplicaId(owner), entries)
}

#[test]
fn audit_names_exactly_the_double_signers() {
    let s = setup();
    let (a, b) = conflicting(&s);
    let poc = audit_pair(&signed_log(&s, 3, vec![a]), &signed_log(&s, 5, vec![b]), &*s.verifier(), T_FAST).expect("divergence is attributable");
    assert_eq!(poc.kind(), PocKind::DoubleAccept);
    let culprits = verify_poc(&poc, &*s.verifier(), T_FAST).unwrap();
    assert_eq!(culprits.into_iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 2]);
}

#[test]
fn tampered_signature_is_rejected() {
    let s = setup();
    let (a, b) = conflicting(&s);
    let mut pb = b.proof.clone();
    pb.accepts[4].sig.tag[0] ^= 1;
    let poc = Poc { evidence: PocEvidence::DoubleAccept { a: a.proof, b: pb }, culprits: vec![ReplicaId(0), ReplicaId(1), ReplicaId(2)] };
    assert_eq!(verify_poc(&poc, &*s.verifier(), T_FAST), Err(PocError::InvalidProof('b')));
}

#[test]
fn proofs_for_the_same_value_are_no_conflict() {
    let s = setup();
    let (a, _) = conflicting(&s);
    let poc = Poc { evidence: PocEvidence::DoubleAccept { a: a.proof.clone(), b: a.proof }, culprits: vec![] };
    assert_eq!(verify_poc(&poc, &*s.verifier(), T_FAST), Err(PocError::NoConflict));
}

#[test]
fn claimed_culprits_must_match_the_evidence() {
    let s = setup();
    let (a, b) = conflicting(&s);
    let poc = Poc { evidence: PocEvidence::DoubleAccept { a: a.proof, b: b.proof }, culprits: vec![ReplicaId(0), ReplicaId(1), ReplicaId(9)] };
    assert_eq!(verify_poc(&poc, &*s.verifier(), T_FAST), Err(PocError::CulpritMismatch));
}

#[test]
fn underweight_proof_in_a_log_accuses_its_signer() {
    let s = setup();
    let v = batch(7);
    let forged = LogEntry { instance: 40, batch: v.clone(), proof: proof(&s, v.digest(), &[4, 5, 6, 7]), fast: true };
    let (good, _) = conflicting(&s);
    let poc = audit_pair(&signed_log(&s, 9, vec![forged]), &signed_log(&s, 3, vec![good]), &*s.verifier(), T_FAST).unwrap();
    assert_eq!(poc.kind(), PocKind::InvalidProof);
    assert_eq!(verify_poc(&poc, &*s.verifier(), T_FAST).unwrap().into_iter().collect::<Vec<_>>(), [ReplicaId(9)]);
}

#[test]
fn agreeing_logs_give_no_poc() {
    let s = setup();
    let (a, _) = conflicting(&s);
    assert!(audit_pair(&signed_log(&s, 3, vec![a.clone()]), &signed_log(&s, 4, vec![a]), &*s.verifier(), T_FAST).is_none());
}

#[test]
fn poc_survives_encoding() {
    let s = setup();
    let (a, b) = conflicting(&s);
    let poc = audit_pair(&signed_log(&s, 3, vec![a]), &signed_log(&s, 5, vec![b]), &*s.verifier(), T_FAST).unwrap();
    let bytes = poc.to_bytes();
    let mut d = flashbft::codec::Decoder::new(&bytes);
    let back = Poc::decode(&mut d).unwrap();
    assert_eq!(back, poc);
    assert_eq!(back.digest(), digest(&bytes));
}
