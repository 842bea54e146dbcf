// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Digests, signatures and the trusted key setup.
//!
//! The mock scheme computes `tag = SHA-256(secret || payload)`. Secrets are
//! derived from the scenario seed and held by [`TrustedSetup`]. Each process
//! receives only its own [`SigningKey`]; everyone else gets a verifier handle
//! that can check tags but exposes no way to produce them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::{ClientId, ProcessId, ReplicaId};

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn short_hex(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short_hex())
    }
}

pub fn digest(payload: &[u8]) -> Digest {
    Digest(Sha256::digest(payload).into())
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: ProcessId,
    pub tag: [u8; 32],
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig({}, {})", self.signer, Digest(self.tag).short_hex())
    }
}

impl Signature {
    pub fn encode(&self, e: &mut Encoder) {
        encode_process(e, self.signer);
        e.raw(&self.tag);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let signer = decode_process(d)?;
        let tag = d.raw(32)?.try_into().unwrap();
        Ok(Self { signer, tag })
    }
}

pub fn encode_process(e: &mut Encoder, p: ProcessId) {
    match p {
        ProcessId::Harness => e.u8(0).u16(0),
        ProcessId::Replica(r) => e.u8(1).u16(r.0),
        ProcessId::Client(c) => e.u8(2).u16(c.0),
    };
}

pub fn decode_process(d: &mut Decoder<'_>) -> Result<ProcessId, DecodeError> {
    let kind = d.u8()?;
    let id = d.u16()?;
    match kind {
        0 => Ok(ProcessId::Harness),
        1 => Ok(ProcessId::Replica(ReplicaId(id))),
        2 => Ok(ProcessId::Client(ClientId(id))),
        tag => Err(DecodeError::BadTag { what: "process", tag }),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("no key registered for {0}")]
    UnknownKey(ProcessId),
}

/// A process's private signing key.
#[derive(Clone)]
pub struct SigningKey {
    id: ProcessId,
    secret: [u8; 32],
}

impl SigningKey {
    pub fn id(&self) -> ProcessId {
        self.id
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.id)
    }
}

/// A pluggable signature scheme.
pub trait SignatureScheme: Send + Sync {
    fn attest(&self, key: &SigningKey, payload: &[u8]) -> Signature;
    fn check(&self, signer: ProcessId, payload: &[u8], sig: &Signature) -> bool;
}

/// Keyed-hash mock scheme used by the simulator.
pub struct MockScheme {
    secrets: BTreeMap<ProcessId, [u8; 32]>,
}

fn mock_tag(secret: &[u8; 32], payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(secret);
    h.update(payload);
    h.finalize().into()
}

impl SignatureScheme for MockScheme {
    fn attest(&self, key: &SigningKey, payload: &[u8]) -> Signature {
        Signature { signer: key.id, tag: mock_tag(&key.secret, payload) }
    }

    fn check(&self, signer: ProcessId, payload: &[u8], sig: &Signature) -> bool {
        if sig.signer != signer {
            return false;
        }
        match self.secrets.get(&signer) {
            Some(secret) => mock_tag(secret, payload) == sig.tag,
            None => false,
        }
    }
}

/// Shared verification handle.
pub type Verifier = Arc<dyn SignatureScheme>;

/// The trusted setup: per-process keys derived from a seed.
pub struct TrustedSetup {
    scheme: Arc<MockScheme>,
    keys: BTreeMap<ProcessId, SigningKey>,
}

impl TrustedSetup {
    /// Derives `secret(id) = SHA-256("flashbft-key" || seed || id)`.
    pub fn new(seed: u64, ids: impl IntoIterator<Item = ProcessId>) -> Self {
        let mut keys = BTreeMap::new();
        let mut secrets = BTreeMap::new();
        for id in ids {
            let mut e = Encoder::with_domain("flashbft-key");
            e.u64(seed);
            encode_process(&mut e, id);
            let secret = digest(&e.finish()).0;
            secrets.insert(id, secret);
            keys.insert(id, SigningKey { id, secret });
        }
        Self { scheme: Arc::new(MockScheme { secrets }), keys }
    }

    pub fn key(&self, id: ProcessId) -> Result<SigningKey, AuthError> {
        self.keys.get(&id).cloned().ok_or(AuthError::UnknownKey(id))
    }

    pub fn attest(&self, id: ProcessId, payload: &[u8]) -> Result<Signature, AuthError> {
        let key = self.keys.get(&id).ok_or(AuthError::UnknownKey(id))?;
        Ok(self.scheme.attest(key, payload))
    }

    pub fn check(&self, id: ProcessId, payload: &[u8], sig: &Signature) -> bool {
        self.scheme.check(id, payload, sig)
    }

    pub fn verifier(&self) -> Verifier {
        self.scheme.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> TrustedSetup {
        TrustedSetup::new(
            9,
            [ProcessId::Replica(ReplicaId(0)), ProcessId::Replica(ReplicaId(1)), ProcessId::Client(ClientId(0))],
        )
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            digest(b"").hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_is_deterministic_and_distinguishes() {
        assert_eq!(digest(b"m"), digest(b"m"));
        assert_ne!(digest(b"m"), digest(b"m'"));
    }

    #[test]
    fn attest_check_round_trip_tamper_and_wrong_signer() {
        let s = setup();
        let r0 = ProcessId::Replica(ReplicaId(0));
        let r1 = ProcessId::Replica(ReplicaId(1));
        let sig = s.attest(r0, b"m").unwrap();
        assert!(s.check(r0, b"m", &sig));
        assert!(!s.check(r0, b"m2", &sig));
        assert!(!s.check(r1, b"m", &sig));
        let mut forged = sig.clone();
        forged.signer = r1;
        assert!(!s.check(r1, b"m", &forged));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let s = setup();
        let stranger = ProcessId::Replica(ReplicaId(7));
        assert_eq!(s.attest(stranger, b"x"), Err(AuthError::UnknownKey(stranger)));
        assert!(s.key(stranger).is_err());
    }

    #[test]
    fn keys_depend_on_seed_only_through_derivation() {
        let a = setup();
        let b = setup();
        let r0 = ProcessId::Replica(ReplicaId(0));
        assert_eq!(a.attest(r0, b"p").unwrap(), b.attest(r0, b"p").unwrap());
        let c = TrustedSetup::new(10, [r0]);
        assert_ne!(a.attest(r0, b"p").unwrap(), c.attest(r0, b"p").unwrap());
    }

    #[test]
    fn signature_encoding_round_trips() {
        let s = setup();
        let sig = s.attest(ProcessId::Client(ClientId(0)), b"q").unwrap();
        let mut e = Encoder::new();
        sig.encode(&mut e);
        let buf = e.finish();
        let mut d = Decoder::new(&buf);
        assert_eq!(Signature::decode(&mut d).unwrap(), sig);
        d.finish().unwrap();
    }
}
