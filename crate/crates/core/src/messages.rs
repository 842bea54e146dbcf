// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Protocol messages and their canonical encodings.
//!
//! Consensus messages use the wire layout
//! `kind u8 | instance u64 | regency u64 | digest [32] | payload-length u32 | payload | signature`,
//! where the payload is the encoded batch for PROPOSE and empty otherwise.
//! The signature covers `kind | instance | regency | digest`; the digest
//! binds the payload.

use std::sync::Arc;

use crate::auth::{digest, Digest, Signature, SignatureScheme, SigningKey};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::forensics::Poc;
use crate::ids::{ClientId, Instance, ProcessId, Regency, ReplicaId};
use crate::quorum::QuorumDesc;
use crate::replica::log::SignedLog;

pub fn encode_ids(e: &mut Encoder, ids: &[ReplicaId]) {
    e.u16(ids.len() as u16);
    for r in ids {
        e.u16(r.0);
    }
}

pub fn decode_ids(d: &mut Decoder<'_>) -> Result<Vec<ReplicaId>, DecodeError> {
    let n = d.u16()? as usize;
    (0..n).map(|_| d.u16().map(ReplicaId)).collect()
}

pub fn decode_digest(d: &mut Decoder<'_>) -> Result<Digest, DecodeError> {
    Ok(Digest(d.raw(32)?.try_into().unwrap()))
}

/// A signed client operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub client: ClientId,
    pub seq: u64,
    pub op: Vec<u8>,
    pub sig: Signature,
}

impl Request {
    pub fn signing_bytes(client: ClientId, seq: u64, op: &[u8]) -> Vec<u8> {
        let mut e = Encoder::with_domain("request");
        e.u16(client.0).u64(seq).bytes(op);
        e.finish()
    }

    pub fn new(key: &SigningKey, scheme: &dyn SignatureScheme, client: ClientId, seq: u64, op: Vec<u8>) -> Self {
        let sig = scheme.attest(key, &Self::signing_bytes(client, seq, &op));
        Self { client, seq, op, sig }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Client(self.client), &Self::signing_bytes(self.client, self.seq, &self.op), &self.sig)
    }

    pub fn key(&self) -> (ClientId, u64) {
        (self.client, self.seq)
    }

    fn encode(&self, e: &mut Encoder) {
        e.u16(self.client.0).u64(self.seq).bytes(&self.op);
        self.sig.encode(e);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self { client: ClientId(d.u16()?), seq: d.u64()?, op: d.bytes()?.to_vec(), sig: Signature::decode(d)? })
    }
}

/// A tuned placement produced by the optimizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tuning {
    pub cons_ranking: Vec<ReplicaId>,
    pub cons_leader: ReplicaId,
    pub fast_ranking: Vec<ReplicaId>,
    pub fast_leader: ReplicaId,
}

impl Tuning {
    fn encode(&self, e: &mut Encoder) {
        encode_ids(e, &self.cons_ranking);
        e.u16(self.cons_leader.0);
        encode_ids(e, &self.fast_ranking);
        e.u16(self.fast_leader.0);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            cons_ranking: decode_ids(d)?,
            cons_leader: ReplicaId(d.u16()?),
            fast_ranking: decode_ids(d)?,
            fast_leader: ReplicaId(d.u16()?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Op(Arc<Request>),
    Reconfigure { culprits: Vec<ReplicaId>, poc: Arc<Poc> },
    Tune(Tuning),
    Noop(u64),
}

impl Command {
    pub fn encode(&self, e: &mut Encoder) {
        match self {
            Command::Op(r) => {
                e.u8(0);
                r.encode(e);
            }
            Command::Reconfigure { culprits, poc } => {
                e.u8(1);
                encode_ids(e, culprits);
                poc.encode(e);
            }
            Command::Tune(t) => {
                e.u8(2);
                t.encode(e);
            }
            Command::Noop(n) => {
                e.u8(3).u64(*n);
            }
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match d.u8()? {
            0 => Command::Op(Arc::new(Request::decode(d)?)),
            1 => Command::Reconfigure { culprits: decode_ids(d)?, poc: Arc::new(Poc::decode(d)?) },
            2 => Command::Tune(Tuning::decode(d)?),
            3 => Command::Noop(d.u64()?),
            tag => return Err(DecodeError::BadTag { what: "command", tag }),
        })
    }
}

/// An ordered batch of commands; its digest is the SHA-256 of its encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub commands: Vec<Command>,
    digest: Digest,
}

impl Batch {
    pub fn new(commands: Vec<Command>) -> Self {
        let mut e = Encoder::new();
        encode_commands(&mut e, &commands);
        let digest = digest(&e.finish());
        Self { commands, digest }
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        encode_commands(&mut e, &self.commands);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let n = d.u32()? as usize;
        let commands = (0..n).map(|_| Command::decode(&mut d)).collect::<Result<Vec<_>, _>>()?;
        d.finish()?;
        Ok(Self::new(commands))
    }

    pub fn requests(&self) -> impl Iterator<Item = &Arc<Request>> {
        self.commands.iter().filter_map(|c| match c {
            Command::Op(r) => Some(r),
            _ => None,
        })
    }
}

fn encode_commands(e: &mut Encoder, commands: &[Command]) {
    e.u32(commands.len() as u32);
    for c in commands {
        c.encode(e);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConsensusKind {
    Propose,
    Write,
    Accept,
    /// Middle vote round of the seven-step pattern.
    PreCommit,
}

impl ConsensusKind {
    fn tag(self) -> u8 {
        match self {
            ConsensusKind::Propose => 1,
            ConsensusKind::Write => 2,
            ConsensusKind::Accept => 3,
            ConsensusKind::PreCommit => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        Ok(match tag {
            1 => ConsensusKind::Propose,
            2 => ConsensusKind::Write,
            3 => ConsensusKind::Accept,
            4 => ConsensusKind::PreCommit,
            tag => return Err(DecodeError::BadTag { what: "consensus kind", tag }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusMessage {
    pub kind: ConsensusKind,
    pub instance: Instance,
    pub regency: Regency,
    pub value_digest: Digest,
    pub batch: Option<Arc<Batch>>,
    pub sig: Signature,
}

impl ConsensusMessage {
    pub fn signing_bytes(kind: ConsensusKind, instance: Instance, regency: Regency, value: &Digest) -> Vec<u8> {
        let mut e = Encoder::with_domain("consensus");
        e.u8(kind.tag()).u64(instance).u64(regency).raw(&value.0);
        e.finish()
    }

    pub fn new(
        key: &SigningKey,
        scheme: &dyn SignatureScheme,
        kind: ConsensusKind,
        instance: Instance,
        regency: Regency,
        value_digest: Digest,
        batch: Option<Arc<Batch>>,
    ) -> Self {
        let sig = scheme.attest(key, &Self::signing_bytes(kind, instance, regency, &value_digest));
        Self { kind, instance, regency, value_digest, batch, sig }
    }

    pub fn sender(&self) -> Option<ReplicaId> {
        match self.sig.signer {
            ProcessId::Replica(r) => Some(r),
            _ => None,
        }
    }

    /// Checks the signature and, for PROPOSE, that the payload matches the digest.
    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        let payload_ok = match (&self.batch, self.kind) {
            (Some(b), ConsensusKind::Propose) => b.digest() == self.value_digest,
            (None, ConsensusKind::Propose) => false,
            (Some(_), _) => false,
            (None, _) => true,
        };
        payload_ok
            && self.sender().is_some()
            && scheme.check(
                self.sig.signer,
                &Self::signing_bytes(self.kind, self.instance, self.regency, &self.value_digest),
                &self.sig,
            )
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u8(self.kind.tag()).u64(self.instance).u64(self.regency).raw(&self.value_digest.0);
        match &self.batch {
            Some(b) => e.bytes(&b.to_bytes()),
            None => e.u32(0),
        };
        self.sig.encode(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let kind = ConsensusKind::from_tag(d.u8()?)?;
        let instance = d.u64()?;
        let regency = d.u64()?;
        let value_digest = decode_digest(d)?;
        let payload = d.bytes()?;
        let batch = if kind == ConsensusKind::Propose { Some(Arc::new(Batch::from_bytes(payload)?)) } else { None };
        Ok(Self { kind, instance, regency, value_digest, batch, sig: Signature::decode(d)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        let m = Self::decode(&mut d)?;
        d.finish()?;
        Ok(m)
    }
}

/// Quorum certificate redistributed by the leader in the seven-step pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub kind: ConsensusKind,
    pub instance: Instance,
    pub regency: Regency,
    pub value_digest: Digest,
    pub votes: Vec<ConsensusMessage>,
    pub quorum: QuorumDesc,
}

/// Public description of the active configuration, piggybacked on replies.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ViewDesc {
    pub epoch: u64,
    pub cons: QuorumDesc,
    pub fast: QuorumDesc,
}

impl ViewDesc {
    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.epoch);
        self.cons.encode(e);
        self.fast.encode(e);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub client: ClientId,
    pub seq: u64,
    pub instance: Instance,
    pub result: Vec<u8>,
    pub fast: bool,
    pub view: Arc<ViewDesc>,
    pub replica: ReplicaId,
    pub sig: Signature,
}

impl Reply {
    /// Bytes identical across correct replicas for the same execution.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_domain("reply");
        e.u16(self.client.0).u64(self.seq).u64(self.instance).bytes(&self.result).bool(self.fast);
        self.view.encode(&mut e);
        e.finish()
    }

    fn signing_bytes(&self) -> Vec<u8> {
        let mut b = self.body_bytes();
        b.extend_from_slice(&self.replica.0.to_be_bytes());
        b
    }

    pub fn sign(mut self, key: &SigningKey, scheme: &dyn SignatureScheme) -> Self {
        self.sig = scheme.attest(key, &self.signing_bytes());
        self
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.replica), &self.signing_bytes(), &self.sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMsg {
    pub instance: Instance,
    pub digest: Digest,
    pub replica: ReplicaId,
    pub sig: Signature,
}

impl CheckpointMsg {
    fn signing_bytes(instance: Instance, d: &Digest, replica: ReplicaId) -> Vec<u8> {
        let mut e = Encoder::with_domain("checkpoint");
        e.u64(instance).raw(&d.0).u16(replica.0);
        e.finish()
    }

    pub fn new(key: &SigningKey, scheme: &dyn SignatureScheme, instance: Instance, digest: Digest, replica: ReplicaId) -> Self {
        let sig = scheme.attest(key, &Self::signing_bytes(instance, &digest, replica));
        Self { instance, digest, replica, sig }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.replica), &Self::signing_bytes(self.instance, &self.digest, self.replica), &self.sig)
    }

    fn encode(&self, e: &mut Encoder) {
        e.u64(self.instance).raw(&self.digest.0).u16(self.replica.0);
        self.sig.encode(e);
    }
}

/// A checkpoint certified by `n - t` matching signatures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StableCheckpoint {
    pub instance: Instance,
    pub digest: Digest,
    pub snapshot: Arc<Vec<u8>>,
    pub cert: Vec<CheckpointMsg>,
}

impl StableCheckpoint {
    pub fn encode_header(&self, e: &mut Encoder) {
        e.u64(self.instance).raw(&self.digest.0);
        e.u32(self.cert.len() as u32);
        for c in &self.cert {
            c.encode(e);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StopReason {
    TimerExpired,
    ValidPoc,
    LatencyDisappointment,
    /// Joining a synchronization started by others.
    Joined,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::TimerExpired => "timer_expired",
            StopReason::ValidPoc => "valid_poc",
            StopReason::LatencyDisappointment => "latency_disappointment",
            StopReason::Joined => "joined",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stop {
    pub target: Regency,
    pub reason: StopReason,
    pub poc: Option<Arc<Poc>>,
    pub replica: ReplicaId,
    pub sig: Signature,
}

impl Stop {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_domain("stop");
        e.u64(self.target).u8(self.reason.tag()).u16(self.replica.0);
        match &self.poc {
            Some(p) => e.raw(&p.digest().0),
            None => e.u8(0),
        };
        e.finish()
    }

    pub fn new(key: &SigningKey, scheme: &dyn SignatureScheme, target: Regency, reason: StopReason, poc: Option<Arc<Poc>>, replica: ReplicaId) -> Self {
        let mut s = Self { target, reason, poc, replica, sig: Signature { signer: key.id(), tag: [0; 32] } };
        s.sig = scheme.attest(key, &s.signing_bytes());
        s
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.replica), &self.signing_bytes(), &self.sig)
    }
}

/// A WRITE quorum certificate for a value not yet known to be decided.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub instance: Instance,
    pub regency: Regency,
    pub batch: Arc<Batch>,
    pub votes: Vec<ConsensusMessage>,
    pub quorum: QuorumDesc,
}

impl Prepared {
    pub fn digest(&self) -> Digest {
        self.batch.digest()
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        let Ok(cfg) = self.quorum.build() else { return false };
        let d = self.digest();
        let mut signers = Vec::new();
        for v in &self.votes {
            let Some(s) = v.sender() else { return false };
            if !matches!(v.kind, ConsensusKind::Write)
                || v.instance != self.instance
                || v.regency != self.regency
                || v.value_digest != d
                || !v.verify(scheme)
            {
                return false;
            }
            signers.push(s);
        }
        cfg.is_quorum(&signers)
    }
}

/// State handed to the next leader during synchronization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopData {
    pub regency: Regency,
    pub replica: ReplicaId,
    pub stable: StableCheckpoint,
    pub log: SignedLog,
    pub prepared: Option<Prepared>,
    pub aborted_fast: bool,
    pub forensics: bool,
    pub sig: Signature,
}

impl StopData {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_domain("stopdata");
        e.u64(self.regency).u16(self.replica.0);
        self.stable.encode_header(&mut e);
        e.raw(&self.log.sig.tag);
        match &self.prepared {
            Some(p) => e.u8(1).u64(p.instance).u64(p.regency).raw(&p.digest().0),
            None => e.u8(0),
        };
        e.bool(self.aborted_fast).bool(self.forensics);
        e.finish()
    }

    pub fn sign(mut self, key: &SigningKey, scheme: &dyn SignatureScheme) -> Self {
        self.sig = scheme.attest(key, &self.signing_bytes());
        self
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        self.log.owner == self.replica
            && scheme.check(ProcessId::Replica(self.replica), &self.signing_bytes(), &self.sig)
            && self.log.verify_signature(scheme)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncMsg {
    pub regency: Regency,
    pub leader: ReplicaId,
    pub data: Vec<StopData>,
    pub poc: Option<Arc<Poc>>,
    pub sig: Signature,
}

impl SyncMsg {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_domain("sync");
        e.u64(self.regency).u16(self.leader.0).u32(self.data.len() as u32);
        for s in &self.data {
            e.raw(&s.sig.tag);
        }
        match &self.poc {
            Some(p) => e.raw(&p.digest().0),
            None => e.u8(0),
        };
        e.finish()
    }

    pub fn sign(mut self, key: &SigningKey, scheme: &dyn SignatureScheme) -> Self {
        self.sig = scheme.attest(key, &self.signing_bytes());
        self
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.leader), &self.signing_bytes(), &self.sig)
    }
}

/// Two conflicting fast-mode replies for one operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanicMessage {
    pub client: ClientId,
    pub seq: u64,
    pub replies: [Reply; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogFetch {
    pub audit: u64,
    pub from: Instance,
    pub to: Instance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogQuery {
    pub client: ClientId,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogAnswer {
    pub replica: ReplicaId,
    pub client: ClientId,
    pub seq: u64,
    /// Instance and result of the operation, if executed.
    pub found: Option<(Instance, Vec<u8>)>,
    pub fast: bool,
    pub stable_upto: Instance,
    pub view: Arc<ViewDesc>,
    pub sig: Signature,
}

impl LogAnswer {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_domain("log-answer");
        e.u16(self.replica.0).u16(self.client.0).u64(self.seq);
        match &self.found {
            Some((i, r)) => e.u8(1).u64(*i).bytes(r),
            None => e.u8(0),
        };
        e.bool(self.fast).u64(self.stable_upto);
        self.view.encode(&mut e);
        e.finish()
    }

    pub fn sign(mut self, key: &SigningKey, scheme: &dyn SignatureScheme) -> Self {
        self.sig = scheme.attest(key, &self.signing_bytes());
        self
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.check(ProcessId::Replica(self.replica), &self.signing_bytes(), &self.sig)
    }
}

#[derive(Clone, Debug)]
pub enum Message {
    Request(Arc<Request>),
    Consensus(ConsensusMessage),
    Certificate(Arc<Certificate>),
    Reply(Reply),
    Checkpoint(CheckpointMsg),
    Stop(Stop),
    StopData(Box<StopData>),
    Sync(Arc<SyncMsg>),
    Poc(Arc<Poc>),
    Panic(Box<PanicMessage>),
    LogFetch(LogFetch),
    LogSegment { audit: u64, log: Arc<SignedLog> },
    LogQuery(LogQuery),
    LogAnswer(LogAnswer),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Request(_) => "request",
            Message::Consensus(c) => match c.kind {
                ConsensusKind::Propose => "propose",
                ConsensusKind::Write => "write",
                ConsensusKind::Accept => "accept",
                ConsensusKind::PreCommit => "precommit",
            },
            Message::Certificate(_) => "certificate",
            Message::Reply(_) => "reply",
            Message::Checkpoint(_) => "checkpoint",
            Message::Stop(_) => "stop",
            Message::StopData(_) => "stopdata",
            Message::Sync(_) => "sync",
            Message::Poc(_) => "poc",
            Message::Panic(_) => "panic",
            Message::LogFetch(_) => "log_fetch",
            Message::LogSegment { .. } => "log_segment",
            Message::LogQuery(_) => "log_query",
            Message::LogAnswer(_) => "log_answer",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::TrustedSetup;

    #[test]
    fn consensus_wire_layout_round_trips() {
        let setup = TrustedSetup::new(1, [ProcessId::Replica(ReplicaId(2)), ProcessId::Client(ClientId(0))]);
        let scheme = setup.verifier();
        let ck = setup.key(ProcessId::Client(ClientId(0))).unwrap();
        let req = Request::new(&ck, &*scheme, ClientId(0), 1, vec![7; 10]);
        let batch = Arc::new(Batch::new(vec![Command::Op(Arc::new(req)), Command::Noop(3)]));
        let rk = setup.key(ProcessId::Replica(ReplicaId(2))).unwrap();
        let m = ConsensusMessage::new(&rk, &*scheme, ConsensusKind::Propose, 5, 1, batch.digest(), Some(batch.clone()));
        let bytes = m.to_bytes();
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[1..9], &5u64.to_be_bytes());
        assert_eq!(&bytes[9..17], &1u64.to_be_bytes());
        assert_eq!(&bytes[17..49], &batch.digest().0);
        let back = ConsensusMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(&*scheme));

        let w = ConsensusMessage::new(&rk, &*scheme, ConsensusKind::Write, 5, 1, batch.digest(), None);
        let wb = w.to_bytes();
        assert_eq!(&wb[49..53], &0u32.to_be_bytes());
        assert_eq!(ConsensusMessage::from_bytes(&wb).unwrap(), w);
    }

    #[test]
    fn tampered_propose_payload_fails() {
        let setup = TrustedSetup::new(1, [ProcessId::Replica(ReplicaId(0))]);
        let scheme = setup.verifier();
        let rk = setup.key(ProcessId::Replica(ReplicaId(0))).unwrap();
        let b1 = Arc::new(Batch::new(vec![Command::Noop(1)]));
        let b2 = Arc::new(Batch::new(vec![Command::Noop(2)]));
        let mut m = ConsensusMessage::new(&rk, &*scheme, ConsensusKind::Propose, 1, 0, b1.digest(), Some(b1));
        assert!(m.verify(&*scheme));
        m.batch = Some(b2);
        assert!(!m.verify(&*scheme));
    }
}
