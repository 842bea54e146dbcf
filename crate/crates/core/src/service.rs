// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! The replicated service: a deterministic counter with per-client sessions.

use std::collections::BTreeMap;

use crate::auth::{digest, Digest};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::ids::{ClientId, Instance};

/// Last executed operation of a client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub seq: u64,
    pub instance: Instance,
    pub result: Vec<u8>,
    /// Whether the reply went out in fast mode. Not part of the encoded state.
    pub fast: bool,
}

/// Every operation increments the counter and returns the new value as
/// eight big-endian bytes. A hash chain over executed operations makes
/// divergent histories visible in checkpoint digests.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CounterService {
    counter: u64,
    chain: Digest,
    sessions: BTreeMap<ClientId, Session>,
}

impl CounterService {
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Head of the hash chain over every decided batch digest.
    pub fn chain(&self) -> Digest {
        self.chain
    }

    pub fn session(&self, client: ClientId) -> Option<&Session> {
        self.sessions.get(&client)
    }

    pub fn sessions(&self) -> impl Iterator<Item = (ClientId, &Session)> {
        self.sessions.iter().map(|(c, s)| (*c, s))
    }

    /// Executes an operation unless the client's session already covers it.
    /// Returns the result for fresh executions.
    pub fn execute(&mut self, instance: Instance, fast: bool, client: ClientId, seq: u64) -> Option<Vec<u8>> {
        if self.sessions.get(&client).is_some_and(|s| s.seq >= seq) {
            return None;
        }
        self.counter += 1;
        let result = self.counter.to_be_bytes().to_vec();
        let mut e = Encoder::new();
        e.raw(&self.chain.0).u16(client.0).u64(seq).raw(&result);
        self.chain = digest(&e.finish());
        self.sessions.insert(client, Session { seq, instance, result: result.clone(), fast });
        Some(result)
    }

    /// Extends the hash chain with a decided batch digest.
    pub fn fold(&mut self, batch: Digest) {
        let mut e = Encoder::new();
        e.raw(&self.chain.0).raw(&batch.0);
        self.chain = digest(&e.finish());
    }

    /// Perturbs the state without a log entry, for divergence tests.
    pub fn corrupt(&mut self) {
        self.counter = self.counter.wrapping_add(1000);
        self.chain = digest(&self.chain.0);
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.counter).raw(&self.chain.0).u32(self.sessions.len() as u32);
        for (c, s) in &self.sessions {
            e.u16(c.0).u64(s.seq).u64(s.instance).bytes(&s.result);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let counter = d.u64()?;
        let chain = crate::messages::decode_digest(d)?;
        let n = d.u32()? as usize;
        let mut sessions = BTreeMap::new();
        for _ in 0..n {
            let c = ClientId(d.u16()?);
            let s = Session { seq: d.u64()?, instance: d.u64()?, result: d.bytes()?.to_vec(), fast: false };
            sessions.insert(c, s);
        }
        Ok(Self { counter, chain, sessions })
    }
}

/// Decodes a counter result.
pub fn decode_result(bytes: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(bytes.try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn executes_once_per_session_seq() {
        let mut s = CounterService::default();
        assert_eq!(s.execute(1, false, ClientId(0), 1), Some(1u64.to_be_bytes().to_vec()));
        assert_eq!(s.execute(1, false, ClientId(0), 1), None);
        assert_eq!(s.execute(2, false, ClientId(1), 1), Some(2u64.to_be_bytes().to_vec()));
        assert_eq!(s.counter(), 2);
        assert_eq!(s.session(ClientId(0)).unwrap().instance, 1);
    }

    #[test]
    fn snapshot_round_trip_and_chain_sensitivity() {
        let mut a = CounterService::default();
        a.execute(1, false, ClientId(0), 1);
        a.execute(1, false, ClientId(1), 1);
        let mut e = Encoder::new();
        a.encode(&mut e);
        let bytes = e.finish();
        assert_eq!(CounterService::decode(&mut Decoder::new(&bytes)).unwrap(), a);

        let mut b = CounterService::default();
        b.execute(1, true, ClientId(1), 1);
        b.execute(1, true, ClientId(0), 1);
        assert_eq!(a.counter(), b.counter());
        assert_ne!(a, b);
    }
}
