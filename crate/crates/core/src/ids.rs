// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Identifiers and simulated time.

use std::fmt;

/// Consensus instance sequence number. Instance 0 is the genesis state.
pub type Instance = u64;
/// Regency (view) number.
pub type Regency = u64;
/// Simulated time in microseconds.
pub type Micros = u64;

/// Converts milliseconds to whole microseconds, rounding to nearest.
pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

/// Converts microseconds to milliseconds.
pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u16);

/// Any process that can sign or receive messages.
///
/// The derived order (harness, replicas, clients) is the simulator's
/// tiebreak for simultaneous events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProcessId {
    Harness,
    Replica(ReplicaId),
    Client(ClientId),
}

impl ReplicaId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessId::Harness => write!(f, "harness"),
            ProcessId::Replica(r) => r.fmt(f),
            ProcessId::Client(c) => c.fmt(f),
        }
    }
}

impl From<ReplicaId> for ProcessId {
    fn from(r: ReplicaId) -> Self {
        ProcessId::Replica(r)
    }
}

impl From<ClientId> for ProcessId {
    fn from(c: ClientId) -> Self {
        ProcessId::Client(c)
    }
}
