// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Client shim: request submission, consistency levels, panics and the
//! log-checking fallback.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::auth::{digest, Digest, SigningKey, Verifier};
use crate::codec::Encoder;
use crate::ids::{ClientId, Instance, Micros, ProcessId, ReplicaId};
use crate::messages::{LogAnswer, LogQuery, Message, PanicMessage, Reply, Request, ViewDesc};
use crate::quorum::WeightConfig;
use crate::replica::{Note, Outbox};

/// Consistency levels in increasing strength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Pending,
    First,
    Weak,
    Strong,
    Final,
}

impl Level {
    pub const ATTAINABLE: [Level; 4] = [Level::First, Level::Weak, Level::Strong, Level::Final];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Pending => "pending",
            Level::First => "first",
            Level::Weak => "weak",
            Level::Strong => "strong",
            Level::Final => "final",
        }
    }

    fn slot(self) -> Option<usize> {
        match self {
            Level::Pending => None,
            l => Some(l as usize - 1),
        }
    }
}

type Callback = Box<dyn FnMut(Level, &[u8])>;

/// Result handle that climbs consistency levels.
pub struct Correctable {
    op: (ClientId, u64),
    level: Level,
    reached: [Option<(Micros, Vec<u8>)>; 4],
    callbacks: Vec<(Level, Callback)>,
}

impl fmt::Debug for Correctable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Correctable").field("op", &self.op).field("level", &self.level).field("reached", &self.reached).finish()
    }
}

impl Correctable {
    pub fn new(op: (ClientId, u64)) -> Self {
        Self { op, level: Level::Pending, reached: Default::default(), callbacks: Vec::new() }
    }

    pub fn op(&self) -> (ClientId, u64) {
        self.op
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// Result and time at which `level` was reached.
    pub fn at(&self, level: Level) -> Option<(Micros, &[u8])> {
        level.slot().and_then(|s| self.reached[s].as_ref()).map(|(t, r)| (*t, r.as_slice()))
    }

    /// Registers a callback fired once when `level` is reached.
    pub fn on_level(&mut self, level: Level, f: impl FnMut(Level, &[u8]) + 'static) {
        self.callbacks.push((level, Box::new(f)));
    }

    /// Raises the level to `level`, filling lower unset levels with the same
    /// time and result. Lower or equal levels are ignored.
    pub fn advance(&mut self, level: Level, now: Micros, result: &[u8]) -> bool {
        if level <= self.level {
            return false;
        }
        for l in Level::ATTAINABLE {
            if l > level {
                break;
            }
            let s = l.slot().unwrap();
            if self.reached[s].is_none() {
                self.reached[s] = Some((now, result.to_vec()));
                for (want, cb) in &mut self.callbacks {
                    if *want == l {
                        cb(l, result);
                    }
                }
            }
        }
        self.level = level;
        true
    }
}

#[derive(Clone, Debug)]
pub struct ClientParams {
    pub think_max: Micros,
    pub confirm_timeout: Micros,
    /// No new operation starts at or after this time.
    pub stop_at: Micros,
    pub seed: u64,
}

impl Default for ClientParams {
    fn default() -> Self {
        Self { think_max: 1_000_000, confirm_timeout: 1_500_000, stop_at: u64::MAX, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientTimer {
    Invoke,
    Confirm { seq: u64, round: u64 },
}

/// How an operation became final.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalVia {
    Replies,
    Log,
}

/// Outcome of one operation.
#[derive(Clone, Debug)]
pub struct OpRecord {
    pub client: ClientId,
    pub seq: u64,
    pub invoked: Micros,
    pub levels: [Option<(Micros, Vec<u8>)>; 4],
    pub instance: Option<Instance>,
    pub via: Option<FinalVia>,
}

impl OpRecord {
    pub fn final_result(&self) -> Option<&[u8]> {
        self.levels[3].as_ref().map(|(_, r)| r.as_slice())
    }

    /// Latency to `level` in microseconds.
    pub fn latency(&self, level: Level) -> Option<Micros> {
        level.slot().and_then(|s| self.levels[s].as_ref()).map(|(t, _)| t - self.invoked)
    }
}

struct Op {
    corr: Correctable,
    req: Arc<Request>,
    invoked: Micros,
    replies: BTreeMap<ReplicaId, Reply>,
    answers: BTreeMap<ReplicaId, LogAnswer>,
    panicked: bool,
    round: u64,
    rebroadcast_round: u64,
    instance: Option<Instance>,
}

pub struct Client {
    id: ClientId,
    key: SigningKey,
    scheme: Verifier,
    params: ClientParams,
    view: Arc<ViewDesc>,
    cons: WeightConfig,
    fast: WeightConfig,
    view_votes: BTreeMap<u64, BTreeMap<ReplicaId, Digest>>,
    seq: u64,
    current: Option<Op>,
    records: Vec<OpRecord>,
    rng: ChaCha8Rng,
    panics: u64,
}

fn view_digest(v: &ViewDesc) -> Digest {
    let mut e = Encoder::new();
    v.encode(&mut e);
    digest(&e.finish())
}

impl Client {
    pub fn new(id: ClientId, key: SigningKey, scheme: Verifier, params: ClientParams, view: Arc<ViewDesc>) -> Self {
        let cons = view.cons.build().expect("initial view is valid");
        let fast = view.fast.build().expect("initial view is valid");
        let rng = ChaCha8Rng::seed_from_u64(params.seed ^ (u64::from(id.0) << 32) ^ 0x5eed);
        Self {
            id,
            key,
            scheme,
            params,
            view,
            cons,
            fast,
            view_votes: BTreeMap::new(),
            seq: 0,
            current: None,
            records: Vec::new(),
            rng,
            panics: 0,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    pub fn panics_sent(&self) -> u64 {
        self.panics
    }

    pub fn view_epoch(&self) -> u64 {
        self.view.epoch
    }

    /// The operation in flight, if any.
    pub fn current(&self) -> Option<&Correctable> {
        self.current.as_ref().map(|o| &o.corr)
    }

    fn replicas(&self) -> Vec<ProcessId> {
        self.view.cons.members.iter().map(|&m| ProcessId::Replica(m)).collect()
    }

    /// Schedules the first operation after a think time.
    pub fn start(&mut self, out: &mut Outbox<ClientTimer>) {
        self.schedule_next(out);
    }

    fn schedule_next(&mut self, out: &mut Outbox<ClientTimer>) {
        let think = self.rng.gen_range(0..=self.params.think_max);
        if out.now + think < self.params.stop_at {
            out.timer_in(think, ClientTimer::Invoke);
        }
    }

    /// Signs and broadcasts a new operation.
    pub fn invoke(&mut self, op: Vec<u8>, out: &mut Outbox<ClientTimer>) -> (ClientId, u64) {
        self.seq += 1;
        let req = Arc::new(Request::new(&self.key, &*self.scheme, self.id, self.seq, op));
        out.send(self.replicas(), Message::Request(req.clone()));
        out.timer_in(self.params.confirm_timeout, ClientTimer::Confirm { seq: self.seq, round: 0 });
        self.current = Some(Op {
            corr: Correctable::new((self.id, self.seq)),
            req,
            invoked: out.now,
            replies: BTreeMap::new(),
            answers: BTreeMap::new(),
            panicked: false,
            round: 0,
            rebroadcast_round: u64::MAX,
            instance: None,
        });
        (self.id, self.seq)
    }

    pub fn on_timer(&mut self, timer: &ClientTimer, out: &mut Outbox<ClientTimer>) {
        match timer {
            ClientTimer::Invoke => {
                if self.current.is_none() && out.now < self.params.stop_at {
                    self.invoke(b"inc".to_vec(), out);
                }
            }
            ClientTimer::Confirm { seq, round } => {
                let targets = self.replicas();
                let Some(op) = self.current.as_mut() else { return };
                if op.req.seq != *seq || op.round != *round || op.corr.level() == Level::Final {
                    return;
                }
                op.round += 1;
                op.answers.clear();
                out.send(targets, Message::LogQuery(LogQuery { client: self.id, seq: *seq }));
                out.timer_in(self.params.confirm_timeout, ClientTimer::Confirm { seq: *seq, round: op.round });
            }
        }
    }

    pub fn on_message(&mut self, msg: &Message, out: &mut Outbox<ClientTimer>) {
        match msg {
            Message::Reply(r) => self.on_reply(r, out),
            Message::LogAnswer(a) => self.on_log_answer(a, out),
            _ => {}
        }
    }

    fn note_view(&mut self, replica: ReplicaId, view: &Arc<ViewDesc>) {
        if view.epoch <= self.view.epoch {
            return;
        }
        let d = view_digest(view);
        let votes = self.view_votes.entry(view.epoch).or_default();
        votes.insert(replica, d);
        let same = votes.values().filter(|x| **x == d).count();
        if same > self.cons.t {
            if let (Ok(c), Ok(f)) = (view.cons.build(), view.fast.build()) {
                self.view = view.clone();
                self.cons = c;
                self.fast = f;
                let e = view.epoch;
                self.view_votes.retain(|k, _| *k > e);
            }
        }
    }

    fn on_reply(&mut self, r: &Reply, out: &mut Outbox<ClientTimer>) {
        if r.client != self.id || !r.verify(&*self.scheme) {
            return;
        }
        self.note_view(r.replica, &r.view);
        if !self.view.cons.members.contains(&r.replica) {
            return;
        }
        let Some(op) = self.current.as_mut() else { return };
        if op.req.seq != r.seq || op.corr.level() == Level::Final {
            return;
        }
        op.replies.insert(r.replica, r.clone());
        let fast_replies: Vec<&Reply> = op.replies.values().filter(|x| x.fast).collect();
        if !op.panicked {
            if let Some(other) = fast_replies.iter().find(|x| x.result != r.result && r.fast) {
                op.panicked = true;
                let p = PanicMessage { client: self.id, seq: r.seq, replies: [(*other).clone(), r.clone()] };
                self.panics += 1;
                out.note(Note::Panic { client: self.id, seq: r.seq });
                out.send(self.replicas(), Message::Panic(Box::new(p)));
            }
        }
        let op = self.current.as_mut().unwrap();
        let now = out.now;
        op.corr.advance(Level::First, now, &r.result);
        let mut groups: BTreeMap<&[u8], (Vec<ReplicaId>, Vec<ReplicaId>, Instance)> = BTreeMap::new();
        for x in op.replies.values() {
            let g = groups.entry(x.result.as_slice()).or_insert((Vec::new(), Vec::new(), x.instance));
            if x.fast {
                g.0.push(x.replica);
            } else {
                g.1.push(x.replica);
            }
        }
        let n = self.view.cons.members.len();
        let fast_final = n - self.fast.t - 1;
        let mut best: Option<(Level, Vec<u8>, Instance)> = None;
        for (result, (fast, slow, inst)) in &groups {
            let mut level = Level::First;
            let fu = self.fast.weight_of(fast);
            if fu >= self.fast.weak_units() {
                level = level.max(Level::Weak);
            }
            if fu >= self.fast.quorum_units {
                level = level.max(Level::Strong);
            }
            if !op.panicked && fast.len() >= fast_final {
                level = Level::Final;
            }
            if self.cons.weight_of(slow) >= self.cons.quorum_units {
                level = Level::Final;
            }
            if best.as_ref().is_none_or(|b| level > b.0) {
                best = Some((level, result.to_vec(), *inst));
            }
        }
        if let Some((level, result, inst)) = best {
            if op.corr.advance(level, now, &result) && level == Level::Final {
                op.instance = Some(inst);
                self.finish(FinalVia::Replies, out);
            }
        }
    }

    fn on_log_answer(&mut self, a: &LogAnswer, out: &mut Outbox<ClientTimer>) {
        if a.client != self.id || !a.verify(&*self.scheme) {
            return;
        }
        self.note_view(a.replica, &a.view);
        if !self.view.cons.members.contains(&a.replica) {
            return;
        }
        let targets = self.replicas();
        let Some(op) = self.current.as_mut() else { return };
        if op.req.seq != a.seq || op.corr.level() == Level::Final {
            return;
        }
        op.answers.insert(a.replica, a.clone());
        let n = self.view.cons.members.len();
        let mut groups: BTreeMap<(Instance, &[u8]), (usize, Vec<ReplicaId>, Vec<ReplicaId>)> = BTreeMap::new();
        let mut absent = 0;
        for x in op.answers.values() {
            match &x.found {
                Some((i, res)) => {
                    let g = groups.entry((*i, res.as_slice())).or_default();
                    if x.stable_upto >= *i {
                        g.0 += 1;
                    }
                    if x.fast {
                        g.1.push(x.replica);
                    } else {
                        g.2.push(x.replica);
                    }
                }
                None => absent += 1,
            }
        }
        let mut done = None;
        for ((i, res), (stable, fast, slow)) in &groups {
            if *stable > self.cons.t || fast.len() >= n - self.fast.t - 1 || self.cons.weight_of(slow) >= self.cons.quorum_units {
                done = Some((*i, res.to_vec()));
                break;
            }
        }
        if let Some((i, res)) = done {
            let now = out.now;
            op.corr.advance(Level::Final, now, &res);
            op.instance = Some(i);
            self.finish(FinalVia::Log, out);
            return;
        }
        if absent >= n - self.cons.t && groups.is_empty() && op.rebroadcast_round != op.round {
            op.rebroadcast_round = op.round;
            out.send(targets, Message::Request(op.req.clone()));
        }
    }

    fn finish(&mut self, via: FinalVia, out: &mut Outbox<ClientTimer>) {
        let op = self.current.take().expect("operation in flight");
        self.records.push(OpRecord {
            client: self.id,
            seq: op.req.seq,
            invoked: op.invoked,
            levels: op.corr.reached.clone(),
            instance: op.instance,
            via: Some(via),
        });
        self.schedule_next(out);
    }

    /// Records the unfinished operation, if any, at the end of a run.
    pub fn abandon(&mut self) -> Option<OpRecord> {
        let op = self.current.take()?;
        let rec = OpRecord { client: self.id, seq: op.req.seq, invoked: op.invoked, levels: op.corr.reached.clone(), instance: None, via: None };
        self.records.push(rec.clone());
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correctable_fills_lower_levels() {
        let mut c = Correctable::new((ClientId(1), 1));
        assert!(c.advance(Level::First, 10, b"a"));
        assert!(c.advance(Level::Strong, 20, b"a"));
        assert_eq!(c.at(Level::Weak), Some((20, &b"a"[..])));
        assert!(!c.advance(Level::Weak, 30, b"b"));
        assert_eq!(c.level(), Level::Strong);
    }

    #[test]
    fn callbacks_fire_once_per_level() {
        use std::cell::RefCell;
        use std::rc::Rc;
        let seen = Rc::new(RefCell::new(Vec::new()));
        let mut c = Correctable::new((ClientId(1), 1));
        for l in Level::ATTAINABLE {
            let s = seen.clone();
            c.on_level(l, move |lvl, _| s.borrow_mut().push(lvl));
        }
        c.advance(Level::Weak, 1, b"x");
        c.advance(Level::Final, 2, b"x");
        assert_eq!(*seen.borrow(), Level::ATTAINABLE.to_vec());
    }
}
