// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! The per-replica state machine.
//!
//! A replica consumes one event at a time ([`Replica::on_message`],
//! [`Replica::on_timer`]) and emits [`Action`]s into an [`Outbox`]. It never
//! reads a clock; time is supplied by the caller.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod log;
pub mod sync;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::auth::{digest, Digest, SigningKey, Verifier};
use crate::codec::{Decoder, Encoder};
use crate::forensics::{verify_poc, Poc};
use crate::ids::{us_to_ms, ClientId, Instance, Micros, ProcessId, Regency, ReplicaId};
use crate::messages::{
    Batch, Certificate, Command, ConsensusKind, ConsensusMessage, LogAnswer, LogQuery, Message, Prepared, Reply,
    Request, StableCheckpoint, Stop, StopReason, Tuning, ViewDesc,
};
use crate::modes::{LatencyWatchdog, SyncState};
use crate::netsim::matrix::LatencyMatrix;
use crate::optimizer::{anneal, decision_times_us, AnnealParams, Pattern, PredictionInput, SearchSpace, Tuned};
use crate::quorum::{fast_threshold, Mode, QuorumScheme, WeightConfig};
use crate::service::CounterService;

use self::audit::AuditBook;
use self::config::ClusterConfig;
use self::log::{DecisionLog, DecisionProof, LogEntry};

/// Which protocol a deployment runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Switches to fast mode after θ consecutive decisions.
    Flash,
    /// Never leaves conservative mode.
    ConservativeOnly,
}

/// Whether the leader periodically re-optimizes weights and leader placement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuningPolicy {
    Aware,
    Static,
}

#[derive(Clone, Debug)]
pub struct ReplicaParams {
    pub variant: Variant,
    pub pattern: Pattern,
    pub tuning: TuningPolicy,
    pub theta: u64,
    pub checkpoint_interval: u64,
    pub request_timeout: Micros,
    pub reopt_every: u64,
    pub max_batch: usize,
    pub flush_idle: Micros,
    pub watchdog_window: usize,
    pub anneal_seed: u64,
}

impl Default for ReplicaParams {
    fn default() -> Self {
        Self {
            variant: Variant::Flash,
            pattern: Pattern::ThreeStep,
            tuning: TuningPolicy::Aware,
            theta: 400,
            checkpoint_interval: 16,
            request_timeout: 500_000,
            reopt_every: 200,
            max_batch: 400,
            flush_idle: 2_000_000,
            watchdog_window: 32,
            anneal_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    Request { client: ClientId, seq: u64, gen: u64 },
    Sync { regency: Regency },
    ExtraLogs { regency: Regency },
    Audit { id: u64 },
    Flush { executed: Instance },
}

/// Observations reported to the harness.
#[derive(Clone, Debug, PartialEq)]
pub enum Note {
    Timeline { event: &'static str, detail: String },
    Decided { instance: Instance, digest: Digest, fast: bool },
    Consensus { instance: Instance, start: Micros, mode: Mode, leader: ReplicaId },
    AuditTrigger { instance: Instance },
    PocVerified { culprits: Vec<ReplicaId> },
    Rollback { to: Instance },
    Panic { client: ClientId, seq: u64 },
}

#[derive(Clone, Debug)]
pub enum Action<T = Timer> {
    Send { to: Vec<ProcessId>, msg: Arc<Message> },
    Timer { at: Micros, timer: T },
    Note(Note),
}

/// Collects the actions produced while handling one event.
pub struct Outbox<T = Timer> {
    pub now: Micros,
    pub actions: Vec<Action<T>>,
}

impl<T> Outbox<T> {
    pub fn new(now: Micros) -> Self {
        Self { now, actions: Vec::new() }
    }

    pub fn send(&mut self, to: Vec<ProcessId>, msg: Message) {
        if !to.is_empty() {
            self.actions.push(Action::Send { to, msg: Arc::new(msg) });
        }
    }

    pub fn timer_in(&mut self, delay: Micros, timer: T) {
        self.actions.push(Action::Timer { at: self.now + delay, timer });
    }

    pub fn note(&mut self, n: Note) {
        self.actions.push(Action::Note(n));
    }

    pub fn timeline(&mut self, event: &'static str, detail: String) {
        self.note(Note::Timeline { event, detail });
    }
}

type TuneKey = (Vec<ReplicaId>, usize, QuorumScheme, Pattern, u64);

/// Latency measurements shared by all replicas of a simulation, plus a
/// cache of annealing results.
pub struct Monitor {
    matrix: Arc<LatencyMatrix>,
    version: u64,
    cache: RefCell<HashMap<TuneKey, Tuned>>,
}

impl Monitor {
    pub fn new(matrix: Arc<LatencyMatrix>) -> Self {
        Self { matrix, version: 0, cache: RefCell::new(HashMap::new()) }
    }

    pub fn update(&mut self, matrix: Arc<LatencyMatrix>) {
        if *matrix != *self.matrix {
            self.matrix = matrix;
            self.version += 1;
            self.cache.borrow_mut().clear();
        }
    }

    pub fn matrix(&self) -> &LatencyMatrix {
        &self.matrix
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Best annealed configuration on the current measurements.
    pub fn best(&self, members: &[ReplicaId], t: usize, scheme: QuorumScheme, pattern: Pattern, seed: u64) -> Tuned {
        let key = (members.to_vec(), t, scheme, pattern, seed);
        if let Some(t) = self.cache.borrow().get(&key) {
            return t.clone();
        }
        let space = SearchSpace { matrix: &self.matrix, members, t, scheme, pattern };
        let tuned = anneal(&space, AnnealParams { seed, ..AnnealParams::default() });
        self.cache.borrow_mut().insert(key, tuned.clone());
        tuned
    }
}

/// Context for one event.
pub struct Env<'a> {
    pub monitor: &'a Monitor,
}

#[derive(Clone)]
struct Pending {
    req: Arc<Request>,
    order: u64,
    stage: u8,
    gen: u64,
}

#[derive(Default, Clone)]
pub(crate) struct Slot {
    proposal: Option<ConsensusMessage>,
    votes: BTreeMap<(ConsensusKind, ReplicaId), ConsensusMessage>,
    certs: BTreeMap<ConsensusKind, Arc<Certificate>>,
    certs_sent: BTreeSet<ConsensusKind>,
    sent: BTreeSet<ConsensusKind>,
    decided: Option<DecisionProof>,
    conflicting: Vec<ConsensusMessage>,
    propose_rx: Option<Micros>,
    start: Option<Micros>,
}

/// One executed operation, recorded for the harness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JournalEntry {
    pub instance: Instance,
    pub client: ClientId,
    pub seq: u64,
    pub result: Vec<u8>,
}

#[derive(Clone)]
pub struct Replica {
    pub(crate) id: ReplicaId,
    pub(crate) key: SigningKey,
    pub(crate) scheme: Verifier,
    pub(crate) params: ReplicaParams,
    pub(crate) app: CounterService,
    pub(crate) config: ClusterConfig,
    cons_wc: Arc<WeightConfig>,
    fast_wc: Arc<WeightConfig>,
    view: Arc<ViewDesc>,
    cached_epoch: u64,
    /// Smallest effective threshold ever in use; floor for proof descriptors.
    pub(crate) min_t: usize,
    pub(crate) genesis: Digest,
    pub(crate) last_executed: Instance,
    pub(crate) log: DecisionLog,
    pub(crate) stable: StableCheckpoint,
    pub(crate) journal: Vec<JournalEntry>,
    pub(crate) own_ckpts: BTreeMap<Instance, (Digest, Arc<Vec<u8>>)>,
    pub(crate) ckpt_votes: BTreeMap<Instance, BTreeMap<ReplicaId, crate::messages::CheckpointMsg>>,
    pub(crate) ckpt_triggered: BTreeSet<Instance>,
    pub(crate) regency: Regency,
    pub(crate) regency_start: Instance,
    slots: BTreeMap<Instance, Slot>,
    future: Vec<ConsensusMessage>,
    ahead: BTreeMap<Instance, Vec<Message>>,
    proposed: Option<Instance>,
    pub(crate) last_prepared: Option<Prepared>,
    pending: BTreeMap<(ClientId, u64), Pending>,
    arrivals: u64,
    timer_gen: u64,
    pub(crate) forced: Option<Arc<Batch>>,
    pub(crate) pending_reconfigure: Option<(Vec<ReplicaId>, Arc<Poc>)>,
    pub(crate) known_poc: Option<Arc<Poc>>,
    flushing: bool,
    flush_armed: Option<Instance>,
    twist: bool,
    pub(crate) retune_due: bool,
    pub(crate) halted: bool,
    pub(crate) sync: SyncState,
    pub(crate) audits: AuditBook,
    watchdog: LatencyWatchdog,
    watchdog_fired: bool,
}

impl Replica {
    pub fn new(id: ReplicaId, key: SigningKey, scheme: Verifier, params: ReplicaParams, config: ClusterConfig) -> Self {
        let min_t = fast_threshold(config.t).min(config.t);
        let app = CounterService::default();
        let snapshot = Arc::new(encode_state(&app, &config));
        let genesis = digest(&snapshot);
        let window = params.watchdog_window;
        let mut r = Self {
            id,
            key,
            scheme,
            params,
            app,
            cons_wc: Arc::new(config.thresholds(Mode::Conservative).config),
            fast_wc: Arc::new(config.thresholds(Mode::Fast).config),
            view: Arc::new(config.view()),
            cached_epoch: config.epoch,
            config,
            min_t,
            genesis,
            last_executed: 0,
            log: DecisionLog::default(),
            stable: StableCheckpoint { instance: 0, digest: genesis, snapshot, cert: Vec::new() },
            journal: Vec::new(),
            own_ckpts: BTreeMap::new(),
            ckpt_votes: BTreeMap::new(),
            ckpt_triggered: BTreeSet::new(),
            regency: 0,
            regency_start: 1,
            slots: BTreeMap::new(),
            future: Vec::new(),
            ahead: BTreeMap::new(),
            proposed: None,
            last_prepared: None,
            pending: BTreeMap::new(),
            arrivals: 0,
            timer_gen: 0,
            forced: None,
            pending_reconfigure: None,
            known_poc: None,
            flushing: false,
            flush_armed: None,
            twist: false,
            retune_due: false,
            halted: false,
            sync: SyncState::default(),
            audits: AuditBook::default(),
            watchdog: LatencyWatchdog::new(window),
            watchdog_fired: false,
        };
        r.refresh_thresholds(true);
        r
    }

    // ---- inspection -------------------------------------------------------

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn regency(&self) -> Regency {
        self.regency
    }

    pub fn last_executed(&self) -> Instance {
        self.last_executed
    }

    pub fn stable_instance(&self) -> Instance {
        self.stable.instance
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn service(&self) -> &CounterService {
        &self.app
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn log_entries(&self) -> &[LogEntry] {
        self.log.entries()
    }

    pub fn in_sync(&self) -> bool {
        self.sync.active
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn known_poc(&self) -> Option<&Arc<Poc>> {
        self.known_poc.as_ref()
    }

    /// Digest of the replicated state (service and configuration).
    pub fn state_digest(&self) -> Digest {
        digest(&encode_state(&self.app, &self.config))
    }

    /// Mode of the next instance.
    pub fn mode(&self) -> Mode {
        if self.sync.active {
            Mode::Conservative
        } else {
            self.mode_of(self.last_executed + 1)
        }
    }

    /// Leader of the next instance in the current regency.
    pub fn current_leader(&self) -> ReplicaId {
        self.leader_of(self.last_executed + 1)
    }

    pub fn thresholds(&self, mode: Mode) -> &WeightConfig {
        match mode {
            Mode::Conservative => &self.cons_wc,
            Mode::Fast => &self.fast_wc,
        }
    }

    /// Makes this replica's proposals diverge from a correct leader's:
    /// operations reversed behind a marker command. Used to script
    /// equivocating leaders.
    pub fn set_equivocation_twist(&mut self, on: bool) {
        self.twist = on;
    }

    /// Perturbs the service state outside the log.
    pub fn corrupt_state(&mut self) {
        self.app.corrupt();
    }

    /// Replaces the proof of the newest log entry with an under-weight copy.
    pub fn forge_last_proof(&mut self) -> bool {
        let Some(last) = self.log.entries().last().cloned() else { return false };
        let mut forged = last.clone();
        forged.proof.accepts.truncate(1);
        self.log.truncate_after(last.instance - 1);
        self.log.push(forged);
        true
    }

    // ---- helpers ----------------------------------------------------------

    pub(crate) fn mode_of(&self, instance: Instance) -> Mode {
        crate::modes::mode_for(self.params.variant, instance, self.regency_start, self.params.theta)
    }

    pub(crate) fn leader_of(&self, instance: Instance) -> ReplicaId {
        self.config.leader(self.regency, self.mode_of(instance))
    }

    fn wc_of(&self, instance: Instance) -> Arc<WeightConfig> {
        match self.mode_of(instance) {
            Mode::Conservative => self.cons_wc.clone(),
            Mode::Fast => self.fast_wc.clone(),
        }
    }

    pub(crate) fn members(&self) -> Vec<ProcessId> {
        self.config.members.iter().map(|&m| ProcessId::Replica(m)).collect()
    }

    pub(crate) fn refresh_thresholds(&mut self, force: bool) {
        if force || self.cached_epoch != self.config.epoch || self.cons_wc.members() != &self.config.members[..] {
            let mut sorted = self.config.members.clone();
            sorted.sort();
            self.config.members = sorted;
            self.cons_wc = Arc::new(self.config.thresholds(Mode::Conservative).config);
            self.fast_wc = Arc::new(self.config.thresholds(Mode::Fast).config);
            self.view = Arc::new(self.config.view());
            self.cached_epoch = self.config.epoch;
            self.min_t = self.min_t.min(fast_threshold(self.config.t));
        }
    }

    pub(crate) fn snapshot(&self) -> Arc<Vec<u8>> {
        Arc::new(encode_state(&self.app, &self.config))
    }

    pub(crate) fn restore(&mut self, snapshot: &[u8]) -> bool {
        match decode_state(snapshot) {
            Some((app, config)) => {
                self.app = app;
                self.config = config;
                self.refresh_thresholds(true);
                true
            }
            None => false,
        }
    }

    fn next_gen(&mut self) -> u64 {
        self.timer_gen += 1;
        self.timer_gen
    }

    pub(crate) fn is_fast_now(&self) -> bool {
        !self.sync.active && self.mode_of(self.last_executed + 1) == Mode::Fast
    }

    // ---- event entry points -----------------------------------------------

    pub fn on_message(&mut self, env: &Env<'_>, from: ProcessId, msg: &Message, out: &mut Outbox) {
        if self.halted {
            return;
        }
        match msg {
            Message::Request(r) => self.handle_request(env, r.clone(), out),
            Message::Consensus(c) => self.handle_consensus(env, c, out),
            Message::Certificate(c) => self.handle_certificate(env, c.clone(), out),
            Message::Checkpoint(c) => self.handle_checkpoint(c, out),
            Message::Stop(s) => self.handle_stop(env, s, out),
            Message::StopData(s) => self.handle_stopdata(env, s, out),
            Message::Sync(s) => self.handle_sync(env, s, out),
            Message::Poc(p) => self.handle_poc(env, p.clone(), out),
            Message::Panic(p) => self.handle_panic(p, out),
            Message::LogFetch(f) => self.handle_log_fetch(from, f, out),
            Message::LogSegment { audit, log } => self.handle_log_segment(env, from, *audit, log, out),
            Message::LogQuery(q) => self.handle_log_query(from, q, out),
            Message::Reply(_) | Message::LogAnswer(_) => {}
        }
    }

    pub fn on_timer(&mut self, env: &Env<'_>, timer: &Timer, out: &mut Outbox) {
        if self.halted {
            return;
        }
        match timer {
            Timer::Request { client, seq, gen } => self.request_timer(env, (*client, *seq), *gen, out),
            Timer::Sync { regency } => self.sync_timer(*regency, out),
            Timer::ExtraLogs { regency } => self.extra_logs_timer(env, *regency, out),
            Timer::Audit { id } => self.audits.expire(*id),
            Timer::Flush { executed } => {
                if self.flush_armed == Some(*executed) {
                    self.flush_armed = None;
                    if self.last_executed == *executed && !self.sync.active {
                        self.flushing = true;
                        self.maybe_propose(env, out);
                    }
                }
            }
        }
    }

    // ---- requests ---------------------------------------------------------

    pub fn handle_request(&mut self, env: &Env<'_>, req: Arc<Request>, out: &mut Outbox) {
        if !req.verify(&*self.scheme) {
            return;
        }
        if let Some(s) = self.app.session(req.client) {
            if s.seq >= req.seq {
                if s.seq == req.seq {
                    let reply = self.make_reply(req.client, req.seq, s.instance, s.result.clone(), s.fast);
                    out.send(vec![ProcessId::Client(req.client)], Message::Reply(reply));
                }
                return;
            }
        }
        let key = req.key();
        if self.pending.contains_key(&key) {
            return;
        }
        let gen = self.next_gen();
        self.arrivals += 1;
        self.pending.insert(key, Pending { req, order: self.arrivals, stage: 0, gen });
        out.timer_in(self.params.request_timeout, Timer::Request { client: key.0, seq: key.1, gen });
        self.maybe_propose(env, out);
    }

    fn request_timer(&mut self, env: &Env<'_>, key: (ClientId, u64), gen: u64, out: &mut Outbox) {
        if self.sync.active || self.pending.get(&key).is_none_or(|p| p.gen != gen) {
            return;
        }
        let gen = self.next_gen();
        let leader = self.current_leader();
        let p = self.pending.get_mut(&key).expect("checked above");
        p.gen = gen;
        let first = p.stage == 0;
        p.stage = 1;
        let req = p.req.clone();
        out.timer_in(self.params.request_timeout, Timer::Request { client: key.0, seq: key.1, gen });
        if first {
            if leader != self.id {
                out.send(vec![ProcessId::Replica(leader)], Message::Request(req));
            }
        } else if self.is_fast_now() {
            self.request_abort(env, StopReason::TimerExpired, None, out);
        } else {
            self.send_stop(self.regency + 1, StopReason::TimerExpired, None, out);
        }
    }

    /// Re-arms every pending request timer after a regency change.
    pub(crate) fn rearm_pending(&mut self, out: &mut Outbox) {
        let keys: Vec<_> = self.pending.keys().copied().collect();
        for key in keys {
            let gen = self.next_gen();
            let p = self.pending.get_mut(&key).unwrap();
            p.gen = gen;
            p.stage = 0;
            out.timer_in(self.params.request_timeout, Timer::Request { client: key.0, seq: key.1, gen });
        }
    }

    pub(crate) fn requeue(&mut self, req: Arc<Request>) {
        if self.app.session(req.client).is_some_and(|s| s.seq >= req.seq) {
            return;
        }
        let key = req.key();
        if !self.pending.contains_key(&key) {
            self.arrivals += 1;
            let gen = self.next_gen();
            self.pending.insert(key, Pending { req, order: self.arrivals, stage: 0, gen });
        }
    }

    fn make_reply(&self, client: ClientId, seq: u64, instance: Instance, result: Vec<u8>, fast: bool) -> Reply {
        Reply {
            client,
            seq,
            instance,
            result,
            fast,
            view: self.view.clone(),
            replica: self.id,
            sig: crate::auth::Signature { signer: ProcessId::Replica(self.id), tag: [0; 32] },
        }
        .sign(&self.key, &*self.scheme)
    }

    fn handle_log_query(&mut self, from: ProcessId, q: &LogQuery, out: &mut Outbox) {
        if from != ProcessId::Client(q.client) {
            return;
        }
        let session = self.app.session(q.client).filter(|s| s.seq == q.seq);
        let answer = LogAnswer {
            replica: self.id,
            client: q.client,
            seq: q.seq,
            found: session.map(|s| (s.instance, s.result.clone())),
            fast: session.is_some_and(|s| s.fast),
            stable_upto: self.stable.instance,
            view: self.view.clone(),
            sig: crate::auth::Signature { signer: ProcessId::Replica(self.id), tag: [0; 32] },
        }
        .sign(&self.key, &*self.scheme);
        out.send(vec![from], Message::LogAnswer(answer));
    }

    // ---- normal case ------------------------------------------------------

    fn validate_batch(&self, batch: &Batch) -> bool {
        batch.commands.iter().all(|c| match c {
            Command::Op(r) => r.verify(&*self.scheme),
            Command::Reconfigure { culprits, poc } => match verify_poc(poc, &*self.scheme, self.min_t) {
                Ok(set) => {
                    set.iter().copied().eq(culprits.iter().copied()) && culprits.iter().any(|c| self.config.is_member(*c))
                }
                Err(_) => false,
            },
            Command::Tune(t) => self.config.valid_tuning(t),
            Command::Noop(_) => true,
        })
    }

    fn handle_consensus(&mut self, env: &Env<'_>, msg: &ConsensusMessage, out: &mut Outbox) {
        if !msg.verify(&*self.scheme) {
            return;
        }
        let Some(sender) = msg.sender() else { return };
        if !self.config.is_member(sender) {
            return;
        }
        if msg.regency > self.regency || (msg.regency == self.regency && self.sync.active) {
            if self.future.len() < 4096 {
                self.future.push(msg.clone());
            }
            return;
        }
        if msg.regency < self.regency || msg.instance <= self.last_executed {
            return;
        }
        if msg.instance > self.last_executed + 1 {
            self.buffer_ahead(msg.instance, Message::Consensus(msg.clone()));
            return;
        }
        let now = out.now;
        match msg.kind {
            ConsensusKind::Propose => {
                if sender != self.leader_of(msg.instance) {
                    return;
                }
                let batch_ok = msg.batch.as_ref().is_some_and(|b| self.validate_batch(b));
                let slot = self.slots.entry(msg.instance).or_default();
                if let Some(p) = &slot.proposal {
                    if p.value_digest != msg.value_digest {
                        slot.conflicting.push(msg.clone());
                    }
                    return;
                }
                if !batch_ok {
                    out.timeline("invalid_proposal", format!("{} from {sender} at {}", self.id, msg.instance));
                    self.send_stop(self.regency + 1, StopReason::TimerExpired, None, out);
                    return;
                }
                slot.proposal = Some(msg.clone());
                slot.propose_rx = Some(now);
            }
            _ => {
                let slot = self.slots.entry(msg.instance).or_default();
                slot.votes.entry((msg.kind, sender)).or_insert_with(|| msg.clone());
            }
        }
        self.progress(env, out);
    }

    fn handle_certificate(&mut self, env: &Env<'_>, cert: Arc<Certificate>, out: &mut Outbox) {
        if self.sync.active || cert.regency != self.regency || cert.instance <= self.last_executed {
            return;
        }
        if cert.instance > self.last_executed + 1 {
            self.buffer_ahead(cert.instance, Message::Certificate(cert));
            return;
        }
        let wc = self.wc_of(cert.instance);
        let mut signers = BTreeSet::new();
        for v in &cert.votes {
            if v.kind != cert.kind
                || v.instance != cert.instance
                || v.regency != cert.regency
                || v.value_digest != cert.value_digest
                || !v.verify(&*self.scheme)
            {
                return;
            }
            signers.extend(v.sender());
        }
        if !wc.is_quorum(&signers) {
            return;
        }
        self.slots.entry(cert.instance).or_default().certs.entry(cert.kind).or_insert(cert);
        self.progress(env, out);
    }

    fn buffer_ahead(&mut self, instance: Instance, msg: Message) {
        let window = 4 * self.params.checkpoint_interval.max(16);
        if instance <= self.last_executed + window {
            self.ahead.entry(instance).or_default().push(msg);
        }
    }

    /// Feeds buffered messages for the next instance back in.
    fn release_ahead(&mut self, env: &Env<'_>, out: &mut Outbox) {
        let next = self.last_executed + 1;
        self.ahead.retain(|i, _| *i >= next);
        if let Some(msgs) = self.ahead.remove(&next) {
            for m in msgs {
                match m {
                    Message::Consensus(c) => self.handle_consensus(env, &c, out),
                    Message::Certificate(c) => self.handle_certificate(env, c, out),
                    _ => {}
                }
            }
        }
    }

    fn vote(&self, kind: ConsensusKind, instance: Instance, d: Digest) -> ConsensusMessage {
        ConsensusMessage::new(&self.key, &*self.scheme, kind, instance, self.regency, d, None)
    }

    fn tally(slot: &Slot, kind: ConsensusKind, d: Digest, wc: &WeightConfig) -> Option<Vec<ConsensusMessage>> {
        let votes: Vec<&ConsensusMessage> =
            slot.votes.range((kind, ReplicaId(0))..=(kind, ReplicaId(u16::MAX))).map(|(_, v)| v).filter(|v| v.value_digest == d).collect();
        let units: u64 = votes.iter().filter_map(|v| v.sender()).map(|s| wc.units_of(s)).sum();
        (units >= wc.quorum_units).then(|| votes.into_iter().cloned().collect())
    }

    /// Drives the next undecided instance as far as the collected messages allow.
    fn progress(&mut self, env: &Env<'_>, out: &mut Outbox) {
        loop {
            if self.sync.active || self.halted {
                return;
            }
            let i = self.last_executed + 1;
            if !self.slots.contains_key(&i) {
                break;
            }
            match self.params.pattern {
                Pattern::ThreeStep => self.step_three(i, out),
                Pattern::SevenStep => self.step_seven(i, out),
            }
            let ready = self.slots.get(&i).is_some_and(|s| s.decided.is_some() && s.proposal.is_some());
            if !ready {
                break;
            }
            self.execute(env, i, out);
            self.release_ahead(env, out);
        }
        self.maybe_propose(env, out);
    }

    fn prepared_from(&self, i: Instance, batch: &Arc<Batch>, votes: Vec<ConsensusMessage>, wc: &WeightConfig) -> Prepared {
        Prepared { instance: i, regency: self.regency, batch: batch.clone(), votes, quorum: wc.descriptor() }
    }

    fn step_three(&mut self, i: Instance, out: &mut Outbox) {
        let wc = self.wc_of(i);
        let members = self.members();
        let Some(slot) = self.slots.get(&i) else { return };
        let Some(prop) = &slot.proposal else { return };
        let d = prop.value_digest;
        let batch = prop.batch.clone().expect("verified proposal has a batch");
        if !slot.sent.contains(&ConsensusKind::Write) {
            let w = self.vote(ConsensusKind::Write, i, d);
            self.slots.get_mut(&i).unwrap().sent.insert(ConsensusKind::Write);
            out.send(members.clone(), Message::Consensus(w));
        }
        let slot = &self.slots[&i];
        if !slot.sent.contains(&ConsensusKind::Accept) {
            if let Some(votes) = Self::tally(slot, ConsensusKind::Write, d, &wc) {
                self.last_prepared = Some(self.prepared_from(i, &batch, votes, &wc));
                let a = self.vote(ConsensusKind::Accept, i, d);
                self.slots.get_mut(&i).unwrap().sent.insert(ConsensusKind::Accept);
                out.send(members, Message::Consensus(a));
            }
        }
        let slot = &self.slots[&i];
        if slot.decided.is_none() {
            if let Some(accepts) = Self::tally(slot, ConsensusKind::Accept, d, &wc) {
                let proof = DecisionProof { instance: i, regency: self.regency, value_digest: d, accepts, quorum: wc.descriptor() };
                self.slots.get_mut(&i).unwrap().decided = Some(proof);
            }
        }
    }

    fn step_seven(&mut self, i: Instance, out: &mut Outbox) {
        let wc = self.wc_of(i);
        let leader = self.leader_of(i);
        let Some(slot) = self.slots.get(&i) else { return };
        let Some(prop) = &slot.proposal else { return };
        let d = prop.value_digest;
        let batch = prop.batch.clone().expect("verified proposal has a batch");
        let to_leader = vec![ProcessId::Replica(leader)];
        if !slot.sent.contains(&ConsensusKind::Write) {
            let w = self.vote(ConsensusKind::Write, i, d);
            self.slots.get_mut(&i).unwrap().sent.insert(ConsensusKind::Write);
            out.send(to_leader.clone(), Message::Consensus(w));
        }
        if leader == self.id {
            for kind in [ConsensusKind::Write, ConsensusKind::PreCommit, ConsensusKind::Accept] {
                let slot = &self.slots[&i];
                if slot.certs_sent.contains(&kind) {
                    continue;
                }
                if let Some(votes) = Self::tally(slot, kind, d, &wc) {
                    let cert = Certificate { kind, instance: i, regency: self.regency, value_digest: d, votes, quorum: wc.descriptor() };
                    self.slots.get_mut(&i).unwrap().certs_sent.insert(kind);
                    out.send(self.members(), Message::Certificate(Arc::new(cert)));
                }
            }
        }
        let slot = &self.slots[&i];
        let write_cert = slot.certs.get(&ConsensusKind::Write).cloned();
        let pre_cert = slot.certs.get(&ConsensusKind::PreCommit).cloned();
        let acc_cert = slot.certs.get(&ConsensusKind::Accept).cloned();
        if let Some(c) = write_cert {
            if !self.slots[&i].sent.contains(&ConsensusKind::PreCommit) {
                self.last_prepared = Some(self.prepared_from(i, &batch, c.votes.clone(), &wc));
                let v = self.vote(ConsensusKind::PreCommit, i, d);
                self.slots.get_mut(&i).unwrap().sent.insert(ConsensusKind::PreCommit);
                out.send(to_leader.clone(), Message::Consensus(v));
            }
        }
        if pre_cert.is_some() && !self.slots[&i].sent.contains(&ConsensusKind::Accept) {
            let v = self.vote(ConsensusKind::Accept, i, d);
            self.slots.get_mut(&i).unwrap().sent.insert(ConsensusKind::Accept);
            out.send(to_leader, Message::Consensus(v));
        }
        if let Some(c) = acc_cert {
            let slot = self.slots.get_mut(&i).unwrap();
            if slot.decided.is_none() && c.value_digest == d {
                slot.decided = Some(DecisionProof {
                    instance: i,
                    regency: self.regency,
                    value_digest: d,
                    accepts: c.votes.clone(),
                    quorum: wc.descriptor(),
                });
            }
        }
    }

    fn execute(&mut self, env: &Env<'_>, i: Instance, out: &mut Outbox) {
        let slot = self.slots.remove(&i).expect("slot exists");
        let prop = slot.proposal.expect("decided slot has a proposal");
        let proof = slot.decided.expect("slot decided");
        let mode = self.mode_of(i);
        let leader = self.leader_of(i);
        let entry = LogEntry { instance: i, batch: prop.batch.clone().expect("batch"), proof, fast: mode == Mode::Fast };
        out.note(Note::Decided { instance: i, digest: entry.digest(), fast: entry.fast });
        self.apply_entry(&entry, entry.fast, out);
        self.log.push(entry);
        self.last_executed = i;
        if self.last_prepared.as_ref().is_some_and(|p| p.instance <= i) {
            self.last_prepared = None;
        }
        if self.proposed == Some(i) {
            self.proposed = None;
            out.note(Note::Consensus { instance: i, start: slot.start.unwrap_or(out.now), mode, leader });
        }
        if mode == Mode::Fast {
            if let Some(rx) = slot.propose_rx {
                self.observe_latency(env, leader, rx, out);
            }
        }
        if self.params.variant == Variant::Flash && i + 1 == self.regency_start + self.params.theta && self.id == leader {
            out.timeline("mode_switch", format!("fast from instance {} (regency {})", i + 1, self.regency));
        }
        if i % self.params.checkpoint_interval == 0 {
            self.flushing = false;
            self.take_checkpoint(i, out);
        }
    }

    /// Applies a decided entry to the replicated state and emits replies.
    pub(crate) fn apply_entry(&mut self, entry: &LogEntry, fast_replies: bool, out: &mut Outbox) {
        let i = entry.instance;
        for cmd in &entry.batch.commands {
            match cmd {
                Command::Op(req) => {
                    self.pending.remove(&req.key());
                    if let Some(result) = self.app.execute(i, fast_replies, req.client, req.seq) {
                        self.journal.push(JournalEntry { instance: i, client: req.client, seq: req.seq, result: result.clone() });
                        let reply = self.make_reply(req.client, req.seq, i, result, fast_replies);
                        out.send(vec![ProcessId::Client(req.client)], Message::Reply(reply));
                    }
                }
                Command::Reconfigure { culprits, poc } => {
                    let valid = verify_poc(poc, &*self.scheme, self.min_t)
                        .is_ok_and(|set| set.iter().copied().eq(culprits.iter().copied()));
                    if valid && self.config.expel(culprits) {
                        self.refresh_thresholds(true);
                        self.retune_due = self.params.tuning == TuningPolicy::Aware;
                        if self.config.cons_leader == self.id {
                            out.timeline(
                                "reconfigure",
                                format!("expelled {:?}; n={} t={}", culprits.iter().map(|c| c.0).collect::<Vec<_>>(), self.config.n(), self.config.t),
                            );
                        }
                        if culprits.contains(&self.id) {
                            self.halted = true;
                        }
                    }
                    if self.pending_reconfigure.as_ref().is_some_and(|(c, _)| !c.iter().any(|x| self.config.is_member(*x))) {
                        self.pending_reconfigure = None;
                    }
                }
                Command::Tune(t) => {
                    if self.config.valid_tuning(t) {
                        self.config.apply_tuning(t, entry.proof.regency);
                        self.refresh_thresholds(true);
                        self.retune_due = false;
                    }
                }
                Command::Noop(_) => {}
            }
        }
        self.app.fold(entry.batch.digest());
    }

    fn tuning_for(&self, env: &Env<'_>) -> Option<Tuning> {
        let members = &self.config.members;
        let seed = self.params.anneal_seed;
        let cons = env.monitor.best(members, self.config.t, self.config.scheme, self.params.pattern, seed);
        let fast = env.monitor.best(members, self.config.t_fast(), self.config.scheme, self.params.pattern, seed);
        let tuning = Tuning { cons_ranking: cons.ranking(), cons_leader: cons.leader, fast_ranking: fast.ranking(), fast_leader: fast.leader };
        let same = self.cons_wc.high() == cons.cfg.high()
            && self.fast_wc.high() == fast.cfg.high()
            && self.config.cons_leader == tuning.cons_leader
            && self.config.fast_leader == tuning.fast_leader
            && self.config.tuned_at == self.regency;
        (!same).then_some(tuning)
    }

    pub(crate) fn maybe_propose(&mut self, env: &Env<'_>, out: &mut Outbox) {
        if self.halted || self.sync.active || self.proposed.is_some() {
            return;
        }
        let i = self.last_executed + 1;
        if self.leader_of(i) != self.id || self.slots.get(&i).is_some_and(|s| s.proposal.is_some()) {
            return;
        }
        let batch = if let Some(b) = self.forced.take() {
            b
        } else {
            let mut commands = Vec::new();
            if let Some((culprits, poc)) = &self.pending_reconfigure {
                commands.push(Command::Reconfigure { culprits: culprits.clone(), poc: poc.clone() });
            } else {
                let mut reqs: Vec<&Pending> = self.pending.values().collect();
                reqs.sort_by_key(|p| p.order);
                commands.extend(reqs.iter().take(self.params.max_batch).map(|p| Command::Op(p.req.clone())));
                if self.params.tuning == TuningPolicy::Aware && (i % self.params.reopt_every == 0 || self.retune_due) {
                    match self.tuning_for(env) {
                        Some(t) => commands.push(Command::Tune(t)),
                        None => self.retune_due = false,
                    }
                }
            }
            if commands.is_empty() {
                if self.flushing {
                    commands.push(Command::Noop(i));
                } else {
                    if self.last_executed % self.params.checkpoint_interval != 0 && self.flush_armed != Some(self.last_executed) {
                        self.flush_armed = Some(self.last_executed);
                        out.timer_in(self.params.flush_idle, Timer::Flush { executed: self.last_executed });
                    }
                    return;
                }
            }
            if self.twist {
                commands.reverse();
                commands.insert(0, Command::Noop(u64::MAX - i));
            }
            Arc::new(Batch::new(commands))
        };
        let msg = ConsensusMessage::new(&self.key, &*self.scheme, ConsensusKind::Propose, i, self.regency, batch.digest(), Some(batch));
        self.proposed = Some(i);
        self.slots.entry(i).or_default().start = Some(out.now);
        out.send(self.members(), Message::Consensus(msg));
    }

    pub(crate) fn forget_pending(&mut self, key: (ClientId, u64)) {
        self.pending.remove(&key);
    }

    pub(crate) fn flush_reset(&mut self) {
        self.flushing = false;
        self.flush_armed = None;
    }

    pub(crate) fn drop_undecided(&mut self) {
        self.slots.clear();
        self.ahead.clear();
        self.proposed = None;
    }

    pub(crate) fn replay_future(&mut self, env: &Env<'_>, out: &mut Outbox) {
        let future = std::mem::take(&mut self.future);
        for m in future {
            if m.regency >= self.regency {
                self.handle_consensus(env, &m, out);
            }
        }
    }

    // ---- latency watchdog -------------------------------------------------

    fn observe_latency(&mut self, env: &Env<'_>, leader: ReplicaId, propose_rx: Micros, out: &mut Outbox) {
        let m = env.monitor.matrix();
        if leader.idx() >= m.n() || self.id.idx() >= m.n() {
            return;
        }
        let start = propose_rx.saturating_sub(m.d(leader, self.id));
        self.watchdog.observe(us_to_ms(out.now.saturating_sub(start)));
        if self.watchdog_fired {
            return;
        }
        // Static clusters never move to the optimum, so they are held to the installed configuration.
        let (cfg, leader) = match self.params.tuning {
            TuningPolicy::Aware => {
                let best = env.monitor.best(&self.config.members, self.config.t, self.config.scheme, self.params.pattern, self.params.anneal_seed);
                (best.cfg, best.leader)
            }
            TuningPolicy::Static => (self.config.thresholds(Mode::Conservative).config, self.config.cons_leader),
        };
        let input = PredictionInput { matrix: m, cfg: &cfg, leader, pattern: self.params.pattern };
        let Some(expect) = decision_times_us(input).into_iter().find(|(r, _)| *r == self.id).map(|(_, t)| us_to_ms(t)) else {
            return;
        };
        if let Some(median) = self.watchdog.full_median() {
            if crate::modes::latency_watchdog(median, expect) {
                self.watchdog_fired = true;
                out.timeline("latency_disappointment", format!("{} median {median:.1} ms > expected {expect:.1} ms", self.id));
                self.request_abort(env, StopReason::LatencyDisappointment, None, out);
            }
        }
    }

    pub(crate) fn reset_watchdog(&mut self) {
        self.watchdog.reset();
        self.watchdog_fired = false;
    }

    // ---- aborts -----------------------------------------------------------

    /// Asks to leave fast mode. Has no effect in conservative mode.
    pub fn request_abort(&mut self, _env: &Env<'_>, reason: StopReason, poc: Option<Arc<Poc>>, out: &mut Outbox) -> bool {
        if !self.is_fast_now() {
            return false;
        }
        if let Some(p) = &poc {
            if verify_poc(p, &*self.scheme, self.min_t).is_err() {
                return false;
            }
        }
        let sent = self.send_stop(self.regency + 1, reason, poc, out);
        if sent {
            out.timeline("stop", format!("{} {}", self.id, reason.as_str()));
        }
        sent
    }

    /// Broadcasts a signed STOP for `target` unless one was already sent.
    pub(crate) fn send_stop(&mut self, target: Regency, reason: StopReason, poc: Option<Arc<Poc>>, out: &mut Outbox) -> bool {
        if self.sync.stop_sent >= target {
            return false;
        }
        self.sync.stop_sent = target;
        let stop = Stop::new(&self.key, &*self.scheme, target, reason, poc, self.id);
        out.send(self.members(), Message::Stop(stop));
        true
    }
}

pub(crate) fn encode_state(app: &CounterService, config: &ClusterConfig) -> Vec<u8> {
    let mut e = Encoder::new();
    app.encode(&mut e);
    config.encode(&mut e);
    e.finish()
}

pub(crate) fn decode_state(bytes: &[u8]) -> Option<(CounterService, ClusterConfig)> {
    let mut d = Decoder::new(bytes);
    let app = CounterService::decode(&mut d).ok()?;
    let config = ClusterConfig::decode(&mut d).ok()?;
    d.finish().ok()?;
    Some((app, config))
}
