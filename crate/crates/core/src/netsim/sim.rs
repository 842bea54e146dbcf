// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of replicas and clients over a latency matrix.
//!
//! Events are totally ordered by (virtual time, source process, per-source
//! sequence number); the loop is single-threaded.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::auth::{Digest, TrustedSetup};
use crate::client::{Client, ClientParams, ClientTimer, OpRecord};
use crate::history::{check, CounterSpec, HistOp};
use crate::ids::{ClientId, Instance, Micros, ProcessId, Regency, ReplicaId};
use crate::messages::Message;
use crate::netsim::matrix::LatencyMatrix;
use crate::netsim::scenario::{FaultKind, Scenario, ScenarioError, Target, Targets};
use crate::optimizer::{predict_latency_us, PredictionInput};
use crate::quorum::{fast_threshold, Mode};
use crate::replica::config::ClusterConfig;
use crate::replica::{Action, Env, Monitor, Note, Outbox, Replica, ReplicaParams, Timer, TuningPolicy};
use crate::service::decode_result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Persona {
    A,
    B,
}

enum EvKind {
    Deliver { to: ProcessId, persona: Persona, from: ProcessId, msg: Arc<Message> },
    ReplicaTimer { id: ReplicaId, persona: Persona, timer: Timer },
    ClientTimer { id: ClientId, timer: ClientTimer },
    Directive(usize),
    Monitor,
    Start,
}

struct Ev {
    at: Micros,
    src: ProcessId,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Ev {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.at, self.src, self.seq).cmp(&(o.at, o.src, o.seq))
    }
}

/// One decided instance as seen by its leader.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusRow {
    pub instance: Instance,
    pub start: Micros,
    pub decide: Micros,
    pub mode: Mode,
    pub leader: ReplicaId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimelineRow {
    pub at: Micros,
    pub event: String,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ClientTrace {
    pub client: ClientId,
    pub region: String,
    pub ops: Vec<OpRecord>,
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct Trace {
    pub scenario: String,
    pub workload_key: String,
    pub labels: Vec<String>,
    pub n: usize,
    pub t: usize,
    pub clients: Vec<ClientTrace>,
    pub consensus: Vec<ConsensusRow>,
    pub timeline: Vec<TimelineRow>,
    /// Instances at which correct replicas decided different batches.
    pub conflicting_instances: BTreeSet<Instance>,
    /// Distinct culprit sets of verified proofs of culpability.
    pub poc_culprits: Vec<BTreeSet<ReplicaId>>,
    /// Replicas scripted as Byzantine by an active coalition.
    pub adversaries: BTreeSet<ReplicaId>,
    /// Replicas that were crashed, silent or Byzantine at some point.
    pub faulty: BTreeSet<ReplicaId>,
    /// Source lines of directives that could not take effect.
    pub inert: Vec<usize>,
    pub final_members: Vec<ReplicaId>,
    pub final_t: usize,
    pub audit_triggers: u64,
    pub rollbacks: u64,
    pub panics: u64,
    pub events: u64,
    /// Result of checking final-level results for linearizability.
    pub linearizable: Result<(), String>,
    /// Finalized results contradicted by a correct replica's state.
    pub regressions: Vec<String>,
    /// Operations of correct clients that never reached final.
    pub unfinished: Vec<(ClientId, u64)>,
}

impl Trace {
    pub fn mean_consensus_ms(&self) -> f64 {
        mean(self.consensus.iter().map(|r| (r.decide - r.start) as f64 / 1000.0))
    }

    pub fn mean_consensus_ms_in(&self, mode: Mode) -> f64 {
        mean(self.consensus.iter().filter(|r| r.mode == mode).map(|r| (r.decide - r.start) as f64 / 1000.0))
    }

    /// Position of the first timeline row with `event` at or after `from`.
    pub fn find_event(&self, event: &str, from: usize) -> Option<usize> {
        self.timeline.iter().enumerate().skip(from).find(|(_, r)| r.event == event).map(|(i, _)| i)
    }
}

pub fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

struct Attack {
    coalition: BTreeSet<ReplicaId>,
    camp_b: BTreeSet<ReplicaId>,
    regency: Regency,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{0}")]
    Scenario(#[from] ScenarioError),
    #[error("matrix: {0}")]
    Matrix(String),
}

pub struct Sim {
    sc: Scenario,
    n: usize,
    t: usize,
    matrix: LatencyMatrix,
    regions: Vec<usize>,
    replicas: Vec<Replica>,
    shadows: BTreeMap<ReplicaId, Replica>,
    clients: Vec<Client>,
    monitor: Monitor,
    queue: BinaryHeap<Reverse<Ev>>,
    seqs: HashMap<ProcessId, u64>,
    fifo: HashMap<(ProcessId, Persona, ProcessId, Persona), Micros>,
    now: Micros,
    crashed: BTreeSet<ReplicaId>,
    silent: BTreeSet<ReplicaId>,
    slow_links: HashMap<(ProcessId, ProcessId), f64>,
    slow_nodes: HashMap<ProcessId, f64>,
    dropped: Vec<(ProcessId, ProcessId, Option<Micros>)>,
    attack: Option<Attack>,
    jitter: HashMap<(ProcessId, ProcessId), ChaCha8Rng>,
    // trace accumulation
    consensus: Vec<ConsensusRow>,
    timeline: Vec<TimelineRow>,
    decisions: BTreeMap<Instance, BTreeMap<Digest, BTreeSet<ReplicaId>>>,
    conflicting: BTreeSet<Instance>,
    poc_culprits: Vec<BTreeSet<ReplicaId>>,
    adversaries: BTreeSet<ReplicaId>,
    faulty: BTreeSet<ReplicaId>,
    inert: Vec<usize>,
    audit_triggers: u64,
    rollbacks: u64,
    panics: u64,
    events: u64,
}

/// Validates and runs a scenario.
pub fn run(sc: &Scenario) -> Result<Trace, SimError> {
    Ok(Sim::new(sc)?.run())
}

impl Sim {
    pub fn new(sc: &Scenario) -> Result<Self, SimError> {
        let matrix = sc.matrix.load().map_err(SimError::Matrix)?;
        let (n, t) = sc.validate(&matrix)?;
        let regions = sc.client_regions(matrix.n());
        let members: Vec<ReplicaId> = (0..n as u16).map(ReplicaId).collect();
        let mut ids: Vec<ProcessId> = members.iter().map(|&r| ProcessId::Replica(r)).collect();
        ids.extend((0..regions.len() as u16).map(|c| ProcessId::Client(ClientId(c))));
        let setup = TrustedSetup::new(sc.seed, ids.iter().copied());
        let monitor = Monitor::new(Arc::new(matrix.submatrix_map(n, |_, _, d| d)));

        let anneal_seed = 1;
        let mut config = ClusterConfig::initial(members.clone(), t, sc.scheme);
        if sc.tuning == TuningPolicy::Aware {
            let cons = monitor.best(&members, t, sc.scheme, sc.pattern, anneal_seed);
            let fast = monitor.best(&members, fast_threshold(t), sc.scheme, sc.pattern, anneal_seed);
            config.cons_ranking = cons.ranking();
            config.cons_leader = cons.leader;
            config.fast_ranking = fast.ranking();
            config.fast_leader = fast.leader;
        }
        let cons_wc = config.thresholds(Mode::Conservative).config;
        let predicted = predict_latency_us(PredictionInput {
            matrix: monitor.matrix(),
            cfg: &cons_wc,
            leader: config.cons_leader,
            pattern: sc.pattern,
        });
        let request_timeout = sc.request_timeout.unwrap_or((2 * predicted).max(500_000));
        let params = ReplicaParams {
            variant: sc.variant,
            pattern: sc.pattern,
            tuning: sc.tuning,
            theta: sc.theta,
            checkpoint_interval: sc.k,
            request_timeout,
            reopt_every: sc.reopt_every.max(1),
            max_batch: sc.batch,
            flush_idle: sc.flush_idle,
            watchdog_window: sc.watchdog_window,
            anneal_seed,
        };
        let verifier = setup.verifier();
        let replicas: Vec<Replica> = members
            .iter()
            .map(|&r| Replica::new(r, setup.key(ProcessId::Replica(r)).unwrap(), verifier.clone(), params.clone(), config.clone()))
            .collect();
        let view = Arc::new(config.view());
        let cparams = ClientParams {
            think_max: sc.think_max,
            confirm_timeout: sc.confirm_timeout.unwrap_or(3 * request_timeout),
            stop_at: sc.duration - sc.drain,
            seed: sc.seed,
        };
        let clients = (0..regions.len() as u16)
            .map(|c| {
                let id = ClientId(c);
                Client::new(id, setup.key(ProcessId::Client(id)).unwrap(), verifier.clone(), cparams.clone(), view.clone())
            })
            .collect();
        Ok(Self {
            sc: sc.clone(),
            n,
            t,
            matrix,
            regions,
            replicas,
            shadows: BTreeMap::new(),
            clients,
            monitor,
            queue: BinaryHeap::new(),
            seqs: HashMap::new(),
            fifo: HashMap::new(),
            now: 0,
            crashed: BTreeSet::new(),
            silent: BTreeSet::new(),
            slow_links: HashMap::new(),
            slow_nodes: HashMap::new(),
            dropped: Vec::new(),
            attack: None,
            jitter: HashMap::new(),
            consensus: Vec::new(),
            timeline: Vec::new(),
            decisions: BTreeMap::new(),
            conflicting: BTreeSet::new(),
            poc_culprits: Vec::new(),
            adversaries: BTreeSet::new(),
            faulty: BTreeSet::new(),
            inert: Vec::new(),
            audit_triggers: 0,
            rollbacks: 0,
            panics: 0,
            events: 0,
        })
    }

    fn push(&mut self, at: Micros, src: ProcessId, kind: EvKind) {
        let seq = self.seqs.entry(src).or_insert(0);
        *seq += 1;
        self.queue.push(Reverse(Ev { at, src, seq: *seq, kind }));
    }

    fn location(&self, p: ProcessId) -> usize {
        match p {
            ProcessId::Replica(r) => r.idx(),
            ProcessId::Client(c) => self.regions[usize::from(c.0)],
            ProcessId::Harness => 0,
        }
    }

    fn link_factor(&self, a: ProcessId, b: ProcessId) -> f64 {
        let mut f = 1.0;
        for key in [(a, b), (b, a)] {
            if let Some(x) = self.slow_links.get(&key) {
                f *= x;
            }
        }
        for p in [a, b] {
            if let Some(x) = self.slow_nodes.get(&p) {
                f *= x;
            }
        }
        f
    }

    fn delay(&mut self, from: ProcessId, to: ProcessId) -> Micros {
        if from == to {
            return 0;
        }
        let base = self.matrix.delay_us(self.location(from), self.location(to));
        let mut f = self.link_factor(from, to);
        if let Some((gst, x)) = self.sc.gst {
            if self.now < gst {
                f *= x;
            }
        }
        if let Some(sigma) = self.sc.jitter.filter(|s| *s > 0.0) {
            let seed = self.sc.seed;
            let rng = self.jitter.entry((from, to)).or_insert_with(|| {
                let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                for p in [from, to] {
                    s = s.rotate_left(17) ^ process_code(p);
                }
                ChaCha8Rng::seed_from_u64(s)
            });
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            let z = loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 * sigma {
                    break z;
                }
            };
            f *= 1.0 + z;
        }
        (base as f64 * f).round() as Micros
    }

    fn is_dropped(&self, a: ProcessId, b: ProcessId) -> bool {
        self.dropped.iter().any(|(x, y, until)| *x == a && *y == b && until.is_none_or(|u| self.now < u))
    }

    fn send(&mut self, from: ProcessId, fp: Persona, to: ProcessId, tp: Persona, msg: Arc<Message>) {
        if from != to && self.is_dropped(from, to) {
            return;
        }
        let d = self.delay(from, to);
        let key = (from, fp, to, tp);
        let at = (self.now + d).max(self.fifo.get(&key).copied().unwrap_or(0));
        self.fifo.insert(key, at);
        self.push(at, from, EvKind::Deliver { to, persona: tp, from, msg });
    }

    /// Routes one message under the active attack, if any.
    fn route(&mut self, from: ProcessId, fp: Persona, to: ProcessId, msg: &Arc<Message>) {
        let Some(att) = &self.attack else {
            self.send(from, fp, to, Persona::A, msg.clone());
            return;
        };
        let in_c = |p: ProcessId| matches!(p, ProcessId::Replica(r) if att.coalition.contains(&r));
        let in_b = |p: ProcessId| matches!(p, ProcessId::Replica(r) if att.camp_b.contains(&r));
        let mut targets = Vec::new();
        match (fp, in_c(from)) {
            (Persona::B, _) => {
                if in_b(to) || matches!(to, ProcessId::Client(_)) {
                    targets.push(Persona::A);
                } else if in_c(to) {
                    targets.push(Persona::B);
                }
            }
            (Persona::A, true) => {
                if !in_b(to) {
                    targets.push(Persona::A);
                }
            }
            (Persona::A, false) => {
                if in_c(to) {
                    if matches!(from, ProcessId::Client(_)) {
                        targets.extend([Persona::A, Persona::B]);
                    } else if in_b(from) {
                        targets.push(Persona::B);
                    } else {
                        targets.push(Persona::A);
                    }
                } else {
                    targets.push(Persona::A);
                }
            }
        }
        for tp in targets {
            self.send(from, fp, to, tp, msg.clone());
        }
    }

    fn timeline(&mut self, event: &str, detail: String) {
        self.timeline.push(TimelineRow { at: self.now, event: event.to_string(), detail });
    }

    fn is_adversary(&self, r: ReplicaId) -> bool {
        self.attack.as_ref().is_some_and(|a| a.coalition.contains(&r))
    }

    fn dispatch_replica(&mut self, id: ReplicaId, persona: Persona, actions: Vec<Action>) {
        let me = ProcessId::Replica(id);
        let mute = self.crashed.contains(&id) || self.silent.contains(&id);
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    if mute {
                        continue;
                    }
                    for dst in to {
                        if persona == Persona::B && dst == me {
                            self.send(me, Persona::B, me, Persona::B, msg.clone());
                        } else {
                            self.route(me, persona, dst, &msg);
                        }
                    }
                }
                Action::Timer { at, timer } => self.push(at, me, EvKind::ReplicaTimer { id, persona, timer }),
                Action::Note(note) => {
                    if persona == Persona::A {
                        self.record_note(id, note);
                    }
                }
            }
        }
    }

    fn record_note(&mut self, id: ReplicaId, note: Note) {
        match note {
            Note::Timeline { event, detail } => self.timeline(event, detail),
            Note::Decided { instance, digest, .. } => {
                if !self.is_adversary(id) && !self.faulty.contains(&id) {
                    let m = self.decisions.entry(instance).or_default();
                    m.entry(digest).or_default().insert(id);
                    if m.len() > 1 {
                        self.conflicting.insert(instance);
                    }
                }
            }
            Note::Consensus { instance, start, mode, leader } => {
                self.consensus.push(ConsensusRow { instance, start, decide: self.now, mode, leader });
            }
            Note::AuditTrigger { .. } => self.audit_triggers += 1,
            Note::PocVerified { culprits } => {
                let set: BTreeSet<ReplicaId> = culprits.into_iter().collect();
                if !self.poc_culprits.contains(&set) {
                    self.poc_culprits.push(set);
                }
            }
            Note::Rollback { .. } => self.rollbacks += 1,
            Note::Panic { .. } => self.panics += 1,
        }
    }

    fn dispatch_client(&mut self, id: ClientId, actions: Vec<Action<ClientTimer>>) {
        let me = ProcessId::Client(id);
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    for dst in to {
                        self.route(me, Persona::A, dst, &msg);
                    }
                }
                Action::Timer { at, timer } => self.push(at, me, EvKind::ClientTimer { id, timer }),
                Action::Note(note) => self.record_note(ReplicaId(u16::MAX), note),
            }
        }
    }

    fn reference(&self) -> &Replica {
        self.replicas
            .iter()
            .filter(|r| !self.crashed.contains(&r.id()) && !self.silent.contains(&r.id()) && !r.is_halted() && !self.is_adversary(r.id()))
            .max_by_key(|r| (r.regency(), r.last_executed()))
            .unwrap_or(&self.replicas[0])
    }

    fn resolve(&self, t: Target) -> ProcessId {
        match t {
            Target::Replica(r) => ProcessId::Replica(ReplicaId(r)),
            Target::Client(c) => ProcessId::Client(ClientId(c)),
            Target::Leader | Target::Heavy(_) => ProcessId::Replica(self.reference().current_leader()),
        }
    }

    fn resolve_replicas(&self, targets: &Targets) -> Vec<ReplicaId> {
        let mut out = Vec::new();
        let Targets::Nodes(v) = targets else { return out };
        for t in v.iter().filter(|t| !matches!(t, Target::Heavy(_))) {
            if let ProcessId::Replica(r) = self.resolve(*t) {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        let reference = self.reference();
        let wc = reference.thresholds(reference.mode());
        let mut by_weight: Vec<ReplicaId> = wc.members().to_vec();
        by_weight.sort_by_key(|r| (Reverse(wc.units_of(*r)), *r));
        for t in v {
            if let Target::Heavy(k) = t {
                let extra: Vec<ReplicaId> = by_weight.iter().copied().filter(|r| !out.contains(r)).take(usize::from(*k)).collect();
                out.extend(extra);
            }
        }
        out
    }

    fn apply_directive(&mut self, idx: usize) {
        let d = self.sc.directives[idx].clone();
        let names = |v: &[ReplicaId]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        match &d.kind {
            FaultKind::Crash => {
                let v = self.resolve_replicas(&d.targets);
                self.crashed.extend(v.iter().copied());
                self.faulty.extend(v.iter().copied());
                self.timeline("crash", names(&v));
                self.refresh_monitor();
            }
            FaultKind::Silent => {
                let v = self.resolve_replicas(&d.targets);
                self.silent.extend(v.iter().copied());
                self.faulty.extend(v.iter().copied());
                self.timeline("silent", names(&v));
                self.refresh_monitor();
            }
            FaultKind::Recover => {
                let v = self.resolve_replicas(&d.targets);
                for r in &v {
                    self.crashed.remove(r);
                    self.silent.remove(r);
                }
                self.timeline("recover", names(&v));
                self.refresh_monitor();
            }
            FaultKind::Corrupt => {
                let v = self.resolve_replicas(&d.targets);
                for r in &v {
                    self.replicas[r.idx()].corrupt_state();
                }
                self.faulty.extend(v.iter().copied());
                self.timeline("corrupt", names(&v));
            }
            FaultKind::SlowLink { factor } => {
                match &d.targets {
                    Targets::Nodes(v) => {
                        for t in v {
                            let p = self.resolve(*t);
                            *self.slow_nodes.entry(p).or_insert(1.0) *= factor;
                        }
                    }
                    Targets::Links(v) => {
                        for (a, b) in v {
                            let (a, b) = (self.resolve(*a), self.resolve(*b));
                            *self.slow_links.entry((a, b)).or_insert(1.0) *= factor;
                        }
                    }
                    Targets::None => {}
                }
                self.timeline("slow_link", format!("line {} x{factor}", d.line));
                self.refresh_monitor();
            }
            FaultKind::Drop { until, one_way } => {
                if let Targets::Links(v) = &d.targets {
                    for (a, b) in v {
                        let (a, b) = (self.resolve(*a), self.resolve(*b));
                        self.dropped.push((a, b, *until));
                        if !one_way {
                            self.dropped.push((b, a, *until));
                        }
                    }
                }
                self.timeline("drop", format!("line {}", d.line));
            }
            FaultKind::Heal => {
                self.slow_links.clear();
                self.slow_nodes.clear();
                self.dropped.clear();
                self.timeline("heal", String::new());
                self.refresh_monitor();
            }
            FaultKind::EquivocateCoalition => self.start_attack(d.line, &d.targets),
        }
    }

    /// Splits correct replicas into two camps that each reach a quorum
    /// together with the coalition. Camp B is filled greedily by weight.
    fn start_attack(&mut self, line: usize, targets: &Targets) {
        let coalition: BTreeSet<ReplicaId> = self.resolve_replicas(targets).into_iter().collect();
        let reference = self.reference();
        let leader = reference.current_leader();
        let mode = reference.mode();
        let wc = reference.thresholds(mode).clone();
        let regency = reference.regency();
        let inert = |why: String, sim: &mut Sim| {
            sim.inert.push(line);
            sim.timeline("inert", format!("line {line}: {why}"));
        };
        if self.attack.is_some() {
            return inert("an attack is already active".into(), self);
        }
        if !coalition.contains(&leader) {
            return inert(format!("leader {leader} is not in the coalition"), self);
        }
        let c_units = wc.weight_of(&coalition);
        if c_units >= wc.quorum_units {
            return inert("coalition alone forms a quorum".into(), self);
        }
        let mut correct: Vec<ReplicaId> =
            wc.members().iter().copied().filter(|r| !coalition.contains(r) && !self.crashed.contains(r) && !self.silent.contains(r)).collect();
        correct.sort_by_key(|r| (Reverse(wc.units_of(*r)), *r));
        let mut camp_b = BTreeSet::new();
        let mut b_units = c_units;
        for r in &correct {
            if b_units >= wc.quorum_units {
                break;
            }
            camp_b.insert(*r);
            b_units += wc.units_of(*r);
        }
        let a_units = c_units + correct.iter().filter(|r| !camp_b.contains(r)).map(|r| wc.units_of(*r)).sum::<u64>();
        if b_units < wc.quorum_units || a_units < wc.quorum_units {
            return inert(format!("camps cannot both reach {} units in {} mode", wc.quorum_units, mode.as_str()), self);
        }
        for &c in &coalition {
            let mut shadow = self.replicas[c.idx()].clone();
            shadow.set_equivocation_twist(c == leader);
            self.shadows.insert(c, shadow);
        }
        // The second personas inherit everything already in flight.
        let mut copies: Vec<(Micros, ProcessId, u64, EvKind)> = self
            .queue
            .iter()
            .filter_map(|Reverse(ev)| match &ev.kind {
                EvKind::Deliver { to: to @ ProcessId::Replica(r), persona: Persona::A, from, msg } if coalition.contains(r) => {
                    Some((ev.at, ev.src, ev.seq, EvKind::Deliver { to: *to, persona: Persona::B, from: *from, msg: msg.clone() }))
                }
                EvKind::ReplicaTimer { id, persona: Persona::A, timer } if coalition.contains(id) => {
                    Some((ev.at, ev.src, ev.seq, EvKind::ReplicaTimer { id: *id, persona: Persona::B, timer: timer.clone() }))
                }
                _ => None,
            })
            .collect();
        copies.sort_by_key(|c| (c.0, c.1, c.2));
        for (at, src, _, kind) in copies {
            self.push(at, src, kind);
        }
        self.adversaries.extend(coalition.iter().copied());
        self.faulty.extend(coalition.iter().copied());
        let fmt = |s: &BTreeSet<ReplicaId>| s.iter().map(|r| r.0.to_string()).collect::<Vec<_>>().join(",");
        self.timeline("equivocate", format!("coalition {} camp_b {} ({} mode)", fmt(&coalition), fmt(&camp_b), mode.as_str()));
        self.attack = Some(Attack { coalition, camp_b, regency });
    }

    fn refresh_monitor(&mut self) {
        let n = self.n;
        let dead = |i: usize| {
            let r = ReplicaId(i as u16);
            self.crashed.contains(&r) || self.silent.contains(&r)
        };
        let factors: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let f = self.link_factor(ProcessId::Replica(ReplicaId(i as u16)), ProcessId::Replica(ReplicaId(j as u16)));
                        if dead(i) || dead(j) {
                            f * UNRESPONSIVE
                        } else {
                            f
                        }
                    })
                    .collect()
            })
            .collect();
        let m = self.matrix.submatrix_map(n, |i, j, d| (d as f64 * factors[i][j]).round() as Micros);
        self.monitor.update(Arc::new(m));
    }

    fn end_attack_if_over(&mut self) {
        let Some(att) = &self.attack else { return };
        let advanced = self.replicas.iter().any(|r| !att.coalition.contains(&r.id()) && r.regency() > att.regency);
        if advanced {
            self.shadows.clear();
            self.attack = None;
            self.timeline("attack_over", "second personas withdrawn".into());
        }
    }

    fn step(&mut self, ev: Ev) {
        self.events += 1;
        match ev.kind {
            EvKind::Start => {
                for c in 0..self.clients.len() {
                    let mut out = Outbox::new(self.now);
                    self.clients[c].start(&mut out);
                    self.dispatch_client(ClientId(c as u16), out.actions);
                }
                if self.sc.monitor_interval > 0 {
                    self.push(self.sc.monitor_interval, ProcessId::Harness, EvKind::Monitor);
                }
            }
            EvKind::Monitor => {
                self.refresh_monitor();
                self.push(self.now + self.sc.monitor_interval, ProcessId::Harness, EvKind::Monitor);
            }
            EvKind::Directive(i) => self.apply_directive(i),
            EvKind::Deliver { to, persona, from, msg } => match to {
                ProcessId::Replica(r) => {
                    if self.crashed.contains(&r) || r.idx() >= self.n {
                        return;
                    }
                    let mut out = Outbox::new(self.now);
                    let env = Env { monitor: &self.monitor };
                    match persona {
                        Persona::A => self.replicas[r.idx()].on_message(&env, from, &msg, &mut out),
                        Persona::B => match self.shadows.get_mut(&r) {
                            Some(s) => s.on_message(&env, from, &msg, &mut out),
                            None => return,
                        },
                    }
                    self.dispatch_replica(r, persona, out.actions);
                    self.end_attack_if_over();
                }
                ProcessId::Client(c) => {
                    let mut out = Outbox::new(self.now);
                    self.clients[usize::from(c.0)].on_message(&msg, &mut out);
                    self.dispatch_client(c, out.actions);
                }
                ProcessId::Harness => {}
            },
            EvKind::ReplicaTimer { id, persona, timer } => {
                if self.crashed.contains(&id) {
                    return;
                }
                let mut out = Outbox::new(self.now);
                let env = Env { monitor: &self.monitor };
                match persona {
                    Persona::A => self.replicas[id.idx()].on_timer(&env, &timer, &mut out),
                    Persona::B => match self.shadows.get_mut(&id) {
                        Some(s) => s.on_timer(&env, &timer, &mut out),
                        None => return,
                    },
                }
                self.dispatch_replica(id, persona, out.actions);
                self.end_attack_if_over();
            }
            EvKind::ClientTimer { id, timer } => {
                let mut out = Outbox::new(self.now);
                self.clients[usize::from(id.0)].on_timer(&timer, &mut out);
                self.dispatch_client(id, out.actions);
            }
        }
    }

    pub fn run(mut self) -> Trace {
        self.push(0, ProcessId::Harness, EvKind::Start);
        for i in 0..self.sc.directives.len() {
            let at = self.sc.directives[i].at;
            self.push(at, ProcessId::Harness, EvKind::Directive(i));
        }
        if let Some((gst, _)) = self.sc.gst {
            self.timeline.push(TimelineRow { at: gst, event: "gst".into(), detail: String::new() });
        }
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.at > self.sc.duration {
                break;
            }
            self.now = ev.at;
            self.step(ev);
        }
        self.timeline.sort_by_key(|r| r.at);
        self.finish()
    }

    fn finish(mut self) -> Trace {
        for c in &mut self.clients {
            c.abandon();
        }
        let mut unfinished = Vec::new();
        let mut hist = Vec::new();
        for c in &self.clients {
            for op in c.records() {
                match op.final_result() {
                    Some(r) => {
                        let v = decode_result(r).unwrap_or(u64::MAX);
                        hist.push(HistOp { call: op.invoked, ret: Some((op.levels[3].as_ref().unwrap().0, v)), op: () });
                    }
                    None => {
                        unfinished.push((op.client, op.seq));
                        hist.push(HistOp { call: op.invoked, ret: None, op: () });
                    }
                }
            }
        }
        let linearizable = check(&CounterSpec, &hist).map(|_| ()).map_err(|e| format!("no linearization (deepest {})", e.deepest));
        let mut regressions = Vec::new();
        for r in &self.replicas {
            if self.faulty.contains(&r.id()) || r.is_halted() {
                continue;
            }
            let journal: HashMap<(ClientId, u64), &crate::replica::JournalEntry> = r.journal().iter().map(|j| ((j.client, j.seq), j)).collect();
            for c in &self.clients {
                for op in c.records() {
                    let (Some(res), Some(inst)) = (op.final_result(), op.instance) else { continue };
                    match journal.get(&(op.client, op.seq)) {
                        Some(j) if j.result != res => {
                            regressions.push(format!("{} has {}#{} = {:?}, client finalized {:?}", r.id(), op.client, op.seq, decode_result(&j.result), decode_result(res)))
                        }
                        Some(_) => {}
                        None => {
                            let covered = r.service().session(op.client).is_some_and(|s| s.seq >= op.seq);
                            if r.last_executed() >= inst && !covered {
                                regressions.push(format!("{} executed past {inst} without {}#{}", r.id(), op.client, op.seq));
                            }
                        }
                    }
                }
            }
        }
        let reference = self.reference();
        let final_members = reference.config().members.clone();
        let final_t = reference.config().t;
        let labels = self.matrix.labels().to_vec();
        let clients = self
            .clients
            .iter()
            .map(|c| ClientTrace { client: c.id(), region: labels[self.regions[usize::from(c.id().0)]].clone(), ops: c.records().to_vec() })
            .collect();
        self.consensus.sort_by_key(|r| (r.instance, r.decide));
        self.consensus.dedup_by_key(|r| r.instance);
        Trace {
            scenario: self.sc.name.clone(),
            workload_key: self.sc.workload_key(),
            labels,
            n: self.n,
            t: self.t,
            clients,
            consensus: self.consensus,
            timeline: self.timeline,
            conflicting_instances: self.conflicting,
            poc_culprits: self.poc_culprits,
            adversaries: self.adversaries,
            faulty: self.faulty,
            inert: self.inert,
            final_members,
            final_t,
            audit_triggers: self.audit_triggers,
            rollbacks: self.rollbacks,
            panics: self.panics,
            events: self.events,
            linearizable,
            regressions,
            unfinished,
        }
    }
}

/// Delay multiplier the monitor reports for links of crashed or silent replicas.
const UNRESPONSIVE: f64 = 1000.0;

fn process_code(p: ProcessId) -> u64 {
    match p {
        ProcessId::Harness => 0,
        ProcessId::Replica(r) => 0x1_0000 | u64::from(r.0),
        ProcessId::Client(c) => 0x2_0000 | u64::from(c.0),
    }
}
