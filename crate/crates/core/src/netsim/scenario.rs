// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Scenario files: `key = value` lines, `#` comments, one `fault = ...`
//! line per fault directive.
//!
//! ```text
//! matrix = aws21
//! t = 6
//! theta = 50
//! clients = all:1
//! duration_ms = 60000
//! fault = 20000 crash leader
//! fault = 30000 slow_link 0-5 x4
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::ids::{ms_to_us, Micros};
use crate::netsim::matrix::LatencyMatrix;
use crate::optimizer::Pattern;
use crate::quorum::{optimal_threshold, QuorumScheme};
use crate::replica::{TuningPolicy, Variant};

const AWS21: &str = include_str!("../../data/aws21.csv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

impl std::error::Error for ScenarioError {}

fn err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError { line, msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSource {
    Aws21,
    File(PathBuf),
    Uniform { n: usize, ms: f64 },
    Zero { n: usize },
    TwoCluster { n: usize, a: usize, intra: f64, inter: f64 },
    Euclidean { n: usize, seed: u64, side: f64 },
    Synthetic { n: usize, seed: u64 },
}

impl MatrixSource {
    fn parse(v: &str, base: Option<&Path>, line: usize) -> Result<Self, ScenarioError> {
        let parts: Vec<&str> = v.split(':').collect();
        let num = |i: usize| -> Result<f64, ScenarioError> {
            parts.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| err(line, format!("bad matrix spec `{v}`")))
        };
        Ok(match parts[0] {
            "aws21" => MatrixSource::Aws21,
            "uniform" => MatrixSource::Uniform { n: num(1)? as usize, ms: num(2)? },
            "zero" => MatrixSource::Zero { n: num(1)? as usize },
            "two_cluster" => MatrixSource::TwoCluster { n: num(1)? as usize, a: num(2)? as usize, intra: num(3)?, inter: num(4)? },
            "euclidean" => MatrixSource::Euclidean { n: num(1)? as usize, seed: num(2)? as u64, side: num(3)? },
            "synthetic" => MatrixSource::Synthetic { n: num(1)? as usize, seed: num(2)? as u64 },
            _ => {
                let p = PathBuf::from(v);
                MatrixSource::File(match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                })
            }
        })
    }

    pub fn load(&self) -> Result<LatencyMatrix, String> {
        match self {
            MatrixSource::Aws21 => LatencyMatrix::parse_csv(AWS21).map_err(|e| e.to_string()),
            MatrixSource::File(p) => LatencyMatrix::load(p).map_err(|e| format!("{}: {e}", p.display())),
            MatrixSource::Uniform { n, ms } => Ok(LatencyMatrix::uniform(*n, *ms)),
            MatrixSource::Zero { n } => Ok(LatencyMatrix::zero(*n)),
            MatrixSource::TwoCluster { n, a, intra, inter } => Ok(LatencyMatrix::two_cluster(*n, *a, *intra, *inter)),
            MatrixSource::Euclidean { n, seed, side } => Ok(LatencyMatrix::random_euclidean(*n, *seed, *side)),
            MatrixSource::Synthetic { n, seed } => Ok(LatencyMatrix::synthetic_geo(*n, *seed)),
        }
    }
}

/// An endpoint named by a directive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Replica(u16),
    /// The leader at the time the directive fires.
    Leader,
    /// The given number of highest-weight replicas not named otherwise.
    Heavy(u16),
    Client(u16),
}

impl Target {
    fn parse(s: &str, line: usize) -> Result<Self, ScenarioError> {
        if s == "leader" {
            return Ok(Target::Leader);
        }
        if let Some(k) = s.strip_prefix("heavy:") {
            return k.parse().map(Target::Heavy).map_err(|_| err(line, format!("bad target `{s}`")));
        }
        if let Some(c) = s.strip_prefix('c') {
            return c.parse().map(Target::Client).map_err(|_| err(line, format!("bad client `{s}`")));
        }
        s.strip_prefix('r').unwrap_or(s).parse().map(Target::Replica).map_err(|_| err(line, format!("bad target `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FaultKind {
    Crash,
    Silent,
    Recover,
    EquivocateCoalition,
    SlowLink { factor: f64 },
    /// `one_way` drops only the named direction of each link.
    Drop { until: Option<Micros>, one_way: bool },
    Heal,
    Corrupt,
}

impl FaultKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::Crash => "crash",
            FaultKind::Silent => "silent",
            FaultKind::Recover => "recover",
            FaultKind::EquivocateCoalition => "equivocate_coalition",
            FaultKind::SlowLink { .. } => "slow_link",
            FaultKind::Drop { .. } => "drop",
            FaultKind::Heal => "heal",
            FaultKind::Corrupt => "corrupt",
        }
    }
}

/// A set of endpoints or links.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    None,
    Nodes(Vec<Target>),
    Links(Vec<(Target, Target)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Directive {
    pub line: usize,
    pub at: Micros,
    pub kind: FaultKind,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub matrix: MatrixSource,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub theta: u64,
    pub k: u64,
    pub variant: Variant,
    pub pattern: Pattern,
    pub scheme: QuorumScheme,
    pub tuning: TuningPolicy,
    /// (region index, client count); `None` region means one per region.
    pub clients: Vec<(Option<usize>, usize)>,
    pub payload: usize,
    pub duration: Micros,
    pub drain: Micros,
    pub seed: u64,
    pub jitter: Option<f64>,
    pub reopt_every: u64,
    pub request_timeout: Option<Micros>,
    pub confirm_timeout: Option<Micros>,
    pub flush_idle: Micros,
    pub batch: usize,
    pub think_max: Micros,
    pub monitor_interval: Micros,
    pub watchdog_window: usize,
    pub gst: Option<(Micros, f64)>,
    pub directives: Vec<Directive>,
    lines: BTreeMap<&'static str, usize>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            matrix: MatrixSource::Aws21,
            n: None,
            t: None,
            theta: 50,
            k: 16,
            variant: Variant::Flash,
            pattern: Pattern::ThreeStep,
            scheme: QuorumScheme::Wheat,
            tuning: TuningPolicy::Aware,
            clients: vec![(None, 1)],
            payload: 0,
            duration: 60_000_000,
            drain: 20_000_000,
            seed: 1,
            jitter: None,
            reopt_every: 200,
            request_timeout: None,
            confirm_timeout: None,
            flush_idle: 2_000_000,
            batch: 400,
            think_max: 1_000_000,
            monitor_interval: 10_000_000,
            watchdog_window: 32,
            gst: None,
            directives: Vec::new(),
            lines: BTreeMap::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "name", "matrix", "n", "t", "theta", "k", "variant", "pattern", "scheme", "tuning", "clients", "payload", "duration_ms",
    "drain_ms", "seed", "jitter", "reopt_every", "request_timeout_ms", "confirm_timeout_ms", "flush_idle_ms", "batch",
    "think_ms", "monitor_ms", "watchdog_window", "gst", "fault",
];

fn parse_ms(v: &str, line: usize) -> Result<Micros, ScenarioError> {
    v.parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0).map(ms_to_us).ok_or_else(|| err(line, format!("bad duration `{v}` (ms)")))
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T, ScenarioError> {
    v.parse().map_err(|_| err(line, format!("bad value `{v}` for `{key}`")))
}

fn parse_factor(v: &str, line: usize) -> Result<f64, ScenarioError> {
    v.strip_prefix('x')
        .and_then(|f| f.parse::<f64>().ok())
        .filter(|f| f.is_finite() && *f > 0.0)
        .ok_or_else(|| err(line, format!("bad factor `{v}` (expected x<positive number>)")))
}

pub fn parse_pattern(v: &str) -> Option<Pattern> {
    match v {
        "three_step" | "three" => Some(Pattern::ThreeStep),
        "seven_step" | "seven" => Some(Pattern::SevenStep),
        _ => None,
    }
}

fn parse_link(s: &str, line: usize) -> Result<(Target, Target), ScenarioError> {
    let (a, b) = s.split_once(['-', '>']).ok_or_else(|| err(line, format!("bad link `{s}` (expected a-b or a>b)")))?;
    Ok((Target::parse(a, line)?, Target::parse(b, line)?))
}

fn parse_directive(v: &str, line: usize) -> Result<Directive, ScenarioError> {
    let mut it = v.split_whitespace();
    let at = parse_ms(it.next().ok_or_else(|| err(line, "empty fault directive"))?, line)?;
    let kind = it.next().ok_or_else(|| err(line, "fault directive needs a kind"))?;
    let rest: Vec<&str> = it.collect();
    let nodes = |s: Option<&&str>| -> Result<Vec<Target>, ScenarioError> {
        let s = s.ok_or_else(|| err(line, format!("`{kind}` needs targets")))?;
        s.split(',').map(|x| Target::parse(x, line)).collect()
    };
    let (kind, targets) = match kind {
        "crash" => (FaultKind::Crash, Targets::Nodes(nodes(rest.first())?)),
        "silent" => (FaultKind::Silent, Targets::Nodes(nodes(rest.first())?)),
        "recover" => (FaultKind::Recover, Targets::Nodes(nodes(rest.first())?)),
        "corrupt" => (FaultKind::Corrupt, Targets::Nodes(nodes(rest.first())?)),
        "equivocate_coalition" => (FaultKind::EquivocateCoalition, Targets::Nodes(nodes(rest.first())?)),
        "heal" => (FaultKind::Heal, Targets::None),
        "slow_link" => {
            let spec = rest.first().ok_or_else(|| err(line, "slow_link needs a link or replica"))?;
            let factor = parse_factor(rest.get(1).ok_or_else(|| err(line, "slow_link needs a factor like x4"))?, line)?;
            let targets = if spec.contains('-') {
                Targets::Links(spec.split(',').map(|l| parse_link(l, line)).collect::<Result<_, _>>()?)
            } else {
                Targets::Nodes(nodes(Some(spec))?)
            };
            (FaultKind::SlowLink { factor }, targets)
        }
        "drop" => {
            let spec = rest.first().ok_or_else(|| err(line, "drop needs a link"))?;
            let links = spec.split(',').map(|l| parse_link(l, line)).collect::<Result<_, _>>()?;
            let one_way = spec.contains('>');
            if one_way && spec.contains('-') {
                return Err(err(line, "drop links must be all `a-b` or all `a>b`"));
            }
            let until = match rest.get(1) {
                Some(u) => Some(parse_ms(u.strip_prefix("until=").ok_or_else(|| err(line, format!("bad drop option `{u}`")))?, line)?),
                None => None,
            };
            (FaultKind::Drop { until, one_way }, Targets::Links(links))
        }
        other => return Err(err(line, format!("unknown fault kind `{other}`"))),
    };
    Ok(Directive { line, at, kind, targets })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(0, format!("{}: {e}", path.display())))?;
        let mut sc = Self::parse(&text, path.parent())?;
        if !sc.lines.contains_key("name") {
            sc.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(sc.name);
        }
        Ok(sc)
    }

    /// Parses scenario text. Relative matrix paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = *KEYS.iter().find(|x| **x == k).ok_or_else(|| err(line, format!("unknown key `{k}`")))?;
            if key != "fault" && sc.lines.insert(key, line).is_some() {
                return Err(err(line, format!("duplicate key `{key}`")));
            }
            match key {
                "name" => sc.name = v.to_string(),
                "matrix" => sc.matrix = MatrixSource::parse(v, base, line)?,
                "n" => sc.n = Some(parse_num(v, line, key)?),
                "t" => sc.t = Some(parse_num(v, line, key)?),
                "theta" => sc.theta = parse_num(v, line, key)?,
                "k" => sc.k = parse_num(v, line, key)?,
                "variant" => {
                    sc.variant = match v {
                        "flash" => Variant::Flash,
                        "conservative_only" => Variant::ConservativeOnly,
                        _ => return Err(err(line, format!("bad variant `{v}` (flash|conservative_only)"))),
                    }
                }
                "pattern" => sc.pattern = parse_pattern(v).ok_or_else(|| err(line, format!("bad pattern `{v}` (three_step|seven_step)")))?,
                "scheme" => {
                    sc.scheme = match v {
                        "wheat" => QuorumScheme::Wheat,
                        "egalitarian" => QuorumScheme::Egalitarian,
                        _ => return Err(err(line, format!("bad scheme `{v}` (wheat|egalitarian)"))),
                    }
                }
                "tuning" => {
                    sc.tuning = match v {
                        "aware" => TuningPolicy::Aware,
                        "static" => TuningPolicy::Static,
                        _ => return Err(err(line, format!("bad tuning `{v}` (aware|static)"))),
                    }
                }
                "clients" => {
                    let mut out = Vec::new();
                    for part in v.split(',') {
                        let (r, c) = part.trim().split_once(':').ok_or_else(|| err(line, format!("bad client spec `{part}` (region:count)")))?;
                        let region = if r == "all" { None } else { Some(parse_num(r, line, key)?) };
                        out.push((region, parse_num(c, line, key)?));
                    }
                    sc.clients = out;
                }
                "payload" => sc.payload = parse_num(v, line, key)?,
                "duration_ms" => sc.duration = parse_ms(v, line)?,
                "drain_ms" => sc.drain = parse_ms(v, line)?,
                "seed" => sc.seed = parse_num(v, line, key)?,
                "jitter" => {
                    sc.jitter = match v {
                        "off" => None,
                        _ => Some(
                            v.strip_prefix("truncnorm:")
                                .and_then(|s| s.parse::<f64>().ok())
                                .filter(|s| s.is_finite() && *s >= 0.0 && *s < 0.5)
                                .ok_or_else(|| err(line, format!("bad jitter `{v}` (off|truncnorm:<sigma in [0,0.5)>)")))?,
                        ),
                    }
                }
                "reopt_every" => sc.reopt_every = parse_num(v, line, key)?,
                "request_timeout_ms" => sc.request_timeout = Some(parse_ms(v, line)?),
                "confirm_timeout_ms" => sc.confirm_timeout = Some(parse_ms(v, line)?),
                "flush_idle_ms" => sc.flush_idle = parse_ms(v, line)?,
                "batch" => sc.batch = parse_num(v, line, key)?,
                "think_ms" => sc.think_max = parse_ms(v, line)?,
                "monitor_ms" => sc.monitor_interval = parse_ms(v, line)?,
                "watchdog_window" => sc.watchdog_window = parse_num(v, line, key)?,
                "gst" => {
                    let mut it = v.split_whitespace();
                    let at = parse_ms(it.next().unwrap_or(""), line)?;
                    let f = parse_factor(it.next().ok_or_else(|| err(line, "gst needs a pre-GST factor like x3"))?, line)?;
                    sc.gst = Some((at, f));
                }
                "fault" => sc.directives.push(parse_directive(v, line)?),
                _ => unreachable!(),
            }
        }
        sc.directives.sort_by_key(|d| d.at);
        Ok(sc)
    }

    fn line_of(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    /// Checks the scenario against its matrix and returns the effective
    /// `(n, t)`.
    pub fn validate(&self, m: &LatencyMatrix) -> Result<(usize, usize), ScenarioError> {
        let n = self.n.unwrap_or(m.n());
        if n > m.n() || n == 0 {
            return Err(err(self.line_of("n"), format!("n = {n} but the matrix has {} regions", m.n())));
        }
        let t = self.t.unwrap_or(optimal_threshold(n));
        if n < 3 * t + 1 {
            return Err(err(self.line_of("t"), format!("n = {n} cannot tolerate t = {t} (needs n >= 3t+1)")));
        }
        if self.theta == 0 {
            return Err(err(self.line_of("theta"), "theta must be at least 1"));
        }
        if self.k == 0 {
            return Err(err(self.line_of("k"), "k must be at least 1"));
        }
        if self.batch == 0 {
            return Err(err(self.line_of("batch"), "batch must be at least 1"));
        }
        if self.drain >= self.duration {
            return Err(err(self.line_of("drain_ms"), "drain_ms must be shorter than duration_ms"));
        }
        let clients = self.client_regions(m.n());
        for (region, _) in &self.clients {
            if let Some(r) = region {
                if *r >= m.n() {
                    return Err(err(self.line_of("clients"), format!("client region {r} out of range (matrix has {})", m.n())));
                }
            }
        }
        for d in &self.directives {
            let check = |tg: &Target| -> Result<(), ScenarioError> {
                match tg {
                    Target::Replica(r) if usize::from(*r) >= n => {
                        Err(err(d.line, format!("{} targets replica {r} but n = {n}", d.kind.as_str())))
                    }
                    Target::Client(c) if usize::from(*c) >= clients.len() => {
                        Err(err(d.line, format!("{} targets client {c} but there are {} clients", d.kind.as_str(), clients.len())))
                    }
                    _ => Ok(()),
                }
            };
            match &d.targets {
                Targets::None => {}
                Targets::Nodes(v) => {
                    for x in v {
                        check(x)?;
                        if matches!(x, Target::Client(_)) && !matches!(d.kind, FaultKind::SlowLink { .. }) {
                            return Err(err(d.line, format!("{} cannot target a client", d.kind.as_str())));
                        }
                        if let Target::Heavy(k) = x {
                            if usize::from(*k) > n {
                                return Err(err(d.line, format!("heavy:{k} exceeds n = {n}")));
                            }
                        }
                    }
                }
                Targets::Links(v) => {
                    for (a, b) in v {
                        check(a)?;
                        check(b)?;
                        if matches!((a, b), (Target::Client(_), Target::Client(_))) {
                            return Err(err(d.line, "client-to-client links do not exist"));
                        }
                    }
                }
            }
            if d.kind == FaultKind::EquivocateCoalition {
                let Targets::Nodes(v) = &d.targets else { unreachable!() };
                let mut members = v.clone();
                members.sort();
                members.dedup();
                let size: usize = members.iter().map(|m| if let Target::Heavy(k) = m { usize::from(*k) } else { 1 }).sum();
                if size > t {
                    return Err(err(
                        d.line,
                        format!("equivocate_coalition has {size} members but t = {t}; coalitions larger than t are outside the fault model"),
                    ));
                }
                if self.pattern == Pattern::SevenStep {
                    return Err(err(d.line, "equivocate_coalition is only scripted for the three_step pattern"));
                }
            }
            if d.at >= self.duration {
                return Err(err(d.line, format!("{} fires after the end of the run", d.kind.as_str())));
            }
        }
        Ok((n, t))
    }

    /// Region index of every client, in client-id order.
    pub fn client_regions(&self, regions: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (region, count) in &self.clients {
            match region {
                None => {
                    for r in 0..regions {
                        out.extend(std::iter::repeat_n(r, *count));
                    }
                }
                Some(r) => out.extend(std::iter::repeat_n(*r, *count)),
            }
        }
        out
    }

    /// Conservative-only, egalitarian, untuned copy of this scenario.
    pub fn baseline(&self) -> Self {
        let mut b = self.clone();
        b.name = format!("{}-baseline", self.name);
        b.variant = Variant::ConservativeOnly;
        b.scheme = QuorumScheme::Egalitarian;
        b.tuning = TuningPolicy::Static;
        b
    }

    /// Matrix and workload fields that must agree for two runs to be compared.
    pub fn workload_key(&self) -> String {
        format!(
            "matrix={:?} n={:?} clients={:?} payload={} duration={} drain={} think={}",
            self.matrix, self.n, self.clients, self.payload, self.duration, self.drain, self.think_max
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_faults() {
        let sc = Scenario::parse(
            "# demo\nmatrix = uniform:4:10\nt = 1\ntheta = 3\nfault = 100 crash leader\nfault = 50 slow_link 0-1 x4\nfault = 70 drop 2-c0 until=90\n",
            None,
        )
        .unwrap();
        assert_eq!(sc.matrix, MatrixSource::Uniform { n: 4, ms: 10.0 });
        assert_eq!(sc.directives.len(), 3);
        assert_eq!(sc.directives[0].kind, FaultKind::SlowLink { factor: 4.0 });
        assert_eq!(sc.directives[1].targets, Targets::Links(vec![(Target::Replica(2), Target::Client(0))]));
        assert_eq!(sc.directives[2].targets, Targets::Nodes(vec![Target::Leader]));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Scenario::parse("t = 1\n\nbogus = 3\n", None).unwrap_err();
        assert_eq!(e.line, 3);
        let e = Scenario::parse("fault = 10 explode 1\n", None).unwrap_err();
        assert_eq!(e.to_string(), "line 1: unknown fault kind `explode`");
    }

    #[test]
    fn oversized_coalition_names_the_directive() {
        let sc = Scenario::parse("matrix = uniform:10:10\nt = 3\nfault = 10 equivocate_coalition 1,2,3,4\n", None).unwrap();
        let e = sc.validate(&sc.matrix.load().unwrap()).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("equivocate_coalition"));
    }
}
