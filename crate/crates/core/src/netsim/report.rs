// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Metric tables derived from a [`Trace`] and the CSV files written for them.
//!
//! Schemas (all times in simulated milliseconds, three decimals):
//!
//! * `clients.csv`: `client,region,level,mean_ms,median_ms,p95_ms,count`
//! * `consensus.csv`: `instance,start_ms,decide_ms,mode,leader`
//! * `timeline.csv`: `at_ms,event,detail`
//! * `summary.csv`: `key,value`
//! * `speedup.csv`: `metric,baseline_ms,run_ms,speedup`

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use crate::client::Level;
use crate::ids::us_to_ms;
use crate::quorum::Mode;

use super::sim::{mean, ConsensusRow, TimelineRow, Trace};

/// Latency statistics of one client at one level, over its finalized operations.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub client: u16,
    pub region: String,
    pub level: Level,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub count: usize,
}

/// Aggregates compared across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub workload_key: String,
    pub labels: Vec<String>,
    pub consensus_mean_ms: f64,
    /// Mean latency per level over all finalized operations.
    pub level_mean_ms: BTreeMap<String, f64>,
    pub fields: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub clients: Vec<LevelStats>,
    pub consensus: Vec<ConsensusRow>,
    pub timeline: Vec<TimelineRow>,
    pub summary: Summary,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn fmt_ms(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.3}")
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

impl Report {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut clients = Vec::new();
        let mut all: BTreeMap<Level, Vec<f64>> = BTreeMap::new();
        for c in &trace.clients {
            let done: Vec<_> = c.ops.iter().filter(|o| o.final_result().is_some()).collect();
            for level in Level::ATTAINABLE {
                let mut v: Vec<f64> = done.iter().filter_map(|o| o.latency(level)).map(us_to_ms).collect();
                all.entry(level).or_default().extend(&v);
                v.sort_by(f64::total_cmp);
                clients.push(LevelStats {
                    client: c.client.0,
                    region: c.region.clone(),
                    level,
                    mean_ms: mean(v.iter().copied()),
                    median_ms: percentile(&v, 50.0),
                    p95_ms: percentile(&v, 95.0),
                    count: v.len(),
                });
            }
        }
        let level_mean_ms = all.iter().map(|(l, v)| (l.as_str().to_string(), mean(v.iter().copied()))).collect();
        let mut fields = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            fields.insert(k.to_string(), v);
        };
        put("n", trace.n.to_string());
        put("t", trace.t.to_string());
        put("instances", trace.consensus.len().to_string());
        put("consensus_fast_ms", fmt_ms(trace.mean_consensus_ms_in(Mode::Fast)));
        put("consensus_conservative_ms", fmt_ms(trace.mean_consensus_ms_in(Mode::Conservative)));
        put("linearizable", trace.linearizable.is_ok().to_string());
        put("regressions", trace.regressions.len().to_string());
        put("unfinished", trace.unfinished.len().to_string());
        put("conflicting_instances", trace.conflicting_instances.len().to_string());
        put("pocs", trace.poc_culprits.len().to_string());
        put("rollbacks", trace.rollbacks.to_string());
        put("panics", trace.panics.to_string());
        put("audit_triggers", trace.audit_triggers.to_string());
        put("inert_directives", trace.inert.len().to_string());
        put("final_members", trace.final_members.len().to_string());
        put("events", trace.events.to_string());
        Report {
            clients,
            consensus: trace.consensus.clone(),
            timeline: trace.timeline.clone(),
            summary: Summary {
                scenario: trace.scenario.clone(),
                workload_key: trace.workload_key.clone(),
                labels: trace.labels.clone(),
                consensus_mean_ms: trace.mean_consensus_ms(),
                level_mean_ms,
                fields,
            },
        }
    }

    pub fn clients_csv(&self) -> String {
        csv_string(
            &["client", "region", "level", "mean_ms", "median_ms", "p95_ms", "count"],
            self.clients.iter().map(|s| {
                vec![
                    s.client.to_string(),
                    s.region.clone(),
                    s.level.as_str().to_string(),
                    fmt_ms(s.mean_ms),
                    fmt_ms(s.median_ms),
                    fmt_ms(s.p95_ms),
                    s.count.to_string(),
                ]
            }),
        )
    }

    pub fn consensus_csv(&self) -> String {
        csv_string(
            &["instance", "start_ms", "decide_ms", "mode", "leader"],
            self.consensus.iter().map(|r| {
                vec![r.instance.to_string(), fmt_ms(us_to_ms(r.start)), fmt_ms(us_to_ms(r.decide)), r.mode.as_str().to_string(), r.leader.0.to_string()]
            }),
        )
    }

    pub fn timeline_csv(&self) -> String {
        csv_string(&["at_ms", "event", "detail"], self.timeline.iter().map(|r| vec![fmt_ms(us_to_ms(r.at)), r.event.clone(), r.detail.clone()]))
    }

    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        let mut rows = vec![
            vec!["scenario".into(), s.scenario.clone()],
            vec!["workload_key".into(), s.workload_key.clone()],
            vec!["labels".into(), s.labels.join(";")],
            vec!["consensus_mean_ms".into(), fmt_ms(s.consensus_mean_ms)],
        ];
        rows.extend(s.level_mean_ms.iter().map(|(l, v)| vec![format!("{l}_mean_ms"), fmt_ms(*v)]));
        rows.extend(s.fields.iter().map(|(k, v)| vec![k.clone(), v.clone()]));
        csv_string(&["key", "value"], rows)
    }

    /// Writes `clients.csv`, `consensus.csv`, `timeline.csv` and `summary.csv`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("clients.csv"), self.clients_csv())?;
        fs::write(dir.join("consensus.csv"), self.consensus_csv())?;
        fs::write(dir.join("timeline.csv"), self.timeline_csv())?;
        fs::write(dir.join("summary.csv"), self.summary_csv())
    }
}

impl Summary {
    /// Reads a `summary.csv` written by [`Report::write`].
    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join("summary.csv"))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut s = Summary::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let (k, v) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
            let num = || v.parse::<f64>().unwrap_or(f64::NAN);
            match k {
                "scenario" => s.scenario = v.to_string(),
                "workload_key" => s.workload_key = v.to_string(),
                "labels" => s.labels = v.split(';').map(str::to_string).collect(),
                "consensus_mean_ms" => s.consensus_mean_ms = num(),
                _ => match k.strip_suffix("_mean_ms") {
                    Some(level) => {
                        s.level_mean_ms.insert(level.to_string(), num());
                    }
                    None => {
                        s.fields.insert(k.to_string(), v.to_string());
                    }
                },
            }
        }
        Ok(s)
    }
}

/// Refusal to compare runs with different matrices or workloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompareError(pub String);

impl fmt::Display for CompareError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CompareError {}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub metric: String,
    pub baseline_ms: f64,
    pub run_ms: f64,
    pub speedup: f64,
}

/// Speedups of `run` over `baseline` for consensus and every client level.
pub fn compare(baseline: &Summary, run: &Summary) -> Result<Vec<SpeedupRow>, CompareError> {
    if baseline.labels != run.labels {
        return Err(CompareError(format!(
            "matrix labels differ: {} vs {}",
            baseline.labels.join(";"),
            run.labels.join(";")
        )));
    }
    if baseline.workload_key != run.workload_key {
        return Err(CompareError(format!("workloads differ: `{}` vs `{}`", baseline.workload_key, run.workload_key)));
    }
    let row = |metric: &str, b: f64, r: f64| SpeedupRow { metric: metric.to_string(), baseline_ms: b, run_ms: r, speedup: b / r };
    let mut rows = vec![row("consensus", baseline.consensus_mean_ms, run.consensus_mean_ms)];
    for level in Level::ATTAINABLE {
        let key = level.as_str();
        if let (Some(b), Some(r)) = (baseline.level_mean_ms.get(key), run.level_mean_ms.get(key)) {
            rows.push(row(key, *b, *r));
        }
    }
    Ok(rows)
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    csv_string(
        &["metric", "baseline_ms", "run_ms", "speedup"],
        rows.iter().map(|r| vec![r.metric.clone(), fmt_ms(r.baseline_ms), fmt_ms(r.run_ms), format!("{:.4}", r.speedup)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert!(percentile(&[], 50.0).is_nan());
    }

    fn summary(key: &str, consensus: f64) -> Summary {
        Summary {
            workload_key: key.into(),
            labels: vec!["a".into(), "b".into()],
            consensus_mean_ms: consensus,
            level_mean_ms: [("final".to_string(), 2.0 * consensus)].into_iter().collect(),
            ..Summary::default()
        }
    }

    #[test]
    fn compare_ratios_and_refusal() {
        let rows = compare(&summary("w", 300.0), &summary("w", 100.0)).unwrap();
        assert_eq!(rows[0].speedup, 3.0);
        assert_eq!(rows.iter().find(|r| r.metric == "final").unwrap().speedup, 3.0);
        assert!(compare(&summary("w", 1.0), &summary("w", 1.0)).unwrap().iter().all(|r| r.speedup == 1.0));
        assert!(compare(&summary("w", 1.0), &summary("x", 1.0)).is_err());
    }
}
