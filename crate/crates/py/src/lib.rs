// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Python module `flashbft_py`.
//!
//! Matrices are lists of rows of one-way delays in milliseconds. Replicas
//! are numbered from zero. `high` lists the replicas that get the high
//! weight; when omitted the lowest ids get it.

use flashbft::ids::{us_to_ms, ReplicaId};
use flashbft::netsim::matrix::LatencyMatrix;
use flashbft::netsim::report::Report;
use flashbft::netsim::scenario::{parse_pattern, Scenario};
use flashbft::netsim::sim;
use flashbft::optimizer::{self, AnnealParams, Pattern, PredictionInput, SearchSpace, Tuned};
use flashbft::quorum::{compute_weight_config, identity_ranking, QuorumScheme, WeightConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pattern(name: &str) -> PyResult<Pattern> {
    parse_pattern(name).ok_or_else(|| value_error(format!("unknown pattern `{name}` (expected three_step or seven_step)")))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<LatencyMatrix> {
    let labels = (0..rows.len()).map(|i| format!("r{i}")).collect();
    LatencyMatrix::from_ms(labels, rows).map_err(value_error)
}

fn replica(n: usize, id: u16) -> PyResult<ReplicaId> {
    if usize::from(id) < n {
        Ok(ReplicaId(id))
    } else {
        Err(value_error(format!("replica {id} out of range for n={n}")))
    }
}

/// High-weight replicas first, then the others in id order.
fn ranking(n: usize, high: Option<Vec<u16>>) -> PyResult<Vec<ReplicaId>> {
    let Some(high) = high else { return Ok(identity_ranking(n)) };
    let mut out = Vec::with_capacity(n);
    for id in high {
        let r = replica(n, id)?;
        if out.contains(&r) {
            return Err(value_error(format!("replica {id} listed twice")));
        }
        out.push(r);
    }
    let rest: Vec<ReplicaId> = identity_ranking(n).into_iter().filter(|r| !out.contains(r)).collect();
    out.extend(rest);
    Ok(out)
}

fn config(n: usize, t: usize, high: Option<Vec<u16>>) -> PyResult<WeightConfig> {
    compute_weight_config(n, t, &ranking(n, high)?).map_err(value_error)
}

fn tuned<'py>(py: Python<'py>, t: &Tuned) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("leader", t.leader.0)?;
    d.set_item("high", t.cfg.high().iter().map(|r| r.0).collect::<Vec<_>>())?;
    d.set_item("latency_ms", t.latency_ms())?;
    Ok(d)
}

/// Weight units per replica, the quorum threshold and Δ for n replicas tolerating t.
#[pyfunction]
#[pyo3(signature = (n, t, high=None))]
fn weights<'py>(py: Python<'py>, n: usize, t: usize, high: Option<Vec<u16>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(n, t, high)?;
    let d = PyDict::new(py);
    d.set_item("units", cfg.members().iter().map(|r| cfg.units_of(*r)).collect::<Vec<_>>())?;
    d.set_item("quorum_units", cfg.quorum_units)?;
    d.set_item("delta", cfg.delta)?;
    d.set_item("min_quorum", cfg.min_quorum_cardinality())?;
    d.set_item("max_quorum", cfg.max_quorum_cardinality())?;
    Ok(d)
}

/// Predicted consensus latency in milliseconds.
#[pyfunction]
#[pyo3(signature = (matrix_ms, t, leader=0, high=None, pattern="three_step"))]
fn predict_latency(matrix_ms: Vec<Vec<f64>>, t: usize, leader: u16, high: Option<Vec<u16>>, pattern: &str) -> PyResult<f64> {
    let m = matrix(&matrix_ms)?;
    let cfg = config(m.n(), t, high)?;
    let input = PredictionInput { matrix: &m, cfg: &cfg, leader: replica(m.n(), leader)?, pattern: self::pattern(pattern)? };
    Ok(us_to_ms(optimizer::predict_latency_us(input)))
}

/// Best weight assignment and leader found by simulated annealing.
#[pyfunction]
#[pyo3(signature = (matrix_ms, t, pattern="three_step", seed=1))]
fn anneal<'py>(py: Python<'py>, matrix_ms: Vec<Vec<f64>>, t: usize, pattern: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix(&matrix_ms)?;
    let members = identity_ranking(m.n());
    let space = SearchSpace { matrix: &m, members: &members, t, scheme: QuorumScheme::Wheat, pattern: self::pattern(pattern)? };
    config(m.n(), t, None)?; // rejects an infeasible t before searching
    tuned(py, &optimizer::anneal(&space, AnnealParams { seed, ..AnnealParams::default() }))
}

/// Optimum over every weight assignment and leader. Exponential in n.
#[pyfunction]
#[pyo3(signature = (matrix_ms, t, pattern="three_step"))]
fn exhaustive<'py>(py: Python<'py>, matrix_ms: Vec<Vec<f64>>, t: usize, pattern: &str) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix(&matrix_ms)?;
    let members = identity_ranking(m.n());
    let space = SearchSpace { matrix: &m, members: &members, t, scheme: QuorumScheme::Wheat, pattern: self::pattern(pattern)? };
    config(m.n(), t, None)?; // rejects an infeasible t before searching
    tuned(py, &optimizer::exhaustive(&space))
}

/// Runs a scenario given as text and returns its summary and CSV tables.
/// With `baseline=True` the conservative, egalitarian, static variant runs instead.
#[pyfunction]
#[pyo3(signature = (text, baseline=false))]
fn run_scenario<'py>(py: Python<'py>, text: &str, baseline: bool) -> PyResult<Bound<'py, PyDict>> {
    let mut sc = Scenario::parse(text, None).map_err(value_error)?;
    if baseline {
        sc = sc.baseline();
    }
    let trace = py.detach(|| sim::run(&sc)).map_err(value_error)?;
    let report = Report::from_trace(&trace);
    let s = &report.summary;
    let d = PyDict::new(py);
    d.set_item("scenario", &s.scenario)?;
    d.set_item("consensus_mean_ms", s.consensus_mean_ms)?;
    d.set_item("level_mean_ms", s.level_mean_ms.clone())?;
    d.set_item("fields", s.fields.clone())?;
    d.set_item("linearizable", trace.linearizable.is_ok())?;
    let csv = PyDict::new(py);
    csv.set_item("clients", report.clients_csv())?;
    csv.set_item("consensus", report.consensus_csv())?;
    csv.set_item("timeline", report.timeline_csv())?;
    csv.set_item("summary", report.summary_csv())?;
    d.set_item("csv", csv)?;
    Ok(d)
}

#[pymodule]
pub fn flashbft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(weights, m)?)?;
    m.add_function(wrap_pyfunction!(predict_latency, m)?)?;
    m.add_function(wrap_pyfunction!(anneal, m)?)?;
    m.add_function(wrap_pyfunction!(exhaustive, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
