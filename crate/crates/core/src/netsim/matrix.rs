// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! One-way latency matrices.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ids::{ms_to_us, Micros, ReplicaId};

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("matrix io: {0}")]
    Io(#[from] std::io::Error),
}

fn perr(line: usize, msg: impl Into<String>) -> MatrixError {
    MatrixError::Parse { line, msg: msg.into() }
}

/// Labels plus `n × n` one-way delays. Delays are stored in whole
/// microseconds, the simulator's tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyMatrix {
    labels: Vec<String>,
    delays: Vec<Micros>,
}

impl LatencyMatrix {
    pub fn from_ms(labels: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let n = labels.len();
        if rows.len() != n {
            return Err(perr(0, format!("expected {n} rows, found {}", rows.len())));
        }
        let mut delays = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(perr(i + 2, format!("expected {n} columns, found {}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(perr(i + 2, format!("delay {v} in column {} is not a finite non-negative number", j + 1)));
                }
                if i == j && v != 0.0 {
                    return Err(perr(i + 2, "diagonal entry must be zero"));
                }
                delays.push(ms_to_us(v));
            }
        }
        Ok(Self { labels, delays })
    }

    /// Parses the CSV format: a header row of labels, then `n` rows of
    /// one-way delays in milliseconds.
    pub fn parse_csv(text: &str) -> Result<Self, MatrixError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut records = rdr.records();
        let header = records.next().ok_or_else(|| perr(1, "empty matrix file"))?.map_err(|e| perr(1, e.to_string()))?;
        let labels: Vec<String> = header.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec.map_err(|e| perr(i + 2, e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| perr(i + 2, format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_ms(labels, &rows)
    }

    pub fn load(path: &Path) -> Result<Self, MatrixError> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    /// Halves a round-trip matrix into one-way delays.
    pub fn from_rtt_ms(labels: Vec<String>, rtt: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let rows: Vec<Vec<f64>> = rtt.iter().map(|r| r.iter().map(|v| v / 2.0).collect()).collect();
        Self::from_ms(labels, &rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.labels.join(",");
        out.push('\n');
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n()).map(|j| format!("{:.3}", self.delay_us(i, j) as f64 / 1000.0)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn delay_us(&self, from: usize, to: usize) -> Micros {
        self.delays[from * self.n() + to]
    }

    pub fn d(&self, from: ReplicaId, to: ReplicaId) -> Micros {
        self.delay_us(from.idx(), to.idx())
    }

    pub fn delay_ms(&self, from: usize, to: usize) -> f64 {
        self.delay_us(from, to) as f64 / 1000.0
    }

    /// The first `n` regions, with each delay passed through `f(from, to, delay)`.
    pub fn submatrix_map(&self, n: usize, f: impl Fn(usize, usize, Micros) -> Micros) -> Self {
        let mut delays = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                delays.push(if i == j { 0 } else { f(i, j, self.delay_us(i, j)) });
            }
        }
        Self { labels: self.labels[..n].to_vec(), delays }
    }

    fn generated(labels: Vec<String>, f: impl Fn(usize, usize) -> f64) -> Self {
        let n = labels.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { f(i, j) }).collect()).collect();
        Self::from_ms(labels, &rows).expect("generated matrix is valid")
    }

    fn numbered(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    pub fn uniform(n: usize, ms: f64) -> Self {
        Self::generated(Self::numbered(n), |_, _| ms)
    }

    pub fn zero(n: usize) -> Self {
        Self::uniform(n, 0.0)
    }

    /// Two clusters, the first of size `a`.
    pub fn two_cluster(n: usize, a: usize, intra_ms: f64, inter_ms: f64) -> Self {
        Self::generated(Self::numbered(n), |i, j| if (i < a) == (j < a) { intra_ms } else { inter_ms })
    }

    /// Points uniform in a `side_ms` square; delay is Euclidean distance plus
    /// a fixed 1 ms. Satisfies the triangle inequality.
    pub fn random_euclidean(n: usize, seed: u64, side_ms: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>() * side_ms, rng.gen::<f64>() * side_ms)).collect();
        Self::generated(Self::numbered(n), |i, j| {
            let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
            (dx * dx + dy * dy).sqrt() + 1.0
        })
    }

    /// Planet-scale synthetic matrix: `n` sites drawn from metro areas,
    /// one-way delay from great-circle distance with a 1.4 path stretch at
    /// 200 km/ms plus 1 ms.
    pub fn synthetic_geo(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = Vec::with_capacity(n);
        for i in 0..n {
            let total: f64 = METROS.iter().map(|m| m.3).sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = &METROS[0];
            for m in METROS {
                if pick < m.3 {
                    chosen = m;
                    break;
                }
                pick -= m.3;
            }
            let lat = chosen.1 + (rng.gen::<f64>() - 0.5) * 2.0;
            let lon = chosen.2 + (rng.gen::<f64>() - 0.5) * 2.0;
            sites.push((format!("{}-{i}", chosen.0), lat, lon));
        }
        let labels = sites.iter().map(|s| s.0.clone()).collect();
        Self::generated(labels, |i, j| great_circle_km(sites[i].1, sites[i].2, sites[j].1, sites[j].2) * 1.4 / 200.0 + 1.0)
    }

    /// Multiplies every delay by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { labels: self.labels.clone(), delays: self.delays.iter().map(|&d| (d as f64 * c).round() as Micros).collect() }
    }

    /// Largest relative triangle-inequality violation `d(i,k) / (d(i,j) + d(j,k))`.
    pub fn worst_triangle_ratio(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    let via = self.delay_us(i, j) + self.delay_us(j, k);
                    if via > 0 {
                        worst = worst.max(self.delay_us(i, k) as f64 / via as f64);
                    }
                }
            }
        }
        worst
    }
}

fn great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * a.sqrt().asin()
}

/// (name, latitude, longitude, sampling weight)
const METROS: &[(&str, f64, f64, f64)] = &[
    ("london", 51.5, -0.1, 3.0),
    ("frankfurt", 50.1, 8.7, 3.0),
    ("amsterdam", 52.4, 4.9, 2.0),
    ("paris", 48.9, 2.4, 2.0),
    ("madrid", 40.4, -3.7, 1.0),
    ("milan", 45.5, 9.2, 1.0),
    ("stockholm", 59.3, 18.1, 1.0),
    ("warsaw", 52.2, 21.0, 1.0),
    ("newyork", 40.7, -74.0, 3.0),
    ("ashburn", 39.0, -77.5, 2.0),
    ("chicago", 41.9, -87.6, 1.5),
    ("dallas", 32.8, -96.8, 1.0),
    ("toronto", 43.7, -79.4, 1.0),
    ("sanjose", 37.3, -121.9, 2.0),
    ("seattle", 47.6, -122.3, 1.0),
    ("saopaulo", -23.5, -46.6, 1.0),
    ("tokyo", 35.7, 139.7, 1.5),
    ("singapore", 1.35, 103.8, 1.5),
    ("hongkong", 22.3, 114.2, 1.0),
    ("mumbai", 19.1, 72.9, 1.0),
    ("sydney", -33.9, 151.2, 1.0),
    ("johannesburg", -26.2, 28.0, 0.5),
    ("dubai", 25.2, 55.3, 0.5),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let m = LatencyMatrix::parse_csv("a,b\n0,50\n40.5,0\n").unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.delay_us(0, 1), 50_000);
        assert_eq!(m.delay_us(1, 0), 40_500);
        let err = LatencyMatrix::parse_csv("a,b\n0,50\n-1,0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(LatencyMatrix::parse_csv("a,b\n1,50\n1,0\n").is_err());
        assert!(LatencyMatrix::parse_csv("a,b\n0,x\n1,0\n").is_err());
        assert!(LatencyMatrix::parse_csv("a,b\n0,1\n").is_err());
    }

    #[test]
    fn rtt_is_halved() {
        let m = LatencyMatrix::from_rtt_ms(vec!["a".into(), "b".into()], &[vec![0.0, 100.0], vec![100.0, 0.0]]).unwrap();
        assert_eq!(m.delay_us(0, 1), 50_000);
    }

    #[test]
    fn euclidean_is_metric() {
        let m = LatencyMatrix::random_euclidean(12, 3, 100.0);
        assert!(m.worst_triangle_ratio() <= 1.0 + 1e-3);
    }

    #[test]
    fn shipped_aws_snapshot_loads() {
        let m = LatencyMatrix::parse_csv(include_str!("../../data/aws21.csv")).unwrap();
        assert_eq!(m.n(), 21);
        assert_eq!(m.labels()[0], "af-south-1");
        assert_eq!(m.delay_us(3, 3), 0);
    }

    #[test]
    fn csv_round_trip() {
        let m = LatencyMatrix::random_euclidean(5, 1, 80.0);
        assert_eq!(LatencyMatrix::parse_csv(&m.to_csv()).unwrap(), m);
    }
}
