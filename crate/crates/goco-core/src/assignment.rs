//! Training-subset placement.
//!
//! Placement is a binary matrix `S` (n devices x m subsets): `s[i][k] = 1`
//! iff device `i` holds subset `k`. Column `k` sums to the replication
//! degree `d_k`. Encoded gradients weight each held subset by `1/d_k`, so
//! the per-device coefficients `a_i = sum_k s_ik / d_k` measure how lopsided
//! a placement is. Pair-wise balance asks every pair of subsets `k1 != k2`
//! to be co-located on exactly `d_k1 d_k2 / n` devices; that target is
//! usually not an integer, so uniform random placement approximates it and
//! [`BalanceReport`] quantifies the gap.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::rng;
use crate::{Error, Result};

/// Binary subset-to-device placement with per-subset replication degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    s: Array2<u8>,
    d: Vec<usize>,
    n: usize,
    m: usize,
}

/// Co-location counts versus the pair-wise balance targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    /// `pair_counts[[k1, k2]] = sum_i s_ik1 s_ik2`; symmetric, diagonal `d_k`.
    pub pair_counts: Array2<u64>,
    /// `d_k1 d_k2 / n` for every pair (diagonal included for completeness).
    pub targets: Array2<f64>,
    /// Largest `|count - target|` over off-diagonal pairs.
    pub max_abs_deviation: f64,
    /// True iff every off-diagonal count hits its target exactly
    /// (decided in integer arithmetic: `count * n == d_k1 * d_k2`).
    pub exact: bool,
}

/// The `a_i = sum_k s_ik / d_k` coefficients and their extremes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingCoefficients {
    pub a: Vec<f64>,
    pub a_min: f64,
    pub a_max: f64,
}

impl AssignmentMatrix {
    /// Place each subset `k` on `d[k]` distinct devices chosen uniformly at
    /// random. Deterministic given `seed`; ties resolved purely by the
    /// stream's draw order.
    pub fn uniform_random(
        n: usize,
        m: usize,
        d: &[usize],
        seed: u64,
        allow_idle: bool,
    ) -> Result<Self> {
        check_dims(n, m)?;
        if d.len() != m {
            return Err(Error::InvalidAssignment(format!(
                "expected {m} replication degrees, got {}",
                d.len()
            )));
        }
        let mut rng = rng::stream(seed, rng::ASSIGNMENT, [0, 0, 0]);
        let mut s = Array2::zeros((n, m));
        for (k, &dk) in d.iter().enumerate() {
            check_degree(k, dk, n)?;
            for i in rand::seq::index::sample(&mut rng, n, dk) {
                s[[i, k]] = 1;
            }
        }
        Self::from_matrix_with_idle(s, allow_idle)
    }

    /// One device per subset (`d_k = 1`), spread round-robin over a seeded
    /// random permutation of the devices.
    pub fn no_redundancy(n: usize, m: usize, seed: u64, allow_idle: bool) -> Result<Self> {
        check_dims(n, m)?;
        let mut rng = rng::stream(seed, rng::ASSIGNMENT, [0, 0, 0]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut s = Array2::zeros((n, m));
        for k in 0..m {
            s[[perm[k % n], k]] = 1;
        }
        Self::from_matrix_with_idle(s, allow_idle)
    }

    /// Every device holds every subset (`d_k = n`). Exactly pair-wise
    /// balanced for any `(n, m)`, which makes it a useful reference design.
    pub fn full_replication(n: usize, m: usize) -> Result<Self> {
        check_dims(n, m)?;
        Self::from_matrix(Array2::ones((n, m)))
    }

    /// Validation entry point for custom placements: entries must be 0/1 and
    /// every subset must live somewhere. Devices holding nothing are
    /// rejected; use [`Self::from_matrix_with_idle`] to permit them.
    pub fn from_matrix(s: Array2<u8>) -> Result<Self> {
        Self::from_matrix_with_idle(s, false)
    }

    pub fn from_matrix_with_idle(s: Array2<u8>, allow_idle: bool) -> Result<Self> {
        let (n, m) = s.dim();
        check_dims(n, m)?;
        for ((i, k), &v) in s.indexed_iter() {
            if v > 1 {
                return Err(Error::InvalidAssignment(format!(
                    "entry s[{i},{k}] = {v} is not binary"
                )));
            }
        }
        let d: Vec<usize> = (0..m)
            .map(|k| s.column(k).iter().map(|&v| v as usize).sum())
            .collect();
        for (k, &dk) in d.iter().enumerate() {
            check_degree(k, dk, n)?;
        }
        if !allow_idle {
            for i in 0..n {
                if s.row(i).iter().all(|&v| v == 0) {
                    return Err(Error::InvalidAssignment(format!(
                        "device {i} holds no subsets; enable allow_idle to permit idle devices"
                    )));
                }
            }
        }
        Ok(Self { s, d, n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Replication degrees, one per subset.
    pub fn degrees(&self) -> &[usize] {
        &self.d
    }

    pub fn holds(&self, device: usize, subset: usize) -> bool {
        self.s[[device, subset]] == 1
    }

    /// Subsets held by `device`, ascending.
    pub fn held_subsets(&self, device: usize) -> Vec<usize> {
        (0..self.m).filter(|&k| self.holds(device, k)).collect()
    }

    pub fn matrix(&self) -> &Array2<u8> {
        &self.s
    }

    /// Total number of placements (ones in `S`); equals `sum_k d_k`.
    pub fn placements(&self) -> usize {
        self.d.iter().sum()
    }

    /// Co-location counts for every subset pair versus the `d_k1 d_k2 / n`
    /// balance targets. Counts use exact integer arithmetic.
    pub fn balance_report(&self) -> BalanceReport {
        let m = self.m;
        let n = self.n as u64;
        let mut pair_counts = Array2::zeros((m, m));
        let mut targets = Array2::zeros((m, m));
        let mut max_abs_deviation = 0.0f64;
        let mut exact = true;
        for k1 in 0..m {
            for k2 in 0..m {
                let count: u64 = (0..self.n)
                    .map(|i| (self.s[[i, k1]] * self.s[[i, k2]]) as u64)
                    .sum();
                let dd = (self.d[k1] * self.d[k2]) as u64;
                pair_counts[[k1, k2]] = count;
                targets[[k1, k2]] = dd as f64 / n as f64;
                if k1 != k2 {
                    if count * n != dd {
                        exact = false;
                    }
                    let dev = (count as f64 - dd as f64 / n as f64).abs();
                    max_abs_deviation = max_abs_deviation.max(dev);
                }
            }
        }
        BalanceReport {
            pair_counts,
            targets,
            max_abs_deviation,
            exact,
        }
    }

    /// The per-device encoding coefficients `a_i = sum_k s_ik / d_k`.
    pub fn encoding_coefficients(&self) -> EncodingCoefficients {
        let a: Vec<f64> = (0..self.n)
            .map(|i| {
                let sum: f64 = (0..self.m)
                    .filter(|&k| self.holds(i, k))
                    .map(|k| 1.0 / self.d[k] as f64)
                    .sum();
                // Empty sums yield -0.0; normalize so idle devices report +0.
                if sum == 0.0 {
                    0.0
                } else {
                    sum
                }
            })
            .collect();
        let a_min = a.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        EncodingCoefficients { a, a_min, a_max }
    }

    /// Plain-text serialization: one device row per line, `0`/`1` entries
    /// space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for k in 0..self.m {
                if k > 0 {
                    out.push(' ');
                }
                write!(out, "{}", self.s[[i, k]]).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with_idle(text, false)
    }

    pub fn from_text_with_idle(text: &str, allow_idle: bool) -> Result<Self> {
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| match tok {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(Error::Parse(format!(
                        "assignment line {}: entry {other:?} is not 0 or 1",
                        lineno + 1
                    ))),
                })
                .collect::<Result<Vec<u8>>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse(format!(
                        "assignment line {}: expected {} entries, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("assignment file contains no rows".into()));
        }
        let n = rows.len();
        let m = rows[0].len();
        let flat: Vec<u8> = rows.into_iter().flatten().collect();
        let s = Array2::from_shape_vec((n, m), flat).expect("shape checked");
        Self::from_matrix_with_idle(s, allow_idle)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

impl BalanceReport {
    /// CSV rows `k1,k2,count,target,deviation` for every unordered pair
    /// `k1 < k2` (0-based subset indices).
    pub fn to_csv(&self) -> String {
        let m = self.pair_counts.nrows();
        let mut out = String::from("k1,k2,count,target,deviation\n");
        for k1 in 0..m {
            for k2 in (k1 + 1)..m {
                let count = self.pair_counts[[k1, k2]];
                let target = self.targets[[k1, k2]];
                let dev = (count as f64 - target).abs();
                writeln!(out, "{k1},{k2},{count},{target},{dev}").expect("string write");
            }
        }
        out
    }
}

fn check_dims(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidAssignment(format!(
            "need at least one device and one subset, got n={n}, m={m}"
        )));
    }
    Ok(())
}

fn check_degree(k: usize, dk: usize, n: usize) -> Result<()> {
    if dk < 1 || dk > n {
        return Err(Error::InvalidAssignment(format!(
            "subset {k}: replication degree {dk} outside [1, {n}]"
        )));
    }
    Ok(())
}
