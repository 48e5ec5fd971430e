//! Communication graphs and their doubly stochastic mixing matrices.
//!
//! A mixing matrix `W` is symmetric, doubly stochastic, and has a strictly
//! positive diagonal. Positive off-diagonal entries define the undirected
//! communication graph: `{i, j}` is an edge iff `w_ij > 0`. Two spectral
//! quantities drive the convergence analysis: the gap `rho = 1 - |lambda_2|`
//! (consensus contraction speed) and `beta = ||I - W||_2`.
//!
//! Matrices are immutable after construction and safe to share read-only
//! across concurrent runs.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

/// Row/column sums must be within this of 1 at construction time.
pub const STOCHASTICITY_TOL: f64 = 1e-12;

/// A symmetric doubly stochastic mixing matrix with positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Array2<f64>,
    /// Unordered edges as `(i, j)` with `i < j`.
    edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists, one per device (self excluded).
    neighbors: Vec<Vec<usize>>,
}

/// Spectral quantities of a mixing matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSummary {
    /// Second-largest eigenvalue magnitude, in `[0, 1]`.
    pub lambda2_abs: f64,
    /// Spectral gap `1 - lambda2_abs`.
    pub rho: f64,
    /// Spectral norm of `I - W`.
    pub beta: f64,
}

impl MixingMatrix {
    /// Ring of `n >= 3` devices with uniform weight 1/3 on self and both
    /// cyclic neighbors.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidTopology(format!(
                "ring topology needs at least 3 devices, got {n}"
            )));
        }
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            w[[i, i]] = 1.0 / 3.0;
            w[[i, (i + 1) % n]] = 1.0 / 3.0;
            w[[i, (i + n - 1) % n]] = 1.0 / 3.0;
        }
        Self::from_weights(w)
    }

    /// Complete graph on `n >= 2` devices, every entry `1/n`.
    pub fn complete(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "complete topology needs at least 2 devices, got {n}"
            )));
        }
        let w = Array2::from_elem((n, n), 1.0 / n as f64);
        Self::from_weights(w)
    }

    /// Validation entry point for custom matrices. Enforces symmetry (exact),
    /// double stochasticity (within [`STOCHASTICITY_TOL`]), nonnegative
    /// entries, and a strictly positive diagonal.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let (rows, cols) = weights.dim();
        if rows != cols || rows == 0 {
            return Err(Error::InvalidTopology(format!(
                "mixing matrix must be square and nonempty, got {rows}x{cols}"
            )));
        }
        let n = rows;
        for i in 0..n {
            if weights[[i, i]] <= 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "diagonal entry w[{i},{i}] = {} must be positive",
                    weights[[i, i]]
                )));
            }
            for j in 0..n {
                let wij = weights[[i, j]];
                if !wij.is_finite() || wij < 0.0 {
                    return Err(Error::InvalidTopology(format!(
                        "entry w[{i},{j}] = {wij} must be a finite nonnegative real"
                    )));
                }
                if wij != weights[[j, i]] {
                    return Err(Error::InvalidTopology(format!(
                        "matrix is not symmetric: w[{i},{j}] = {wij} != w[{j},{i}] = {}",
                        weights[[j, i]]
                    )));
                }
            }
            let row_sum: f64 = weights.row(i).sum();
            if (row_sum - 1.0).abs() > STOCHASTICITY_TOL {
                return Err(Error::InvalidTopology(format!(
                    "row {i} sums to {row_sum}, expected 1 within {STOCHASTICITY_TOL}"
                )));
            }
            let col_sum: f64 = weights.column(i).sum();
            if (col_sum - 1.0).abs() > STOCHASTICITY_TOL {
                return Err(Error::InvalidTopology(format!(
                    "column {i} sums to {col_sum}, expected 1 within {STOCHASTICITY_TOL}"
                )));
            }
        }

        let mut edges = Vec::new();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if weights[[i, j]] > 0.0 {
                    edges.push((i, j));
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Self {
            n,
            weights,
            edges,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[[i, j]]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted graph neighbors of device `i` (self excluded).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// All eigenvalues of `W`, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let m = nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.weights[[i, j]]);
        let eig = nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, 100_000).ok_or_else(|| {
            Error::Numeric(format!(
                "symmetric eigensolver failed to converge on {}x{} matrix:\n{}",
                self.n,
                self.n,
                self.to_text()
            ))
        })?;
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
        Ok(vals)
    }

    /// Spectral gap and `||I - W||_2`.
    pub fn spectral_summary(&self) -> Result<SpectralSummary> {
        if self.n < 2 {
            return Err(Error::InvalidTopology(
                "spectral summary needs at least 2 devices".into(),
            ));
        }
        let ascending = self.eigenvalues()?;
        let mut by_abs = ascending.clone();
        by_abs.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).expect("finite"));
        if (by_abs[0] - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "leading eigenvalue {} deviates from 1; eigensolve unreliable on:\n{}",
                by_abs[0],
                self.to_text()
            )));
        }
        let lambda2_abs = by_abs[1].abs();
        // beta: I - W is symmetric with eigenvalues 1 - lambda, all >= 0.
        let beta = 1.0 - ascending[0];
        Ok(SpectralSummary {
            lambda2_abs,
            rho: 1.0 - lambda2_abs,
            beta,
        })
    }

    /// Plain-text serialization: one row per line, space-separated decimals.
    /// Values are printed with shortest round-trip formatting, so
    /// `from_text(to_text(w))` reproduces the matrix bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{}", self.weights[[i, j]]).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::Parse(format!(
                            "matrix line {}: cannot parse {tok:?} as a real number",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse(format!(
                        "matrix line {}: expected {} entries, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("matrix file contains no rows".into()));
        }
        let n = rows.len();
        let m = rows[0].len();
        if n != m {
            return Err(Error::Parse(format!(
                "matrix file has {n} rows but {m} columns"
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let weights = Array2::from_shape_vec((n, n), flat).expect("shape checked");
        Self::from_weights(weights)
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
