//! The learning objective and its linear-regression instance.
//!
//! The global loss is `f(x) = (1/m) sum_k f_k(x)` over `m` per-subset
//! components, here `f_k(x) = 1/2 (<x, z_k> - y_k)^2`. Exact component
//! gradients are `(<x, z_k> - y_k) z_k`; the stochastic oracle adds i.i.d.
//! `N(0, sigma0^2)` noise per coordinate, drawn from a caller-supplied
//! stream so gradient noise stays independent of every other randomness
//! source in a run.
//!
//! With `m < dim` the objective is not strongly convex and its minimizer is
//! not unique; [`Problem::solve_optimum`] reports the minimum-norm
//! least-squares solution as the reference optimum.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng;
use crate::{Error, Result};

/// Parameters for [`Problem::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub m: usize,
    pub dim: usize,
    /// Std-dev of the i.i.d. Gaussian feature entries (must be positive).
    pub feature_std: f64,
    /// Std-dev of the additive label noise (zero allowed).
    pub label_noise_std: f64,
    /// Planted integer coefficients are drawn uniformly from this inclusive
    /// range.
    pub planted_range: (i64, i64),
    /// Std-dev of the per-coordinate gradient noise used at training time.
    pub sigma0: f64,
    pub seed: u64,
}

/// An instance of the objective: feature vectors, labels, and the gradient
/// noise level. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    dim: usize,
    m: usize,
    /// Row `k` is `z_k`.
    features: Array2<f64>,
    labels: Array1<f64>,
    noise_sigma: f64,
    planted: Option<Array1<f64>>,
    /// Seed the instance was generated from, when it was generated rather
    /// than assembled from parts.
    gen_seed: Option<u64>,
}

/// Minimum-norm reference optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimumSummary {
    pub x_star: Array1<f64>,
    pub f_star: f64,
    /// Set when the feature matrix looked numerically rank-deficient; the
    /// result is still returned.
    pub condition_warning: Option<String>,
}

impl Problem {
    /// Generate an instance: `z_k` entries i.i.d. `N(0, feature_std^2)`, a
    /// planted integer vector, and labels `y_k = <z_k, planted> + noise`.
    /// Deterministic given `cfg.seed`.
    pub fn generate(cfg: &GenerateConfig) -> Result<Self> {
        if cfg.m == 0 || cfg.dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "problem needs m >= 1 and dim >= 1, got m={}, dim={}",
                cfg.m, cfg.dim
            )));
        }
        if !cfg.feature_std.is_finite() || cfg.feature_std <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "feature_std must be a positive real, got {}",
                cfg.feature_std
            )));
        }
        if cfg.label_noise_std < 0.0 || !cfg.label_noise_std.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "label_noise_std must be nonnegative, got {}",
                cfg.label_noise_std
            )));
        }
        if cfg.sigma0 < 0.0 || !cfg.sigma0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma0 must be nonnegative, got {}",
                cfg.sigma0
            )));
        }
        let (lo, hi) = cfg.planted_range;
        if lo > hi {
            return Err(Error::InvalidConfig(format!(
                "planted_range low {lo} exceeds high {hi}"
            )));
        }

        let mut stream = rng::stream(cfg.seed, rng::PROBLEM, [0, 0, 0]);
        let mut features = Array2::zeros((cfg.m, cfg.dim));
        for k in 0..cfg.m {
            for j in 0..cfg.dim {
                let draw: f64 = stream.sample(StandardNormal);
                features[[k, j]] = cfg.feature_std * draw;
            }
        }
        let planted = Array1::from_iter((0..cfg.dim).map(|_| stream.random_range(lo..=hi) as f64));
        let labels = Array1::from_iter((0..cfg.m).map(|k| {
            let noise: f64 = stream.sample(StandardNormal);
            features.row(k).dot(&planted) + cfg.label_noise_std * noise
        }));

        Ok(Self {
            dim: cfg.dim,
            m: cfg.m,
            features,
            labels,
            noise_sigma: cfg.sigma0,
            planted: Some(planted),
            gen_seed: Some(cfg.seed),
        })
    }

    /// Build from explicit parts (used by the bundle reader and tests).
    pub fn from_parts(
        features: Array2<f64>,
        labels: Array1<f64>,
        sigma0: f64,
        planted: Option<Array1<f64>>,
    ) -> Result<Self> {
        let (m, dim) = features.dim();
        if m == 0 || dim == 0 {
            return Err(Error::InvalidConfig("empty feature matrix".into()));
        }
        if labels.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(p) = &planted {
            if p.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "planted vector has {} entries, expected {dim}",
                    p.len()
                )));
            }
        }
        if sigma0 < 0.0 || !sigma0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma0 must be nonnegative, got {sigma0}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) || labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite problem data".into()));
        }
        Ok(Self {
            dim,
            m,
            features,
            labels,
            noise_sigma: sigma0,
            planted,
            gen_seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn gen_seed(&self) -> Option<u64> {
        self.gen_seed
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }

    pub fn planted(&self) -> Option<&Array1<f64>> {
        self.planted.as_ref()
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.m {
            return Err(Error::IndexOutOfRange {
                what: "subset",
                index: k,
                len: self.m,
            });
        }
        Ok(())
    }

    fn check_dim(&self, x: &ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `grad f_k(x) = (<x, z_k> - y_k) z_k`.
    pub fn exact_gradient(&self, k: usize, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_index(k)?;
        self.check_dim(&x)?;
        let z = self.features.row(k);
        let residual = z.dot(&x) - self.labels[k];
        Ok(z.mapv(|v| residual * v))
    }

    /// Exact gradient plus i.i.d. `N(0, sigma0^2)` per coordinate from the
    /// supplied stream. With `sigma0 = 0` this equals [`Self::exact_gradient`]
    /// bit-for-bit and consumes no draws.
    pub fn stochastic_gradient(
        &self,
        k: usize,
        x: ArrayView1<f64>,
        stream: &mut impl Rng,
    ) -> Result<Array1<f64>> {
        let mut g = self.exact_gradient(k, x)?;
        if self.noise_sigma > 0.0 {
            for v in g.iter_mut() {
                let draw: f64 = stream.sample(StandardNormal);
                *v += self.noise_sigma * draw;
            }
        }
        Ok(g)
    }

    /// `f_k(x) = 1/2 (<x, z_k> - y_k)^2`.
    pub fn component_loss(&self, k: usize, x: ArrayView1<f64>) -> Result<f64> {
        self.check_index(k)?;
        self.check_dim(&x)?;
        let residual = self.features.row(k).dot(&x) - self.labels[k];
        Ok(0.5 * residual * residual)
    }

    /// `f(x) = (1/m) sum_k f_k(x)`.
    pub fn global_loss(&self, x: ArrayView1<f64>) -> f64 {
        let residuals = self.features.dot(&x) - &self.labels;
        residuals.iter().map(|r| 0.5 * r * r).sum::<f64>() / self.m as f64
    }

    /// Minimum-norm least-squares solution of the stacked system
    /// `<x, z_k> = y_k` via SVD, with `f_star = f(x_star)`.
    pub fn solve_optimum(&self) -> Result<OptimumSummary> {
        let z = nalgebra::DMatrix::from_fn(self.m, self.dim, |i, j| self.features[[i, j]]);
        let b = nalgebra::DVector::from_fn(self.m, |i, _| self.labels[i]);
        let svd = z.svd(true, true);
        let max_sv = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
        let cutoff = (max_sv * self.m.max(self.dim) as f64 * f64::EPSILON).max(f64::MIN_POSITIVE);
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        let condition_warning = if rank < self.m.min(self.dim) {
            Some(format!(
                "feature matrix numerically rank-deficient: rank {rank} < min(m, dim) = {}; \
                 minimum-norm solution over the numerical row space returned",
                self.m.min(self.dim)
            ))
        } else {
            None
        };
        let x = svd
            .solve(&b, cutoff)
            .map_err(|e| Error::Numeric(format!("SVD solve failed: {e}")))?;
        let x_star = Array1::from_iter(x.iter().copied());
        let f_star = self.global_loss(x_star.view());
        Ok(OptimumSummary {
            x_star,
            f_star,
            condition_warning,
        })
    }

    /// Self-describing text bundle (dims, sigma0, labels, features, planted
    /// vector). Floats use shortest round-trip formatting, so reading the
    /// bundle back reproduces the problem bit-exactly.
    pub fn to_bundle(&self) -> String {
        let mut out = String::from("goco-problem v1\n");
        writeln!(out, "m {}", self.m).unwrap();
        writeln!(out, "dim {}", self.dim).unwrap();
        writeln!(out, "sigma0 {}", self.noise_sigma).unwrap();
        match self.gen_seed {
            Some(seed) => writeln!(out, "seed {seed}").unwrap(),
            None => writeln!(out, "seed none").unwrap(),
        }
        writeln!(
            out,
            "planted {}",
            if self.planted.is_some() { "yes" } else { "no" }
        )
        .unwrap();
        out.push_str("labels");
        for v in self.labels.iter() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
        for k in 0..self.m {
            out.push('z');
            for v in self.features.row(k).iter() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        if let Some(p) = &self.planted {
            out.push_str("x_hat");
            for v in p.iter() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_bundle(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |tag: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l.to_string())),
                None => Err(Error::Parse(format!(
                    "problem bundle truncated before {tag}"
                ))),
            }
        };
        let (_, header) = next("header")?;
        if header.trim() != "goco-problem v1" {
            return Err(Error::Parse(format!(
                "unrecognized problem bundle header {header:?}"
            )));
        }
        let mut field = |name: &str| -> Result<String> {
            let (lineno, line) = next(name)?;
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or_default();
            if key != name {
                return Err(Error::Parse(format!(
                    "problem bundle line {lineno}: expected field {name:?}, found {key:?}"
                )));
            }
            Ok(parts.next().unwrap_or_default().to_string())
        };
        let m: usize = parse_field(&field("m")?, "m")?;
        let dim: usize = parse_field(&field("dim")?, "dim")?;
        let sigma0: f64 = parse_field(&field("sigma0")?, "sigma0")?;
        let gen_seed = match field("seed")?.as_str() {
            "none" => None,
            raw => Some(parse_field::<u64>(raw, "seed")?),
        };
        let has_planted = match field("planted")?.as_str() {
            "yes" => true,
            "no" => false,
            other => {
                return Err(Error::Parse(format!(
                    "problem bundle: planted must be yes or no, found {other:?}"
                )))
            }
        };
        let labels = parse_vector(&field("labels")?, m, "labels")?;
        let mut features = Array2::zeros((m, dim));
        for k in 0..m {
            let row = parse_vector(&field("z")?, dim, "z")?;
            features.row_mut(k).assign(&Array1::from_vec(row.clone()));
        }
        let planted = if has_planted {
            Some(Array1::from_vec(parse_vector(
                &field("x_hat")?,
                dim,
                "x_hat",
            )?))
        } else {
            None
        };
        let mut problem = Self::from_parts(features, Array1::from_vec(labels), sigma0, planted)?;
        problem.gen_seed = gen_seed;
        Ok(problem)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bundle())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_bundle(&text)
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("problem bundle: cannot parse {name} from {raw:?}")))
}

fn parse_vector(raw: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let vals = raw
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Parse(format!("problem bundle: bad {name} entry {tok:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != expected {
        return Err(Error::Parse(format!(
            "problem bundle: {name} has {} entries, expected {expected}",
            vals.len()
        )));
    }
    Ok(vals)
}
