//! Convergence-bound constants and the predicted loss envelope.
//!
//! Given user-supplied regularity parameters (strong convexity `mu`,
//! smoothness `l`, heterogeneity bound `c`, second-moment bound `g`,
//! per-subset variance bounds `sigma`, learning-rate scale `lambda0`) and
//! the structural quantities of a run (device/subset counts, straggler
//! probability, replication degrees, encoding-coefficient extremes, gossip
//! step size, and the mixing matrix's `rho` and `beta`), this module
//! evaluates every scalar of the convergence analysis:
//!
//! - the contraction coefficients `q1(eta) = 1 - q11 eta + q12 eta^2` and
//!   `q2(eta) = q21 eta^2 + q22 eta`,
//! - the consensus recursion constants `w1`, `w2`, `kappa0`,
//! - the envelope coefficients `phi1`, `phi2`, `phi3` of
//!   `phi1/sqrt(T) + phi2/T + phi3/(T sqrt(T))`,
//! - the iteration threshold `t_min` below which the constant learning rate
//!   `lambda0 / sqrt(T)` leaves `q1` outside `(0, 1)`.
//!
//! The regularity parameters are inputs, never estimated: the bundled demo
//! problem is not strongly convex, so nothing here tries to fit `mu` or `l`
//! from data. The envelope is a predicted curve to plot alongside empirical
//! telemetry, not a certified bound.
//!
//! All functions are pure and the inputs are plain values, so parameter
//! grids parallelize trivially.

use std::fmt::Write as _;

use num::{BigInt, BigRational, ToPrimitive, Zero};

use crate::assignment::AssignmentMatrix;
use crate::topology::MixingMatrix;
use crate::{Error, Result};

/// Regularity parameters of the objective, supplied by the user.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityParams {
    /// Strong-convexity modulus `mu > 0`.
    pub mu: f64,
    /// Smoothness constant `l >= mu`.
    pub l: f64,
    /// Heterogeneity bound on `||grad f_k(x*) - grad f(x*)||`.
    pub c: f64,
    /// Second-moment bound on `||grad F_k||`.
    pub g: f64,
    /// Per-subset variance bounds `sigma_k`.
    pub sigma: Vec<f64>,
    /// Learning-rate scale: the constant rate is `lambda0 / sqrt(T)`.
    pub lambda0: f64,
    /// Initial distance `||mean(x^0) - x*||`.
    pub r0: f64,
}

/// Structural quantities of a concrete run.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralInputs {
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub d: Vec<usize>,
    pub a_min: f64,
    pub a_max: f64,
    pub gamma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl StructuralInputs {
    /// Rebuild structural inputs from a run's metadata sidecar (as parsed by
    /// [`crate::engine::parse_kv`]), so bound curves can be generated from a
    /// finished run's artifacts.
    pub fn from_kv(kv: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(
            kv: &'a std::collections::BTreeMap<String, String>,
            key: &str,
        ) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Parse(format!("run metadata is missing key {key:?}")))
        }
        fn num<T: std::str::FromStr>(raw: &str, key: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| Error::Parse(format!("run metadata: bad value {raw:?} for {key:?}")))
        }
        let d = get(kv, "d")?
            .split_whitespace()
            .map(|tok| num::<usize>(tok, "d"))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            n: num(get(kv, "n")?, "n")?,
            m: num(get(kv, "m")?, "m")?,
            p: num(get(kv, "p")?, "p")?,
            d,
            a_min: num(get(kv, "a_min")?, "a_min")?,
            a_max: num(get(kv, "a_max")?, "a_max")?,
            gamma: num(get(kv, "gamma")?, "gamma")?,
            rho: num(get(kv, "rho")?, "rho")?,
            beta: num(get(kv, "beta")?, "beta")?,
        })
    }

    /// Collect the structural inputs from concrete run components.
    pub fn from_run(
        assignment: &AssignmentMatrix,
        topology: &MixingMatrix,
        gamma: f64,
        p: f64,
    ) -> Result<Self> {
        if assignment.n() != topology.n() {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} devices but topology has {}",
                assignment.n(),
                topology.n()
            )));
        }
        let spectral = topology.spectral_summary()?;
        let coeffs = assignment.encoding_coefficients();
        Ok(Self {
            n: assignment.n(),
            m: assignment.m(),
            p,
            d: assignment.degrees().to_vec(),
            a_min: coeffs.a_min,
            a_max: coeffs.a_max,
            gamma,
            rho: spectral.rho,
            beta: spectral.beta,
        })
    }
}

/// Every scalar of the convergence analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConstants {
    pub q11: f64,
    pub q12: f64,
    pub q21: f64,
    pub q22: f64,
    pub w1: f64,
    pub w2: f64,
    pub kappa0: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    /// The envelope's validity threshold: iteration counts must exceed this
    /// for `q1(lambda0 / sqrt(T))` to lie in `(0, 1)`.
    pub t_min: f64,
}

impl TheoryConstants {
    /// `q1(eta) = 1 - q11 eta + q12 eta^2`.
    pub fn q1(&self, eta: f64) -> f64 {
        1.0 - self.q11 * eta + self.q12 * eta * eta
    }

    /// `q2(eta) = q21 eta^2 + q22 eta`.
    pub fn q2(&self, eta: f64) -> f64 {
        self.q21 * eta * eta + self.q22 * eta
    }

    /// CSV dump, one `name,value` row per constant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value\n");
        for (name, value) in [
            ("q11", self.q11),
            ("q12", self.q12),
            ("q21", self.q21),
            ("q22", self.q22),
            ("w1", self.w1),
            ("w2", self.w2),
            ("kappa0", self.kappa0),
            ("phi1", self.phi1),
            ("phi2", self.phi2),
            ("phi3", self.phi3),
            ("t_min", self.t_min),
        ] {
            writeln!(out, "{name},{value}").expect("string write");
        }
        out
    }
}

/// One evaluation of the envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub t: f64,
    pub value: f64,
    /// False when `t <= t_min`, i.e. outside the envelope's validity regime.
    pub valid: bool,
}

/// Outcome of the strong-convexity margin check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuCondition {
    /// `gamma^2 kappa0 beta^2 / (m a_min (1 - p) (1 - w1))`.
    pub ratio: f64,
    /// `mu / ratio` (infinite when the ratio vanishes).
    pub margin: f64,
    /// Whether the margin reaches the requested factor.
    pub satisfied: bool,
}

fn validate(reg: &RegularityParams, st: &StructuralInputs) -> Result<()> {
    if st.n == 0 || st.m == 0 {
        return Err(Error::InvalidConfig("n and m must be positive".into()));
    }
    if st.d.len() != st.m {
        return Err(Error::DimensionMismatch(format!(
            "{} replication degrees for m = {}",
            st.d.len(),
            st.m
        )));
    }
    for (k, &dk) in st.d.iter().enumerate() {
        if dk < 1 || dk > st.n {
            return Err(Error::InvalidConfig(format!(
                "replication degree d[{k}] = {dk} outside [1, {}]",
                st.n
            )));
        }
    }
    if st.p.is_nan() || st.p < 0.0 || st.p >= 1.0 {
        return Err(Error::DegenerateRegime(format!(
            "straggler probability p = {} must lie in [0, 1) (kappa0 divides by 1 - p)",
            st.p
        )));
    }
    let gamma_rho = st.gamma * st.rho;
    if gamma_rho.is_nan() || gamma_rho <= 0.0 {
        return Err(Error::DegenerateRegime(format!(
            "gamma * rho = {gamma_rho} must be positive (kappa0 divides by it)"
        )));
    }
    if reg.mu.is_nan() || reg.mu <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "mu = {} must be positive",
            reg.mu
        )));
    }
    if reg.l < reg.mu {
        return Err(Error::InvalidConfig(format!(
            "smoothness l = {} below strong convexity mu = {}",
            reg.l, reg.mu
        )));
    }
    if reg.c < 0.0 || reg.g < 0.0 || reg.r0 < 0.0 {
        return Err(Error::InvalidConfig(
            "c, g, and r0 must be nonnegative".into(),
        ));
    }
    if reg.lambda0.is_nan() || reg.lambda0 <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda0 = {} must be positive",
            reg.lambda0
        )));
    }
    if reg.sigma.len() != st.m {
        return Err(Error::DimensionMismatch(format!(
            "{} sigma_k bounds for m = {}",
            reg.sigma.len(),
            st.m
        )));
    }
    if reg.sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidConfig(
            "sigma_k bounds must be nonnegative".into(),
        ));
    }
    Ok(())
}

/// Evaluate every constant from the analysis formulas.
pub fn compute_constants(reg: &RegularityParams, st: &StructuralInputs) -> Result<TheoryConstants> {
    validate(reg, st)?;
    let n = st.n as f64;
    let m = st.m as f64;
    let p = st.p;
    let l2 = reg.l * reg.l;

    let sum_inv_d: f64 = st.d.iter().map(|&dk| 1.0 / dk as f64).sum();
    let sum_d: f64 = st.d.iter().map(|&dk| dk as f64).sum();
    // sum_k (1/d_k - 1/n), the redundancy-shortfall sum.
    let shortfall: f64 = st.d.iter().map(|&dk| 1.0 / dk as f64 - 1.0 / n).sum();

    let q11 = reg.mu * (1.0 - p) * st.a_min / 2.0;
    let q12 = 2.0 / n.powi(3) * (p - p * p) * m * m * l2
        + 2.0 / (n * n) * (1.0 - p) * (1.0 - p) * m * m * l2
        + 4.0 * l2 * (1.0 - p) * p / (n * n) * shortfall;
    let q21 = 2.0
        * (1.0 - p)
        * l2
        * (p * st.a_max * st.a_max / (n * n) + st.a_max * (1.0 - p) * m / (n * n));
    let q22 = reg.l / n * (1.0 - p) * st.a_max + reg.mu / n * (1.0 - p) * st.a_min;

    let w1 = (1.0 - p) * (1.0 - st.gamma * st.rho / 2.0).powi(2) + p;
    let w2 = sum_inv_d + sum_inv_d * sum_d / n - m / n;
    let kappa0 = (1.0 - p) * (1.0 + 2.0 / (st.gamma * st.rho)) * reg.g * reg.g * w2;

    let sigma_term: f64 = reg
        .sigma
        .iter()
        .zip(&st.d)
        .map(|(&s, &dk)| s * s / dk as f64)
        .sum();
    let phi1 = n / (2.0 * m * reg.lambda0 * (1.0 - p)) * reg.r0 * reg.r0
        + 2.0 * reg.lambda0 / (m * n) * p * reg.c * reg.c * shortfall
        + reg.lambda0 / (2.0 * m) * sigma_term;
    let consensus_factor = kappa0 / (1.0 - w1) * n / (2.0 * m);
    let phi2 = q22 * reg.lambda0 * reg.lambda0 / (1.0 - p) * consensus_factor;
    let phi3 = q21 * reg.lambda0.powi(3) / (1.0 - p) * consensus_factor;

    // Largest eta keeping q1(eta) in (0, 1): the smaller root of the
    // quadratic when it has real roots, else the vertex q11 / (2 q12).
    // q12 > 0 is guaranteed by l >= mu > 0 and p < 1.
    let discriminant = (q11 * q11 - 4.0 * q12).max(0.0);
    let eta_threshold = (q11 - discriminant.sqrt()) / (2.0 * q12);
    let t_min = (reg.lambda0 / eta_threshold).powi(2);

    Ok(TheoryConstants {
        q11,
        q12,
        q21,
        q22,
        w1,
        w2,
        kappa0,
        phi1,
        phi2,
        phi3,
        t_min,
    })
}

/// Closed-form `w2 = sum 1/d_k + (1/n)(sum 1/d_k)(sum d_k) - m/n` in exact
/// rational arithmetic.
pub fn closed_form_w2_exact(d: &[usize], n: usize) -> BigRational {
    let n_big = BigRational::from_integer(BigInt::from(n));
    let sum_inv: BigRational = d
        .iter()
        .map(|&dk| BigRational::new(BigInt::from(1), BigInt::from(dk)))
        .sum();
    let sum_d = BigRational::from_integer(BigInt::from(d.iter().sum::<usize>()));
    let m = BigRational::from_integer(BigInt::from(d.len()));
    &sum_inv + &sum_inv * sum_d / &n_big - m / &n_big
}

pub fn closed_form_w2(d: &[usize], n: usize) -> f64 {
    closed_form_w2_exact(d, n).to_f64().expect("w2 fits in f64")
}

/// The placement-dependent sum `sum_i sum_k1 sum_k s_ik1 s_ik / d_k^2`,
/// evaluated directly over the entries of `S` in exact rational arithmetic.
/// Under exact pair-wise balance it equals the closed form `w2`; for
/// approximate placements the gap is the interesting output.
pub fn brute_force_w2_exact(s: &AssignmentMatrix) -> BigRational {
    let mut total = BigRational::zero();
    for i in 0..s.n() {
        let held = s.held_subsets(i);
        let count_k1 = BigInt::from(held.len());
        for &k in &held {
            let dk = BigInt::from(s.degrees()[k]);
            total += BigRational::new(count_k1.clone(), &dk * &dk);
        }
    }
    total
}

pub fn brute_force_w2(s: &AssignmentMatrix) -> f64 {
    brute_force_w2_exact(s).to_f64().expect("w2 fits in f64")
}

/// Evaluate the envelope `phi1/sqrt(T) + phi2/T + phi3/(T sqrt(T))` on a
/// grid of iteration counts. Points at or below `t_min` are flagged invalid
/// rather than rejected.
pub fn bound_curve(tc: &TheoryConstants, t_values: &[f64]) -> Result<Vec<BoundPoint>> {
    t_values
        .iter()
        .map(|&t| {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "bound curve needs positive T, got {t}"
                )));
            }
            let sqrt_t = t.sqrt();
            let value = tc.phi1 / sqrt_t + tc.phi2 / t + tc.phi3 / (t * sqrt_t);
            Ok(BoundPoint {
                t,
                value,
                valid: t > tc.t_min,
            })
        })
        .collect()
}

/// CSV rows `T,bound,valid` for a bound curve.
pub fn bound_curve_csv(points: &[BoundPoint]) -> String {
    let mut out = String::from("T,bound,valid\n");
    for pt in points {
        writeln!(
            out,
            "{},{},{}",
            pt.t,
            pt.value,
            if pt.valid { 1 } else { 0 }
        )
        .expect("string write");
    }
    out
}

/// Check `mu` against `gamma^2 kappa0 beta^2 / (m a_min (1 - p)(1 - w1))`,
/// reporting the multiplicative margin. The analysis asks for `mu` to
/// dominate the ratio "by a lot"; `margin_factor` operationalizes that
/// (10x by default at the call sites). A vanishing numerator makes the
/// condition trivially satisfied; a vanishing denominator with a positive
/// numerator makes it unsatisfiable.
pub fn check_mu_condition(
    mu: f64,
    tc: &TheoryConstants,
    st: &StructuralInputs,
    margin_factor: f64,
) -> MuCondition {
    let numerator = st.gamma * st.gamma * tc.kappa0 * st.beta * st.beta;
    let denominator = st.m as f64 * st.a_min * (1.0 - st.p) * (1.0 - tc.w1);
    let ratio = if numerator == 0.0 {
        0.0
    } else if denominator == 0.0 {
        f64::INFINITY
    } else {
        numerator / denominator
    };
    let margin = if ratio == 0.0 {
        f64::INFINITY
    } else {
        mu / ratio
    };
    MuCondition {
        ratio,
        margin,
        satisfied: margin >= margin_factor,
    }
}
