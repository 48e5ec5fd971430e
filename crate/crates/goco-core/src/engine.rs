//! The round-based protocol engine.
//!
//! One synchronous iteration, for every non-straggler device `i`:
//!
//! ```text
//! g_i  = sum_k (s_ik / d_k) grad F_k(x_i, xi_ik)      encode
//! x_i' = x_i - eta g_i                                 local step
//! x_i+ = x_i' + gamma sum_j w_ij (x_j - x_i)           gossip
//! ```
//!
//! then `x_i+` is sent to every graph neighbor. Stragglers (each device,
//! independently, with probability `p` per iteration) skip the whole round:
//! their parameter vector is untouched and they only receive and store
//! incoming messages.
//!
//! The gossip correction deliberately uses the pre-half-step `x_i` and the
//! neighbors' pre-iteration vectors. Neighbor values come from per-device
//! receive buffers rather than from global state: because stragglers never
//! move and everyone always receives, the last message stored from a
//! neighbor is always that neighbor's current parameter, and the engine
//! asserts this equality after every round in debug builds. Keeping the
//! buffers explicit keeps the engine honest as a message-passing state
//! machine. A device that recovers from straggling simply resumes from its
//! stored buffers; no catch-up correction is needed because nothing it
//! received while frozen has gone stale. Asynchronous variants would have
//! to revisit that.
//!
//! A single run is sequential and deterministic given the config; distinct
//! runs share no mutable state and may execute concurrently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::assignment::{AssignmentMatrix, EncodingCoefficients};
use crate::problem::Problem;
use crate::rng;
use crate::topology::{MixingMatrix, SpectralSummary};
use crate::{Error, Result};

/// Initial parameter vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// All-zero vectors (the experimental default).
    Zero,
    /// I.i.d. Gaussian entries with the given std-dev, drawn from the
    /// run's init stream.
    Gaussian { std: f64 },
}

/// Per-run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Learning rate; zero runs pure gossip.
    pub eta: f64,
    /// Gossip step size.
    pub gamma: f64,
    /// Straggler probability per device per iteration.
    pub p: f64,
    /// Number of iterations T.
    pub iterations: usize,
    /// Master seed; every randomness source derives its own stream from it.
    pub seed: u64,
    /// Telemetry cadence: a row every this many iterations.
    pub loss_every: usize,
    /// Bits charged per transmitted vector element.
    pub bits_per_element: u64,
    pub init: Init,
}

impl RunConfig {
    /// A config shaped like the reference experiment: `p = 0.2`,
    /// `gamma = 0.05`, `eta = 1e-4`, 64 bits per element, zero init.
    pub fn baseline(iterations: usize, seed: u64) -> Self {
        Self {
            eta: 1e-4,
            gamma: 0.05,
            p: 0.2,
            iterations,
            seed,
            loss_every: 1,
            bits_per_element: 64,
            init: Init::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be a finite nonnegative real, got {}",
                self.eta
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be a finite nonnegative real, got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!(
                "straggler probability must lie in [0, 1], got {}",
                self.p
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be positive".into()));
        }
        if self.loss_every == 0 {
            return Err(Error::InvalidConfig("loss_every must be positive".into()));
        }
        if self.bits_per_element == 0 {
            return Err(Error::InvalidConfig(
                "bits_per_element must be positive".into(),
            ));
        }
        if let Init::Gaussian { std } = self.init {
            if !std.is_finite() || std <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "gaussian init std must be positive, got {std}"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable per-run state: parameter columns, receive buffers, and the
/// straggler stream.
#[derive(Debug, Clone)]
pub struct RunState {
    /// `dim x n`; column `i` is device `i`'s parameter vector.
    pub x: Array2<f64>,
    /// `buffers[i][idx]` is the last vector received from
    /// `topology.neighbors(i)[idx]`.
    pub buffers: Vec<Vec<Array1<f64>>>,
    /// Completed iterations.
    pub iteration: usize,
    pub straggler_rng: rand_chacha::ChaCha8Rng,
}

/// What one iteration did, for callers that drive the engine step by step.
#[derive(Debug, Clone)]
pub struct StepSummary {
    /// 1-based index of the completed iteration.
    pub iteration: usize,
    /// Straggler indicators: `active[i]` iff device `i` participated.
    pub active: Vec<bool>,
    /// Bits transmitted this iteration (sender side).
    pub bits: u64,
    /// `sum_i I_i g_i`, the masked encoded-gradient sum.
    pub masked_gradient_sum: Array1<f64>,
}

/// One telemetry record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRow {
    pub t: u64,
    /// Global loss at the device average, `f(mean_i x_i)`.
    pub loss: f64,
    /// Consensus error `sum_i ||x_i - mean||^2`.
    pub consensus_err: f64,
    pub cum_bits: u64,
    /// Stragglers in this iteration.
    pub stragglers: u32,
}

/// Run metadata echoed into the sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub eta: f64,
    pub gamma: f64,
    pub p: f64,
    pub iterations: usize,
    pub loss_every: usize,
    pub bits_per_element: u64,
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub d: Vec<usize>,
    pub a_min: f64,
    pub a_max: f64,
    pub rho: f64,
    pub beta: f64,
    pub sigma0: f64,
    /// SHA-256 over the serialized topology, assignment, problem, and config.
    pub input_hash: String,
    /// Set when the run aborted on a non-finite parameter.
    pub diverged_at: Option<usize>,
}

/// Telemetry rows plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Telemetry {
    pub rows: Vec<TelemetryRow>,
    pub meta: RunMeta,
}

pub const TELEMETRY_HEADER: &str = "t,loss,consensus_err,cum_bits,stragglers";

impl Telemetry {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TELEMETRY_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.t, r.loss, r.consensus_err, r.cum_bits, r.stragglers
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse rows back from CSV text. Round-trips exactly: values are
    /// written with shortest round-trip formatting.
    pub fn rows_from_csv(text: &str) -> Result<Vec<TelemetryRow>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == TELEMETRY_HEADER => {}
            other => {
                return Err(Error::Parse(format!(
                    "telemetry CSV header mismatch: {other:?}"
                )))
            }
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 5 {
                    return Err(Error::Parse(format!(
                        "telemetry CSV line {}: expected 5 fields, found {}",
                        i + 2,
                        fields.len()
                    )));
                }
                let parse_err =
                    |what: &str| Error::Parse(format!("telemetry CSV line {}: bad {what}", i + 2));
                Ok(TelemetryRow {
                    t: fields[0].parse().map_err(|_| parse_err("t"))?,
                    loss: fields[1].parse().map_err(|_| parse_err("loss"))?,
                    consensus_err: fields[2].parse().map_err(|_| parse_err("consensus_err"))?,
                    cum_bits: fields[3].parse().map_err(|_| parse_err("cum_bits"))?,
                    stragglers: fields[4].parse().map_err(|_| parse_err("stragglers"))?,
                })
            })
            .collect()
    }
}

impl RunMeta {
    /// Deterministic key/value listing (no timestamps, no environment).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("format".into(), "goco-run-meta v1".into()),
            ("seed".into(), self.seed.to_string()),
            ("eta".into(), self.eta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("p".into(), self.p.to_string()),
            ("iterations".into(), self.iterations.to_string()),
            ("loss_every".into(), self.loss_every.to_string()),
            ("bits_per_element".into(), self.bits_per_element.to_string()),
            ("n".into(), self.n.to_string()),
            ("m".into(), self.m.to_string()),
            ("dim".into(), self.dim.to_string()),
            (
                "d".into(),
                self.d
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            ("a_min".into(), self.a_min.to_string()),
            ("a_max".into(), self.a_max.to_string()),
            ("rho".into(), self.rho.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("sigma0".into(), self.sigma0.to_string()),
            ("input_hash".into(), self.input_hash.clone()),
        ];
        match self.diverged_at {
            Some(it) => {
                kv.push(("status".into(), "diverged".into()));
                kv.push(("diverged_at".into(), it.to_string()));
            }
            None => kv.push(("status".into(), "completed".into())),
        }
        kv
    }

    pub fn to_text(&self, extra: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv().iter().chain(extra.iter()) {
            writeln!(out, "{k} {v}").expect("string write");
        }
        out
    }

    pub fn write_file(&self, path: impl AsRef<Path>, extra: &[(String, String)]) -> Result<()> {
        std::fs::write(path, self.to_text(extra))?;
        Ok(())
    }
}

/// Parse a `key value` sidecar file into a map.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            if line.is_empty() {
                return None;
            }
            match line.split_once(' ') {
                Some((k, v)) => Some((k.to_string(), v.trim().to_string())),
                None => Some((line.to_string(), String::new())),
            }
        })
        .collect()
}

/// Draw straggler indicators: `active[i]` is true with probability `1 - p`,
/// independently per device, consuming exactly `n` uniforms from the stream.
pub fn sample_stragglers(p: f64, n: usize, stream: &mut impl Rng) -> Vec<bool> {
    assert!(
        (0.0..=1.0).contains(&p),
        "straggler probability {p} outside [0, 1]"
    );
    (0..n).map(|_| stream.random::<f64>() >= p).collect()
}

/// Encode device `i`'s gradient: `g_i = sum_k (s_ik / d_k) grad F_k(x_i)`,
/// one fresh stochastic sample per held subset, each from its own
/// `(device, iteration, subset)` stream. Devices holding nothing encode the
/// zero vector.
pub fn encode_gradient(
    problem: &Problem,
    assignment: &AssignmentMatrix,
    device: usize,
    x: ArrayView1<f64>,
    master_seed: u64,
    iteration: u64,
) -> Result<Array1<f64>> {
    if device >= assignment.n() {
        return Err(Error::IndexOutOfRange {
            what: "device",
            index: device,
            len: assignment.n(),
        });
    }
    let mut g = Array1::zeros(problem.dim());
    for k in assignment.held_subsets(device) {
        let mut stream = rng::stream(
            master_seed,
            rng::GRADIENT_NOISE,
            [device as u64, iteration, k as u64],
        );
        let grad = problem.stochastic_gradient(k, x, &mut stream)?;
        g.scaled_add(1.0 / assignment.degrees()[k] as f64, &grad);
    }
    Ok(g)
}

/// The local half step `x - eta g`.
pub fn local_step(x: ArrayView1<f64>, g: ArrayView1<f64>, eta: f64) -> Array1<f64> {
    let mut out = x.to_owned();
    out.scaled_add(-eta, &g);
    out
}

/// The gossip step
/// `x_half + gamma sum_j w_ij (received_j - x_old)`, where `received_j` is
/// the last vector stored from neighbor `j` and `x_old` is the device's own
/// pre-iteration vector (not the half step).
pub fn gossip_step(
    x_half: ArrayView1<f64>,
    x_old: ArrayView1<f64>,
    gamma: f64,
    neighbor_terms: &[(f64, ArrayView1<f64>)],
) -> Result<Array1<f64>> {
    let mut out = x_half.to_owned();
    for (w, received) in neighbor_terms {
        if received.len() != x_old.len() {
            return Err(Error::DimensionMismatch(format!(
                "gossip term has {} entries, expected {}",
                received.len(),
                x_old.len()
            )));
        }
        let coef = gamma * w;
        Zip::from(&mut out)
            .and(received)
            .and(&x_old)
            .for_each(|o, &r, &x| *o += coef * (r - x));
    }
    Ok(out)
}

/// Sender-side bit accounting: every active device broadcasts its `dim`
/// elements to each of its neighbors; stragglers send nothing.
pub fn account_bits(
    active: &[bool],
    topology: &MixingMatrix,
    dim: usize,
    bits_per_element: u64,
) -> u64 {
    active
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| topology.degree(i) as u64 * dim as u64 * bits_per_element)
        .sum()
}

/// The protocol engine. Borrows its immutable inputs; all run state lives in
/// [`RunState`].
pub struct Engine<'a> {
    problem: &'a Problem,
    assignment: &'a AssignmentMatrix,
    topology: &'a MixingMatrix,
    cfg: RunConfig,
    spectral: SpectralSummary,
    coeffs: EncodingCoefficients,
    warnings: Vec<String>,
    input_hash: String,
}

impl<'a> Engine<'a> {
    pub fn new(
        problem: &'a Problem,
        assignment: &'a AssignmentMatrix,
        topology: &'a MixingMatrix,
        cfg: RunConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if assignment.n() != topology.n() {
            return Err(Error::DimensionMismatch(format!(
                "assignment places onto {} devices but topology has {}",
                assignment.n(),
                topology.n()
            )));
        }
        if assignment.m() != problem.m() {
            return Err(Error::DimensionMismatch(format!(
                "assignment distributes {} subsets but problem has {}",
                assignment.m(),
                problem.m()
            )));
        }
        let spectral = topology.spectral_summary()?;
        let coeffs = assignment.encoding_coefficients();

        let mut warnings = Vec::new();
        if spectral.beta > 0.0 && cfg.gamma > 1.0 / spectral.beta {
            warnings.push(format!(
                "gamma = {} exceeds 1/beta = {}; gossip weights may overshoot",
                cfg.gamma,
                1.0 / spectral.beta
            ));
        }

        let mut hasher = Sha256::new();
        hasher.update(topology.to_text().as_bytes());
        hasher.update(assignment.to_text().as_bytes());
        hasher.update(problem.to_bundle().as_bytes());
        hasher.update(config_echo(&cfg).as_bytes());
        let input_hash = hasher.finalize().iter().fold(String::new(), |mut acc, b| {
            write!(acc, "{b:02x}").expect("string write");
            acc
        });

        Ok(Self {
            problem,
            assignment,
            topology,
            cfg,
            spectral,
            coeffs,
            warnings,
            input_hash,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn spectral(&self) -> SpectralSummary {
        self.spectral
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn input_hash(&self) -> &str {
        &self.input_hash
    }

    /// Fresh state: initial parameter columns plus buffers seeded with the
    /// neighbors' initial vectors (the initial exchange is common knowledge
    /// and is not charged bits).
    pub fn initial_state(&self) -> RunState {
        let n = self.topology.n();
        let dim = self.problem.dim();
        let x = match self.cfg.init {
            Init::Zero => Array2::zeros((dim, n)),
            Init::Gaussian { std } => {
                let mut stream = rng::stream(self.cfg.seed, rng::INIT, [0, 0, 0]);
                let mut x = Array2::zeros((dim, n));
                for device in 0..n {
                    for row in 0..dim {
                        let draw: f64 = stream.sample(rand_distr::StandardNormal);
                        x[[row, device]] = std * draw;
                    }
                }
                x
            }
        };
        let buffers = (0..n)
            .map(|i| {
                self.topology
                    .neighbors(i)
                    .iter()
                    .map(|&j| x.column(j).to_owned())
                    .collect()
            })
            .collect();
        RunState {
            x,
            buffers,
            iteration: 0,
            straggler_rng: rng::stream(self.cfg.seed, rng::STRAGGLERS, [0, 0, 0]),
        }
    }

    /// State with caller-chosen parameter columns (`dim x n`).
    pub fn state_from(&self, x: Array2<f64>) -> Result<RunState> {
        let n = self.topology.n();
        let dim = self.problem.dim();
        if x.dim() != (dim, n) {
            return Err(Error::DimensionMismatch(format!(
                "initial state must be {dim}x{n}, got {}x{}",
                x.dim().0,
                x.dim().1
            )));
        }
        let buffers = (0..n)
            .map(|i| {
                self.topology
                    .neighbors(i)
                    .iter()
                    .map(|&j| x.column(j).to_owned())
                    .collect()
            })
            .collect();
        Ok(RunState {
            x,
            buffers,
            iteration: 0,
            straggler_rng: rng::stream(self.cfg.seed, rng::STRAGGLERS, [0, 0, 0]),
        })
    }

    fn check_buffers(&self, st: &RunState) -> Result<()> {
        let n = self.topology.n();
        let dim = self.problem.dim();
        if st.x.dim() != (dim, n) {
            return Err(Error::ProtocolState(format!(
                "state is {}x{}, engine expects {dim}x{n}",
                st.x.dim().0,
                st.x.dim().1
            )));
        }
        if st.buffers.len() != n {
            return Err(Error::ProtocolState(format!(
                "{} buffer sets for {n} devices",
                st.buffers.len()
            )));
        }
        for i in 0..n {
            let expected = self.topology.neighbors(i).len();
            if st.buffers[i].len() != expected {
                return Err(Error::ProtocolState(format!(
                    "device {i} is missing buffer entries: {} stored, {expected} neighbors",
                    st.buffers[i].len()
                )));
            }
        }
        Ok(())
    }

    /// Execute one synchronous round in place.
    pub fn step(&self, st: &mut RunState) -> Result<StepSummary> {
        self.check_buffers(st)?;
        let n = self.topology.n();
        let dim = self.problem.dim();
        let t = st.iteration as u64;

        let active = sample_stragglers(self.cfg.p, n, &mut st.straggler_rng);

        // Stragglers keep their column; everyone else computes an update
        // from its own column and its receive buffers only.
        let mut x_next = st.x.clone();
        let mut masked_gradient_sum = Array1::zeros(dim);
        for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let xi = st.x.column(i);
            let g = encode_gradient(self.problem, self.assignment, i, xi, self.cfg.seed, t)?;
            let half = local_step(xi, g.view(), self.cfg.eta);
            let terms: Vec<(f64, ArrayView1<f64>)> = self
                .topology
                .neighbors(i)
                .iter()
                .enumerate()
                .map(|(idx, &j)| (self.topology.weight(i, j), st.buffers[i][idx].view()))
                .collect();
            let updated = gossip_step(half.view(), xi, self.cfg.gamma, &terms)?;
            masked_gradient_sum += &g;
            x_next.column_mut(i).assign(&updated);
        }

        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: st.iteration + 1,
                partial: None,
            });
        }

        let bits = account_bits(&active, self.topology, dim, self.cfg.bits_per_element);

        // Deliver: every active device broadcasts its new vector.
        for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let col = x_next.column(i);
            for &j in self.topology.neighbors(i) {
                let idx = self
                    .topology
                    .neighbors(j)
                    .binary_search(&i)
                    .expect("mixing matrix is symmetric, so i must appear among j's neighbors");
                st.buffers[j][idx].assign(&col);
            }
        }

        st.x = x_next;
        st.iteration += 1;

        #[cfg(debug_assertions)]
        self.assert_buffer_consistency(st);

        Ok(StepSummary {
            iteration: st.iteration,
            active,
            bits,
            masked_gradient_sum,
        })
    }

    /// Debug-build check of the buffering design: every stored message
    /// equals the sender's current parameter vector.
    #[cfg(debug_assertions)]
    fn assert_buffer_consistency(&self, st: &RunState) {
        for i in 0..self.topology.n() {
            for (idx, &j) in self.topology.neighbors(i).iter().enumerate() {
                debug_assert!(
                    st.buffers[i][idx]
                        .iter()
                        .zip(st.x.column(j).iter())
                        .all(|(a, b)| a == b),
                    "buffer of device {i} from neighbor {j} is stale after iteration {}",
                    st.iteration
                );
            }
        }
    }

    fn telemetry_row(&self, st: &RunState, cum_bits: u64, stragglers: u32) -> TelemetryRow {
        let mean = st.x.mean_axis(Axis(1)).expect("n >= 1");
        let consensus_err =
            st.x.axis_iter(Axis(1))
                .map(|col| {
                    col.iter()
                        .zip(mean.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
        TelemetryRow {
            t: st.iteration as u64,
            loss: self.problem.global_loss(mean.view()),
            consensus_err,
            cum_bits,
            stragglers,
        }
    }

    fn meta(&self, diverged_at: Option<usize>) -> RunMeta {
        RunMeta {
            seed: self.cfg.seed,
            eta: self.cfg.eta,
            gamma: self.cfg.gamma,
            p: self.cfg.p,
            iterations: self.cfg.iterations,
            loss_every: self.cfg.loss_every,
            bits_per_element: self.cfg.bits_per_element,
            n: self.topology.n(),
            m: self.assignment.m(),
            dim: self.problem.dim(),
            d: self.assignment.degrees().to_vec(),
            a_min: self.coeffs.a_min,
            a_max: self.coeffs.a_max,
            rho: self.spectral.rho,
            beta: self.spectral.beta,
            sigma0: self.problem.noise_sigma(),
            input_hash: self.input_hash.clone(),
            diverged_at,
        }
    }

    /// Run all `iterations` rounds from a fresh state, recording telemetry
    /// every `loss_every` iterations. On divergence the error carries the
    /// telemetry collected so far, marked in its metadata.
    pub fn run(&self) -> Result<Telemetry> {
        let mut st = self.initial_state();
        self.run_from(&mut st)
    }

    /// As [`Self::run`], but from caller-provided state.
    pub fn run_from(&self, st: &mut RunState) -> Result<Telemetry> {
        let mut rows = Vec::new();
        let mut cum_bits: u64 = 0;
        for _ in 0..self.cfg.iterations {
            match self.step(st) {
                Ok(summary) => {
                    cum_bits += summary.bits;
                    if summary.iteration % self.cfg.loss_every == 0 {
                        let stragglers = summary.active.iter().filter(|&&a| !a).count() as u32;
                        rows.push(self.telemetry_row(st, cum_bits, stragglers));
                    }
                }
                Err(Error::Divergence { iteration, .. }) => {
                    let partial = Telemetry {
                        rows,
                        meta: self.meta(Some(iteration)),
                    };
                    return Err(Error::Divergence {
                        iteration,
                        partial: Some(Box::new(partial)),
                    });
                }
                Err(other) => return Err(other),
            }
        }
        Ok(Telemetry {
            rows,
            meta: self.meta(None),
        })
    }
}

fn config_echo(cfg: &RunConfig) -> String {
    let init = match cfg.init {
        Init::Zero => "zero".to_string(),
        Init::Gaussian { std } => format!("gaussian:{std}"),
    };
    format!(
        "eta={} gamma={} p={} iterations={} seed={} loss_every={} bits_per_element={} init={}",
        cfg.eta,
        cfg.gamma,
        cfg.p,
        cfg.iterations,
        cfg.seed,
        cfg.loss_every,
        cfg.bits_per_element,
        init
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::GenerateConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn paper_problem(seed: u64) -> Problem {
        Problem::generate(&GenerateConfig {
            m: 16,
            dim: 100,
            feature_std: 10.0,
            label_noise_std: 1.0,
            planted_range: (1, 10),
            sigma0: 1.0,
            seed,
        })
        .unwrap()
    }

    fn noiseless_problem(seed: u64, m: usize, dim: usize) -> Problem {
        Problem::generate(&GenerateConfig {
            m,
            dim,
            feature_std: 1.0,
            label_noise_std: 0.0,
            planted_range: (1, 3),
            sigma0: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn straggler_sampling_edge_cases() {
        let mut stream = rng::stream(1, rng::STRAGGLERS, [0, 0, 0]);
        assert!(sample_stragglers(0.0, 32, &mut stream).iter().all(|&a| a));
        assert!(sample_stragglers(1.0, 32, &mut stream).iter().all(|&a| !a));
    }

    #[test]
    fn straggler_rate_matches_binomial_ci() {
        let mut stream = rng::stream(7, rng::STRAGGLERS, [0, 0, 0]);
        let p = 0.2;
        let rounds = 10_000;
        let n = 16;
        let mut stragglers = 0usize;
        for _ in 0..rounds {
            stragglers += sample_stragglers(p, n, &mut stream)
                .iter()
                .filter(|&&a| !a)
                .count();
        }
        let total = (rounds * n) as f64;
        let rate = stragglers as f64 / total;
        let ci = 3.0 * (p * (1.0 - p) / total).sqrt();
        assert!((rate - p).abs() < ci, "rate {rate} outside {p} +- {ci}");
    }

    #[test]
    fn encode_single_subset_is_plain_gradient() {
        let p = noiseless_problem(3, 1, 4);
        let s = AssignmentMatrix::full_replication(2, 1).unwrap();
        let x = array![0.5, -1.0, 2.0, 0.0];
        let g = encode_gradient(&p, &s, 0, x.view(), 9, 0).unwrap();
        // d_1 = 2, so the encoded vector is half the exact gradient.
        let exact = p.exact_gradient(0, x.view()).unwrap();
        for (a, b) in g.iter().zip(exact.iter()) {
            assert_abs_diff_eq!(*a, 0.5 * b, epsilon = 1e-15);
        }

        let s_single = AssignmentMatrix::no_redundancy(1, 1, 0, false).unwrap();
        let g = encode_gradient(&p, &s_single, 0, x.view(), 9, 0).unwrap();
        assert_eq!(g, exact);
    }

    #[test]
    fn encode_two_subsets_hand_example() {
        // Two components in R^2, both held by the device, d = [2, 2]:
        // g = 1/2 grad f_1 + 1/2 grad f_2.
        let p = Problem::from_parts(array![[1.0, 0.0], [0.0, 2.0]], array![1.0, 4.0], 0.0, None)
            .unwrap();
        let s = AssignmentMatrix::full_replication(2, 2).unwrap();
        let x = array![3.0, 1.0];
        // grad f_1 = (3 - 1) [1, 0] = [2, 0]; grad f_2 = (2 - 4) [0, 2] = [0, -4].
        let g = encode_gradient(&p, &s, 1, x.view(), 0, 5).unwrap();
        assert_eq!(g, array![1.0, -2.0]);
    }

    #[test]
    fn encoding_telescopes_to_global_gradient_at_common_point() {
        let p = noiseless_problem(11, 16, 10);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 4, true).unwrap();
        let x = Array1::linspace(-1.0, 1.0, 10);
        let mut sum = Array1::<f64>::zeros(10);
        for i in 0..16 {
            sum += &encode_gradient(&p, &s, i, x.view(), 0, 0).unwrap();
        }
        sum /= 16.0;
        // (1/n) sum_i g_i = (m/n) grad f(x) because column sums of S hit d_k.
        let mut grad = Array1::<f64>::zeros(10);
        for k in 0..16 {
            grad += &p.exact_gradient(k, x.view()).unwrap();
        }
        grad /= 16.0;
        for (a, b) in sum.iter().zip(grad.iter()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn local_step_hand_examples() {
        let x = array![1.0, 1.0];
        assert_eq!(
            local_step(x.view(), array![2.0, 0.0].view(), 0.5),
            array![0.0, 1.0]
        );
        assert_eq!(local_step(x.view(), array![0.0, 0.0].view(), 0.5), x);
        assert_eq!(local_step(x.view(), array![2.0, 0.0].view(), 0.0), x);
    }

    #[test]
    fn gossip_step_hand_examples() {
        let x_half = array![1.0];
        let x_old = array![1.0];
        // gamma = 0 returns the half step unchanged.
        let terms = [(0.5, array![9.0]), (0.5, array![-3.0])];
        let term_views: Vec<(f64, ArrayView1<f64>)> =
            terms.iter().map(|(w, v)| (*w, v.view())).collect();
        assert_eq!(
            gossip_step(x_half.view(), x_old.view(), 0.0, &term_views).unwrap(),
            x_half
        );

        // Complete graph of 3 with weights 1/3 and gamma = 1 lands every
        // device on the mean of (0, 3, 6).
        let xs = [array![0.0], array![3.0], array![6.0]];
        for i in 0..3 {
            let others: Vec<(f64, ArrayView1<f64>)> = (0..3)
                .filter(|&j| j != i)
                .map(|j| (1.0 / 3.0, xs[j].view()))
                .collect();
            let out = gossip_step(xs[i].view(), xs[i].view(), 1.0, &others).unwrap();
            assert_abs_diff_eq!(out[0], 3.0, epsilon = 1e-15);
        }

        // Consensus is a fixed point: all equal vectors leave x_half alone.
        let same: Vec<(f64, ArrayView1<f64>)> = vec![(0.5, x_old.view()), (0.5, x_old.view())];
        assert_eq!(
            gossip_step(array![7.0].view(), x_old.view(), 0.3, &same).unwrap(),
            array![7.0]
        );
    }

    #[test]
    fn bit_accounting_examples() {
        let ring = MixingMatrix::ring(16).unwrap();
        let mut active = vec![true; 16];
        for flag in active.iter_mut().take(3) {
            *flag = false;
        }
        assert_eq!(account_bits(&active, &ring, 100, 64), 13 * 2 * 100 * 64);
        assert_eq!(account_bits(&[false; 16], &ring, 100, 64), 0);

        let complete = MixingMatrix::complete(16).unwrap();
        assert_eq!(
            account_bits(&[true; 16], &complete, 100, 64),
            16 * 15 * 100 * 64
        );
    }

    #[test]
    fn all_straggler_run_is_inert() {
        let p = paper_problem(1);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 1, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(50, 1);
        cfg.p = 1.0;
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let telemetry = engine.run().unwrap();
        assert_eq!(telemetry.rows.len(), 50);
        let f0 = p.global_loss(Array1::zeros(100).view());
        for row in &telemetry.rows {
            assert_eq!(row.loss, f0);
            assert_eq!(row.cum_bits, 0);
            assert_eq!(row.stragglers, 16);
        }
    }

    #[test]
    fn straggler_columns_freeze() {
        let p = paper_problem(2);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 2, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(30, 2);
        cfg.p = 0.5;
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let mut st = engine.initial_state();
        for _ in 0..30 {
            let before = st.x.clone();
            let summary = engine.step(&mut st).unwrap();
            for i in 0..16 {
                if !summary.active[i] {
                    assert_eq!(st.x.column(i), before.column(i), "device {i} moved");
                }
            }
            assert!(summary.active.iter().any(|&a| !a) || summary.bits > 0);
        }
    }

    #[test]
    fn buffers_track_neighbor_columns() {
        let p = paper_problem(3);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 3, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(20, 3);
        cfg.p = 0.3;
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let mut st = engine.initial_state();
        for _ in 0..20 {
            engine.step(&mut st).unwrap();
            for i in 0..16 {
                for (idx, &j) in w.neighbors(i).iter().enumerate() {
                    assert_eq!(st.buffers[i][idx], st.x.column(j).to_owned());
                }
            }
        }
    }

    #[test]
    fn corrupted_buffers_are_a_protocol_error() {
        let p = paper_problem(4);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 4, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let engine = Engine::new(&p, &s, &w, RunConfig::baseline(5, 4)).unwrap();
        let mut st = engine.initial_state();
        st.buffers[3].pop();
        let err = engine.step(&mut st).unwrap_err();
        assert!(matches!(err, Error::ProtocolState(_)), "got {err}");

        let mut st = engine.initial_state();
        st.x = Array2::zeros((3, 3));
        let err = engine.step(&mut st).unwrap_err();
        assert!(matches!(err, Error::ProtocolState(_)), "got {err}");
    }

    #[test]
    fn gossip_correction_uses_pre_step_vectors() {
        // Complete graph of 2, f(x) = x^2 / 2 on both devices (d = 2),
        // eta = 1, gamma = 1, x = (0, 2):
        //   device 0: g = 0,   half = 0, update = 0 + 0.5 (2 - 0) = 1
        //   device 1: g = 1,   half = 1, update = 1 + 0.5 (0 - 2) = 0
        // Using the half step in the correction instead would land device 1
        // on 0.5.
        let p = Problem::from_parts(array![[1.0]], array![0.0], 0.0, None).unwrap();
        let s = AssignmentMatrix::full_replication(2, 1).unwrap();
        let w = MixingMatrix::complete(2).unwrap();
        let cfg = RunConfig {
            eta: 1.0,
            gamma: 1.0,
            p: 0.0,
            iterations: 1,
            seed: 0,
            loss_every: 1,
            bits_per_element: 64,
            init: Init::Zero,
        };
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let mut st = engine
            .state_from(Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap())
            .unwrap();
        engine.step(&mut st).unwrap();
        assert_eq!(st.x[[0, 0]], 1.0);
        assert_eq!(st.x[[0, 1]], 0.0);
    }

    #[test]
    fn mean_evolution_identity_without_stragglers() {
        let p = paper_problem(5);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 5, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(50, 5);
        cfg.p = 0.0;
        cfg.init = Init::Gaussian { std: 1.0 };
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let mut st = engine.initial_state();
        for _ in 0..50 {
            let mean_before = st.x.mean_axis(Axis(1)).unwrap();
            let summary = engine.step(&mut st).unwrap();
            let mean_after = st.x.mean_axis(Axis(1)).unwrap();
            let predicted = &mean_before - &(summary.masked_gradient_sum.mapv(|v| v * 1e-4 / 16.0));
            for (a, b) in mean_after.iter().zip(predicted.iter()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pure_gossip_preserves_the_mean_and_contracts() {
        let p = paper_problem(6);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 6, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let rho = w.spectral_summary().unwrap().rho;
        let cfg = RunConfig {
            eta: 0.0,
            gamma: 0.05,
            p: 0.0,
            iterations: 50,
            seed: 6,
            loss_every: 1,
            bits_per_element: 64,
            init: Init::Gaussian { std: 1.0 },
        };
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let mut st = engine.initial_state();
        let mean0 = st.x.mean_axis(Axis(1)).unwrap();
        let mut prev = consensus(&st.x);
        for _ in 0..50 {
            engine.step(&mut st).unwrap();
            let now = consensus(&st.x);
            assert!(now <= (1.0 - rho * 0.05).powi(2) * prev * (1.0 + 1e-9));
            prev = now;
        }
        let mean_t = st.x.mean_axis(Axis(1)).unwrap();
        for (a, b) in mean_t.iter().zip(mean0.iter()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    fn consensus(x: &Array2<f64>) -> f64 {
        let mean = x.mean_axis(Axis(1)).unwrap();
        x.axis_iter(Axis(1))
            .map(|col| {
                col.iter()
                    .zip(mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn telemetry_cadence_and_round_trip() {
        let p = paper_problem(8);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 8, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(25, 8);
        cfg.loss_every = 10;
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        let telemetry = engine.run().unwrap();
        assert_eq!(telemetry.rows.len(), 2);
        assert_eq!(telemetry.rows[0].t, 10);
        assert_eq!(telemetry.rows[1].t, 20);
        assert!(telemetry.rows[1].cum_bits >= telemetry.rows[0].cum_bits);

        let parsed = Telemetry::rows_from_csv(&telemetry.to_csv()).unwrap();
        assert_eq!(parsed, telemetry.rows);
    }

    #[test]
    fn identical_configs_give_byte_identical_telemetry() {
        let p = paper_problem(9);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 9, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let cfg = RunConfig::baseline(200, 9);
        let a = Engine::new(&p, &s, &w, cfg.clone()).unwrap().run().unwrap();
        let b = Engine::new(&p, &s, &w, cfg).unwrap().run().unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn divergence_is_reported_with_partial_telemetry() {
        let p = paper_problem(10);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 10, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(500, 10);
        cfg.eta = 10.0; // far beyond stable for this quadratic
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        match engine.run() {
            Err(Error::Divergence { iteration, partial }) => {
                assert!(iteration >= 1);
                let partial = partial.expect("partial telemetry attached");
                assert_eq!(partial.meta.diverged_at, Some(iteration));
                assert!(partial.rows.len() < 500);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatches_are_config_errors() {
        let p = paper_problem(11);
        let s = AssignmentMatrix::uniform_random(8, 16, &[3; 16], 11, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        assert!(matches!(
            Engine::new(&p, &s, &w, RunConfig::baseline(5, 0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gamma_above_one_over_beta_warns() {
        let p = paper_problem(12);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 12, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let mut cfg = RunConfig::baseline(5, 12);
        cfg.gamma = 0.9; // 1/beta = 0.75 for the ring
        let engine = Engine::new(&p, &s, &w, cfg).unwrap();
        assert_eq!(engine.warnings().len(), 1);
    }

    #[test]
    fn meta_kv_round_trip() {
        let p = paper_problem(13);
        let s = AssignmentMatrix::uniform_random(16, 16, &[3; 16], 13, true).unwrap();
        let w = MixingMatrix::ring(16).unwrap();
        let engine = Engine::new(&p, &s, &w, RunConfig::baseline(5, 13)).unwrap();
        let telemetry = engine.run().unwrap();
        let text = telemetry
            .meta
            .to_text(&[("topology".into(), "ring".into())]);
        let kv = parse_kv(&text);
        assert_eq!(kv["seed"], "13");
        assert_eq!(kv["status"], "completed");
        assert_eq!(kv["topology"], "ring");
        assert_eq!(kv["d"].split_whitespace().count(), 16);
        assert_eq!(kv["input_hash"].len(), 64);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn tiny_problem(seed: u64, sigma0: f64) -> Problem {
            Problem::generate(&GenerateConfig {
                m: 3,
                dim: 4,
                feature_std: 1.0,
                label_noise_std: 0.5,
                planted_range: (1, 2),
                sigma0,
                seed,
            })
            .unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Across random small configurations: reruns are byte-identical,
            /// stragglers never move, cumulative bits never decrease, and
            /// buffers always mirror the neighbors' columns.
            #[test]
            fn run_invariants(
                seed in any::<u64>(),
                n in 3usize..=8,
                ring in any::<bool>(),
                p in 0.0f64..=1.0,
                eta in 0.0f64..1e-3,
                gamma in 0.0f64..0.3,
                sigma0 in 0.0f64..1.0,
            ) {
                let problem = tiny_problem(seed, sigma0);
                let assignment =
                    AssignmentMatrix::uniform_random(n, 3, &[2, 1, 2], seed, true).unwrap();
                let topology = if ring {
                    MixingMatrix::ring(n.max(3)).unwrap()
                } else {
                    MixingMatrix::complete(n).unwrap()
                };
                let cfg = RunConfig {
                    eta,
                    gamma,
                    p,
                    iterations: 5,
                    seed,
                    loss_every: 1,
                    bits_per_element: 8,
                    init: Init::Gaussian { std: 0.5 },
                };
                let engine = Engine::new(&problem, &assignment, &topology, cfg.clone()).unwrap();

                let a = engine.run().unwrap();
                let b = engine.run().unwrap();
                prop_assert_eq!(a.to_csv(), b.to_csv());
                for pair in a.rows.windows(2) {
                    prop_assert!(pair[1].cum_bits >= pair[0].cum_bits);
                    prop_assert!(pair[1].consensus_err >= 0.0);
                }

                let mut st = engine.initial_state();
                for _ in 0..5 {
                    let before = st.x.clone();
                    let summary = engine.step(&mut st).unwrap();
                    for (i, &is_active) in summary.active.iter().enumerate() {
                        if !is_active {
                            prop_assert_eq!(st.x.column(i), before.column(i));
                        }
                    }
                    for i in 0..topology.n() {
                        for (idx, &j) in topology.neighbors(i).iter().enumerate() {
                            prop_assert_eq!(&st.buffers[i][idx], &st.x.column(j).to_owned());
                        }
                    }
                }
            }
        }
    }
}
