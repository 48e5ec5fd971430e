//! Experiment configuration files.
//!
//! Plain-text TOML with one section per concern (topology, assignment,
//! problem, run). Parsing is fail-closed: unknown keys are rejected, every
//! numeric field is range-checked, and referenced files must exist before
//! any computation starts. Other than the output directory (flag or
//! `GOCO_OUT`), nothing can be overridden by the environment, so a run is
//! reproducible from the config file alone.
//!
//! ```toml
//! name = "goco_ring"
//! seeds = [42, 43, 44]
//!
//! [topology]
//! kind = "ring"          # ring | complete | file
//! n = 16
//!
//! [assignment]
//! kind = "uniform_random" # uniform_random | no_redundancy | full_replication
//! d = 3                   # scalar or per-subset list
//!
//! [problem]
//! m = 16
//! dim = 100
//! feature_std = 10.0
//! label_noise_std = 1.0
//! planted_min = 1
//! planted_max = 10
//! sigma0 = 1.0
//!
//! [run]
//! eta = 1e-4
//! gamma = 0.05
//! p = 0.2
//! iterations = 10000
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use goco_core::assignment::AssignmentMatrix;
use goco_core::engine::{Init, RunConfig};
use goco_core::problem::{GenerateConfig, Problem};
use goco_core::topology::MixingMatrix;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Artifact name prefix; defaults to the config file stem.
    #[serde(default)]
    pub name: Option<String>,
    /// Master seeds, one run per seed. Every randomness source (problem,
    /// assignment, stragglers, gradient noise) derives from the run's seed.
    pub seeds: Vec<u64>,
    /// Default output directory; `--out` and `GOCO_OUT` take precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub topology: TopologySpec,
    pub assignment: AssignmentSpec,
    pub problem: ProblemSpec,
    pub run: RunSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    Ring { n: usize },
    Complete { n: usize },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ReplicationSpec {
    Uniform(usize),
    PerSubset(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum AssignmentSpec {
    UniformRandom {
        d: ReplicationSpec,
        #[serde(default)]
        allow_idle: bool,
    },
    NoRedundancy {
        #[serde(default)]
        allow_idle: bool,
    },
    FullReplication,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub m: usize,
    pub dim: usize,
    pub feature_std: f64,
    pub label_noise_std: f64,
    pub planted_min: i64,
    pub planted_max: i64,
    pub sigma0: f64,
}

fn default_loss_every() -> usize {
    1
}

fn default_bits_per_element() -> u64 {
    64
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub eta: f64,
    pub gamma: f64,
    pub p: f64,
    pub iterations: usize,
    #[serde(default = "default_loss_every")]
    pub loss_every: usize,
    #[serde(default = "default_bits_per_element")]
    pub bits_per_element: u64,
}

impl ExperimentConfig {
    /// Read, parse, and validate a config file. Paths inside the config are
    /// resolved relative to the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let TopologySpec::File { path: w_path } = &mut cfg.topology {
            if w_path.is_relative() {
                *w_path = base.join(&*w_path);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks and file-existence checks; everything aborts here, before
    /// any computation.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must list at least one master seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail("seeds contains duplicates; artifacts would overwrite".into());
        }

        match &self.topology {
            TopologySpec::Ring { n } if *n < 3 => {
                return fail(format!("[topology] ring needs n >= 3, got {n}"));
            }
            TopologySpec::Complete { n } if *n < 2 => {
                return fail(format!("[topology] complete needs n >= 2, got {n}"));
            }
            TopologySpec::File { path } if !path.is_file() => {
                return fail(format!("[topology] file {} does not exist", path.display()));
            }
            _ => {}
        }

        if let AssignmentSpec::UniformRandom { d, .. } = &self.assignment {
            match d {
                ReplicationSpec::Uniform(v) if *v < 1 => {
                    return fail("[assignment] d must be at least 1".into());
                }
                ReplicationSpec::PerSubset(list) => {
                    if list.len() != self.problem.m {
                        return fail(format!(
                            "[assignment] d lists {} degrees but [problem] m = {}",
                            list.len(),
                            self.problem.m
                        ));
                    }
                    if list.iter().any(|&v| v < 1) {
                        return fail("[assignment] every degree must be at least 1".into());
                    }
                }
                _ => {}
            }
        }

        let p = &self.problem;
        if p.m < 1 || p.dim < 1 {
            return fail(format!(
                "[problem] m and dim must be positive, got m={}, dim={}",
                p.m, p.dim
            ));
        }
        if !p.feature_std.is_finite() || p.feature_std <= 0.0 {
            return fail(format!(
                "[problem] feature_std must be positive, got {}",
                p.feature_std
            ));
        }
        if p.label_noise_std < 0.0 || !p.label_noise_std.is_finite() {
            return fail(format!(
                "[problem] label_noise_std must be nonnegative, got {}",
                p.label_noise_std
            ));
        }
        if p.sigma0 < 0.0 || !p.sigma0.is_finite() {
            return fail(format!(
                "[problem] sigma0 must be nonnegative, got {}",
                p.sigma0
            ));
        }
        if p.planted_min > p.planted_max {
            return fail(format!(
                "[problem] planted_min {} exceeds planted_max {}",
                p.planted_min, p.planted_max
            ));
        }

        let r = &self.run;
        if !r.eta.is_finite() || r.eta < 0.0 {
            return fail(format!(
                "[run] eta must be a finite nonnegative real, got {}",
                r.eta
            ));
        }
        if !r.gamma.is_finite() || r.gamma < 0.0 {
            return fail(format!(
                "[run] gamma must be a finite nonnegative real, got {}",
                r.gamma
            ));
        }
        if !(0.0..=1.0).contains(&r.p) {
            return fail(format!("[run] p must lie in [0, 1], got {}", r.p));
        }
        if r.iterations < 1 {
            return fail("[run] iterations must be at least 1".into());
        }
        if r.loss_every < 1 {
            return fail("[run] loss_every must be at least 1".into());
        }
        if r.bits_per_element < 1 {
            return fail("[run] bits_per_element must be at least 1".into());
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("experiment")
    }

    pub fn build_topology(&self) -> CliResult<MixingMatrix> {
        let w = match &self.topology {
            TopologySpec::Ring { n } => MixingMatrix::ring(*n)?,
            TopologySpec::Complete { n } => MixingMatrix::complete(*n)?,
            TopologySpec::File { path } => MixingMatrix::read_file(path)?,
        };
        Ok(w)
    }

    pub fn build_assignment(&self, n: usize, seed: u64) -> CliResult<AssignmentMatrix> {
        let s = match &self.assignment {
            AssignmentSpec::UniformRandom { d, allow_idle } => {
                let degrees = match d {
                    ReplicationSpec::Uniform(v) => vec![*v; self.problem.m],
                    ReplicationSpec::PerSubset(list) => list.clone(),
                };
                AssignmentMatrix::uniform_random(n, self.problem.m, &degrees, seed, *allow_idle)?
            }
            AssignmentSpec::NoRedundancy { allow_idle } => {
                AssignmentMatrix::no_redundancy(n, self.problem.m, seed, *allow_idle)?
            }
            AssignmentSpec::FullReplication => {
                AssignmentMatrix::full_replication(n, self.problem.m)?
            }
        };
        Ok(s)
    }

    pub fn build_problem(&self, seed: u64) -> CliResult<Problem> {
        let p = Problem::generate(&GenerateConfig {
            m: self.problem.m,
            dim: self.problem.dim,
            feature_std: self.problem.feature_std,
            label_noise_std: self.problem.label_noise_std,
            planted_range: (self.problem.planted_min, self.problem.planted_max),
            sigma0: self.problem.sigma0,
            seed,
        })?;
        Ok(p)
    }

    pub fn build_run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            eta: self.run.eta,
            gamma: self.run.gamma,
            p: self.run.p,
            iterations: self.run.iterations,
            seed,
            loss_every: self.run.loss_every,
            bits_per_element: self.run.bits_per_element,
            init: Init::Zero,
        }
    }

    /// Key/value echo of the config sections for the metadata sidecar.
    pub fn sidecar_echo(&self) -> Vec<(String, String)> {
        let topology = match &self.topology {
            TopologySpec::Ring { n } => format!("ring n={n}"),
            TopologySpec::Complete { n } => format!("complete n={n}"),
            TopologySpec::File { path } => format!("file {}", path.display()),
        };
        let assignment = match &self.assignment {
            AssignmentSpec::UniformRandom { d, allow_idle } => {
                let d = match d {
                    ReplicationSpec::Uniform(v) => v.to_string(),
                    ReplicationSpec::PerSubset(list) => list
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                };
                format!("uniform_random d={d} allow_idle={allow_idle}")
            }
            AssignmentSpec::NoRedundancy { allow_idle } => {
                format!("no_redundancy allow_idle={allow_idle}")
            }
            AssignmentSpec::FullReplication => "full_replication".into(),
        };
        vec![
            ("name".into(), self.name().to_string()),
            ("topology".into(), topology),
            ("assignment".into(), assignment),
            ("feature_std".into(), self.problem.feature_std.to_string()),
            (
                "label_noise_std".into(),
                self.problem.label_noise_std.to_string(),
            ),
            (
                "planted_range".into(),
                format!("{} {}", self.problem.planted_min, self.problem.planted_max),
            ),
        ]
    }
}

/// Configuration for `goco bound`.
///
/// ```toml
/// [regularity]
/// mu = 1.0
/// l = 4.0
/// c = 0.0
/// g = 10.0
/// sigma = 1.0        # scalar (applied to every subset) or per-subset list
/// lambda0 = 1.0
///
/// [structure]
/// # Either point at a finished run's sidecar:
/// #   meta = "out/goco_ring-seed42.meta"
/// # or spell the quantities out:
/// n = 16
/// m = 16
/// p = 0.2
/// d = 3
/// a_min = 0.666
/// a_max = 1.334
/// gamma = 0.05
/// rho = 0.0507
/// beta = 1.3334
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub regularity: RegularitySpec,
    pub structure: StructureSpec,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularitySpec {
    pub mu: f64,
    pub l: f64,
    pub c: f64,
    pub g: f64,
    pub sigma: SigmaSpec,
    pub lambda0: f64,
    /// Initial distance `||mean(x^0) - x*||`; defaults to zero.
    #[serde(default)]
    pub r0: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Scalar(f64),
    PerSubset(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t_values: Option<Vec<f64>>,
    /// How many times `mu` must exceed the condition ratio; default 10.
    pub margin_factor: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    /// Path to a run's metadata sidecar; excludes the inline fields.
    pub meta: Option<PathBuf>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<f64>,
    pub d: Option<ReplicationSpec>,
    pub a_min: Option<f64>,
    pub a_max: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
}

impl BoundConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cfg: BoundConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(meta) = &mut cfg.structure.meta {
            if meta.is_relative() {
                *meta = base.join(&*meta);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let s = &self.structure;
        let inline_fields = [
            s.n.is_some(),
            s.m.is_some(),
            s.p.is_some(),
            s.d.is_some(),
            s.a_min.is_some(),
            s.a_max.is_some(),
            s.gamma.is_some(),
            s.rho.is_some(),
            s.beta.is_some(),
        ];
        match &s.meta {
            Some(meta) => {
                if inline_fields.iter().any(|&set| set) {
                    return Err(CliError::Config(
                        "[structure] meta excludes the inline fields; remove one or the other"
                            .into(),
                    ));
                }
                if !meta.is_file() {
                    return Err(CliError::Config(format!(
                        "[structure] meta file {} does not exist",
                        meta.display()
                    )));
                }
            }
            None => {
                if !inline_fields.iter().all(|&set| set) {
                    return Err(CliError::Config(
                        "[structure] needs either meta or all of n, m, p, d, a_min, a_max, \
                         gamma, rho, beta"
                            .into(),
                    ));
                }
            }
        }
        if let Some(ts) = &self.grid.t_values {
            if ts.is_empty() {
                return Err(CliError::Config("[grid] t_values must be nonempty".into()));
            }
        }
        if let Some(f) = self.grid.margin_factor {
            if f.is_nan() || f <= 0.0 {
                return Err(CliError::Config(format!(
                    "[grid] margin_factor must be positive, got {f}"
                )));
            }
        }
        Ok(())
    }

    pub fn structure_meta_path(&self) -> Option<PathBuf> {
        self.structure.meta.clone()
    }

    /// Inline structural inputs (callers use the meta path when present).
    pub fn structural_inputs(&self) -> CliResult<goco_core::theory::StructuralInputs> {
        let s = &self.structure;
        let m = s.m.expect("validated");
        let d = match s.d.as_ref().expect("validated") {
            ReplicationSpec::Uniform(v) => vec![*v; m],
            ReplicationSpec::PerSubset(list) => {
                if list.len() != m {
                    return Err(CliError::Config(format!(
                        "[structure] d lists {} degrees but m = {m}",
                        list.len()
                    )));
                }
                list.clone()
            }
        };
        Ok(goco_core::theory::StructuralInputs {
            n: s.n.expect("validated"),
            m,
            p: s.p.expect("validated"),
            d,
            a_min: s.a_min.expect("validated"),
            a_max: s.a_max.expect("validated"),
            gamma: s.gamma.expect("validated"),
            rho: s.rho.expect("validated"),
            beta: s.beta.expect("validated"),
        })
    }

    /// Regularity parameters; `m` comes from the resolved structure so a
    /// scalar sigma can be broadcast.
    pub fn regularity_params(&self, m: usize) -> CliResult<goco_core::theory::RegularityParams> {
        let sigma = match &self.regularity.sigma {
            SigmaSpec::Scalar(v) => vec![*v; m],
            SigmaSpec::PerSubset(list) => list.clone(),
        };
        Ok(goco_core::theory::RegularityParams {
            mu: self.regularity.mu,
            l: self.regularity.l,
            c: self.regularity.c,
            g: self.regularity.g,
            sigma,
            lambda0: self.regularity.lambda0,
            r0: self.regularity.r0,
        })
    }

    pub fn t_values(&self) -> Option<Vec<f64>> {
        self.grid.t_values.clone()
    }

    pub fn margin_factor(&self) -> f64 {
        self.grid.margin_factor.unwrap_or(10.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASELINE: &str = r#"
name = "goco_ring"
seeds = [42, 43]

[topology]
kind = "ring"
n = 16

[assignment]
kind = "uniform_random"
d = 3
allow_idle = true

[problem]
m = 16
dim = 100
feature_std = 10.0
label_noise_std = 1.0
planted_min = 1
planted_max = 10
sigma0 = 1.0

[run]
eta = 1e-4
gamma = 0.05
p = 0.2
iterations = 100
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn baseline_parses_with_defaults() {
        let cfg = parse(BASELINE).unwrap();
        assert_eq!(cfg.run.loss_every, 1);
        assert_eq!(cfg.run.bits_per_element, 64);
        assert_eq!(cfg.name(), "goco_ring");
        assert!(cfg.build_topology().is_ok());
        assert!(cfg.build_problem(1).is_ok());
        assert!(cfg.build_assignment(16, 1).is_ok());
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let text = BASELINE.replace("eta = 1e-4", "eta = 1e-4\nlearning_rate = 3.0");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn parse_errors_name_key_and_line() {
        let text = BASELINE.replace("gamma = 0.05", "gamma = \"fast\"");
        let err = parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gamma") || msg.contains("line"), "{msg}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for (from, to) in [
            ("p = 0.2", "p = 1.5"),
            ("eta = 1e-4", "eta = -1.0"),
            ("feature_std = 10.0", "feature_std = 0.0"),
            ("iterations = 100", "iterations = 0"),
            ("n = 16", "n = 2"),
        ] {
            let text = BASELINE.replace(from, to);
            assert!(parse(&text).is_err(), "accepted {to}");
        }
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let text = BASELINE.replace("seeds = [42, 43]", "seeds = [42, 42]");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn per_subset_degrees_must_match_m() {
        let text = BASELINE.replace("d = 3", "d = [3, 3]");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("degrees"), "{err}");
    }

    #[test]
    fn missing_topology_file_is_rejected_before_running() {
        let text = BASELINE.replace(
            "kind = \"ring\"\nn = 16",
            "kind = \"file\"\npath = \"/nonexistent/w.txt\"",
        );
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }
}
