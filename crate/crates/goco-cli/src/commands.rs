//! Subcommand implementations.
//!
//! Everything returns structured results so integration tests can assert on
//! outcomes without scraping stdout. File writes are deterministic: no
//! timestamps, no map-ordered iteration, shortest round-trip float
//! formatting throughout.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use goco_core::assignment::AssignmentMatrix;
use goco_core::engine::{parse_kv, Engine, Telemetry, TelemetryRow};
use goco_core::theory::{
    bound_curve, bound_curve_csv, check_mu_condition, compute_constants, BoundPoint, MuCondition,
    StructuralInputs, TheoryConstants,
};
use goco_core::topology::MixingMatrix;

use crate::config::{BoundConfig, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Files produced for one seed of a run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub seed: u64,
    pub csv_path: PathBuf,
    pub meta_path: PathBuf,
    pub rows: usize,
    pub final_loss: Option<f64>,
}

/// Output-directory precedence: `--out` flag, then `GOCO_OUT`, then the
/// config's `output_dir`, then `./goco-out`.
pub fn resolve_out(flag: Option<PathBuf>, config_default: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = std::env::var_os("GOCO_OUT") {
        return PathBuf::from(p);
    }
    config_default.unwrap_or_else(|| PathBuf::from("goco-out"))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

fn override_seeds(cfg: &ExperimentConfig, seeds: Option<Vec<u64>>) -> CliResult<Vec<u64>> {
    match seeds {
        None => Ok(cfg.seeds.clone()),
        Some(list) => {
            if list.is_empty() {
                return Err(CliError::Config(
                    "--seeds must list at least one seed".into(),
                ));
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(CliError::Config("--seeds contains duplicates".into()));
            }
            Ok(list)
        }
    }
}

/// Execute one seed end to end and write its telemetry CSV plus metadata
/// sidecar. On divergence the partial telemetry is still written, marked in
/// the sidecar, and the error carries the seed and iteration.
fn run_single(
    cfg: &ExperimentConfig,
    topology: &MixingMatrix,
    name: &str,
    seed: u64,
    out: &Path,
    quiet: bool,
) -> CliResult<(RunArtifact, Telemetry)> {
    let problem = cfg.build_problem(seed)?;
    let assignment = cfg.build_assignment(topology.n(), seed)?;
    let run_cfg = cfg.build_run_config(seed);
    let engine = Engine::new(&problem, &assignment, topology, run_cfg)?;
    if !quiet {
        for w in engine.warnings() {
            eprintln!("warning (seed {seed}): {w}");
        }
    }

    let csv_path = out.join(format!("{name}-seed{seed}.csv"));
    let meta_path = out.join(format!("{name}-seed{seed}.meta"));
    let echo = cfg.sidecar_echo();

    match engine.run() {
        Ok(telemetry) => {
            telemetry.write_csv(&csv_path)?;
            telemetry.meta.write_file(&meta_path, &echo)?;
            let artifact = RunArtifact {
                seed,
                csv_path,
                meta_path,
                rows: telemetry.rows.len(),
                final_loss: telemetry.rows.last().map(|r| r.loss),
            };
            Ok((artifact, telemetry))
        }
        Err(goco_core::Error::Divergence { iteration, partial }) => {
            if let Some(partial) = partial {
                partial.write_csv(&csv_path)?;
                partial.meta.write_file(&meta_path, &echo)?;
            }
            Err(CliError::Divergence { seed, iteration })
        }
        Err(other) => Err(other.into()),
    }
}

/// `goco run`: every seed sequentially.
pub fn cmd_run(
    config_path: &Path,
    out_flag: Option<PathBuf>,
    seeds_flag: Option<Vec<u64>>,
    quiet: bool,
) -> CliResult<Vec<RunArtifact>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let seeds = override_seeds(&cfg, seeds_flag)?;
    let out = resolve_out(out_flag, cfg.output_dir.clone());
    ensure_dir(&out)?;
    let topology = cfg.build_topology()?;
    let name = cfg.name().to_string();

    let mut artifacts = Vec::new();
    for &seed in &seeds {
        let (artifact, _) = run_single(&cfg, &topology, &name, seed, &out, quiet)?;
        if !quiet {
            println!(
                "seed {seed}: {} rows -> {}",
                artifact.rows,
                artifact.csv_path.display()
            );
        }
        artifacts.push(artifact);
    }
    Ok(artifacts)
}

/// `goco sweep`: like run, but seeds execute concurrently. Each seed writes
/// to its own files, so artifacts are byte-identical to a sequential run.
pub fn cmd_sweep(
    config_path: &Path,
    out_flag: Option<PathBuf>,
    seeds_flag: Option<Vec<u64>>,
    quiet: bool,
) -> CliResult<Vec<RunArtifact>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let seeds = override_seeds(&cfg, seeds_flag)?;
    let out = resolve_out(out_flag, cfg.output_dir.clone());
    ensure_dir(&out)?;
    let topology = cfg.build_topology()?;
    let name = cfg.name().to_string();

    let mut results: Vec<CliResult<(RunArtifact, Telemetry)>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = &cfg;
                let topology = &topology;
                let name = &name;
                let out = &out;
                scope.spawn(move || run_single(cfg, topology, name, seed, out, true))
            })
            .collect();
        for handle in handles {
            results.push(handle.join().expect("run thread panicked"));
        }
    });

    let mut artifacts = Vec::new();
    for result in results {
        let (artifact, _) = result?;
        if !quiet {
            println!(
                "seed {}: {} rows -> {}",
                artifact.seed,
                artifact.rows,
                artifact.csv_path.display()
            );
        }
        artifacts.push(artifact);
    }
    Ok(artifacts)
}

/// The three method roles of a comparison, in output order.
pub const COMPARE_ROLES: [&str; 3] = ["goco_ring", "goco_complete", "ignore_stragglers"];

/// Loss curves of one method resampled onto the common bits grid.
#[derive(Debug, Clone)]
pub struct MethodComparison {
    pub role: String,
    /// `per_seed[seed_idx][grid_idx]`, last-observation-carried-forward.
    pub per_seed: Vec<Vec<f64>>,
    pub median: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub seeds: Vec<u64>,
    pub bits_grid: Vec<u64>,
    pub methods: Vec<MethodComparison>,
    /// Smallest iteration count any ring seed had reached at the final
    /// common bit budget.
    pub ring_min_iterations_at_budget: u64,
    pub bits_csv: PathBuf,
    pub iters_csv: PathBuf,
}

impl ComparisonOutcome {
    pub fn method(&self, role: &str) -> &MethodComparison {
        self.methods
            .iter()
            .find(|m| m.role == role)
            .expect("known comparison role")
    }

    /// Median loss at the largest common cumulative-bit budget.
    pub fn final_median(&self, role: &str) -> f64 {
        *self.method(role).median.last().expect("nonempty grid")
    }
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Step-function (last-observation-carried-forward) resampling of a loss
/// series onto a bits grid. Returns the losses and the iteration the run
/// had reached at the final grid point.
fn locf(rows: &[TelemetryRow], grid: &[u64]) -> (Vec<f64>, u64) {
    debug_assert!(!rows.is_empty());
    let mut out = Vec::with_capacity(grid.len());
    let mut idx = 0usize;
    for &g in grid {
        while idx + 1 < rows.len() && rows[idx + 1].cum_bits <= g {
            idx += 1;
        }
        out.push(rows[idx].loss);
    }
    (out, rows[idx].t)
}

/// `goco compare`: run the ring, complete-graph, and ignore-stragglers
/// configs over their (identical) seed lists, then tabulate losses on a
/// common transmitted-bits grid and, for debugging, on the common iteration
/// grid. The runs execute concurrently; the comparison happens after the
/// join barrier.
pub fn cmd_compare(
    ring_path: &Path,
    complete_path: &Path,
    is_path: &Path,
    out_flag: Option<PathBuf>,
    seeds_flag: Option<Vec<u64>>,
    grid_points: usize,
    quiet: bool,
) -> CliResult<ComparisonOutcome> {
    let ring = ExperimentConfig::load(ring_path)?;
    let complete = ExperimentConfig::load(complete_path)?;
    let ignore = ExperimentConfig::load(is_path)?;

    for (role, cfg) in [("--complete", &complete), ("--is", &ignore)] {
        if cfg.problem != ring.problem {
            return Err(CliError::Config(format!(
                "[problem] section of {role} config differs from --ring; \
                 the methods would optimize different objectives"
            )));
        }
        // A --seeds override applies to all three methods uniformly, so the
        // config lists only need to agree when it is absent.
        if seeds_flag.is_none() && cfg.seeds != ring.seeds {
            return Err(CliError::Config(format!(
                "seeds of {role} config differ from --ring; curves would not be paired"
            )));
        }
    }
    if grid_points < 2 {
        return Err(CliError::Config(
            "comparison grid needs at least 2 points".into(),
        ));
    }

    let out = resolve_out(out_flag, ring.output_dir.clone());
    ensure_dir(&out)?;
    let seeds = override_seeds(&ring, seeds_flag)?;

    let configs = [&ring, &complete, &ignore];
    let topologies = [
        ring.build_topology()?,
        complete.build_topology()?,
        ignore.build_topology()?,
    ];
    let mut results: Vec<Vec<CliResult<(RunArtifact, Telemetry)>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<Vec<_>> = COMPARE_ROLES
            .iter()
            .zip(configs)
            .zip(&topologies)
            .map(|((role, cfg), topology)| {
                seeds
                    .iter()
                    .map(|&seed| {
                        let out = &out;
                        scope.spawn(move || run_single(cfg, topology, role, seed, out, quiet))
                    })
                    .collect()
            })
            .collect();
        for per_role in handles {
            results.push(
                per_role
                    .into_iter()
                    .map(|h| h.join().expect("comparison run thread panicked"))
                    .collect(),
            );
        }
    });
    let mut telemetry: Vec<(String, Vec<Telemetry>)> = Vec::new();
    for (role, per_role) in COMPARE_ROLES.iter().zip(results) {
        let mut runs = Vec::new();
        for result in per_role {
            let (_, tel) = result?;
            runs.push(tel);
        }
        telemetry.push((role.to_string(), runs));
    }

    let all_runs: Vec<&Telemetry> = telemetry.iter().flat_map(|(_, runs)| runs.iter()).collect();
    for tel in &all_runs {
        if tel.rows.is_empty() {
            return Err(CliError::Config(
                "a run produced no telemetry rows; lower loss_every".into(),
            ));
        }
    }
    let start = all_runs
        .iter()
        .map(|t| t.rows.first().unwrap().cum_bits)
        .max()
        .unwrap();
    let end = all_runs
        .iter()
        .map(|t| t.rows.last().unwrap().cum_bits)
        .min()
        .unwrap();
    if start > end {
        return Err(CliError::Config(format!(
            "no common bit budget: earliest shared observation at {start} bits \
             but one run ends at {end} bits"
        )));
    }

    let mut bits_grid: Vec<u64> = (0..grid_points)
        .map(|i| start + ((end - start) as u128 * i as u128 / (grid_points - 1) as u128) as u64)
        .collect();
    bits_grid.dedup();

    let mut methods = Vec::new();
    let mut ring_min_iterations_at_budget = u64::MAX;
    for (role, runs) in &telemetry {
        let mut per_seed = Vec::new();
        for tel in runs {
            let (losses, t_at_budget) = locf(&tel.rows, &bits_grid);
            if role == "goco_ring" {
                ring_min_iterations_at_budget = ring_min_iterations_at_budget.min(t_at_budget);
            }
            per_seed.push(losses);
        }
        let median: Vec<f64> = (0..bits_grid.len())
            .map(|gi| median_of(&per_seed.iter().map(|s| s[gi]).collect::<Vec<f64>>()))
            .collect();
        methods.push(MethodComparison {
            role: role.clone(),
            per_seed,
            median,
        });
    }

    let bits_csv = out.join("compare_bits.csv");
    write_comparison_csv(&bits_csv, "bits", &bits_grid, &seeds, &methods)?;

    // Iteration-axis export over the iteration counts common to every run.
    let mut common_ts: BTreeSet<u64> = all_runs[0].rows.iter().map(|r| r.t).collect();
    for tel in &all_runs[1..] {
        let ts: BTreeSet<u64> = tel.rows.iter().map(|r| r.t).collect();
        common_ts = common_ts.intersection(&ts).copied().collect();
    }
    let ts: Vec<u64> = common_ts.into_iter().collect();
    let mut iter_methods = Vec::new();
    for (role, runs) in &telemetry {
        let mut per_seed = Vec::new();
        for tel in runs {
            let by_t: std::collections::BTreeMap<u64, f64> =
                tel.rows.iter().map(|r| (r.t, r.loss)).collect();
            per_seed.push(ts.iter().map(|t| by_t[t]).collect::<Vec<f64>>());
        }
        let median: Vec<f64> = (0..ts.len())
            .map(|gi| median_of(&per_seed.iter().map(|s| s[gi]).collect::<Vec<f64>>()))
            .collect();
        iter_methods.push(MethodComparison {
            role: role.clone(),
            per_seed,
            median,
        });
    }
    let iters_csv = out.join("compare_iters.csv");
    write_comparison_csv(&iters_csv, "t", &ts, &seeds, &iter_methods)?;

    let outcome = ComparisonOutcome {
        seeds,
        bits_grid,
        methods,
        ring_min_iterations_at_budget,
        bits_csv,
        iters_csv,
    };
    if !quiet {
        let budget = outcome.bits_grid.last().unwrap();
        println!("common bit budget: {budget} bits");
        for role in COMPARE_ROLES {
            println!("  {role}: median loss {}", outcome.final_median(role));
        }
        println!(
            "tables: {} and {}",
            outcome.bits_csv.display(),
            outcome.iters_csv.display()
        );
    }
    Ok(outcome)
}

fn write_comparison_csv(
    path: &Path,
    axis: &str,
    grid: &[u64],
    seeds: &[u64],
    methods: &[MethodComparison],
) -> CliResult<()> {
    let mut out = String::from(axis);
    for m in methods {
        for seed in seeds {
            write!(out, ",{}_seed{}", m.role, seed).expect("string write");
        }
        write!(out, ",{}_median", m.role).expect("string write");
    }
    out.push('\n');
    for (gi, &g) in grid.iter().enumerate() {
        write!(out, "{g}").expect("string write");
        for m in methods {
            for s in &m.per_seed {
                write!(out, ",{}", s[gi]).expect("string write");
            }
            write!(out, ",{}", m.median[gi]).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// `goco verify`: pair-wise balance report of an assignment file.
pub fn cmd_verify(assignment_path: &Path, out_path: Option<PathBuf>, quiet: bool) -> CliResult<()> {
    let text = std::fs::read_to_string(assignment_path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", assignment_path.display())))?;
    // Idle devices are fine in a file being inspected.
    let s = AssignmentMatrix::from_text_with_idle(&text, true)?;
    let report = s.balance_report();
    let csv = report.to_csv();
    match &out_path {
        Some(path) => std::fs::write(path, &csv)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    if !quiet {
        eprintln!(
            "{} devices x {} subsets: exact={}, max |count - target| = {}",
            s.n(),
            s.m(),
            report.exact,
            report.max_abs_deviation
        );
    }
    Ok(())
}

/// Everything `goco bound` computed, for tests and callers.
#[derive(Debug, Clone)]
pub struct BoundArtifacts {
    pub constants: TheoryConstants,
    pub condition: MuCondition,
    pub points: Vec<BoundPoint>,
    pub constants_csv: PathBuf,
    pub bound_csv: PathBuf,
}

/// Default envelope grid: quarter-decade steps over `T in [1e2, 1e6]`.
fn default_t_grid() -> Vec<f64> {
    (0..=16)
        .map(|i| 10f64.powf(2.0 + 0.25 * i as f64))
        .collect()
}

/// `goco bound`: constants dump plus the envelope over a T grid.
pub fn cmd_bound(
    config_path: &Path,
    out_flag: Option<PathBuf>,
    quiet: bool,
) -> CliResult<BoundArtifacts> {
    let cfg = BoundConfig::load(config_path)?;
    let structure = match cfg.structure_meta_path() {
        Some(meta_path) => {
            let text = std::fs::read_to_string(&meta_path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", meta_path.display())))?;
            StructuralInputs::from_kv(&parse_kv(&text))?
        }
        None => cfg.structural_inputs()?,
    };
    let reg = cfg.regularity_params(structure.m)?;
    let constants = compute_constants(&reg, &structure)?;
    let condition = check_mu_condition(reg.mu, &constants, &structure, cfg.margin_factor());
    let t_grid = cfg.t_values().unwrap_or_else(default_t_grid);
    let points = bound_curve(&constants, &t_grid)?;

    let out = resolve_out(out_flag, None);
    ensure_dir(&out)?;
    let constants_csv = out.join("constants.csv");
    let bound_csv = out.join("bound.csv");

    let mut constants_text = constants.to_csv();
    write!(
        constants_text,
        "mu_condition_ratio,{}\nmu_condition_margin,{}\nmu_condition_factor,{}\nmu_condition_satisfied,{}\n",
        condition.ratio,
        condition.margin,
        cfg.margin_factor(),
        if condition.satisfied { 1 } else { 0 }
    )
    .expect("string write");
    std::fs::write(&constants_csv, constants_text)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", constants_csv.display())))?;
    std::fs::write(&bound_csv, bound_curve_csv(&points))
        .map_err(|e| CliError::Io(format!("writing {}: {e}", bound_csv.display())))?;

    if !quiet {
        println!(
            "w1={} w2={} kappa0={} t_min={}",
            constants.w1, constants.w2, constants.kappa0, constants.t_min
        );
        println!(
            "mu condition: ratio={} margin={} satisfied={}",
            condition.ratio, condition.margin, condition.satisfied
        );
        let invalid = points.iter().filter(|p| !p.valid).count();
        if invalid > 0 {
            println!(
                "warning: {invalid} grid points at or below t_min={}",
                constants.t_min
            );
        }
        println!(
            "tables: {} and {}",
            constants_csv.display(),
            bound_csv.display()
        );
    }

    Ok(BoundArtifacts {
        constants,
        condition,
        points,
        constants_csv,
        bound_csv,
    })
}
