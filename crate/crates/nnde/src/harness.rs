//! Experiment orchestration: seeded multi-run studies comparing standard
//! continued training against the two correction schemes, with per-run CSV
//! artifacts and per-arm medians.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::adam::AdamConfig;
use crate::correction::{corrected_prediction, CorrectionMode, CorrectionState};
use crate::errquant::{generate_correction_dataset, ErrorDataset, TruncationOrder};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net;
use crate::reference::{
    external_error, external_error_on, fmt_f64, rk4_integrate, runtime_meter, MetricsReport,
    DEFAULT_STEPS,
};
use crate::solver::SolverState;
use crate::systems::{self, DynamicalSystem};

/// Seed salt for reinitializing the duplicate network, so it never shares
/// weights with the primary at the same seed.
const REINIT_SALT: u64 = 0x5eed2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Keep training the primary solver.
    Standard,
    /// Error prediction plus regression correction.
    Alg1,
    /// Error correction by a second residual solver.
    Appendix,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Standard => "standard",
            Arm::Alg1 => "alg1",
            Arm::Appendix => "appendix",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(Arm::Standard),
            "alg1" => Ok(Arm::Alg1),
            "appendix" => Ok(Arm::Appendix),
            other => Err(Error::InvalidConfig(format!(
                "unknown arm \"{other}\" (expected standard, alg1, or appendix)"
            ))),
        }
    }
}

/// Everything a study needs; a study is a deterministic function of this
/// (wall-clock tau values aside).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub system: String,
    pub runs: usize,
    pub base_seed: u64,
    /// Primary training iterations K shared by every arm.
    pub train_iters: u64,
    /// Post-checkpoint iterations per arm.
    pub extra_iters: u64,
    /// Grid multiplier k for the correction dataset.
    pub grid_multiplier: usize,
    /// Batch size M.
    pub batch_size: usize,
    pub t_max: f64,
    pub width: usize,
    pub learning_rate: f64,
    pub order: TruncationOrder,
    pub arms: Vec<Arm>,
    pub out_dir: Option<PathBuf>,
    pub parallel: bool,
    /// Force sequential execution so tau is not skewed by core contention.
    pub serial_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: "nl-osc".into(),
            runs: 11,
            base_seed: 0,
            train_iters: 2_000,
            extra_iters: 3_000,
            grid_multiplier: 50,
            batch_size: 100,
            t_max: 10.0,
            width: 32,
            learning_rate: 8e-4,
            order: TruncationOrder::Second,
            arms: vec![Arm::Standard, Arm::Alg1],
            out_dir: None,
            parallel: false,
            serial_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if self.train_iters < 1 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("at least one arm is required".into()));
        }
        systems::by_name(&self.system)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }
}

/// Draw one initial condition from the per-system sampling law.
pub fn sample_initial_conditions<R: Rng>(sys: &DynamicalSystem, rng: &mut R) -> Result<Vec<f64>> {
    match sys.name() {
        "nl-osc" => {
            let x = rng.random_range(0.3..2.3);
            let p = rng.random_range(0.0..2.0);
            Ok(vec![x, p])
        }
        "henon-heiles" => {
            let x: f64 = rng.random_range(-0.5..0.5);
            let y_hi = 3.0_f64.sqrt() * (1.0 - x.abs());
            let y = rng.random_range(-0.5..y_hi);
            let px = Normal::new(0.25, 0.1).unwrap().sample(rng);
            let py = Normal::new(0.10, 0.1).unwrap().sample(rng);
            Ok(vec![x, y, px, py])
        }
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Flat `len x dim` grid paired with its times.
#[derive(Debug, Clone)]
pub struct GridSeries {
    pub times: Vec<f64>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl GridSeries {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Result of one (arm, seed) run.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub metrics: MetricsReport,
    /// `mean |dz_ec - dz_ext| / max |dz_ext|` on the diagnostic grid.
    pub discrepancy: f64,
    /// Internal error estimate on the diagnostic grid.
    pub internal_error: GridSeries,
    /// External (oracle) error of the primary prediction on the same grid.
    pub external_error: GridSeries,
    /// Reference states on the metric grid.
    pub ref_trajectory: GridSeries,
    /// Final predictor states on the metric grid.
    pub predicted_trajectory: GridSeries,
    /// Primary network after the arm finished (frozen at K for correction
    /// arms); lets tests confirm arms share the checkpoint phase.
    pub primary_net: net::NetworkParams,
}

fn fail(arm: Arm, seed: u64, source: Error) -> Error {
    match source {
        already @ Error::RunFailed { .. } => already,
        other => Error::RunFailed {
            arm: arm.name(),
            seed,
            source: Box::new(other),
        },
    }
}

/// Execute one arm at one seed: K shared primary iterations, then the
/// arm-specific phase (timed for tau), then untimed diagnostics against the
/// RK4 oracle.
pub fn run_arm(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> Result<ArmOutcome> {
    let sys = systems::by_name(&cfg.system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = sample_initial_conditions(&sys, &mut rng)?;
    let net = net::init_params(seed, cfg.width, sys.dim());
    let mut solver = SolverState::new(net, z0.clone(), cfg.t_max, cfg.batch_size, cfg.adam())
        .map_err(|e| fail(arm, seed, e))?;

    // Shared checkpoint phase.
    for _ in 0..cfg.train_iters {
        solver
            .train_step(&sys, &mut rng)
            .map_err(|e| fail(arm, seed, e))?;
    }

    // Arm-specific phase; `iterations of use` for tau is the post-checkpoint
    // budget and setup covers dataset generation only.
    let mut correction: Option<CorrectionState> = None;
    let tau = match arm {
        Arm::Standard => {
            let t0 = Instant::now();
            for _ in 0..cfg.extra_iters {
                solver
                    .train_step(&sys, &mut rng)
                    .map_err(|e| fail(arm, seed, e))?;
            }
            runtime_meter(Duration::ZERO, t0.elapsed(), cfg.extra_iters.max(1))
        }
        Arm::Alg1 | Arm::Appendix => {
            let t0 = Instant::now();
            let dataset =
                generate_correction_dataset(&solver, &sys, cfg.grid_multiplier, cfg.order)
                    .map_err(|e| fail(arm, seed, e))?;
            let setup = t0.elapsed();
            let mode = if arm == Arm::Alg1 {
                CorrectionMode::Regression
            } else {
                CorrectionMode::Residual
            };
            let mut corr = CorrectionState::new(
                solver.net(),
                seed ^ REINIT_SALT,
                dataset,
                cfg.batch_size,
                mode,
                cfg.adam(),
            )
            .map_err(|e| fail(arm, seed, e))?;
            let t1 = Instant::now();
            for _ in 0..cfg.extra_iters {
                let step = match mode {
                    CorrectionMode::Regression => corr.regression_train_step(&mut rng),
                    CorrectionMode::Residual => corr.appendix_train_step(&sys, &mut rng),
                };
                step.map_err(|e| fail(arm, seed, e))?;
            }
            let tau = runtime_meter(setup, t1.elapsed(), cfg.extra_iters.max(1));
            correction = Some(corr);
            tau
        }
    };

    // Diagnostics (untimed): oracle trajectory, internal-vs-external error
    // of the primary prediction, and the headline metrics of the final
    // predictor.
    let h = cfg.t_max / DEFAULT_STEPS as f64;
    let reference = rk4_integrate(&sys, &z0, cfg.t_max, h).map_err(|e| fail(arm, seed, e))?;
    let diagnostic = match &correction {
        Some(corr) => corr.dataset().clone(),
        None => generate_correction_dataset(&solver, &sys, cfg.grid_multiplier, cfg.order)
            .map_err(|e| fail(arm, seed, e))?,
    };
    let bound = diagnostic.bound().ok();

    let primary_ext = external_error_on(|t| solver.predict(t), &reference, &diagnostic.times);
    let (discrepancy, internal, external) = compare_errors(&diagnostic, &primary_ext);

    let predictor = |t: f64| -> Vec<f64> {
        match &correction {
            Some(corr) => corrected_prediction(&solver, corr, t),
            None => solver.predict(t),
        }
    };
    let final_ext = external_error(predictor, &reference);
    let metrics = MetricsReport {
        system: cfg.system.clone(),
        seed,
        checkpoint_iters: cfg.train_iters,
        extra_iters: cfg.extra_iters,
        tau,
        dz_avg: final_ext.dz_avg,
        dz_max: final_ext.dz_max,
        bound,
    };
    metrics.assert_invariants();

    let d = sys.dim();
    let traj_times = final_ext.times.clone();
    let mut ref_values = Vec::with_capacity(traj_times.len() * d);
    let mut pred_values = Vec::with_capacity(traj_times.len() * d);
    for &t in &traj_times {
        ref_values.extend_from_slice(reference.state_at(t));
        pred_values.extend_from_slice(&predictor(t));
    }

    Ok(ArmOutcome {
        arm,
        metrics,
        discrepancy,
        internal_error: internal,
        external_error: external,
        ref_trajectory: GridSeries {
            times: traj_times.clone(),
            dim: d,
            values: ref_values,
        },
        predicted_trajectory: GridSeries {
            times: traj_times,
            dim: d,
            values: pred_values,
        },
        primary_net: solver.net().clone(),
    })
}

/// Normalized internal-vs-external discrepancy plus both series.
fn compare_errors(
    dataset: &ErrorDataset,
    external: &crate::reference::ExternalError,
) -> (f64, GridSeries, GridSeries) {
    let n = dataset.len();
    let d = dataset.dim;
    let mut sum = 0.0;
    let mut max_ext = 0.0f64;
    for i in 0..n {
        let internal = dataset.dz_ec_at(i);
        let ext = external.delta(i);
        let diff: f64 = (0..d)
            .map(|j| (internal[j] - ext[j]) * (internal[j] - ext[j]))
            .sum::<f64>()
            .sqrt();
        sum += diff;
        max_ext = max_ext.max(linalg::norm(ext));
    }
    let discrepancy = if max_ext > 0.0 {
        (sum / n as f64) / max_ext
    } else {
        0.0
    };
    let internal = GridSeries {
        times: dataset.times.clone(),
        dim: d,
        values: dataset.dz_ec.clone(),
    };
    let external = GridSeries {
        times: dataset.times.clone(),
        dim: d,
        values: external.pointwise.clone(),
    };
    (discrepancy, internal, external)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub arm: Arm,
    pub metrics: MetricsReport,
    pub discrepancy: f64,
}

#[derive(Debug, Clone)]
pub struct FailureRecord {
    pub run_index: usize,
    pub seed: u64,
    pub arm: Arm,
    pub message: String,
}

/// Medians per arm over completed runs only.
#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub arm: Arm,
    pub completed: usize,
    pub failed: usize,
    pub median_tau: f64,
    pub median_dz_avg: f64,
    pub median_dz_max: f64,
    /// Median over runs whose bound was defined.
    pub median_bound: Option<f64>,
    pub median_discrepancy: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub records: Vec<RunRecord>,
    pub failures: Vec<FailureRecord>,
    pub summaries: Vec<ArmSummary>,
}

impl StudyReport {
    pub fn summary_for(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    pub fn records_for(&self, arm: Arm) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(move |r| r.arm == arm)
    }
}

impl fmt::Display for StudyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "arm", "runs", "fail", "median tau", "median avg", "median max", "median bnd", "median disc"
        )?;
        for s in &self.summaries {
            writeln!(
                f,
                "{:<10} {:>5} {:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12} {:>12.4e}",
                s.arm.name(),
                s.completed,
                s.failed,
                s.median_tau,
                s.median_dz_avg,
                s.median_dz_max,
                s.median_bound
                    .map(|b| format!("{b:.4e}"))
                    .unwrap_or_else(|| "undef".into()),
                s.median_discrepancy,
            )?;
        }
        for fail in &self.failures {
            writeln!(
                f,
                "failed: run {} seed {} arm {}: {}",
                fail.run_index, fail.seed, fail.arm, fail.message
            )?;
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Execute `runs x arms` independent runs (seeds `base_seed + i`), aggregate
/// medians over completed runs, and write CSV artifacts when an output
/// directory is configured. Failed runs are recorded, not silently dropped.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, Arm)> = (0..cfg.runs)
        .flat_map(|i| cfg.arms.iter().map(move |&arm| (i, arm)))
        .collect();

    let execute = |&(run_index, arm): &(usize, Arm)| -> (usize, Arm, Result<ArmOutcome>) {
        let seed = cfg.base_seed + run_index as u64;
        (run_index, arm, run_arm(cfg, arm, seed))
    };

    let outcomes: Vec<(usize, Arm, Result<ArmOutcome>)> =
        if cfg.parallel && !cfg.serial_timing {
            jobs.par_iter().map(execute).collect()
        } else {
            jobs.iter().map(execute).collect()
        };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    for (run_index, arm, outcome) in outcomes {
        let seed = cfg.base_seed + run_index as u64;
        match outcome {
            Ok(out) => {
                records.push(RunRecord {
                    run_index,
                    seed,
                    arm,
                    metrics: out.metrics.clone(),
                    discrepancy: out.discrepancy,
                });
                artifacts.push((run_index, out));
            }
            Err(e) => failures.push(FailureRecord {
                run_index,
                seed,
                arm,
                message: e.to_string(),
            }),
        }
    }

    let mut summaries = Vec::new();
    for &arm in &cfg.arms {
        let completed: Vec<&RunRecord> = records.iter().filter(|r| r.arm == arm).collect();
        let failed = failures.iter().filter(|f| f.arm == arm).count();
        let mut taus: Vec<f64> = completed.iter().map(|r| r.metrics.tau).collect();
        let mut avgs: Vec<f64> = completed.iter().map(|r| r.metrics.dz_avg).collect();
        let mut maxs: Vec<f64> = completed.iter().map(|r| r.metrics.dz_max).collect();
        let mut discs: Vec<f64> = completed.iter().map(|r| r.discrepancy).collect();
        let mut bounds: Vec<f64> = completed.iter().filter_map(|r| r.metrics.bound).collect();
        summaries.push(ArmSummary {
            arm,
            completed: completed.len(),
            failed,
            median_tau: median(&mut taus),
            median_dz_avg: median(&mut avgs),
            median_dz_max: median(&mut maxs),
            median_bound: if bounds.is_empty() {
                None
            } else {
                Some(median(&mut bounds))
            },
            median_discrepancy: median(&mut discs),
        });
    }

    let report = StudyReport {
        records,
        failures,
        summaries,
    };
    if let Some(dir) = &cfg.out_dir {
        write_study_outputs(dir, &report, &artifacts)?;
    }
    Ok(report)
}

fn write_study_outputs(
    dir: &Path,
    report: &StudyReport,
    artifacts: &[(usize, ArmOutcome)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut study = std::io::BufWriter::new(std::fs::File::create(dir.join("study.csv"))?);
    writeln!(study, "arm,seed,tau,dz_avg,dz_max,bound,discrepancy")?;
    for r in &report.records {
        writeln!(
            study,
            "{},{},{},{},{},{},{}",
            r.arm,
            r.seed,
            fmt_f64(r.metrics.tau),
            fmt_f64(r.metrics.dz_avg),
            fmt_f64(r.metrics.dz_max),
            r.metrics.bound.map(fmt_f64).unwrap_or_else(|| "nan".into()),
            fmt_f64(r.discrepancy),
        )?;
    }
    drop(study);

    for (run_index, out) in artifacts {
        let tag = format!("{}-{}", out.arm.name(), run_index);
        let d = out.ref_trajectory.dim;

        let mut traj =
            std::io::BufWriter::new(std::fs::File::create(dir.join(format!("trajectory_{tag}.csv")))?);
        write!(traj, "t")?;
        for i in 1..=d {
            write!(traj, ",ref_{i}")?;
        }
        for i in 1..=d {
            write!(traj, ",pred_{i}")?;
        }
        writeln!(traj)?;
        for (i, &t) in out.ref_trajectory.times.iter().enumerate() {
            write!(traj, "{}", fmt_f64(t))?;
            for x in out.ref_trajectory.row(i) {
                write!(traj, ",{}", fmt_f64(*x))?;
            }
            for x in out.predicted_trajectory.row(i) {
                write!(traj, ",{}", fmt_f64(*x))?;
            }
            writeln!(traj)?;
        }

        let mut errs =
            std::io::BufWriter::new(std::fs::File::create(dir.join(format!("errors_{tag}.csv")))?);
        write!(errs, "t")?;
        for i in 1..=d {
            write!(errs, ",dz_internal_{i}")?;
        }
        for i in 1..=d {
            write!(errs, ",dz_external_{i}")?;
        }
        writeln!(errs)?;
        for (i, &t) in out.internal_error.times.iter().enumerate() {
            write!(errs, "{}", fmt_f64(t))?;
            for x in out.internal_error.row(i) {
                write!(errs, ",{}", fmt_f64(*x))?;
            }
            for x in out.external_error.row(i) {
                write!(errs, ",{}", fmt_f64(*x))?;
            }
            writeln!(errs)?;
        }
    }
    Ok(())
}

/// Config-file overlay: `key=value` lines, `#` comments. CLI flags override
/// whatever the file sets.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverlay {
    pub system: Option<String>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub train_iters: Option<u64>,
    pub extra_iters: Option<u64>,
    pub grid_multiplier: Option<usize>,
    pub batch_size: Option<usize>,
    pub t_max: Option<f64>,
    pub width: Option<usize>,
    pub learning_rate: Option<f64>,
    pub order: Option<TruncationOrder>,
    pub arms: Option<Vec<Arm>>,
    pub out_dir: Option<PathBuf>,
    pub parallel: Option<bool>,
    pub serial_timing: Option<bool>,
}

impl ConfigOverlay {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.system {
            cfg.system = v.clone();
        }
        if let Some(v) = self.runs {
            cfg.runs = v;
        }
        if let Some(v) = self.seed {
            cfg.base_seed = v;
        }
        if let Some(v) = self.train_iters {
            cfg.train_iters = v;
        }
        if let Some(v) = self.extra_iters {
            cfg.extra_iters = v;
        }
        if let Some(v) = self.grid_multiplier {
            cfg.grid_multiplier = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.width {
            cfg.width = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.order {
            cfg.order = v;
        }
        if let Some(v) = &self.arms {
            cfg.arms = v.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = self.parallel {
            cfg.parallel = v;
        }
        if let Some(v) = self.serial_timing {
            cfg.serial_timing = v;
        }
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    let arms: Vec<Arm> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Arm::from_str)
        .collect::<Result<_>>()?;
    if arms.is_empty() {
        return Err(Error::InvalidConfig("arm list is empty".into()));
    }
    Ok(arms)
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!("expected a boolean, got \"{other}\""))),
    }
}

/// Parse a `key=value` configuration file.
pub fn parse_config_file(path: &Path) -> Result<ConfigOverlay> {
    let text = std::fs::read_to_string(path)?;
    let mut overlay = ConfigOverlay::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key=value, got \"{line}\"", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |e: String| Error::InvalidConfig(format!("line {}: {e}", lineno + 1));
        match key {
            "system" => overlay.system = Some(value.to_string()),
            "runs" => overlay.runs = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "seed" => overlay.seed = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "K" => overlay.train_iters = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "iters" => overlay.extra_iters = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "k" => {
                overlay.grid_multiplier = Some(value.parse().map_err(|e| bad(format!("{e}")))?)
            }
            "M" => overlay.batch_size = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "T" => overlay.t_max = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "width" => overlay.width = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "lr" => overlay.learning_rate = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
            "order" => {
                let raw: u8 = value.parse().map_err(|e| bad(format!("{e}")))?;
                overlay.order = Some(TruncationOrder::from_int(raw)?);
            }
            "arms" => overlay.arms = Some(parse_arms(value)?),
            "out" => overlay.out_dir = Some(PathBuf::from(value)),
            "parallel" => overlay.parallel = Some(parse_bool(value)?),
            "serial_timing" => overlay.serial_timing = Some(parse_bool(value)?),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "line {}: unknown key \"{other}\"",
                    lineno + 1
                )))
            }
        }
    }
    Ok(overlay)
}
