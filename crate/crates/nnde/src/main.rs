use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nnde::errquant::TruncationOrder;
use nnde::harness::{self, ConfigOverlay, ExperimentConfig};
use nnde::{
    correction, errquant, net, reference, systems, CorrectionMode, CorrectionState, Error, Result,
    SolverState,
};

#[derive(Parser)]
#[command(
    name = "nnde",
    about = "Neural-network DE solvers with built-in error quantification and correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Dynamical system: nl-osc or henon-heiles.
    #[arg(long)]
    system: Option<String>,

    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Primary training iterations before the checkpoint.
    #[arg(long = "K")]
    train_iters: Option<u64>,

    /// Post-checkpoint iterations.
    #[arg(long = "iters")]
    extra_iters: Option<u64>,

    /// Grid multiplier for the correction dataset (default 50).
    #[arg(long = "k")]
    grid_multiplier: Option<usize>,

    /// Batch size M (default 100).
    #[arg(long = "M")]
    batch_size: Option<usize>,

    /// Time horizon T.
    #[arg(long = "T")]
    t_max: Option<f64>,

    /// Hidden width of both network layers.
    #[arg(long)]
    width: Option<usize>,

    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Taylor truncation order of the error recursion: 1 or 2.
    #[arg(long, value_parser = parse_order)]
    order: Option<TruncationOrder>,

    /// Output directory for CSV artifacts and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Optional key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_order(s: &str) -> std::result::Result<TruncationOrder, String> {
    let v: u8 = s.parse().map_err(|e| format!("{e}"))?;
    TruncationOrder::from_int(v).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a solver and write its checkpoint plus a trajectory CSV.
    Train(CommonArgs),

    /// Quantify the error of a trained solver: dataset CSV, bound, and a
    /// comparison against the RK4 oracle.
    Quantify {
        #[command(flatten)]
        common: CommonArgs,

        /// Load this checkpoint instead of training from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },

    /// Run the full correction pipeline and save the corrected model.
    Correct {
        #[command(flatten)]
        common: CommonArgs,

        /// Correction scheme: regression or residual.
        #[arg(long, default_value = "regression")]
        mode: String,
    },

    /// Seeded multi-run study with per-arm medians and CSV outputs.
    Study {
        #[command(flatten)]
        common: CommonArgs,

        /// Number of runs (independent seeds).
        #[arg(long)]
        runs: Option<usize>,

        /// Comma-separated arms: standard,alg1,appendix.
        #[arg(long)]
        arms: Option<String>,

        /// Run the study's runs in parallel.
        #[arg(long)]
        parallel: bool,

        /// Force sequential execution so tau timings are not skewed.
        #[arg(long = "serial-timing")]
        serial_timing: bool,
    },
}

fn build_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &common.config {
        harness::parse_config_file(path)?.apply(&mut cfg);
    }
    let cli = ConfigOverlay {
        system: common.system.clone(),
        seed: common.seed,
        train_iters: common.train_iters,
        extra_iters: common.extra_iters,
        grid_multiplier: common.grid_multiplier,
        batch_size: common.batch_size,
        t_max: common.t_max,
        width: common.width,
        learning_rate: common.lr,
        order: common.order,
        out_dir: common.out.clone(),
        ..Default::default()
    };
    cli.apply(&mut cfg);
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Train a fresh solver per the config, returning it with the elapsed
/// iteration count folded in.
fn train_solver(cfg: &ExperimentConfig) -> Result<SolverState> {
    let sys = systems::by_name(&cfg.system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    let z0 = harness::sample_initial_conditions(&sys, &mut rng)?;
    let net = net::init_params(cfg.base_seed, cfg.width, sys.dim());
    let mut solver = SolverState::new(net, z0, cfg.t_max, cfg.batch_size, cfg.adam())?;
    let mut last = f64::NAN;
    for i in 0..cfg.train_iters {
        last = solver.train_step(&sys, &mut rng)?;
        if (i + 1) % 500 == 0 {
            println!("iter {:>6}  loss {last:.6e}", i + 1);
        }
    }
    println!("trained {} iterations, final loss {last:.6e}", cfg.train_iters);
    Ok(solver)
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = build_config(common)?;
    let sys = systems::by_name(&cfg.system)?;
    let solver = train_solver(&cfg)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;

    let ck = dir.join("checkpoint.json");
    solver.save_checkpoint(&ck)?;
    println!("checkpoint -> {}", ck.display());

    let h = cfg.t_max / reference::DEFAULT_STEPS as f64;
    let reference_traj = reference::rk4_integrate(&sys, solver.z0(), cfg.t_max, h)?;
    let traj = dir.join("trajectory.csv");
    reference_traj.write_csv(&traj)?;
    println!("reference trajectory -> {}", traj.display());

    let err = reference::external_error(|t| solver.predict(t), &reference_traj);
    println!("dz_avg {:.4e}  dz_max {:.4e}", err.dz_avg, err.dz_max);
    Ok(())
}

fn cmd_quantify(common: &CommonArgs, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = build_config(common)?;
    let solver = match checkpoint {
        Some(path) => {
            println!("loading checkpoint {}", path.display());
            SolverState::load_checkpoint(path, cfg.adam())?
        }
        None => train_solver(&cfg)?,
    };
    // The checkpoint, not the CLI, owns the system dimension; re-resolve.
    let sys = systems::by_name(&cfg.system)?;
    let dataset = errquant::generate_correction_dataset(&solver, &sys, cfg.grid_multiplier, cfg.order)?;

    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("error_dataset.csv");
    dataset.write_csv(&csv)?;
    println!("error dataset ({} rows) -> {}", dataset.len(), csv.display());
    println!("l_max     {:.6e}", dataset.l_max);
    println!("sigma_min {:.6e}", dataset.sigma_min);
    match dataset.bound() {
        Ok(bound) => println!("bound     {:.6e}", bound),
        Err(e) => println!("bound     undefined ({e})"),
    }

    let h = solver.t_max() / reference::DEFAULT_STEPS as f64;
    let reference_traj = reference::rk4_integrate(&sys, solver.z0(), solver.t_max(), h)?;
    let ext = reference::external_error_on(|t| solver.predict(t), &reference_traj, &dataset.times);
    let mut diff_sum = 0.0;
    for i in 0..dataset.len() {
        let internal = dataset.dz_ec_at(i);
        let external = ext.delta(i);
        diff_sum += internal
            .iter()
            .zip(external)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    let mean_diff = diff_sum / dataset.len() as f64;
    println!("external dz_max          {:.6e}", ext.dz_max);
    println!("mean |dz_ec - dz_ext|    {:.6e}", mean_diff);
    if ext.dz_max > 0.0 {
        println!("normalized discrepancy   {:.4}", mean_diff / ext.dz_max);
    }
    Ok(())
}

fn cmd_correct(common: &CommonArgs, mode: &str) -> Result<()> {
    let cfg = build_config(common)?;
    let mode = match mode {
        "regression" => CorrectionMode::Regression,
        "residual" => CorrectionMode::Residual,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown mode \"{other}\" (expected regression or residual)"
            )))
        }
    };
    let sys = systems::by_name(&cfg.system)?;
    let solver = train_solver(&cfg)?;
    let dataset = errquant::generate_correction_dataset(&solver, &sys, cfg.grid_multiplier, cfg.order)?;
    println!(
        "dataset: {} rows, l_max {:.4e}, built in {:.3}s",
        dataset.len(),
        dataset.l_max,
        dataset.setup_seconds
    );

    let mut corr = CorrectionState::new(
        solver.net(),
        cfg.base_seed ^ 0x5eed2,
        dataset,
        cfg.batch_size,
        mode,
        cfg.adam(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed.wrapping_add(1));
    let mut last = f64::NAN;
    for i in 0..cfg.extra_iters {
        last = match mode {
            CorrectionMode::Regression => corr.regression_train_step(&mut rng)?,
            CorrectionMode::Residual => corr.appendix_train_step(&sys, &mut rng)?,
        };
        if (i + 1) % 500 == 0 {
            println!("correction iter {:>6}  loss {last:.6e}", i + 1);
        }
    }
    println!("correction finished, final loss {last:.6e}");

    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let model = correction::CorrectedModel::from_parts(&solver, &corr);
    let path = dir.join("corrected_model.json");
    model.save(&path)?;
    println!("corrected model -> {}", path.display());

    let h = cfg.t_max / reference::DEFAULT_STEPS as f64;
    let reference_traj = reference::rk4_integrate(&sys, solver.z0(), cfg.t_max, h)?;
    let before = reference::external_error(|t| solver.predict(t), &reference_traj);
    let after = reference::external_error(
        |t| correction::corrected_prediction(&solver, &corr, t),
        &reference_traj,
    );
    println!(
        "dz_avg {:.4e} -> {:.4e}   dz_max {:.4e} -> {:.4e}",
        before.dz_avg, after.dz_avg, before.dz_max, after.dz_max
    );
    Ok(())
}

fn cmd_study(
    common: &CommonArgs,
    runs: Option<usize>,
    arms: &Option<String>,
    parallel: bool,
    serial_timing: bool,
) -> Result<()> {
    let mut cfg = build_config(common)?;
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(list) = arms {
        cfg.arms = harness::parse_arms(list)?;
    }
    if parallel {
        cfg.parallel = true;
    }
    if serial_timing {
        cfg.serial_timing = true;
    }
    println!(
        "study: system {}, {} runs x {:?}, K {}, extra {}, k {}, M {}, T {}",
        cfg.system, cfg.runs, cfg.arms, cfg.train_iters, cfg.extra_iters,
        cfg.grid_multiplier, cfg.batch_size, cfg.t_max
    );
    let report = harness::run_study(&cfg)?;
    print!("{report}");
    if let Some(dir) = &cfg.out_dir {
        println!("artifacts -> {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(common) => cmd_train(common),
        Command::Quantify { common, checkpoint } => cmd_quantify(common, checkpoint),
        Command::Correct { common, mode } => cmd_correct(common, mode),
        Command::Study {
            common,
            runs,
            arms,
            parallel,
            serial_timing,
        } => cmd_study(common, *runs, arms, *parallel, *serial_timing),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
