mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmfd_dpc::evaluation::PlantKind;
use nmfd_dpc::model::Integrator;
use nmfd_dpc::policy::ControlMode;

const OUTPUTS: &str = "\
Output files:
  scenario-gen  scenario (TOML, schema nmfd-dpc-scenario/1)
  train         weights (JSON, nmfd-dpc-weights/1), train_log.jsonl (one record
                per epoch: epoch, loss, grad_norm, trained, wall_time_s) and
                train_summary.toml (nmfd-dpc-train-summary/1)
  eval          trajectory_<controller>.tsv (nmfd-dpc-trajectory/1, one row per
                step), summary.toml (nmfd-dpc-summary/1) and timing.toml
  sweep         robustness.tsv + robustness_samples.tsv (nmfd-dpc-robustness/1),
                or scaling.tsv + scaling_timing.tsv (nmfd-dpc-scaling/1)
  bench         everything above for the seven-region benchmark

Summaries never contain wall-clock times; those go to the timing files, so a
rerun with the same seed reproduces every summary byte for byte.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure
(divergence or non-finite state).";

#[derive(Parser, Debug)]
#[command(name = "nmfd-dpc", version, about = "Differentiable predictive control for region-level traffic networks", after_long_help = OUTPUTS)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a scenario file.
    ScenarioGen(ScenarioGenArgs),
    /// Train a policy on a scenario.
    Train(TrainArgs),
    /// Run one controller in closed loop on the plant.
    Eval(EvalArgs),
    /// Spawn-noise robustness or region-count scaling.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Train both policies and evaluate every controller on the benchmark.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ScenarioName {
    Benchmark7,
    Random,
}

#[derive(Args, Debug)]
struct ScenarioGenArgs {
    name: ScenarioName,
    /// Destination file; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Region count for `random`.
    #[arg(long, default_value_t = 4)]
    regions: usize,
    /// Steps for `random`.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    #[value(name = "PC", alias = "pc")]
    Pc,
    #[value(name = "PCRG", alias = "pcrg")]
    Pcrg,
}

impl From<ModeArg> for ControlMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pc => ControlMode::Pc,
            ModeArg::Pcrg => ControlMode::Pcrg,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum IntegratorArg {
    Euler,
    Rk4,
}

impl From<IntegratorArg> for Integrator {
    fn from(m: IntegratorArg) -> Self {
        match m {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Rk4 => Integrator::Rk4,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PlantArg {
    Anmfd,
    Nmfd,
}

impl From<PlantArg> for PlantKind {
    fn from(p: PlantArg) -> Self {
        match p {
            PlantArg::Anmfd => PlantKind::Anmfd,
            PlantArg::Nmfd => PlantKind::Nmfd,
        }
    }
}

/// Policy architecture and training hyperparameters.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    /// Rollout length; the scenario length when omitted.
    #[arg(long)]
    horizon: Option<usize>,
    /// Std of the state noise injected during training rollouts, veh.
    #[arg(long, default_value_t = 0.25)]
    train_noise: f64,
    /// Epochs per decoder phase when alternating.
    #[arg(long, default_value_t = 1)]
    alternate_every: usize,
    /// Train both decoders every epoch.
    #[arg(long)]
    joint: bool,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Divide observations by this many vehicles before the network.
    #[arg(long)]
    obs_scale: Option<f64>,
    /// Draw rollout start states uniformly in [0, cap) instead of empty.
    #[arg(long)]
    initial_cap: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 10.0)]
    grad_clip: f64,
    /// Rollouts recorded per tape.
    #[arg(long, default_value_t = 8)]
    chunk_size: usize,
    /// Relative loss change over this many epochs that stops training; 0 disables.
    #[arg(long, default_value_t = 20)]
    plateau_window: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "PCRG")]
    mode: ModeArg,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the weights, log and summary.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Weights file name inside the output directory.
    #[arg(long, default_value = "weights.json")]
    weights_name: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ControllerArg {
    NoControl,
    Dpc,
    Mpc,
}

/// Receding-horizon baseline settings.
#[derive(Args, Debug, Clone)]
struct MpcFlags {
    #[arg(long, default_value_t = 8)]
    mpc_horizon: usize,
    #[arg(long, default_value_t = 40)]
    mpc_iterations: usize,
    #[arg(long, default_value_t = 1e-5)]
    mpc_tolerance: f64,
    #[arg(long)]
    no_warm_start: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    controller: ControllerArg,
    /// Trained weights, required for `dpc`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Control channels for `mpc`.
    #[arg(long, value_enum, default_value = "PCRG")]
    mode: ModeArg,
    #[command(flatten)]
    mpc: MpcFlags,
    #[arg(long, value_enum, default_value = "anmfd")]
    plant: PlantArg,
    /// Observation noise std, veh; the scenario's value when omitted.
    #[arg(long)]
    obs_noise: Option<f64>,
    /// Apply routing shares to the plant exactly as given, without
    /// renormalising after removing backtracking moves.
    #[arg(long)]
    no_theta_renorm: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum SweepKind {
    /// Improvement over no control as the demand is perturbed.
    Robustness(RobustnessArgs),
    /// Per-step controller time against region count.
    Scaling(ScalingArgs),
}

#[derive(Args, Debug)]
struct RobustnessArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Demand noise levels, veh/s.
    #[arg(long, value_delimiter = ',', default_values_t = nmfd_dpc::evaluation::DEFAULT_SIGMAS.to_vec())]
    sigmas: Vec<f64>,
    /// Perturbed scenarios per nonzero level.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 8, 16, 32, 64])]
    regions: Vec<usize>,
    /// Random networks per region count.
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Timed steps per network.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    mpc_pc_max_regions: usize,
    #[arg(long, default_value_t = 8)]
    mpc_pcrg_max_regions: usize,
    /// A step slower than this marks the method as not finished, s.
    #[arg(long, default_value_t = 300.0)]
    timeout_s: f64,
    #[command(flatten)]
    mpc: MpcFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 10000.0)]
    obs_scale: f64,
    #[arg(long, default_value_t = 1)]
    alternate_every: usize,
    /// Leave the receding-horizon baselines out.
    #[arg(long)]
    skip_mpc: bool,
    #[command(flatten)]
    mpc: MpcFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::ScenarioGen(a) => commands::scenario_gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep {
            kind: SweepKind::Robustness(a),
        } => commands::robustness(&a),
        Command::Sweep {
            kind: SweepKind::Scaling(a),
        } => commands::scaling(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<nmfd_dpc::Error>() {
        Some(err) if !err.is_validation() => 3,
        _ => 2,
    }
}
