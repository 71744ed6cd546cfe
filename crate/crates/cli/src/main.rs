//! `spnn`: train phasor networks, evaluate them and run them as spiking
//! circuits.

mod commands;
mod config;
mod fetch;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spnn::Error;

use commands::{Backend, EvalArgs, PlotArgs, SpikesArgs, Split};
use config::{default_data_dir, CircuitOverrides, DatasetName, PartialConfig, Preset};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "spnn", version, about = "Spiking phasor neural networks")]
struct Cli {
    /// Worker threads for batch parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write the model file and per-epoch metrics.
    Train(TrainCmd),
    /// Report phasor-domain error rates of a trained model.
    Eval(EvalCmd),
    /// Export spike rasters from the ideal or circuit backend.
    Spikes(SpikesCmd),
    /// Same as `spikes --backend circuit`.
    Simulate(SimulateCmd),
    /// Render a metrics, raster, voltage or decoded-class CSV as SVG.
    Plot(PlotCmd),
    /// Download MNIST and/or CIFAR-10 into the data directory.
    FetchData(FetchCmd),
}

#[derive(Args, Default)]
struct CircuitFlags {
    /// Cycle period T (ms).
    #[arg(long)]
    period: Option<f64>,
    /// Integration step (ms).
    #[arg(long)]
    dt: Option<f64>,
    /// Somatic spike threshold (mV).
    #[arg(long)]
    threshold: Option<f64>,
    /// Cycles per stimulus.
    #[arg(long)]
    n_cycles: Option<usize>,
}

impl CircuitFlags {
    fn overrides(&self) -> CircuitOverrides {
        CircuitOverrides {
            period: self.period,
            dt: self.dt,
            threshold: self.threshold,
            n_cycles: self.n_cycles,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// TOML file with any RunConfig fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Activation threshold, fixed for every layer.
    #[arg(long)]
    theta: Option<f64>,
    /// Scale of the random initial weights relative to 1/sqrt(fan_in).
    #[arg(long)]
    init_gain: Option<f64>,
    /// Apply fixed random per-input phase shifts drawn from this seed.
    #[arg(long)]
    phase_shift_seed: Option<u64>,
    /// Train on the first N training examples only.
    #[arg(long)]
    limit_train: Option<usize>,
    /// Evaluate on the first N test examples only.
    #[arg(long)]
    limit_test: Option<usize>,
    /// Calibrate the circuit threshold on N test examples after training.
    #[arg(long = "calibrate")]
    calibration_examples: Option<usize>,
    #[command(flatten)]
    circuit: CircuitFlags,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    /// Dataset (inferred from the model's input size when omitted).
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    split: Split,
    /// Evaluate the first N examples of each split only.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SpikeSource {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Example index; repeat to present several stimuli back to back.
    #[arg(long = "example", default_value = "0")]
    examples: Vec<usize>,
    #[command(flatten)]
    circuit: CircuitFlags,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SpikesCmd {
    #[arg(long, value_enum, default_value = "ideal")]
    backend: Backend,
    #[command(flatten)]
    source: SpikeSource,
}

#[derive(Args)]
struct SimulateCmd {
    #[command(flatten)]
    source: SpikeSource,
}

#[derive(Args)]
struct PlotCmd {
    /// CSV written by train, spikes or simulate.
    input: PathBuf,
    /// Output file name inside the output directory.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FetchCmd {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Dataset to fetch; repeat for several (default: both).
    #[arg(long, value_enum)]
    dataset: Vec<DatasetName>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric_error() {
        EXIT_NUMERIC
    } else if e.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

fn spikes_args(src: SpikeSource, backend: Backend) -> SpikesArgs {
    SpikesArgs {
        model: src.model,
        dataset: src.dataset,
        data_dir: src.data_dir.unwrap_or_else(default_data_dir),
        split: src.split,
        examples: src.examples,
        backend,
        n_cycles: src.circuit.n_cycles,
        circuit: src.circuit.overrides(),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut log = |m: String| eprintln!("{m}");
    match cli.command {
        Command::Train(t) => {
            let flags = PartialConfig {
                dataset: t.dataset,
                data_dir: t.data_dir,
                preset: t.preset,
                epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                seed: t.seed,
                theta: t.theta,
                init_gain: t.init_gain,
                phase_shift_seed: t.phase_shift_seed,
                limit_train: t.limit_train,
                limit_test: t.limit_test,
                calibration_examples: t.calibration_examples,
                circuit: t.circuit.overrides(),
            };
            let file = match &t.config {
                Some(p) => PartialConfig::from_file(p)?,
                None => PartialConfig::default(),
            };
            let cfg = flags.or(file).resolve()?;
            commands::train(&cfg, &t.out, &mut log)
        }
        Command::Eval(e) => {
            let args = EvalArgs {
                model: e.model,
                dataset: e.dataset,
                data_dir: e.data_dir.unwrap_or_else(default_data_dir),
                split: e.split,
                limit: e.limit,
            };
            if args.limit == Some(0) {
                return Err(Error::Validation("--limit must be >= 1".into()));
            }
            commands::eval(&args, &e.out, &mut log)
        }
        Command::Spikes(s) => {
            let out = s.source.out.clone();
            commands::spikes(&spikes_args(s.source, s.backend), &out, &mut log)
        }
        Command::Simulate(s) => {
            let out = s.source.out.clone();
            commands::spikes(&spikes_args(s.source, Backend::Circuit), &out, &mut log)
        }
        Command::Plot(p) => commands::plot(&PlotArgs { input: p.input, name: p.name }, &p.out, &mut log),
        Command::FetchData(f) => {
            let which = if f.dataset.is_empty() {
                vec![DatasetName::Mnist, DatasetName::Cifar10]
            } else {
                f.dataset
            };
            fetch::fetch(&f.data_dir.unwrap_or_else(default_data_dir), &which, log)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
