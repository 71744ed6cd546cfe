//! Command implementations. Everything a command writes goes under its
//! output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use spnn::circuit::{
    calibrate, decode_output, median_drive, response_lag, subthreshold_amplitude, Circuit, CircuitCalibration,
    Stimulus, DECODE_WINDOW_CYCLES, THRESHOLD_SCAN,
};
use spnn::data::{DataLayout, Dataset};
use spnn::model_io::ModelFile;
use spnn::optim::AdamConfig;
use spnn::phasor_net::{forward, predict, PhaseShift};
use spnn::spikemap::{unroll, SpikeEvent, SpikeRaster};
use spnn::train::{adam_for, error_rate, fit, TrainConfig, METRICS_CSV_HEADER};
use spnn::{Error, PhasorNetwork, Result};

use crate::config::{CircuitOverrides, DatasetName, RunConfig};
use crate::plot::plot_csv;

/// Spacing of the decoded-class samples, in cycles.
const DECODE_SAMPLE_CYCLES: f64 = 0.05;

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|source| Error::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path of a plain file name inside the directory.
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = Path::new(name);
        if p.components().count() != 1 || p.file_name().is_none() {
            return Err(Error::Validation(format!("output name {name:?} must be a plain file name")));
        }
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_owned());
        }
        Ok(self.root.join(p))
    }

    fn create_file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name)?;
        File::create(&path).map(BufWriter::new).map_err(|source| Error::Io { path, source })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name)?;
        fs::write(&path, bytes).map_err(|source| Error::Io { path, source })
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        let path = self.root.join(name);
        let mut w = self.create_file(name)?;
        f(&mut w).and_then(|_| w.flush()).map_err(|source| Error::Io { path, source })
    }

    /// Writes `manifest-<command>.json` describing the run.
    fn manifest(&mut self, command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a, C: Serialize> {
            command: &'a str,
            version: &'a str,
            seed: Option<u64>,
            config: &'a C,
            outputs: &'a [String],
        }
        let name = format!("manifest-{command}.json");
        let outputs: Vec<String> = self.written.iter().filter(|w| **w != name).cloned().collect();
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            outputs: &outputs,
        };
        let json = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        self.write(&name, &json)
    }
}

pub fn load_split(dataset: DatasetName, root: &Path, train: bool, limit: Option<usize>) -> Result<Dataset> {
    let layout = DataLayout::new(root);
    let ds = match dataset {
        DatasetName::Mnist => layout.mnist(train)?,
        DatasetName::Cifar10 => layout.cifar10(train)?,
    };
    Ok(match limit {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn train(cfg: &RunConfig, out: &Path, log: &mut impl FnMut(String)) -> Result<()> {
    let mut out = OutDir::create(out)?;
    let train_set = load_split(cfg.dataset, &cfg.data_dir, true, cfg.limit_train)?;
    let test_set = load_split(cfg.dataset, &cfg.data_dir, false, cfg.limit_test)?;
    log(format!("{} train / {} test examples", train_set.len(), test_set.len()));

    let specs = cfg.layers();
    let net = PhasorNetwork::<f32>::with_init_gain(&specs, cfg.seed, cfg.init_gain)?;
    let shift = cfg.phase_shift_seed.map(|s| PhaseShift::random(net.input_len(), s));
    let mut net = net.with_input_shift(shift)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut adam = adam_for(&net, adam_cfg);
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: adam_cfg,
        seed: cfg.seed,
    };

    let metrics_path = out.path("metrics.csv")?;
    let model_path = out.path("model.spnn")?;
    let mut metrics = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{METRICS_CSV_HEADER}").map_err(io_err(&metrics_path))?;

    fit(&mut net, &mut adam, &train_set, &test_set, &tc, |m, _| {
        writeln!(metrics, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        log(format!(
            "epoch {:>3}  loss {:.4}  train_err {:.4}  test_err {:.4}",
            m.epoch, m.loss, m.train_err, m.test_err
        ));
        Ok(())
    })?;
    if cfg.epochs == 0 {
        log(format!("untrained test_err {:.4}", error_rate(&net, &test_set)?));
    }

    let mut model = ModelFile::new(net);
    model.optimizer = Some(adam);
    if cfg.calibration_examples > 0 {
        let (params, _) = cfg.circuit.params()?;
        let n = cfg.calibration_examples.min(test_set.len());
        let inputs: Vec<&[f32]> = (0..n).map(|i| test_set.image(i)).collect();
        log(format!("calibrating the circuit threshold on {n} test examples"));
        let cal = calibrate(&model.network, &params, &inputs)?;
        log(format!(
            "threshold {:.3e} mV, response lag {:.4} rad, agreement {:.3}",
            cal.threshold, cal.response_lag, cal.agreement
        ));
        model.circuit = Some(cal);
    }
    model.save(&model_path)?;
    out.manifest("train", cfg, Some(cfg.seed))
}

fn load_model(path: &Path) -> Result<ModelFile<f32>> {
    ModelFile::<f32>::load(path)
}

fn model_dataset(net: &PhasorNetwork<f32>, requested: Option<DatasetName>) -> Result<DatasetName> {
    match requested {
        Some(d) => Ok(d),
        None => DatasetName::from_input_len(net.input_len())
            .ok_or_else(|| Error::Validation(format!("no known dataset has {} inputs; pass --dataset", net.input_len()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Both,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub dataset: Option<DatasetName>,
    pub data_dir: PathBuf,
    pub split: Split,
    pub limit: Option<usize>,
}

pub fn eval(args: &EvalArgs, out: &Path, log: &mut impl FnMut(String)) -> Result<()> {
    let mut out = OutDir::create(out)?;
    let model = load_model(&args.model)?;
    let dataset = model_dataset(&model.network, args.dataset)?;
    let splits: &[(bool, &str)] = match args.split {
        Split::Train => &[(true, "train")],
        Split::Test => &[(false, "test")],
        Split::Both => &[(true, "train"), (false, "test")],
    };
    let mut report = serde_json::Map::new();
    for &(train, name) in splits {
        let ds = load_split(dataset, &args.data_dir, train, args.limit)?;
        let err = error_rate(&model.network, &ds)?;
        log(format!("{name}_err {err:.6} ({} examples)", ds.len()));
        report.insert(format!("{name}_err"), err.into());
        report.insert(format!("{name}_examples"), ds.len().into());
    }
    out.write("eval.json", &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    out.manifest("eval", args, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Ideal,
    Circuit,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpikesArgs {
    pub model: PathBuf,
    pub dataset: Option<DatasetName>,
    pub data_dir: PathBuf,
    pub split: Split,
    pub examples: Vec<usize>,
    pub backend: Backend,
    /// Cycles per example. Defaults to the circuit's cycle count.
    pub n_cycles: Option<usize>,
    pub circuit: CircuitOverrides,
}

/// Builds the circuit for `net`, preferring explicit overrides, then a
/// stored calibration, then a threshold derived from `inputs`.
fn build_circuit(
    net: &PhasorNetwork<f32>,
    overrides: &CircuitOverrides,
    stored: Option<CircuitCalibration>,
    inputs: &[&[f32]],
    log: &mut impl FnMut(String),
) -> Result<Circuit> {
    let (mut p, explicit) = overrides.params()?;
    let drive = median_drive(net, inputs)?;
    match (explicit, stored) {
        (true, Some(cal)) => Circuit::build_with_lag(net, p, cal.response_lag),
        (true, None) => Circuit::build_with_lag(net, p, response_lag(&p, drive)?),
        (false, Some(cal)) => {
            p.threshold = cal.threshold;
            Circuit::build_with_lag(net, p, cal.response_lag)
        }
        (false, None) => {
            p.threshold = THRESHOLD_SCAN[2] * subthreshold_amplitude(&p, drive)?;
            log(format!(
                "model has no circuit calibration; using threshold {:.3e} mV from the stimulus drive",
                p.threshold
            ));
            Circuit::build_with_lag(net, p, response_lag(&p, drive)?)
        }
    }
}

pub fn spikes(args: &SpikesArgs, out: &Path, log: &mut impl FnMut(String)) -> Result<()> {
    if args.examples.is_empty() {
        return Err(Error::Validation("at least one example index is required".into()));
    }
    let mut out = OutDir::create(out)?;
    let model = load_model(&args.model)?;
    let net = &model.network;
    let dataset = model_dataset(net, args.dataset)?;
    let train = args.split == Split::Train;
    let ds = load_split(dataset, &args.data_dir, train, None)?;
    for &i in &args.examples {
        if i >= ds.len() {
            return Err(Error::Validation(format!("example index {i} out of range (split has {} examples)", ds.len())));
        }
    }
    let (base, _) = args.circuit.params()?;
    let n_cycles = args.n_cycles.unwrap_or(base.n_cycles);
    if n_cycles == 0 {
        return Err(Error::Validation("cycle count must be >= 1".into()));
    }
    if n_cycles <= net.depth() {
        log(format!(
            "warning: {n_cycles} cycles is not more than the network depth {}; the output layer never fires",
            net.depth()
        ));
    }
    let inputs: Vec<&[f32]> = args.examples.iter().map(|&i| ds.image(i)).collect();
    for (&i, x) in args.examples.iter().zip(&inputs) {
        let pred = predict(forward(net, &net.encode(x)?)?.output_row(0));
        log(format!("example {i}: label {} phasor prediction {}", ds.label(i), fmt_class(pred)));
    }

    let raster = match args.backend {
        Backend::Ideal => {
            let mut events = Vec::new();
            for (k, x) in inputs.iter().enumerate() {
                let r = unroll(net, &net.encode(x)?, base.period, n_cycles)?;
                let shift = (k * n_cycles) as f64 * base.period;
                events.extend(r.events.into_iter().map(|e| SpikeEvent {
                    time: e.time + shift,
                    ..e
                }));
            }
            SpikeRaster::new(events, base.period, n_cycles * inputs.len())
        }
        Backend::Circuit => {
            let circuit = build_circuit(net, &args.circuit, model.circuit, &inputs, log)?;
            let p = *circuit.params();
            let depth = circuit.depth();
            let n_out = circuit.layer_sizes()[depth];
            let stimuli: Vec<Stimulus> = inputs.iter().map(|pixels| Stimulus { pixels, n_cycles }).collect();
            let record: Vec<(usize, usize)> = (0..n_out).map(|n| (depth, n)).collect();
            let run = circuit.run(&stimuli, &record)?;
            for trace in &run.traces {
                out.write_with(&format!("voltage_L{}_N{}.csv", trace.layer, trace.neuron), |w| trace.write_csv(w))?;
            }
            let total = (n_cycles * inputs.len()) as f64 * p.period;
            let step = DECODE_SAMPLE_CYCLES * p.period;
            let samples = (total / step).round() as usize;
            out.write_with("decoded.csv", |w| {
                writeln!(w, "time_ms,predicted_class")?;
                for s in 1..=samples {
                    let t = s as f64 * step;
                    let class = decode_output(&run.raster, depth, n_out, DECODE_WINDOW_CYCLES, t);
                    writeln!(w, "{t:.4},{}", class.map_or(-1, |c| c as i64))?;
                }
                Ok(())
            })?;
            for (k, &i) in args.examples.iter().enumerate() {
                let end = ((k + 1) * n_cycles) as f64 * p.period;
                let class = decode_output(&run.raster, depth, n_out, DECODE_WINDOW_CYCLES, end);
                log(format!("example {i}: circuit decoded {} at {end} ms", fmt_class(class)));
            }
            run.raster
        }
    };
    out.write_with("raster.csv", |w| raster.write_csv(w))?;
    log(format!("{} spikes written", raster.events.len()));
    out.manifest("spikes", args, None)
}

fn fmt_class(c: Option<usize>) -> String {
    c.map_or_else(|| "none".into(), |c| c.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotArgs {
    pub input: PathBuf,
    pub name: Option<String>,
}

pub fn plot(args: &PlotArgs, out: &Path, log: &mut impl FnMut(String)) -> Result<()> {
    let text = fs::read_to_string(&args.input).map_err(io_err(&args.input))?;
    let plot = plot_csv(&text).map_err(|e| Error::Io {
        path: args.input.clone(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })?;
    if plot.rows == 0 {
        log(format!("warning: {} has no data rows; writing empty axes", args.input.display()));
    }
    let name = match &args.name {
        Some(n) => n.clone(),
        None => {
            let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
            format!("{stem}.svg")
        }
    };
    let mut out = OutDir::create(out)?;
    out.write(&name, plot.svg.as_bytes())?;
    log(format!("wrote {name} ({:?} plot)", plot.kind));
    out.manifest("plot", args, None)
}
