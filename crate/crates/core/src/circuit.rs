//! Circuit-level execution of a phasor network.
//!
//! Each hidden and output unit is a soma coupled to a dendrite that sums
//! resonant synapse oscillators. A complex weight becomes one synapse whose
//! strength is the weight magnitude and whose transmission delay encodes the
//! weight phase. Input units and per-layer bias references are generators
//! that fire once per cycle. Everything advances with forward Euler on a
//! fixed grid; spike times are interpolated between grid points.
//!
//! Units throughout: ms, mV, pF, nS, pA.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex_core::{ComplexTensor, ComplexValue, Real};
use crate::error::{Error, Result};
use crate::phasor_net::{encode_input, apply_input_phase_shift, forward, predict, Layer, LayerKind, LayerSpec, PhasorNetwork};
use crate::spikemap::{phase_to_time, time_to_phase, SpikeEvent, SpikeRaster};

/// Decoder window used by default, in cycles.
pub const DECODE_WINDOW_CYCLES: usize = 3;

/// Relative inter-spike-interval drift below which a unit counts as locked.
pub const LOCK_TOLERANCE: f64 = 0.05;

/// Multiples of the observed subthreshold amplitude tried by
/// [`calibrate`].
pub const THRESHOLD_SCAN: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.35, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Cycle period `T`.
    pub period: f64,
    pub dt: f64,
    pub capacitance: f64,
    pub leak_conductance: f64,
    /// Soma to dendrite coupling.
    pub coupling_conductance: f64,
    pub leak_reversal: f64,
    /// Sets the synapse resonance, `1/sqrt(L C)`.
    pub inductance: f64,
    /// `W_s` after a synapse reset.
    pub spike_current: f64,
    /// Time constant of the running dendrite average.
    pub dendrite_tau: f64,
    /// Synaptic damping time constant. Zero disables damping.
    pub synapse_tau: f64,
    pub threshold: f64,
    pub n_cycles: usize,
}

impl Default for CircuitParams {
    fn default() -> Self {
        CircuitParams::with_period(10.0)
    }
}

impl CircuitParams {
    /// Defaults scaled to cycle period `period` (ms).
    pub fn with_period(period: f64) -> Self {
        let capacitance = 10.0;
        let omega = TAU / period;
        CircuitParams {
            period,
            dt: 0.025,
            capacitance,
            leak_conductance: PI * capacitance / period,
            coupling_conductance: 60.0 * PI * capacitance / period,
            leak_reversal: 0.0,
            inductance: 1.0 / (omega * omega * capacitance),
            spike_current: 0.3,
            dendrite_tau: 0.8 * period,
            synapse_tau: 0.0,
            threshold: 1e-3,
            n_cycles: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("period", self.period),
            ("dt", self.dt),
            ("capacitance", self.capacitance),
            ("inductance", self.inductance),
            ("dendrite_tau", self.dendrite_tau),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("circuit {name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("leak_conductance", self.leak_conductance),
            ("coupling_conductance", self.coupling_conductance),
            ("spike_current", self.spike_current),
            ("synapse_tau", self.synapse_tau),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("circuit {name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.leak_reversal.is_finite() {
            return Err(Error::Validation("circuit leak_reversal must be finite".into()));
        }
        if self.period / self.dt < 100.0 {
            return Err(Error::Validation(format!(
                "period/dt = {} is below 100 steps per cycle",
                self.period / self.dt
            )));
        }
        // Infinity is allowed: it silences every soma.
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::Validation(format!("spike threshold must be > 0 mV, got {}", self.threshold)));
        }
        if self.n_cycles == 0 {
            return Err(Error::Validation("n_cycles must be >= 1".into()));
        }
        Ok(())
    }

    /// Natural frequency of an undamped synapse, rad/ms.
    pub fn resonance(&self) -> f64 {
        1.0 / (self.inductance * self.capacitance).sqrt()
    }

    pub fn steps_per_cycle(&self) -> f64 {
        self.period / self.dt
    }

    fn synapse_step(&self, v: f64, w: f64) -> (f64, f64) {
        let damping = if self.synapse_tau > 0.0 { w / self.synapse_tau } else { 0.0 };
        (
            v - self.dt * w / self.capacitance,
            w + self.dt * (v / self.inductance - damping),
        )
    }
}

/// Soma state of one unit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeuronState {
    pub v_m: f64,
    /// Running average of the dendrite potential.
    pub v_d_mean: f64,
    pub refractory: bool,
}

impl NeuronState {
    /// One forward-Euler step given the current dendrite potential.
    pub fn euler_step(&mut self, v_d: f64, p: &CircuitParams) {
        let current = p.leak_conductance * (p.leak_reversal - self.v_m)
            + p.coupling_conductance * (v_d - self.v_m - self.v_d_mean);
        let dv_mean = (v_d - self.v_d_mean) / p.dendrite_tau;
        self.v_m += p.dt * current / p.capacitance;
        self.v_d_mean += p.dt * dv_mean;
    }

    /// Applies the threshold and refractory rule to a step that moved the
    /// membrane from `prev_v_m` to `self.v_m`, ending at `now`. Returns the
    /// spike time, linearly interpolated inside the step.
    pub fn detect_and_fire(&mut self, prev_v_m: f64, p: &CircuitParams, now: f64) -> Option<f64> {
        if self.refractory {
            if self.v_m < 0.0 {
                self.refractory = false;
            }
            return None;
        }
        if prev_v_m < p.threshold && self.v_m >= p.threshold {
            self.refractory = true;
            let frac = (p.threshold - prev_v_m) / (self.v_m - prev_v_m);
            return Some(now - p.dt + frac * p.dt);
        }
        None
    }
}

/// One resonant synapse, stepped on its own.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SynapseState {
    pub v_s: f64,
    pub w_s: f64,
    pub weight: f64,
    /// Transmission delay, ms.
    pub delay: f64,
}

impl SynapseState {
    pub fn new(weight: f64, delay: f64) -> Self {
        SynapseState {
            weight,
            delay,
            ..Default::default()
        }
    }

    /// State on spike arrival.
    pub fn reset(&mut self, p: &CircuitParams) {
        self.v_s = 0.0;
        self.w_s = p.spike_current;
    }

    pub fn euler_step(&mut self, p: &CircuitParams) {
        (self.v_s, self.w_s) = p.synapse_step(self.v_s, self.w_s);
    }

    /// Contribution to the dendrite potential.
    pub fn potential(&self) -> f64 {
        self.weight * self.v_s
    }
}

/// Stimulus presented for a number of cycles.
#[derive(Debug, Clone, Copy)]
pub struct Stimulus<'a> {
    pub pixels: &'a [f32],
    pub n_cycles: usize,
}

/// Membrane potential samples of one unit, one per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageTrace {
    pub layer: usize,
    pub neuron: usize,
    pub samples: Vec<(f64, f64)>,
}

pub const VOLTAGE_CSV_HEADER: &str = "time_ms,V_m_mV";

impl VoltageTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOLTAGE_CSV_HEADER}")?;
        for (t, v) in &self.samples {
            writeln!(w, "{t:.6},{v:.9e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CircuitRun {
    pub raster: SpikeRaster,
    pub traces: Vec<VoltageTrace>,
}

/// A network compiled to somas, generators and delayed synapses.
///
/// Synapses are stored grouped by presynaptic source. Sources are the
/// network units in layer order (inputs first) followed by one bias
/// reference per layer.
#[derive(Debug, Clone)]
pub struct Circuit {
    params: CircuitParams,
    layer_sizes: Vec<usize>,
    unit_offset: Vec<usize>,
    fanout: Vec<usize>,
    target: Vec<u32>,
    weight: Vec<f64>,
    delay: Vec<f64>,
    bias_synapses: usize,
    input_shift: Option<Vec<f64>>,
    response_lag: f64,
}

struct PendingSynapse {
    source: usize,
    target: usize,
    weight: ComplexValue<f64>,
}

fn to_c64<T: Real>(z: ComplexValue<T>) -> ComplexValue<f64> {
    ComplexValue::new(z.re.as_f64(), z.im.as_f64())
}

/// Connections of one layer as (input unit, output unit, weight).
fn layer_connections<T: Real>(layer: &Layer<T>, mut f: impl FnMut(usize, usize, ComplexValue<f64>)) {
    let w = layer.weights.data();
    match layer.spec.kind {
        LayerKind::Dense { inputs, outputs } => {
            for j in 0..inputs {
                for i in 0..outputs {
                    f(j, i, to_c64(w[i * inputs + j]));
                }
            }
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
        } => {
            let (oh, ow) = (height - 2, width - 2);
            for c in 0..in_channels {
                for y in 0..height {
                    for x in 0..width {
                        let src = (c * height + y) * width + x;
                        for fo in 0..out_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    if y < ky || x < kx || y - ky >= oh || x - kx >= ow {
                                        continue;
                                    }
                                    let dst = (fo * oh + (y - ky)) * ow + (x - kx);
                                    let k = w[((fo * in_channels + c) * 3 + ky) * 3 + kx];
                                    f(src, dst, to_c64(k));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Circuit {
    /// Compiles `net`, calibrating the per-layer response lag for a unit
    /// magnitude drive.
    pub fn build<T: Real>(net: &PhasorNetwork<T>, params: CircuitParams) -> Result<Self> {
        params.validate()?;
        let lag = response_lag(&params, 1.0)?;
        Circuit::build_with_lag(net, params, lag)
    }

    /// Compiles `net` with an explicit response lag (radians per layer).
    /// Bias references of layer `l` fire at phase `(l - 1) * lag`.
    pub fn build_with_lag<T: Real>(net: &PhasorNetwork<T>, params: CircuitParams, response_lag: f64) -> Result<Self> {
        params.validate()?;
        if !response_lag.is_finite() {
            return Err(Error::Validation("response lag must be finite".into()));
        }
        let depth = net.depth();
        let layer_sizes: Vec<usize> = (0..=depth).map(|l| net.units(l)).collect();
        let mut unit_offset = vec![0; depth + 2];
        for l in 0..=depth {
            unit_offset[l + 1] = unit_offset[l] + layer_sizes[l];
        }
        let n_inputs = layer_sizes[0];
        let n_sources = unit_offset[depth + 1] + depth;

        let mut pending = Vec::new();
        for (li, layer) in net.layers().iter().enumerate() {
            if !layer.weights.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Validation(format!("layer {} has non-finite parameters", li + 1)));
            }
            let src_base = unit_offset[li];
            let dst_base = unit_offset[li + 1] - n_inputs;
            layer_connections(layer, |j, i, w| {
                if w.re != 0.0 || w.im != 0.0 {
                    pending.push(PendingSynapse {
                        source: src_base + j,
                        target: dst_base + i,
                        weight: w,
                    });
                }
            });
        }
        let mut bias_synapses = 0;
        for (li, layer) in net.layers().iter().enumerate() {
            let source = unit_offset[depth + 1] + li;
            let dst_base = unit_offset[li + 1] - n_inputs;
            for (i, b) in layer.bias.data().iter().enumerate() {
                let b = to_c64(*b);
                if b.re != 0.0 || b.im != 0.0 {
                    bias_synapses += 1;
                    pending.push(PendingSynapse {
                        source,
                        target: dst_base + i,
                        weight: b,
                    });
                }
            }
        }
        pending.sort_by_key(|s| s.source);

        let mut fanout = vec![0; n_sources + 1];
        for s in &pending {
            fanout[s.source + 1] += 1;
        }
        for k in 0..n_sources {
            fanout[k + 1] += fanout[k];
        }
        let n_somas = unit_offset[depth + 1] - n_inputs;
        if n_somas > u32::MAX as usize {
            return Err(Error::Validation("too many units for the circuit backend".into()));
        }
        let mut target = Vec::with_capacity(pending.len());
        let mut weight = Vec::with_capacity(pending.len());
        let mut delay = Vec::with_capacity(pending.len());
        for s in &pending {
            target.push(s.target as u32);
            weight.push(s.weight.norm());
            delay.push(phase_to_time(s.weight.arg(), params.period));
        }
        Ok(Circuit {
            params,
            layer_sizes,
            unit_offset,
            fanout,
            target,
            weight,
            delay,
            bias_synapses,
            input_shift: net.input_shift().map(|s| s.shifts.clone()),
            response_lag,
        })
    }

    pub fn params(&self) -> &CircuitParams {
        &self.params
    }

    pub fn response_lag(&self) -> f64 {
        self.response_lag
    }

    /// Units per layer, input layer first.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn soma_count(&self) -> usize {
        self.unit_offset[self.depth() + 1] - self.layer_sizes[0]
    }

    /// All synapses, bias synapses included.
    pub fn synapse_count(&self) -> usize {
        self.target.len()
    }

    pub fn bias_synapse_count(&self) -> usize {
        self.bias_synapses
    }

    /// Outgoing synapses of `(layer, neuron)` as (target layer, target
    /// neuron, weight, delay).
    pub fn synapses_from(&self, layer: usize, neuron: usize) -> Vec<(usize, usize, f64, f64)> {
        let source = self.unit_offset[layer] + neuron;
        (self.fanout[source]..self.fanout[source + 1])
            .map(|s| {
                let (l, n) = self.unit_of_soma(self.target[s] as usize);
                (l, n, self.weight[s], self.delay[s])
            })
            .collect()
    }

    fn unit_of_soma(&self, soma: usize) -> (usize, usize) {
        let global = soma + self.layer_sizes[0];
        let layer = self.unit_offset.partition_point(|&o| o <= global) - 1;
        (layer, global - self.unit_offset[layer])
    }

    /// Input phases for one stimulus, with the model's input shift.
    pub fn input_phases(&self, pixels: &[f32]) -> Result<Vec<f64>> {
        if pixels.len() != self.layer_sizes[0] {
            return Err(Error::Dimension {
                context: "stimulus pixels",
                expected: vec![self.layer_sizes[0]],
                actual: vec![pixels.len()],
            });
        }
        let x = encode_input::<f64>(pixels)?;
        let x = match &self.input_shift {
            Some(s) => apply_input_phase_shift(&x, s)?,
            None => x,
        };
        Ok(x.phases())
    }

    /// Integrates the circuit over consecutive stimuli, recording voltage
    /// traces for the `(layer, neuron)` pairs in `record`.
    pub fn run(&self, stimuli: &[Stimulus<'_>], record: &[(usize, usize)]) -> Result<CircuitRun> {
        let p = &self.params;
        let depth = self.depth();
        let n_inputs = self.layer_sizes[0];
        let n_somas = self.soma_count();

        let mut cycle_phases = Vec::new();
        for s in stimuli {
            let phases = self.input_phases(s.pixels)?;
            for _ in 0..s.n_cycles {
                cycle_phases.push(phases.clone());
            }
        }
        let total_cycles = cycle_phases.len();
        let mut record_somas = Vec::with_capacity(record.len());
        for &(layer, neuron) in record {
            if layer == 0 || layer > depth || neuron >= self.layer_sizes[layer] {
                return Err(Error::Validation(format!("cannot record unit {neuron} of layer {layer}")));
            }
            record_somas.push(self.unit_offset[layer] + neuron - n_inputs);
        }

        let spc = p.steps_per_cycle();
        let n_steps = (total_cycles as f64 * spc).round() as usize;
        let bucket_of = |t: f64| (t / p.dt).round() as usize;
        let cycle_start = |c: usize| (c as f64 * spc).round() as usize;

        // Synapse trajectory after a reset; every synapse follows it until
        // its next reset.
        let mut trajectory = Vec::with_capacity(n_steps + 1);
        let mut probe = SynapseState::new(1.0, 0.0);
        probe.reset(p);
        for _ in 0..=n_steps {
            trajectory.push((probe.v_s, probe.w_s));
            probe.euler_step(p);
        }
        let rest = trajectory[0];

        let ring_len = (2.0 * spc).ceil() as usize + 4;
        let mut ring: Vec<Vec<(f64, u32)>> = vec![Vec::new(); ring_len];
        let mut last_reset = vec![u32::MAX; self.target.len()];
        let mut neurons = vec![NeuronState::default(); n_somas];
        // Weighted sum of synapse states per soma.
        let mut dendrite = vec![(0.0f64, 0.0f64); n_somas];
        let mut events = Vec::new();
        let mut traces: Vec<VoltageTrace> = record
            .iter()
            .map(|&(layer, neuron)| VoltageTrace {
                layer,
                neuron,
                samples: Vec::with_capacity(n_steps + 1),
            })
            .collect();

        let enqueue = |ring: &mut Vec<Vec<(f64, u32)>>, source: usize, t: f64, step: usize| {
            for s in self.fanout[source]..self.fanout[source + 1] {
                let arrival = t + self.delay[s];
                let b = bucket_of(arrival).max(step);
                debug_assert!(b - step < ring_len);
                ring[b % ring_len].push((arrival, s as u32));
            }
        };

        let mut next_cycle = 0;
        for step in 0..=n_steps {
            let now = step as f64 * p.dt;
            let mut prev_v = Vec::new();
            if step > 0 {
                prev_v.reserve(n_somas);
                for (k, (n, d)) in neurons.iter_mut().zip(dendrite.iter_mut()).enumerate() {
                    prev_v.push(n.v_m);
                    n.euler_step(d.0, p);
                    *d = p.synapse_step(d.0, d.1);
                    if !n.v_m.is_finite() || !n.v_d_mean.is_finite() || !d.0.is_finite() {
                        let (layer, neuron) = self.unit_of_soma(k);
                        return Err(Error::IntegrationBlowup {
                            layer,
                            neuron,
                            time_ms: now,
                        });
                    }
                }
            }

            while next_cycle < total_cycles && cycle_start(next_cycle) == step {
                let c0 = next_cycle as f64 * p.period;
                for (j, &theta) in cycle_phases[next_cycle].iter().enumerate() {
                    let t = c0 + phase_to_time(theta, p.period);
                    events.push(SpikeEvent {
                        layer: 0,
                        neuron: j,
                        time: t,
                    });
                    enqueue(&mut ring, j, t, step);
                }
                for l in 1..=depth {
                    let t = c0 + phase_to_time((l - 1) as f64 * self.response_lag, p.period);
                    enqueue(&mut ring, self.unit_offset[depth + 1] + l - 1, t, step);
                }
                next_cycle += 1;
            }

            if step > 0 {
                for k in 0..n_somas {
                    if let Some(t) = neurons[k].detect_and_fire(prev_v[k], p, now) {
                        let (layer, neuron) = self.unit_of_soma(k);
                        events.push(SpikeEvent { layer, neuron, time: t });
                        enqueue(&mut ring, k + n_inputs, t, step);
                    }
                }
            }

            let slot = step % ring_len;
            let mut due = std::mem::take(&mut ring[slot]);
            due.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, s) in &due {
                let s = s as usize;
                let old = match last_reset[s] {
                    u32::MAX => (0.0, 0.0),
                    r => trajectory[step - r as usize],
                };
                let d = &mut dendrite[self.target[s] as usize];
                d.0 += self.weight[s] * (rest.0 - old.0);
                d.1 += self.weight[s] * (rest.1 - old.1);
                last_reset[s] = step as u32;
            }
            due.clear();
            ring[slot] = due;

            for (trace, &k) in traces.iter_mut().zip(&record_somas) {
                trace.samples.push((now, neurons[k].v_m));
            }
        }

        Ok(CircuitRun {
            raster: SpikeRaster::new(events, p.period, total_cycles),
            traces,
        })
    }

    /// Runs each input on its own for `n_cycles` and decodes the output at
    /// the end. Inputs are simulated in parallel.
    pub fn evaluate(&self, inputs: &[&[f32]], n_cycles: usize) -> Result<Vec<ExampleOutcome>> {
        inputs
            .par_iter()
            .map(|pixels| {
                let run = self.run(&[Stimulus { pixels, n_cycles }], &[])?;
                Ok(ExampleOutcome::from_raster(&run.raster, self, n_cycles))
            })
            .collect()
    }
}

/// What one stimulus did to the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub decoded: Option<usize>,
    /// Cycle in which each output unit locked, if it did.
    pub lock_cycles: Vec<Option<usize>>,
    /// Output spike phases in the final cycle.
    pub final_phases: Vec<Option<f64>>,
}

impl ExampleOutcome {
    fn from_raster(raster: &SpikeRaster, circuit: &Circuit, n_cycles: usize) -> Self {
        let depth = circuit.depth();
        let n_out = circuit.layer_sizes[depth];
        let period = circuit.params.period;
        let end = n_cycles as f64 * period;
        let trains = raster.trains(depth, n_out);
        ExampleOutcome {
            decoded: decode_output(raster, depth, n_out, DECODE_WINDOW_CYCLES, end),
            lock_cycles: trains
                .iter()
                .map(|t| lock_cycle(t, 0.0, n_cycles, period, LOCK_TOLERANCE))
                .collect(),
            final_phases: trains
                .iter()
                .map(|t| {
                    t.iter()
                        .rev()
                        .find(|&&s| s >= end - period && s < end)
                        .map(|&s| time_to_phase(s, period))
                })
                .collect(),
        }
    }
}

/// Class whose spikes sit furthest from the spikes of the other units of
/// `layer` within `[now - window_cycles T, now]`.
///
/// For every spike of unit `i` the score is the mean distance to the
/// nearest earlier and nearest later spike of any other unit (a single
/// side when the other is missing from the window); unit scores average
/// over their spikes. Silent units are skipped and ties go to the lowest
/// index.
pub fn decode_output(raster: &SpikeRaster, layer: usize, n_units: usize, window_cycles: usize, now: f64) -> Option<usize> {
    let start = now - window_cycles as f64 * raster.period;
    let mut trains = vec![Vec::new(); n_units];
    for e in raster.layer(layer) {
        if e.neuron < n_units && e.time >= start && e.time <= now {
            trains[e.neuron].push(e.time);
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n_units {
        if trains[i].is_empty() {
            continue;
        }
        let mut others: Vec<f64> = trains
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, t)| t.iter().copied())
            .collect();
        others.sort_by(f64::total_cmp);
        let mut total = 0.0;
        for &t in &trains[i] {
            let k = others.partition_point(|&s| s < t);
            let later = others.get(k).map(|&s| s - t);
            let k = others.partition_point(|&s| s <= t);
            let earlier = k.checked_sub(1).map(|k| t - others[k]);
            total += match (earlier, later) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => 0.0,
            };
        }
        let score = total / trains[i].len() as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

/// First cycle (counted from `start`) after which every inter-spike
/// interval stays within `tolerance * period` of the period until the
/// end of the `n_cycles` window.
///
/// A unit that is silent in the final cycle, or whose stable tail has
/// fewer than two intervals, has not locked.
pub fn lock_cycle(train: &[f64], start: f64, n_cycles: usize, period: f64, tolerance: f64) -> Option<usize> {
    let end = start + n_cycles as f64 * period;
    let spikes: Vec<f64> = train.iter().copied().filter(|&t| t >= start && t < end).collect();
    if spikes.last().is_none_or(|&t| t < end - period) {
        return None;
    }
    let mut first = spikes.len() - 1;
    while first > 0 && ((spikes[first] - spikes[first - 1]) - period).abs() < tolerance * period {
        first -= 1;
    }
    if spikes.len() - 1 - first < 2 {
        return None;
    }
    Some(((spikes[first] - start) / period).floor() as usize)
}

/// Wraps an angle into `(-pi, pi]`.
fn wrap(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// RMS phase difference after removing the circular-mean offset. Only
/// units with both phases present count. `None` if there are none.
pub fn phase_error_rms(observed: &[Option<f64>], expected: &[Option<f64>]) -> Option<f64> {
    let pairs: Vec<f64> = observed
        .iter()
        .zip(expected)
        .filter_map(|(o, e)| Some(wrap(o.as_ref()? - e.as_ref()?)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let (s, c) = pairs.iter().fold((0.0, 0.0), |(s, c), d| (s + d.sin(), c + d.cos()));
    let offset = s.atan2(c);
    let ms = pairs.iter().map(|d| wrap(d - offset).powi(2)).sum::<f64>() / pairs.len() as f64;
    Some(ms.sqrt())
}

fn single_unit(magnitude: f64) -> Result<PhasorNetwork<f64>> {
    PhasorNetwork::from_layers(vec![Layer {
        spec: LayerSpec::dense(1, 1),
        weights: ComplexTensor::from_vec(&[1, 1], vec![ComplexValue::new(magnitude, 0.0)])?,
        bias: ComplexTensor::zeros(&[1]),
    }])
}

const CALIBRATION_CYCLES: usize = 12;

/// Phase by which a soma's spikes trail the phase of its summed input,
/// measured on one unit driven at phase 0 with magnitude `magnitude`.
pub fn response_lag(params: &CircuitParams, magnitude: f64) -> Result<f64> {
    let mut p = *params;
    p.n_cycles = CALIBRATION_CYCLES;
    let circuit = Circuit::build_with_lag(&single_unit(magnitude)?, p, 0.0)?;
    let run = circuit.run(
        &[Stimulus {
            pixels: &[1.0],
            n_cycles: CALIBRATION_CYCLES,
        }],
        &[],
    )?;
    let last = run
        .raster
        .layer(1)
        .last()
        .ok_or_else(|| Error::Validation(format!("a unit driven at magnitude {magnitude} never reaches {} mV", p.threshold)))?;
    Ok(time_to_phase(last.time, p.period))
}

/// Peak membrane potential of one unit driven at magnitude `magnitude`
/// with spiking disabled, over its final cycle.
pub fn subthreshold_amplitude(params: &CircuitParams, magnitude: f64) -> Result<f64> {
    let mut p = *params;
    p.threshold = f64::INFINITY;
    let circuit = Circuit::build_with_lag(&single_unit(magnitude)?, p, 0.0)?;
    let run = circuit.run(
        &[Stimulus {
            pixels: &[1.0],
            n_cycles: CALIBRATION_CYCLES,
        }],
        &[(1, 0)],
    )?;
    let from = (CALIBRATION_CYCLES - 1) as f64 * p.period;
    Ok(run.traces[0]
        .samples
        .iter()
        .filter(|(t, _)| *t >= from)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Result of a threshold scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitCalibration {
    pub threshold: f64,
    pub response_lag: f64,
    /// Fraction of calibration inputs whose decoded class matched the
    /// phasor prediction.
    pub agreement: f64,
}

/// Median pre-activation magnitude over all non-input layers.
pub fn median_drive<T: Real>(net: &PhasorNetwork<T>, inputs: &[&[f32]]) -> Result<f64> {
    let mut mags = Vec::new();
    for pixels in inputs {
        let trace = forward(net, &net.encode(pixels)?)?;
        for layer in &trace.layers {
            mags.extend(layer.pre.data().iter().map(|z| z.norm().as_f64()));
        }
    }
    if mags.is_empty() {
        return Err(Error::Validation("no calibration inputs".into()));
    }
    mags.sort_by(f64::total_cmp);
    Ok(mags[mags.len() / 2])
}

/// Chooses the spike threshold from [`THRESHOLD_SCAN`] multiples of the
/// subthreshold amplitude of a unit driven at the network's median drive.
///
/// The winner maximizes decoded agreement with phasor-domain predictions on
/// `inputs`; ties go to the smaller mean output phase error.
pub fn calibrate<T: Real>(net: &PhasorNetwork<T>, params: &CircuitParams, inputs: &[&[f32]]) -> Result<CircuitCalibration> {
    params.validate()?;
    let drive = median_drive(net, inputs)?;
    let amplitude = subthreshold_amplitude(params, drive)?;
    if !(amplitude > 0.0) {
        return Err(Error::Validation("network drive produces no membrane oscillation".into()));
    }
    let mut expected_class = Vec::with_capacity(inputs.len());
    let mut expected_phases = Vec::with_capacity(inputs.len());
    for pixels in inputs {
        let trace = forward(net, &net.encode(pixels)?)?;
        let out = trace.output_row(0);
        expected_class.push(predict(out));
        expected_phases.push(output_phases(out));
    }

    let mut best: Option<(CircuitCalibration, f64)> = None;
    for factor in THRESHOLD_SCAN {
        let mut p = *params;
        p.threshold = factor * amplitude;
        let lag = response_lag(&p, drive)?;
        let circuit = Circuit::build_with_lag(net, p, lag)?;
        let outcomes = circuit.evaluate(inputs, p.n_cycles)?;
        let hits = outcomes.iter().zip(&expected_class).filter(|(o, e)| o.decoded.is_some() && o.decoded == **e).count();
        let agreement = hits as f64 / inputs.len() as f64;
        let errs: Vec<f64> = outcomes
            .iter()
            .zip(&expected_phases)
            .map(|(o, e)| phase_error_rms(&o.final_phases, e).unwrap_or(PI))
            .collect();
        let err = errs.iter().sum::<f64>() / errs.len() as f64;
        let candidate = CircuitCalibration {
            threshold: p.threshold,
            response_lag: lag,
            agreement,
        };
        let better = match &best {
            None => true,
            Some((b, e)) => agreement > b.agreement || (agreement == b.agreement && err < *e),
        };
        if better {
            best = Some((candidate, err));
        }
    }
    Ok(best.expect("non-empty scan").0)
}

/// Phases of active units; `None` for inactive ones.
pub fn output_phases<T: Real>(out: &[ComplexValue<T>]) -> Vec<Option<f64>> {
    out.iter()
        .map(|z| (z.norm() > T::zero()).then(|| z.arg().as_f64().rem_euclid(TAU)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor_net::dense_stack;

    fn dense_net(weights: Vec<ComplexValue<f64>>, inputs: usize, outputs: usize) -> PhasorNetwork<f64> {
        PhasorNetwork::from_layers(vec![Layer {
            spec: LayerSpec::dense(inputs, outputs),
            weights: ComplexTensor::from_vec(&[outputs, inputs], weights).unwrap(),
            bias: ComplexTensor::zeros(&[outputs]),
        }])
        .unwrap()
    }

    #[test]
    fn defaults_resonate_at_cycle_frequency() {
        let p = CircuitParams::default();
        assert!((p.resonance() - TAU / p.period).abs() < 1e-12);
        assert!((p.steps_per_cycle() - 400.0).abs() < 1e-9);
        assert!((p.dendrite_tau - 8.0).abs() < 1e-12);
        assert!((p.leak_conductance - PI).abs() < 1e-12);
        assert!((p.coupling_conductance - 60.0 * PI).abs() < 1e-12);
        assert_eq!(p.synapse_tau, 0.0);
        p.validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = CircuitParams::default();
        p.dt = 0.2;
        assert!(p.validate().is_err());
        let mut p = CircuitParams::default();
        p.threshold = 0.0;
        assert!(p.validate().is_err());
        let mut p = CircuitParams::default();
        p.dt = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let p = CircuitParams::default();
        let mut n = NeuronState::default();
        let mut s = SynapseState::new(0.7, 1.0);
        for _ in 0..1000 {
            n.euler_step(s.potential(), &p);
            s.euler_step(&p);
        }
        assert_eq!(n, NeuronState::default());
        assert_eq!((s.v_s, s.w_s), (0.0, 0.0));
    }

    #[test]
    fn reset_sets_exact_state() {
        let p = CircuitParams::default();
        let mut s = SynapseState::new(1.0, 0.0);
        s.v_s = 3.0;
        s.w_s = -2.0;
        s.reset(&p);
        assert_eq!((s.v_s, s.w_s), (0.0, p.spike_current));
    }

    #[test]
    fn damping_only_when_enabled() {
        let mut p = CircuitParams::default();
        let (_, w) = p.synapse_step(0.0, 1.0);
        assert_eq!(w, 1.0);
        p.synapse_tau = 1.0;
        let (_, w) = p.synapse_step(0.0, 1.0);
        assert!((w - (1.0 - p.dt)).abs() < 1e-15);
    }

    #[test]
    fn subthreshold_membrane_never_fires() {
        let p = CircuitParams::default();
        let mut n = NeuronState::default();
        for k in 0..10_000 {
            let prev = n.v_m;
            n.v_m = 0.5 * p.threshold * (k as f64 * 0.01).sin();
            assert!(n.detect_and_fire(prev, &p, k as f64 * p.dt).is_none());
        }
    }

    #[test]
    fn refractory_until_membrane_goes_negative() {
        let p = CircuitParams::default();
        let th = p.threshold;
        let mut n = NeuronState::default();
        // Up through threshold, dip (still positive), up again: one spike.
        let path = [0.0, 2.0 * th, 0.5 * th, 2.0 * th, 0.1 * th, -0.1 * th, 2.0 * th];
        let mut spikes = Vec::new();
        for k in 1..path.len() {
            n.v_m = path[k];
            if let Some(t) = n.detect_and_fire(path[k - 1], &p, k as f64 * p.dt) {
                spikes.push(t);
            }
        }
        assert_eq!(spikes.len(), 2);
        // First crossing halfway through the first step.
        assert!((spikes[0] - 0.5 * p.dt).abs() < 1e-15);
    }

    #[test]
    fn single_zero_weight_gives_no_synapses() {
        let net = dense_net(vec![ComplexValue::new(0.0, 0.0)], 1, 1);
        let c = Circuit::build_with_lag(&net, CircuitParams::default(), 0.0).unwrap();
        assert_eq!(c.synapse_count(), 0);
        let run = c.run(&[Stimulus { pixels: &[0.3], n_cycles: 4 }], &[]).unwrap();
        assert!(run.raster.events.iter().all(|e| e.layer == 0));
        assert_eq!(run.raster.events.len(), 4);
    }

    #[test]
    fn imaginary_weight_is_quarter_cycle_delay() {
        let net = dense_net(vec![ComplexValue::new(0.0, 1.0)], 1, 1);
        let c = Circuit::build_with_lag(&net, CircuitParams::default(), 0.0).unwrap();
        let syn = c.synapses_from(0, 0);
        assert_eq!(syn.len(), 1);
        let (layer, neuron, w, d) = syn[0];
        assert_eq!((layer, neuron), (1, 0));
        assert!((w - 1.0).abs() < 1e-15);
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn synapse_count_matches_nonzero_weights() {
        let mut net = PhasorNetwork::<f64>::new(&dense_stack(&[5, 4, 3]), 9).unwrap();
        let w = net.layers_mut()[0].weights.data_mut();
        w[0] = ComplexValue::new(0.0, 0.0);
        w[7] = ComplexValue::new(0.0, 0.0);
        let c = Circuit::build_with_lag(&net, CircuitParams::default(), 0.0).unwrap();
        assert_eq!(c.synapse_count(), 5 * 4 + 4 * 3 - 2);
        assert_eq!(c.bias_synapse_count(), 0);
        assert_eq!(c.soma_count(), 7);
    }

    #[test]
    fn conv_connections_match_dense_equivalent() {
        // Route a conv layer through the connection list and compare the
        // resulting linear map with the conv forward pass.
        let spec = LayerSpec::conv3x3(2, 2, 5, 4);
        let net = PhasorNetwork::<f64>::new(&[spec], 4).unwrap();
        let layer = &net.layers()[0];
        let x: Vec<ComplexValue<f64>> = (0..spec.input_len()).map(|k| ComplexValue::new((k as f64).cos(), (k as f64 * 0.3).sin())).collect();
        let mut z = vec![ComplexValue::new(0.0, 0.0); spec.output_len()];
        layer_connections(layer, |j, i, w| z[i] += w * x[j]);
        let trace = net.forward_batch(&x, 1).unwrap();
        for (a, b) in z.iter().zip(trace.layers[0].pre.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn delivery_time_is_emission_plus_delay() {
        // Input at phase pi/2 (pixel 0.5) through a weight of phase pi/2:
        // the synapse resets at the grid point nearest 2.5 + 2.5 ms.
        let net = dense_net(vec![ComplexValue::new(0.0, 2.0)], 1, 1);
        let mut p = CircuitParams::default();
        p.threshold = f64::INFINITY;
        let c = Circuit::build_with_lag(&net, p, 0.0).unwrap();
        let run = c.run(&[Stimulus { pixels: &[0.5], n_cycles: 1 }], &[(1, 0)]).unwrap();
        let input = run.raster.layer(0).next().unwrap().time;
        assert!((input - 2.5).abs() < 1e-12);
        let trace = &run.traces[0].samples;
        let first_move = trace.iter().position(|&(_, v)| v != 0.0).unwrap();
        // Reset lands at step 200 with V_s = 0, so the dendrite moves at
        // step 201 and the soma at 202.
        assert_eq!(first_move, 202);
    }

    #[test]
    fn decoder_tie_goes_to_lowest_index() {
        let events = [(0, 0.0), (0, 10.0), (0, 20.0), (1, 5.0), (1, 15.0), (1, 25.0)]
            .iter()
            .map(|&(neuron, time)| SpikeEvent { layer: 2, neuron, time })
            .collect();
        let r = SpikeRaster::new(events, 10.0, 3);
        assert_eq!(decode_output(&r, 2, 2, 3, 30.0), Some(0));
    }

    #[test]
    fn decoder_picks_out_of_phase_unit() {
        let mut events = Vec::new();
        for c in 0..3 {
            let base = c as f64 * 10.0;
            events.push(SpikeEvent { layer: 1, neuron: 0, time: base + 5.0 });
            events.push(SpikeEvent { layer: 1, neuron: 1, time: base });
            events.push(SpikeEvent { layer: 1, neuron: 2, time: base });
        }
        let r = SpikeRaster::new(events, 10.0, 3);
        assert_eq!(decode_output(&r, 1, 3, 3, 30.0), Some(0));
        assert_eq!(decode_output(&r, 1, 3, 3, 100.0), None);
        // Silent unit 3 is skipped.
        assert_eq!(decode_output(&r, 1, 4, 3, 30.0), Some(0));
    }

    #[test]
    fn lock_cycle_finds_stable_tail() {
        let mut train = vec![1.0, 13.0];
        for c in 2..15 {
            train.push(c as f64 * 10.0 + 4.0 + 0.1 * (c % 2) as f64);
        }
        assert_eq!(lock_cycle(&train, 0.0, 15, 10.0, LOCK_TOLERANCE), Some(2));
        // Silent in the final cycle.
        assert_eq!(lock_cycle(&train[..train.len() - 1], 0.0, 15, 10.0, LOCK_TOLERANCE), None);
        assert_eq!(lock_cycle(&[], 0.0, 15, 10.0, LOCK_TOLERANCE), None);
    }

    #[test]
    fn phase_error_ignores_global_offset() {
        let e = [Some(0.1), Some(2.0), None, Some(6.0)];
        let o: Vec<Option<f64>> = e.iter().map(|p| p.map(|x| (x + 1.3) % TAU)).collect();
        assert!(phase_error_rms(&o, &e).unwrap() < 1e-12);
        assert_eq!(phase_error_rms(&[None], &[Some(1.0)]), None);
    }

    #[test]
    fn run_is_deterministic() {
        let mut net = PhasorNetwork::<f64>::new(&dense_stack(&[6, 5, 3]), 2).unwrap();
        net.layers_mut()[1].bias.data_mut()[0] = ComplexValue::new(0.2, -0.1);
        let c = Circuit::build(&net, CircuitParams::default()).unwrap();
        let pixels = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let a = c.run(&[Stimulus { pixels: &pixels, n_cycles: 6 }], &[(2, 1)]).unwrap();
        let b = c.run(&[Stimulus { pixels: &pixels, n_cycles: 6 }], &[(2, 1)]).unwrap();
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.traces, b.traces);
        assert_eq!(c.bias_synapse_count(), 1);
    }

    #[test]
    fn stimulus_size_checked() {
        let net = dense_net(vec![ComplexValue::new(1.0, 0.0)], 1, 1);
        let c = Circuit::build_with_lag(&net, CircuitParams::default(), 0.0).unwrap();
        assert!(c.run(&[Stimulus { pixels: &[0.1, 0.2], n_cycles: 1 }], &[]).is_err());
        assert!(c.run(&[Stimulus { pixels: &[0.1], n_cycles: 1 }], &[(2, 0)]).is_err());
    }
}
