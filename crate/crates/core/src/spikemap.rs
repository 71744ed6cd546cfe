//! Ideal spike-timing backend: phases become spike times within a cycle of
//! period `T`, and each cycle carries activity one layer deeper.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use crate::complex_core::{ComplexTensor, ComplexValue, Real};
use crate::error::{Error, Result};
use crate::phasor_net::{forward, PhasorNetwork};

/// One spike. Layer 0 is the input layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEvent {
    pub layer: usize,
    pub neuron: usize,
    /// Milliseconds since the start of the run.
    pub time: f64,
}

/// Time-ordered spikes of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRaster {
    pub events: Vec<SpikeEvent>,
    /// Cycle period in ms.
    pub period: f64,
    pub n_cycles: usize,
}

pub const RASTER_CSV_HEADER: &str = "layer,neuron,time_ms";

impl SpikeRaster {
    /// Sorts events by time (then layer, neuron).
    pub fn new(mut events: Vec<SpikeEvent>, period: f64, n_cycles: usize) -> Self {
        events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.layer.cmp(&b.layer))
                .then(a.neuron.cmp(&b.neuron))
        });
        SpikeRaster {
            events,
            period,
            n_cycles,
        }
    }

    pub fn duration(&self) -> f64 {
        self.period * self.n_cycles as f64
    }

    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &SpikeEvent> + '_ {
        self.events.iter().filter(move |e| e.layer == layer)
    }

    /// Spike times per neuron of one layer, each sorted.
    pub fn trains(&self, layer: usize, n_units: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); n_units];
        for e in self.layer(layer) {
            if e.neuron < n_units {
                out[e.neuron].push(e.time);
            }
        }
        out
    }

    /// Phasors recovered from the spikes of `layer` inside cycle `cycle`.
    /// Silent neurons map to zero.
    pub fn phasors_in_cycle(&self, layer: usize, n_units: usize, cycle: usize) -> Vec<ComplexValue<f64>> {
        let start = cycle as f64 * self.period;
        let end = start + self.period;
        let mut out = vec![ComplexValue::default(); n_units];
        for e in self.layer(layer) {
            if e.neuron < n_units && e.time >= start && e.time < end {
                let theta = time_to_phase(e.time, self.period);
                out[e.neuron] = ComplexValue::new(theta.cos(), theta.sin());
            }
        }
        out
    }

    /// CSV with header `layer,neuron,time_ms`; times keep 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{RASTER_CSV_HEADER}")?;
        for e in &self.events {
            writeln!(w, "{},{},{:.16e}", e.layer, e.neuron, e.time)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, period: f64, n_cycles: usize) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Validation(format!("raster line {}: {e}", i + 1)))?;
            if i == 0 {
                if line.trim() != RASTER_CSV_HEADER {
                    return Err(Error::Validation(format!("raster line 1: expected header `{RASTER_CSV_HEADER}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Validation(format!("raster line {}: malformed record `{line}`", i + 1));
            let mut parts = line.split(',');
            let layer = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let neuron = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let time = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            events.push(SpikeEvent { layer, neuron, time });
        }
        Ok(SpikeRaster::new(events, period, n_cycles))
    }
}

/// `t = theta T / 2pi`, with theta wrapped into `[0, 2pi)`.
pub fn phase_to_time(theta: f64, period: f64) -> f64 {
    let t = theta.rem_euclid(TAU) * period / TAU;
    // rem_euclid can round up to exactly 2pi for tiny negative inputs.
    if t >= period {
        0.0
    } else {
        t
    }
}

/// `theta = 2pi (t mod T) / T`.
pub fn time_to_phase(t: f64, period: f64) -> f64 {
    let theta = TAU * t.rem_euclid(period) / period;
    if theta >= TAU {
        0.0
    } else {
        theta
    }
}

/// Magnitude and transmission delay realizing a complex weight.
pub fn synapse_delay<T: Real>(w: ComplexValue<T>, period: f64) -> (f64, f64) {
    let re = w.re.as_f64();
    let im = w.im.as_f64();
    (re.hypot(im), phase_to_time(im.atan2(re), period))
}

/// Renders the phase-locked steady state of `net` on input `x` as spikes.
///
/// Input neurons fire every cycle from cycle 0; layer `l` first fires in
/// cycle `l` and every cycle after. Inactive units never fire.
pub fn unroll<T: Real>(
    net: &PhasorNetwork<T>,
    x: &ComplexTensor<T>,
    period: f64,
    n_cycles: usize,
) -> Result<SpikeRaster> {
    if !(period > 0.0) {
        return Err(Error::Validation(format!("cycle period must be > 0, got {period}")));
    }
    let trace = forward(net, x)?;
    let mut events = Vec::new();
    for layer in 0..=net.depth() {
        for (neuron, z) in trace.activations(layer, 0).iter().enumerate() {
            if z.norm() <= T::zero() {
                continue;
            }
            let offset = phase_to_time(z.arg().as_f64(), period);
            for cycle in layer..n_cycles {
                events.push(SpikeEvent {
                    layer,
                    neuron,
                    time: cycle as f64 * period + offset,
                });
            }
        }
    }
    Ok(SpikeRaster::new(events, period, n_cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor_net::{dense_stack, predict, Layer, LayerSpec};
    use std::f64::consts::PI;

    type C = ComplexValue<f64>;

    #[test]
    fn phase_time_mapping() {
        assert_eq!(phase_to_time(0.0, 10.0), 0.0);
        assert!((phase_to_time(PI, 10.0) - 5.0).abs() < 1e-12);
        assert!((time_to_phase(2.5, 10.0) - PI / 2.0).abs() < 1e-12);
        assert!((time_to_phase(12.5, 10.0) - PI / 2.0).abs() < 1e-12);
        assert_eq!(time_to_phase(0.0, 10.0), 0.0);
        for k in 0..1000 {
            let theta = k as f64 * TAU / 1000.0;
            assert!((time_to_phase(phase_to_time(theta, 10.0), 10.0) - theta).abs() < 1e-12);
        }
        // Negative phases wrap into [0, T).
        assert!((phase_to_time(-PI / 2.0, 10.0) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn synapse_delay_cases() {
        assert_eq!(synapse_delay(C::new(1.0, 0.0), 10.0), (1.0, 0.0));
        let (m, d) = synapse_delay(C::new(0.0, 2.0), 10.0);
        assert!((m - 2.0).abs() < 1e-15 && (d - 2.5).abs() < 1e-12);
        let (m, d) = synapse_delay(C::new(-1.0, 0.0), 10.0);
        assert!((m - 1.0).abs() < 1e-15 && (d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn output_first_fires_in_cycle_equal_to_depth() {
        let net = PhasorNetwork::<f64>::new(&dense_stack(&[5, 4, 3]), 2).unwrap();
        let x = ComplexTensor::from_phases(&[0.1, 0.2, 3.0, 1.0, 2.0]);
        let raster = unroll(&net, &x, 10.0, 4).unwrap();
        let first_out = raster.layer(2).map(|e| e.time).fold(f64::INFINITY, f64::min);
        assert!((20.0..30.0).contains(&first_out));
        assert!(raster.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(raster.events.iter().all(|e| e.time < raster.duration()));
    }

    #[test]
    fn identity_layer_shifts_by_one_cycle() {
        let mut w = ComplexTensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.set(&[i, i], C::new(1.0, 0.0)).unwrap();
        }
        let net = PhasorNetwork::from_layers(vec![Layer {
            spec: LayerSpec::dense(3, 3),
            weights: w,
            bias: ComplexTensor::zeros(&[3]),
        }])
        .unwrap();
        let x = ComplexTensor::from_phases(&[0.5, 2.0, 3.0]);
        let raster = unroll(&net, &x, 10.0, 3).unwrap();
        let inputs = raster.trains(0, 3);
        let hidden = raster.trains(1, 3);
        for n in 0..3 {
            assert_eq!(hidden[n].len(), 2);
            for (h, i) in hidden[n].iter().zip(&inputs[n]) {
                assert!((h - (i + 10.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steady_state_is_periodic_and_masked_units_are_silent() {
        let mut net = PhasorNetwork::<f64>::new(&dense_stack(&[4, 3, 2]), 6).unwrap();
        for j in 0..4 {
            net.layers_mut()[0].weights.set(&[1, j], C::default()).unwrap();
        }
        let x = ComplexTensor::from_phases(&[0.3, 1.3, 2.3, -1.0]);
        let raster = unroll(&net, &x, 10.0, 6).unwrap();
        let hidden = raster.trains(1, 3);
        assert!(hidden[1].is_empty());
        for train in raster.trains(2, 2).iter().chain(&hidden) {
            for w in train.windows(2) {
                assert!((w[1] - w[0] - 10.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn phasors_recovered_from_raster_predict_identically() {
        let net = PhasorNetwork::<f64>::new(&dense_stack(&[6, 5, 4]), 21).unwrap();
        for k in 0..20 {
            let phases: Vec<f64> = (0..6).map(|i| ((i * 7 + k * 3) % 11) as f64 * 0.5).collect();
            let x = ComplexTensor::from_phases(&phases);
            let trace = forward(&net, &x).unwrap();
            let raster = unroll(&net, &x, 10.0, 4).unwrap();
            for cycle in 2..4 {
                let rec = raster.phasors_in_cycle(2, 4, cycle);
                assert_eq!(predict(&rec), predict(trace.output_row(0)));
            }
        }
    }

    #[test]
    fn global_input_shift_moves_every_spike() {
        let net = PhasorNetwork::<f64>::new(&dense_stack(&[3, 3]), 9).unwrap();
        let base = [0.2, 1.4, 2.9];
        let delta = 0.7;
        let a = unroll(&net, &ComplexTensor::from_phases(&base), 10.0, 2).unwrap();
        let shifted: Vec<f64> = base.iter().map(|p| p + delta).collect();
        let b = unroll(&net, &ComplexTensor::from_phases(&shifted), 10.0, 2).unwrap();
        for layer in 0..2 {
            for (ta, tb) in a.trains(layer, 3).iter().zip(b.trains(layer, 3).iter()) {
                for (x, y) in ta.iter().zip(tb) {
                    let expected = phase_to_time(time_to_phase(*x, 10.0) + delta, 10.0);
                    let got = y.rem_euclid(10.0);
                    let d = (expected - got).abs();
                    assert!(d < 1e-9 || (10.0 - d) < 1e-9);
                }
            }
        }
        let ya = forward(&net, &ComplexTensor::from_phases(&base)).unwrap();
        let yb = forward(&net, &ComplexTensor::from_phases(&shifted)).unwrap();
        assert_eq!(predict(ya.output_row(0)), predict(yb.output_row(0)));
    }

    #[test]
    fn csv_round_trip() {
        let raster = SpikeRaster::new(
            vec![
                SpikeEvent { layer: 1, neuron: 3, time: 12.345678901234567 },
                SpikeEvent { layer: 0, neuron: 0, time: 0.1 },
            ],
            10.0,
            2,
        );
        let mut buf = Vec::new();
        raster.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,neuron,time_ms\n0,0,"));
        let back = SpikeRaster::read_csv(&buf[..], 10.0, 2).unwrap();
        assert_eq!(back, raster);
        let bad = b"layer,neuron,time_ms\n1,2\n";
        let err = SpikeRaster::read_csv(&bad[..], 10.0, 1).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
