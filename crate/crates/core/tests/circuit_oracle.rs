use std::f64::consts::TAU;

use spnn::circuit::{Circuit, CircuitParams, NeuronState, Stimulus, SynapseState};
use spnn::phasor_net::dense_stack;
use spnn::spikemap::{phase_to_time, synapse_delay, SpikeEvent};
use spnn::{ComplexValue, PhasorNetwork};

/// Samples `(t, V_s, W_s)` of a synapse reset at t = 0.
fn isolated_synapse(p: &CircuitParams, steps: usize) -> Vec<(f64, f64, f64)> {
    let mut s = SynapseState::new(1.0, 0.0);
    s.reset(p);
    (0..=steps)
        .map(|k| {
            let out = (k as f64 * p.dt, s.v_s, s.w_s);
            s.euler_step(p);
            out
        })
        .collect()
}

/// Upward zero crossings of `-V_s`, linearly interpolated.
fn crossings(samples: &[(f64, f64, f64)]) -> Vec<f64> {
    samples
        .windows(2)
        .filter(|w| w[0].1 > 0.0 && w[1].1 <= 0.0)
        .map(|w| w[0].0 + (w[1].0 - w[0].0) * w[0].1 / (w[0].1 - w[1].1))
        .collect()
}

#[test]
fn euler_synapse_follows_discrete_closed_form() {
    // Forward Euler on the undamped oscillator is a scaled rotation:
    // magnitude sqrt(1 + (w dt)^2) and angle atan(w dt) per step.
    let p = CircuitParams::default();
    let omega = p.resonance();
    let amp = p.spike_current / (p.capacitance * omega);
    let g = (1.0 + (omega * p.dt).powi(2)).sqrt();
    let phi = (omega * p.dt).atan();
    for (k, &(_, v, w)) in isolated_synapse(&p, 800).iter().enumerate() {
        let scale = g.powi(k as i32);
        let v_ref = -amp * scale * (k as f64 * phi).sin();
        let w_ref = p.spike_current * scale * (k as f64 * phi).cos();
        assert!((v - v_ref).abs() <= 1e-10 * amp, "step {k}: {v} vs {v_ref}");
        assert!((w - w_ref).abs() <= 1e-10 * p.spike_current, "step {k}: {w} vs {w_ref}");
    }
}

#[test]
fn synapse_period_within_one_step_and_error_shrinks_with_dt() {
    let mut worst = Vec::new();
    for dt in [0.025, 0.0125] {
        let mut p = CircuitParams::default();
        p.dt = dt;
        let steps = (3.0 * p.period / dt).round() as usize;
        let samples = isolated_synapse(&p, steps);
        let zc = crossings(&samples);
        assert!(zc.len() >= 2);
        for pair in zc.windows(2) {
            assert!(((pair[1] - pair[0]) - p.period).abs() <= dt, "period {} at dt {dt}", pair[1] - pair[0]);
        }
        let omega = TAU / p.period;
        let amp = p.spike_current / (p.capacitance * omega);
        let one_period = (p.period / dt).round() as usize;
        let err = samples[..=one_period]
            .iter()
            .map(|&(t, v, _)| (v + amp * (omega * t).sin()).abs() / amp)
            .fold(0.0, f64::max);
        worst.push(err);
    }
    assert!(worst[1] < worst[0], "{worst:?}");
}

#[test]
fn soma_relaxes_to_coupled_steady_state() {
    // Constant dendrite drive: V_m follows g_c (V_d - mean) / (g_l + g_c)
    // quasi-statically (the mean drifts slowly) and decays back toward zero
    // as the running mean reaches V_d.
    let p = CircuitParams::default();
    let mut n = NeuronState::default();
    let v_d = 1.0;
    for _ in 0..40 {
        n.euler_step(v_d, &p);
    }
    let expected = p.coupling_conductance * (v_d - n.v_d_mean) / (p.leak_conductance + p.coupling_conductance);
    assert!((n.v_m - expected).abs() < 1e-2 * expected, "{} vs {expected}", n.v_m);
    for _ in 0..20_000 {
        n.euler_step(v_d, &p);
    }
    assert!(n.v_m.abs() < 1e-6 && (n.v_d_mean - v_d).abs() < 1e-6);
}

/// Per-synapse reference simulation with a plain sorted delivery list.
fn brute_force(net: &PhasorNetwork<f64>, p: &CircuitParams, lag: f64, stimuli: &[(&[f32], usize)]) -> Vec<SpikeEvent> {
    let depth = net.depth();
    let sizes: Vec<usize> = (0..=depth).map(|l| net.units(l)).collect();
    // Source key: (layer, neuron) for units, (usize::MAX, layer) for bias refs.
    struct Syn {
        source: (usize, usize),
        post: (usize, usize),
        state: SynapseState,
    }
    let mut syns = Vec::new();
    for (li, layer) in net.layers().iter().enumerate() {
        let n_in = sizes[li];
        for (k, w) in layer.weights.data().iter().enumerate() {
            if w.norm() > 0.0 {
                let (m, d) = synapse_delay(*w, p.period);
                syns.push(Syn { source: (li, k % n_in), post: (li + 1, k / n_in), state: SynapseState::new(m, d) });
            }
        }
        for (i, b) in layer.bias.data().iter().enumerate() {
            if b.norm() > 0.0 {
                let (m, d) = synapse_delay(*b, p.period);
                syns.push(Syn { source: (usize::MAX, li + 1), post: (li + 1, i), state: SynapseState::new(m, d) });
            }
        }
    }
    let mut somas: Vec<Vec<NeuronState>> = sizes.iter().map(|&n| vec![NeuronState::default(); n]).collect();
    let mut pending: Vec<(f64, usize)> = Vec::new();
    let mut events = Vec::new();
    let cycles: Vec<Vec<f64>> = stimuli
        .iter()
        .flat_map(|(px, n)| {
            let phases = net.encode(px).unwrap().phases();
            std::iter::repeat_n(phases, *n)
        })
        .collect();
    let spc = p.period / p.dt;
    let n_steps = (cycles.len() as f64 * spc).round() as usize;
    let fire = |pending: &mut Vec<(f64, usize)>, syns: &[Syn], src: (usize, usize), t: f64| {
        for (s, syn) in syns.iter().enumerate() {
            if syn.source == src {
                pending.push((t + syn.state.delay, s));
            }
        }
    };
    for step in 0..=n_steps {
        let now = step as f64 * p.dt;
        let mut prev = Vec::new();
        if step > 0 {
            let mut v_d: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for syn in &syns {
                v_d[syn.post.0][syn.post.1] += syn.state.potential();
            }
            for l in 1..=depth {
                for (i, n) in somas[l].iter_mut().enumerate() {
                    prev.push(n.v_m);
                    n.euler_step(v_d[l][i], p);
                }
            }
            for syn in &mut syns {
                syn.state.euler_step(p);
            }
        }
        for (c, phases) in cycles.iter().enumerate() {
            if (c as f64 * spc).round() as usize == step {
                for (j, th) in phases.iter().enumerate() {
                    let t = c as f64 * p.period + phase_to_time(*th, p.period);
                    events.push(SpikeEvent { layer: 0, neuron: j, time: t });
                    fire(&mut pending, &syns, (0, j), t);
                }
                for l in 1..=depth {
                    let t = c as f64 * p.period + phase_to_time((l - 1) as f64 * lag, p.period);
                    fire(&mut pending, &syns, (usize::MAX, l), t);
                }
            }
        }
        if step > 0 {
            let mut k = 0;
            for l in 1..=depth {
                for i in 0..sizes[l] {
                    if let Some(t) = somas[l][i].detect_and_fire(prev[k], p, now) {
                        events.push(SpikeEvent { layer: l, neuron: i, time: t });
                        fire(&mut pending, &syns, (l, i), t);
                    }
                    k += 1;
                }
            }
        }
        pending.sort_by(|a, b| a.0.total_cmp(&b.0));
        let due = pending.iter().take_while(|(t, _)| ((t / p.dt).round() as usize) <= step).count();
        for (_, s) in pending.drain(..due) {
            syns[s].state.reset(p);
        }
    }
    events
}

#[test]
fn aggregated_integration_matches_per_synapse_reference() {
    let mut net = PhasorNetwork::<f64>::new(&dense_stack(&[5, 4, 3]), 17).unwrap();
    net.layers_mut()[0].bias.data_mut()[2] = ComplexValue::new(-0.3, 0.4);
    net.layers_mut()[1].bias.data_mut()[0] = ComplexValue::new(0.1, 0.25);
    net.layers_mut()[0].weights.data_mut()[3] = ComplexValue::new(0.0, 0.0);
    let mut p = CircuitParams::default();
    p.threshold = 0.004;
    let lag = 2.9;
    let circuit = Circuit::build_with_lag(&net, p, lag).unwrap();
    let a: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let b: [f32; 5] = [0.9, 0.1, 0.8, 0.3, 0.0];
    let run = circuit
        .run(&[Stimulus { pixels: &a, n_cycles: 8 }, Stimulus { pixels: &b, n_cycles: 8 }], &[])
        .unwrap();
    let mut reference = brute_force(&net, &p, lag, &[(&a, 8), (&b, 8)]);
    reference.sort_by(|x, y| x.time.total_cmp(&y.time).then(x.layer.cmp(&y.layer)).then(x.neuron.cmp(&y.neuron)));
    let hidden = run.raster.events.iter().filter(|e| e.layer > 0).count();
    assert!(hidden > 20, "only {hidden} soma spikes");
    assert_eq!(run.raster.events.len(), reference.len());
    for (x, y) in run.raster.events.iter().zip(&reference) {
        assert_eq!((x.layer, x.neuron), (y.layer, y.neuron));
        assert!((x.time - y.time).abs() < 1e-9, "{x:?} vs {y:?}");
    }
}
