#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spnn::phasor_net::{backward, batch_loss, encode_target, LayerSpec, TargetEncoding};
use spnn::{ComplexValue, PhasorNetwork};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-8;

pub struct GradCheck {
    pub checked: usize,
    pub worst_excess: f64,
    pub failures: Vec<String>,
}

fn loss_at(net: &PhasorNetwork<f64>, inputs: &[ComplexValue<f64>], batch: usize, targets: &[TargetEncoding]) -> f64 {
    let trace = net.forward_batch(inputs, batch).unwrap();
    batch_loss(&trace, targets)
}

/// Compares every analytic parameter gradient against central differences
/// of the full mean-batch loss.
pub fn check_network(net: PhasorNetwork<f64>, inputs: &[ComplexValue<f64>], batch: usize, targets: &[TargetEncoding]) -> GradCheck {
    let trace = net.forward_batch(inputs, batch).unwrap();
    let grads = backward(&net, &trace, targets).unwrap();
    let analytic: Vec<Vec<ComplexValue<f64>>> = grads.blocks().into_iter().map(|b| b.to_vec()).collect();

    let mut out = GradCheck { checked: 0, worst_excess: 0.0, failures: Vec::new() };
    for (block, grad_block) in analytic.iter().enumerate() {
        for (idx, g) in grad_block.iter().enumerate() {
            for part in 0..2 {
                // Fourth-order central stencil at step h:
                // (-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h.
                let fd = {
                    let eval_at = |offset: f64| {
                        let mut shifted = net.clone();
                        {
                            let mut blocks = shifted.parameter_blocks_mut();
                            let p = &mut blocks[block][idx];
                            if part == 0 { p.re += offset } else { p.im += offset }
                        }
                        loss_at(&shifted, inputs, batch, targets)
                    };
                    let h = FD_STEP;
                    (-eval_at(2.0 * h) + 8.0 * eval_at(h) - 8.0 * eval_at(-h) + eval_at(-2.0 * h)) / (12.0 * h)
                };
                let a = if part == 0 { g.re } else { g.im };
                let allowed = (REL_TOL * a.abs().max(fd.abs())).max(ABS_TOL);
                let err = (a - fd).abs();
                out.worst_excess = out.worst_excess.max(err / allowed);
                out.checked += 1;
                if err > allowed {
                    out.failures.push(format!("block {block} idx {idx} part {part}: analytic {a:e} fd {fd:e}"));
                }
            }
        }
    }
    out
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<ComplexValue<f64>> {
    (0..n)
        .map(|_| {
            let t: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            ComplexValue::new(t.cos(), t.sin())
        })
        .collect()
}

pub fn random_targets(rng: &mut ChaCha8Rng, batch: usize, classes: usize) -> Vec<TargetEncoding> {
    (0..batch).map(|_| encode_target(rng.random_range(0..classes), classes).unwrap()).collect()
}

/// Random small network with random (nonzero) biases.
pub fn randomize_biases(net: &mut PhasorNetwork<f64>, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = ComplexValue::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
    }
}

pub fn random_dense_specs(rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    let mut sizes = vec![rng.random_range(2..=6)];
    let hidden = rng.random_range(1..=2);
    for _ in 0..hidden {
        sizes.push(rng.random_range(2..=5));
    }
    sizes.push(2);
    spnn::phasor_net::dense_stack(&sizes)
}

pub fn random_conv_specs(rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    let cin = rng.random_range(1..=2);
    let c1 = rng.random_range(1..=2);
    let c2 = rng.random_range(1..=2);
    let mut specs = vec![LayerSpec::conv3x3(cin, c1, 8, 8), LayerSpec::conv3x3(c1, c2, 6, 6)];
    specs.extend(spnn::phasor_net::dense_stack(&[c2 * 16, 4, 3]));
    specs
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
