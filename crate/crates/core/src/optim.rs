//! Adam over the real and imaginary components of complex parameters.

use serde::{Deserialize, Serialize};

use crate::complex_core::{ComplexValue, Real};
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Moment estimates, one pair per real component. Each complex parameter
/// owns two slots (`re`, `im`) so the moments never mix the components.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<ComplexValue<T>>>,
    pub second_moment: Vec<Vec<ComplexValue<T>>>,
}

impl<T: Real> AdamState<T> {
    /// Fresh state for parameter blocks of the given lengths.
    pub fn new(config: AdamConfig, block_lens: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: block_lens.iter().map(|&n| vec![ComplexValue::default(); n]).collect(),
            second_moment: block_lens.iter().map(|&n| vec![ComplexValue::default(); n]).collect(),
        }
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// All gradients are checked before anything is modified; a non-finite
    /// entry aborts the step and reports its block (`2*layer` for weights,
    /// `2*layer+1` for biases) and index.
    pub fn step(&mut self, params: &mut [&mut [ComplexValue<T>]], grads: &[&[ComplexValue<T>]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Validation(format!(
                "optimizer has {} blocks, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (block, ((p, g), m)) in params.iter().zip(grads).zip(&self.first_moment).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Validation(format!("block {block} length mismatch")));
            }
            if let Some(index) = g.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
                return Err(Error::NonFiniteGradient {
                    layer: block / 2,
                    tensor: if block % 2 == 0 { "weights" } else { "bias" },
                    index,
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let eps = T::from_f64_lossy(c.epsilon);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.learning_rate);

        let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                update(&mut pi.re, gi.re, &mut mi.re, &mut vi.re);
                update(&mut pi.im, gi.im, &mut mi.im, &mut vi.im);
            }
        }
        Ok(())
    }
}
