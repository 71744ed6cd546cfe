//! Phasor networks: input/target encoders, the threshold-and-normalize
//! activation, batched forward inference, the phase-alignment loss and
//! complex-domain backpropagation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::complex_core::{
    col2im_add, conv_output_extent, gemm, im2col, phasor, ComplexTensor, ComplexValue, MatRef,
    Real, KERNEL_SIZE,
};
use crate::error::{Error, Result};

/// Target phase of the labelled class.
pub const POSITIVE_PHASE: f64 = PI;
/// Target phase of every other class.
pub const NEGATIVE_PHASE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid 3x3 convolution; `height`/`width` are the input's spatial extent.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Activation threshold. Fixed during training.
    pub threshold: f64,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { inputs, outputs },
            threshold: 0.0,
        }
    }

    pub fn conv3x3(in_channels: usize, out_channels: usize, height: usize, width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
            },
            threshold: 0.0,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inputs, .. } => vec![inputs],
            LayerKind::Conv3x3 {
                in_channels,
                height,
                width,
                ..
            } => vec![in_channels, height, width],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { outputs, .. } => vec![outputs],
            LayerKind::Conv3x3 {
                out_channels,
                height,
                width,
                ..
            } => vec![
                out_channels,
                conv_output_extent(height),
                conv_output_extent(width),
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => vec![out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv3x3 { out_channels, .. } => out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv3x3 { in_channels, .. } => in_channels * KERNEL_SIZE * KERNEL_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::Validation(format!(
                "layer threshold must be a finite value >= 0, got {}",
                self.threshold
            )));
        }
        let degenerate = match self.kind {
            LayerKind::Dense { inputs, outputs } => inputs == 0 || outputs == 0,
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
            } => {
                in_channels == 0
                    || out_channels == 0
                    || height < KERNEL_SIZE
                    || width < KERNEL_SIZE
            }
        };
        if degenerate {
            return Err(Error::Validation(format!("degenerate layer {:?}", self.kind)));
        }
        Ok(())
    }
}

/// Fully connected stack, e.g. `[784, 512, 512, 10]`.
pub fn dense_stack(sizes: &[usize]) -> Vec<LayerSpec> {
    sizes
        .windows(2)
        .map(|w| LayerSpec::dense(w[0], w[1]))
        .collect()
}

/// conv(6,3x3) -> conv(16,3x3) -> FC128 -> FC128 -> FC`n_classes`, no pooling.
pub fn conv_stack(channels: usize, height: usize, width: usize, n_classes: usize) -> Vec<LayerSpec> {
    let c1 = LayerSpec::conv3x3(channels, 6, height, width);
    let (h1, w1) = (conv_output_extent(height), conv_output_extent(width));
    let c2 = LayerSpec::conv3x3(6, 16, h1, w1);
    let flat = c2.output_len();
    let mut layers = vec![c1, c2];
    layers.extend(dense_stack(&[flat, 128, 128, n_classes]));
    layers
}

/// Fixed per-input phase offsets, drawn once per model from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShift {
    pub seed: u64,
    pub shifts: Vec<f64>,
}

impl PhaseShift {
    /// Uniform draws on `[0, 2pi)`.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        PhaseShift {
            seed,
            shifts: (0..len).map(|_| dist.sample(&mut rng)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer<T: Real> {
    pub spec: LayerSpec,
    pub weights: ComplexTensor<T>,
    pub bias: ComplexTensor<T>,
}

#[derive(Debug, Clone)]
pub struct PhasorNetwork<T: Real> {
    layers: Vec<Layer<T>>,
    input_shift: Option<PhaseShift>,
}

impl<T: Real> PhasorNetwork<T> {
    /// Gaussian initialization: real and imaginary parts independent with
    /// standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::with_init_gain(specs, seed, 1.0)
    }

    /// Like [`PhasorNetwork::new`] with standard deviation `gain/sqrt(fan_in)`.
    ///
    /// The activation ignores the scale of its input, so the gain changes
    /// nothing in the forward pass. It sets how far a fixed-size optimizer
    /// step moves a unit's phase.
    pub fn with_init_gain(specs: &[LayerSpec], seed: u64, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Validation(format!("init gain must be positive and finite, got {gain}")));
        }
        check_chain(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|spec| {
                let std = gain / (spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let shape = spec.weight_shape();
                let len: usize = shape.iter().product();
                let data = (0..len)
                    .map(|_| {
                        let re = normal.sample(&mut rng);
                        let im = normal.sample(&mut rng);
                        ComplexValue::new(T::from_f64_lossy(re), T::from_f64_lossy(im))
                    })
                    .collect();
                Layer {
                    spec: *spec,
                    weights: ComplexTensor::from_vec(&shape, data).expect("shape"),
                    bias: ComplexTensor::zeros(&[spec.bias_len()]),
                }
            })
            .collect();
        Ok(PhasorNetwork {
            layers,
            input_shift: None,
        })
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|l| l.spec).collect();
        check_chain(&specs)?;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.shape() != layer.spec.weight_shape().as_slice() {
                return Err(Error::Dimension {
                    context: "layer weights",
                    expected: layer.spec.weight_shape(),
                    actual: layer.weights.shape().to_vec(),
                });
            }
            if layer.bias.len() != layer.spec.bias_len() {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: vec![layer.spec.bias_len()],
                    actual: layer.bias.shape().to_vec(),
                });
            }
            if !layer.weights.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Validation(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(PhasorNetwork {
            layers,
            input_shift: None,
        })
    }

    pub fn with_input_shift(mut self, shift: Option<PhaseShift>) -> Result<Self> {
        if let Some(s) = &shift {
            if s.shifts.len() != self.input_len() {
                return Err(Error::Dimension {
                    context: "input phase shift",
                    expected: vec![self.input_len()],
                    actual: vec![s.shifts.len()],
                });
            }
        }
        self.input_shift = shift;
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shift(&self) -> Option<&PhaseShift> {
        self.input_shift.as_ref()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].spec.input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty").spec.output_len()
    }

    /// Unit count of layer `l`, where layer 0 is the input.
    pub fn units(&self, l: usize) -> usize {
        if l == 0 {
            self.input_len()
        } else {
            self.layers[l - 1].spec.output_len()
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameter blocks in a fixed order: `W0, b0, W1, b1, ...`.
    pub fn parameter_blocks_mut(&mut self) -> Vec<&mut [ComplexValue<T>]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weights.data_mut());
            out.push(layer.bias.data_mut());
        }
        out
    }

    /// Encodes pixels and applies the model's input phase shift, if any.
    pub fn encode(&self, pixels: &[f32]) -> Result<ComplexTensor<T>> {
        if pixels.len() != self.input_len() {
            return Err(Error::Dimension {
                context: "input pixels",
                expected: vec![self.input_len()],
                actual: vec![pixels.len()],
            });
        }
        let x = encode_input(pixels)?;
        Ok(match &self.input_shift {
            Some(s) => apply_input_phase_shift(&x, &s.shifts)?,
            None => x,
        })
    }

    /// Runs a batch of `batch` inputs stored contiguously, `batch * input_len`.
    pub fn forward_batch(&self, inputs: &[ComplexValue<T>], batch: usize) -> Result<ForwardTrace<T>> {
        if inputs.len() != batch * self.input_len() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: vec![batch, self.input_len()],
                actual: vec![inputs.len()],
            });
        }
        let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = traces.last().map_or(inputs, |t| t.act.data());
            let pre = linear_forward(layer, prev, batch);
            let theta = T::from_f64_lossy(layer.spec.threshold);
            let mut mask = Vec::with_capacity(pre.len());
            let act = pre
                .iter()
                .map(|&z| {
                    let h = tpam_activation(z, theta);
                    mask.push(h != ComplexValue::default());
                    h
                })
                .collect();
            let mut shape = vec![batch];
            shape.extend(layer.spec.output_shape());
            traces.push(LayerTrace {
                pre: ComplexTensor::from_vec(&shape, pre)?,
                act: ComplexTensor::from_vec(&shape, act)?,
                mask,
            });
        }
        Ok(ForwardTrace {
            batch,
            input: inputs.to_vec(),
            layers: traces,
        })
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Validation("network needs at least one layer".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    for pair in specs.windows(2) {
        if pair[0].output_len() != pair[1].input_len() {
            return Err(Error::Dimension {
                context: "layer chain",
                expected: pair[0].output_shape(),
                actual: pair[1].input_shape(),
            });
        }
    }
    Ok(())
}

fn linear_forward<T: Real>(layer: &Layer<T>, prev: &[ComplexValue<T>], batch: usize) -> Vec<ComplexValue<T>> {
    let spec = &layer.spec;
    let out_len = spec.output_len();
    let mut out = Vec::with_capacity(batch * out_len);
    match spec.kind {
        LayerKind::Dense { inputs, outputs } => {
            for _ in 0..batch {
                out.extend_from_slice(layer.bias.data());
            }
            gemm(
                batch,
                inputs,
                outputs,
                MatRef::row_major(prev, inputs),
                MatRef::transposed(layer.weights.data(), inputs),
                true,
                &mut out,
                outputs,
            );
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
        } => {
            let p = out_len / out_channels;
            let rows = in_channels * KERNEL_SIZE * KERNEL_SIZE;
            let in_len = spec.input_len();
            let mut col = vec![ComplexValue::default(); rows * p];
            for b in 0..batch {
                for &bias in layer.bias.data() {
                    out.extend(std::iter::repeat_n(bias, p));
                }
                im2col(&prev[b * in_len..(b + 1) * in_len], in_channels, height, width, &mut col);
                gemm(
                    out_channels,
                    rows,
                    p,
                    MatRef::row_major(layer.weights.data(), rows),
                    MatRef::row_major(&col, p),
                    true,
                    &mut out[b * out_len..(b + 1) * out_len],
                    p,
                );
            }
        }
    }
    out
}

/// Per-layer pre-activations, activations and active masks for one batch.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Real> {
    pub pre: ComplexTensor<T>,
    pub act: ComplexTensor<T>,
    /// `|z| - threshold > 0`
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real> {
    pub batch: usize,
    pub input: Vec<ComplexValue<T>>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Real> ForwardTrace<T> {
    /// Output activations, `[batch, n_out]`.
    pub fn output(&self) -> &ComplexTensor<T> {
        &self.layers.last().expect("non-empty").act
    }

    pub fn output_row(&self, b: usize) -> &[ComplexValue<T>] {
        let out = self.output();
        let n = out.len() / self.batch;
        &out.data()[b * n..(b + 1) * n]
    }

    /// Activations of layer `l` (0 = input) for example `b`.
    pub fn activations(&self, l: usize, b: usize) -> &[ComplexValue<T>] {
        let data = if l == 0 {
            &self.input[..]
        } else {
            self.layers[l - 1].act.data()
        };
        let n = data.len() / self.batch;
        &data[b * n..(b + 1) * n]
    }
}

/// Single-example forward pass.
pub fn forward<T: Real>(net: &PhasorNetwork<T>, x: &ComplexTensor<T>) -> Result<ForwardTrace<T>> {
    net.forward_batch(x.data(), 1)
}

/// Maps pixel intensities in `[0, 1]` to unit phasors with phase
/// `pi * (1 - p)`: bright pixels sit at phase 0, dark ones at pi.
pub fn encode_input<T: Real>(pixels: &[f32]) -> Result<ComplexTensor<T>> {
    let mut data = Vec::with_capacity(pixels.len());
    for (i, &p) in pixels.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!("pixel {i} = {p} outside [0, 1]")));
        }
        data.push(phasor(T::from_f64_lossy(PI * (1.0 - f64::from(p)))));
    }
    ComplexTensor::from_vec(&[pixels.len()], data)
}

/// `x_i <- x_i e^{i shift_i}`.
pub fn apply_input_phase_shift<T: Real>(x: &ComplexTensor<T>, shifts: &[f64]) -> Result<ComplexTensor<T>> {
    if shifts.len() != x.len() {
        return Err(Error::Dimension {
            context: "phase shift length",
            expected: x.shape().to_vec(),
            actual: vec![shifts.len()],
        });
    }
    let data = x
        .data()
        .iter()
        .zip(shifts)
        .map(|(&v, &s)| v * phasor(T::from_f64_lossy(s)))
        .collect();
    ComplexTensor::from_vec(x.shape(), data)
}

/// Binary phase-shift-keyed class target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoding {
    pub class: usize,
    pub phases: Vec<f64>,
}

impl TargetEncoding {
    pub fn phasors<T: Real>(&self) -> impl Iterator<Item = ComplexValue<T>> + '_ {
        self.phases.iter().map(|&p| phasor(T::from_f64_lossy(p)))
    }
}

pub fn encode_target(class: usize, n_classes: usize) -> Result<TargetEncoding> {
    if class >= n_classes {
        return Err(Error::Validation(format!(
            "class {class} out of range for {n_classes} classes"
        )));
    }
    let phases = (0..n_classes)
        .map(|i| if i == class { POSITIVE_PHASE } else { NEGATIVE_PHASE })
        .collect();
    Ok(TargetEncoding { class, phases })
}

/// `z/|z|` if `|z| - theta > 0`, else exactly zero.
#[inline]
pub fn tpam_activation<T: Real>(z: ComplexValue<T>, theta: T) -> ComplexValue<T> {
    let mag = z.norm();
    if mag - theta > T::zero() {
        ComplexValue::new(z.re / mag, z.im / mag)
    } else {
        ComplexValue::default()
    }
}

/// Half squared distance to the target phasors. An inactive output
/// (magnitude 0) contributes `1/2`.
pub fn loss<T: Real>(output: &[ComplexValue<T>], target: &TargetEncoding) -> T {
    let half = T::from_f64_lossy(0.5);
    output
        .iter()
        .zip(target.phasors::<T>())
        .map(|(&yh, y)| half * (y - yh).norm_sqr())
        .fold(T::zero(), |a, b| a + b)
}

/// `N - sum cos(theta_i - theta_hat_i)` for all-active outputs given by phase.
pub fn loss_cosine(output_phases: &[f64], target: &TargetEncoding) -> f64 {
    output_phases.len() as f64
        - output_phases
            .iter()
            .zip(&target.phases)
            .map(|(&est, &tgt)| (tgt - est).cos())
            .sum::<f64>()
}

/// Derivative of the cosine loss with respect to an estimated phase.
pub fn loss_phase_gradient(theta: f64, theta_hat: f64) -> f64 {
    (theta - theta_hat).sin()
}

/// Mean loss over a traced batch.
pub fn batch_loss<T: Real>(trace: &ForwardTrace<T>, targets: &[TargetEncoding]) -> T {
    let total = targets
        .iter()
        .enumerate()
        .map(|(b, t)| loss(trace.output_row(b), t))
        .fold(T::zero(), |a, b| a + b);
    total / T::from_usize(trace.batch.max(1)).expect("usize")
}

/// Real Jacobian of `z/|z|` as `[[du/da, du/db], [dv/da, dv/db]]`.
pub fn activation_jacobian<T: Real>(z: ComplexValue<T>) -> Result<[[T; 2]; 2]> {
    let mag = z.norm();
    if mag <= T::zero() {
        return Err(Error::Validation(
            "normalization Jacobian is singular at z = 0".into(),
        ));
    }
    Ok(jacobian_unchecked(z, mag))
}

#[inline]
fn jacobian_unchecked<T: Real>(z: ComplexValue<T>, mag: T) -> [[T; 2]; 2] {
    let (a, b) = (z.re, z.im);
    let cube = mag * mag * mag;
    let cross = -(a * b) / cube;
    [[b * b / cube, cross], [cross, a * a / cube]]
}

/// The four partials folded into one complex number:
/// `(du/da + dv/da) + i (du/db + dv/db)`.
pub fn combined_derivative<T: Real>(z: ComplexValue<T>) -> Result<ComplexValue<T>> {
    let j = activation_jacobian(z)?;
    Ok(ComplexValue::new(j[0][0] + j[1][0], j[0][1] + j[1][1]))
}

/// Gradient of one layer. Complex entries hold `dL/dRe + i dL/dIm`.
#[derive(Debug, Clone)]
pub struct LayerGradient<T: Real> {
    pub weights: Vec<ComplexValue<T>>,
    pub bias: Vec<ComplexValue<T>>,
    /// Always zero: thresholds are not trained.
    pub threshold: T,
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub layers: Vec<LayerGradient<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &PhasorNetwork<T>) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![ComplexValue::default(); l.weights.len()],
                    bias: vec![ComplexValue::default(); l.bias.len()],
                    threshold: T::zero(),
                })
                .collect(),
        }
    }

    /// Blocks in the same order as [`PhasorNetwork::parameter_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[ComplexValue<T>]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights[..], &l.bias[..]])
            .collect()
    }

    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().chain(a.bias.iter_mut()).zip(b.weights.iter().chain(&b.bias)) {
                *x = *x + *y * scale;
            }
        }
    }
}

/// Backpropagates the mean batch loss through `trace`.
///
/// Inactive units pass exactly zero gradient; the threshold mask is held
/// fixed.
pub fn backward<T: Real>(
    net: &PhasorNetwork<T>,
    trace: &ForwardTrace<T>,
    targets: &[TargetEncoding],
) -> Result<Gradients<T>> {
    let batch = trace.batch;
    if trace.layers.len() != net.depth() || targets.len() != batch {
        return Err(Error::Validation(format!(
            "trace has {} layers / batch {}, network has {} layers, {} targets",
            trace.layers.len(),
            batch,
            net.depth(),
            targets.len()
        )));
    }
    for (layer, lt) in net.layers().iter().zip(&trace.layers) {
        if lt.pre.len() != batch * layer.spec.output_len() {
            return Err(Error::Validation("trace does not match network shapes".into()));
        }
    }
    let n_out = net.output_len();
    if targets.iter().any(|t| t.phases.len() != n_out) {
        return Err(Error::Validation("target width does not match output layer".into()));
    }

    let inv_batch = T::one() / T::from_usize(batch).expect("usize");
    let mut grad_act: Vec<ComplexValue<T>> = Vec::with_capacity(batch * n_out);
    for (b, target) in targets.iter().enumerate() {
        for (&yh, y) in trace.output_row(b).iter().zip(target.phasors::<T>()) {
            grad_act.push((yh - y) * inv_batch);
        }
    }

    let mut grads = Gradients::zeros_like(net);
    for l in (0..net.depth()).rev() {
        let layer = &net.layers()[l];
        let lt = &trace.layers[l];
        let grad_pre: Vec<ComplexValue<T>> = lt
            .pre
            .data()
            .iter()
            .zip(&lt.mask)
            .zip(&grad_act)
            .map(|((&z, &active), &g)| {
                if !active {
                    return ComplexValue::default();
                }
                // The Jacobian is symmetric, so J^T g == J g.
                let j = jacobian_unchecked(z, z.norm());
                ComplexValue::new(j[0][0] * g.re + j[0][1] * g.im, j[1][0] * g.re + j[1][1] * g.im)
            })
            .collect();
        let prev = if l == 0 {
            &trace.input[..]
        } else {
            trace.layers[l - 1].act.data()
        };
        let need_input_grad = l > 0;
        let (lg, grad_prev) = linear_backward(layer, prev, &grad_pre, batch, need_input_grad);
        grads.layers[l] = lg;
        if let Some(g) = grad_prev {
            grad_act = g;
        }
    }
    Ok(grads)
}

fn conjugated<T: Real>(data: &[ComplexValue<T>]) -> Vec<ComplexValue<T>> {
    data.iter().map(|z| z.conj()).collect()
}

fn linear_backward<T: Real>(
    layer: &Layer<T>,
    prev: &[ComplexValue<T>],
    grad_pre: &[ComplexValue<T>],
    batch: usize,
    need_input_grad: bool,
) -> (LayerGradient<T>, Option<Vec<ComplexValue<T>>>) {
    let spec = &layer.spec;
    let mut gw = vec![ComplexValue::default(); layer.weights.len()];
    let mut gb = vec![ComplexValue::default(); layer.bias.len()];
    let mut gprev = need_input_grad.then(|| vec![ComplexValue::default(); prev.len()]);
    match spec.kind {
        LayerKind::Dense { inputs, outputs } => {
            // dW = G^T conj(H), db = column sums of G, dH = G conj(W).
            let prev_conj = conjugated(prev);
            gemm(
                outputs,
                batch,
                inputs,
                MatRef::transposed(grad_pre, outputs),
                MatRef::row_major(&prev_conj, inputs),
                false,
                &mut gw,
                inputs,
            );
            for row in grad_pre.chunks_exact(outputs) {
                for (acc, &g) in gb.iter_mut().zip(row) {
                    *acc = *acc + g;
                }
            }
            if let Some(gp) = gprev.as_mut() {
                let w_conj = conjugated(layer.weights.data());
                gemm(
                    batch,
                    outputs,
                    inputs,
                    MatRef::row_major(grad_pre, outputs),
                    MatRef::row_major(&w_conj, inputs),
                    false,
                    gp,
                    inputs,
                );
            }
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            height,
            width,
        } => {
            let out_len = spec.output_len();
            let in_len = spec.input_len();
            let p = out_len / out_channels;
            let rows = in_channels * KERNEL_SIZE * KERNEL_SIZE;
            let mut col = vec![ComplexValue::default(); rows * p];
            let k_conj = conjugated(layer.weights.data());
            let mut gcol = vec![ComplexValue::default(); rows * p];
            for b in 0..batch {
                let g_out = &grad_pre[b * out_len..(b + 1) * out_len];
                im2col(&prev[b * in_len..(b + 1) * in_len], in_channels, height, width, &mut col);
                col.iter_mut().for_each(|z| *z = z.conj());
                gemm(
                    out_channels,
                    p,
                    rows,
                    MatRef::row_major(g_out, p),
                    MatRef::transposed(&col, p),
                    true,
                    &mut gw,
                    rows,
                );
                for (f, acc) in gb.iter_mut().enumerate() {
                    *acc = g_out[f * p..(f + 1) * p].iter().fold(*acc, |s, &g| s + g);
                }
                if let Some(gp) = gprev.as_mut() {
                    gemm(
                        rows,
                        out_channels,
                        p,
                        MatRef::transposed(&k_conj, rows),
                        MatRef::row_major(g_out, p),
                        false,
                        &mut gcol,
                        p,
                    );
                    col2im_add(&gcol, in_channels, height, width, &mut gp[b * in_len..(b + 1) * in_len]);
                }
            }
        }
    }
    (
        LayerGradient {
            weights: gw,
            bias: gb,
            threshold: T::zero(),
        },
        gprev,
    )
}

/// Index of the active output most out of phase with the other active
/// outputs: `argmax_i mean_{j != i} (1 - cos(theta_i - theta_j))`.
/// Ties go to the lowest index. `None` when no output is active.
pub fn predict<T: Real>(output: &[ComplexValue<T>]) -> Option<usize> {
    let active: Vec<(usize, f64, f64)> = output
        .iter()
        .enumerate()
        .filter(|(_, z)| z.norm() > T::zero())
        .map(|(i, z)| {
            let m = z.norm().as_f64();
            (i, z.re.as_f64() / m, z.im.as_f64() / m)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for &(i, ci, si) in &active {
        let others = active.len() - 1;
        let score = if others == 0 {
            0.0
        } else {
            active
                .iter()
                .filter(|(j, _, _)| *j != i)
                .map(|&(_, cj, sj)| 1.0 - (ci * cj + si * sj))
                .sum::<f64>()
                / others as f64
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}
