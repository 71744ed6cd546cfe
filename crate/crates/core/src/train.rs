//! Mini-batch training and phasor-domain evaluation.

use rayon::prelude::*;

use crate::complex_core::{ComplexValue, Real};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::phasor_net::{backward, batch_loss, encode_target, predict, Gradients, PhasorNetwork, TargetEncoding};

pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Weight init gain used by the presets (see
/// [`PhasorNetwork::with_init_gain`]). With Adam's roughly fixed step
/// size, a unit-gain init lets each update rotate wide layers' phases
/// so far that training stalls.
pub const DEFAULT_INIT_GAIN: f64 = 10.0;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Shuffling seed. Epoch `e` uses stream `e` of this seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Error rate over the epoch's mini-batches, measured before each update.
    pub train_err: f64,
    pub test_err: f64,
    /// Mean per-example loss over the epoch.
    pub loss: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_err,test_err,loss";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.9}", self.epoch, self.train_err, self.test_err, self.loss)
    }
}

/// Encodes examples `indices` of `ds` as one contiguous batch.
pub fn encode_batch<T: Real>(net: &PhasorNetwork<T>, ds: &Dataset, indices: &[usize]) -> Result<Vec<ComplexValue<T>>> {
    let mut out = Vec::with_capacity(indices.len() * net.input_len());
    for &i in indices {
        out.extend_from_slice(net.encode(ds.image(i))?.data());
    }
    Ok(out)
}

fn check_dataset<T: Real>(net: &PhasorNetwork<T>, ds: &Dataset) -> Result<()> {
    if ds.image_len() != net.input_len() {
        return Err(Error::Dimension {
            context: "dataset image size vs network input",
            expected: vec![net.input_len()],
            actual: vec![ds.image_len()],
        });
    }
    if net.output_len() < 2 {
        return Err(Error::Validation("the network needs at least two outputs".into()));
    }
    Ok(())
}

/// Gradient and summed loss of one batch, split across the rayon pool.
fn batch_gradient<T: Real>(
    net: &PhasorNetwork<T>,
    inputs: &[ComplexValue<T>],
    targets: &[TargetEncoding],
) -> Result<(Gradients<T>, f64, usize)> {
    let n = targets.len();
    let per = n.div_ceil(rayon::current_num_threads()).max(8);
    let in_len = net.input_len();
    let parts: Vec<Result<(Gradients<T>, f64, usize, usize)>> = targets
        .par_chunks(per)
        .enumerate()
        .map(|(k, tg)| {
            let x = &inputs[k * per * in_len..(k * per + tg.len()) * in_len];
            let trace = net.forward_batch(x, tg.len())?;
            let g = backward(net, &trace, tg)?;
            let loss = batch_loss(&trace, tg).as_f64() * tg.len() as f64;
            let correct = (0..tg.len()).filter(|&b| predict(trace.output_row(b)) == Some(tg[b].class)).count();
            Ok((g, loss, correct, tg.len()))
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let mut correct = 0;
    for part in parts {
        let (g, l, c, len) = part?;
        total.add_scaled(&g, T::from_f64_lossy(len as f64 / n as f64));
        loss += l;
        correct += c;
    }
    Ok((total, loss, correct))
}

/// Runs one epoch of Adam updates. Returns `(mean loss, train error)`.
pub fn train_epoch<T: Real>(
    net: &mut PhasorNetwork<T>,
    adam: &mut AdamState<T>,
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<(f64, f64)> {
    check_dataset(net, ds)?;
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let n_out = net.output_len();
    let mut loss = 0.0;
    let mut correct = 0;
    for batch in BatchIterator::new(ds.len(), batch_size, seed, epoch) {
        let inputs = encode_batch(net, ds, &batch)?;
        let targets = batch
            .iter()
            .map(|&i| encode_target(ds.label(i), n_out))
            .collect::<Result<Vec<_>>>()?;
        let (grads, l, c) = batch_gradient(net, &inputs, &targets)?;
        loss += l;
        correct += c;
        let blocks = grads.blocks();
        adam.step(&mut net.parameter_blocks_mut(), &blocks)?;
    }
    let n = ds.len() as f64;
    Ok((loss / n, 1.0 - correct as f64 / n))
}

/// Phasor-domain predictions for every example of `ds`.
pub fn predictions<T: Real>(net: &PhasorNetwork<T>, ds: &Dataset) -> Result<Vec<Option<usize>>> {
    check_dataset(net, ds)?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<Result<Vec<Option<usize>>>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let x = encode_batch(net, ds, idx)?;
            let trace = net.forward_batch(&x, idx.len())?;
            Ok((0..idx.len()).map(|b| predict(trace.output_row(b))).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(ds.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fraction of examples whose prediction differs from the label. A
/// network with no active output counts as wrong.
pub fn error_rate<T: Real>(net: &PhasorNetwork<T>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let preds = predictions(net, ds)?;
    let wrong = preds.iter().enumerate().filter(|(i, p)| **p != Some(ds.label(*i))).count();
    Ok(wrong as f64 / ds.len() as f64)
}

/// Trains for `config.epochs` epochs, evaluating on `test` after each and
/// reporting every epoch through `on_epoch`.
pub fn fit<T: Real>(
    net: &mut PhasorNetwork<T>,
    adam: &mut AdamState<T>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &PhasorNetwork<T>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut history = Vec::with_capacity(config.epochs);
    let first = adam.step / train.len().div_ceil(config.batch_size.max(1)).max(1) as u64;
    for e in 0..config.epochs {
        let epoch = first + e as u64;
        let (loss, train_err) = train_epoch(net, adam, train, config.batch_size, config.seed, epoch)?;
        let m = EpochMetrics {
            epoch: epoch as usize + 1,
            train_err,
            test_err: error_rate(net, test)?,
            loss,
        };
        on_epoch(&m, net)?;
        history.push(m);
    }
    Ok(history)
}

/// Fresh optimizer state sized for `net`.
pub fn adam_for<T: Real>(net: &PhasorNetwork<T>, config: AdamConfig) -> AdamState<T> {
    let lens: Vec<usize> = net.layers().iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect();
    AdamState::new(config, &lens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor_net::dense_stack;

    /// Three separable blobs on 4 pixels. Two outputs would always tie
    /// under the out-of-phase readout.
    fn toy(n: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let jitter = (i as f32 * 0.37).sin().abs() * 0.2;
            let px = match c {
                0 => [0.9 - jitter, 0.1, 0.8, 0.2 + jitter],
                1 => [0.1 + jitter, 0.9, 0.2, 0.8 - jitter],
                _ => [0.5, 0.5 + jitter, 0.0, 0.0],
            };
            images.extend_from_slice(&px);
            labels.push(c as u8);
        }
        Dataset {
            name: "toy".into(),
            split: "train".into(),
            channels: 1,
            height: 2,
            width: 2,
            images,
            labels,
        }
    }

    #[test]
    fn learns_a_separable_problem() {
        let ds = toy(66);
        let mut net = PhasorNetwork::<f32>::new(&dense_stack(&[4, 8, 3]), 3).unwrap();
        let mut adam = adam_for(
            &net,
            AdamConfig {
                learning_rate: 0.02,
                ..Default::default()
            },
        );
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            adam: adam.config,
            seed: 1,
        };
        let hist = fit(&mut net, &mut adam, &ds, &ds, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(hist.len(), 30);
        assert_eq!(hist.last().unwrap().epoch, 30);
        assert!(hist.last().unwrap().loss < hist[0].loss);
        assert_eq!(hist.last().unwrap().test_err, 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy(40);
        let run = || {
            let mut net = PhasorNetwork::<f32>::new(&dense_stack(&[4, 3, 3]), 5).unwrap();
            let mut adam = adam_for(&net, AdamConfig::default());
            train_epoch(&mut net, &mut adam, &ds, 8, 2, 0).unwrap();
            net.layers()[0].weights.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batched_gradient_equals_full_batch() {
        let ds = toy(37);
        let net = PhasorNetwork::<f64>::new(&dense_stack(&[4, 3, 3]), 5).unwrap();
        let idx: Vec<usize> = (0..37).collect();
        let x = encode_batch(&net, &ds, &idx).unwrap();
        let t: Vec<_> = idx.iter().map(|&i| encode_target(ds.label(i), 3).unwrap()).collect();
        let (g, _, _) = batch_gradient(&net, &x, &t).unwrap();
        let trace = net.forward_batch(&x, 37).unwrap();
        let full = backward(&net, &trace, &t).unwrap();
        for (a, b) in g.blocks().iter().zip(full.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let ds = toy(4);
        let net = PhasorNetwork::<f32>::new(&dense_stack(&[5, 2]), 0).unwrap();
        assert!(error_rate(&net, &ds).is_err());
    }

    #[test]
    fn metrics_row_format() {
        let m = EpochMetrics {
            epoch: 3,
            train_err: 0.125,
            test_err: 0.5,
            loss: 1.25,
        };
        assert_eq!(m.csv_row(), "3,0.125000,0.500000,1.250000000");
    }
}
