use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{sample_gaussian, Matrix, Rng, Tape, Var};
use crate::netcore::{accuracy, Dataset, MlpSpec, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch: 128,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Minibatch accuracy over the epoch, measured before each update.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightVector,
    pub curve: Vec<EpochStats>,
}

/// He initialization: `N(0, 2/fan-in)` weights, zero biases.
pub fn init_weights(spec: &MlpSpec, rng: &mut Rng) -> WeightVector {
    let mut w = WeightVector::zeros(spec);
    for m in w.layers_mut() {
        let fan_in = m.cols() - 1;
        let std = (2.0 / fan_in as f64).sqrt();
        let g = sample_gaussian(rng, m.rows(), fan_in, 0.0, std);
        for i in 0..m.rows() {
            m.row_mut(i)[..fan_in].copy_from_slice(g.row(i));
        }
    }
    w
}

/// Records the network's cross-entropy on `tape`, with one leaf per layer.
pub(crate) fn record_loss(
    tape: &mut Tape,
    w: &WeightVector,
    x: &Matrix,
    labels: Arc<[usize]>,
) -> Result<(Vec<Var>, Var, Var)> {
    let leaves: Vec<Var> = w.layers().iter().map(|m| tape.leaf(m.clone())).collect();
    let mut h = tape.constant(x.clone());
    for (k, &layer) in leaves.iter().enumerate() {
        let fan_in = w.layers()[k].cols() - 1;
        let lin = tape.slice_cols(layer, 0, fan_in)?;
        let bias = tape.slice_cols(layer, fan_in, fan_in + 1)?;
        let z = tape.matmul(lin, h)?;
        let z = tape.add_col(z, bias)?;
        h = if k + 1 == leaves.len() { z } else { tape.relu(z) };
    }
    let loss = tape.cross_entropy(h, labels)?;
    Ok((leaves, h, loss))
}

/// Mean cross-entropy and its gradient with respect to every layer.
pub fn loss_gradient(w: &WeightVector, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let (leaves, _, loss) = record_loss(&mut tape, w, x, Arc::from(labels))?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), leaves.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Minibatch SGD from a He-initialized start drawn from `config.seed`.
pub fn train_sgd(spec: &MlpSpec, data: &Dataset, config: &TrainConfig) -> Result<WeightVector> {
    let init = init_weights(spec, &mut Rng::new(config.seed).fork(0));
    Ok(train_sgd_from(init, data, config)?.weights)
}

/// Minibatch SGD from the given weights. Each epoch visits the samples in a
/// fresh permutation drawn from `config.seed`.
pub fn train_sgd_from(init: WeightVector, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.lr.is_nan() || config.lr < 0.0 || config.batch == 0 {
        return Err(Error::invalid(format!(
            "learning rate must be >= 0 and batch > 0, got lr={} batch={}",
            config.lr, config.batch
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if init.layers()[0].cols() != data.dim() + 1 {
        return Err(Error::shape(
            "layer 1",
            format!(
                "weights expect {} features, data has {}",
                init.layers()[0].cols() - 1,
                data.dim()
            ),
        ));
    }
    let mut shuffle_rng = Rng::new(config.seed).fork(1);
    let mut w = init;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = shuffle_rng.permutation(data.len());
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for idx in order.chunks(config.batch) {
            let x = data.features().select_cols(idx);
            let labels: Arc<[usize]> = idx.iter().map(|&i| data.labels()[i]).collect();
            let mut tape = Tape::new();
            let (leaves, logits, loss) = record_loss(&mut tape, &w, &x, labels.clone())?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            let grads = tape.backward(loss)?;
            for (m, &leaf) in w.layers_mut().iter_mut().zip(&leaves) {
                m.axpy(-config.lr, &grads.wrt(leaf))?;
            }
            loss_sum += value * idx.len() as f64;
            acc_sum += accuracy(tape.value(logits), &labels)? * idx.len() as f64;
        }
        let n = data.len() as f64;
        curve.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            accuracy: acc_sum / n,
        });
    }
    if !w.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { weights: w, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticSpec};
    use crate::netcore::{forward, MlpSpec};

    fn blobs(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            classes: 2,
            dim: 2,
            samples_per_class: 200,
            std: 0.5,
            center_radius: 4.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            batch: 16,
            epochs: 2,
            seed: 3,
        };
        let w = train_sgd(&spec, &blobs(1), &cfg).unwrap();
        assert_eq!(w, init_weights(&spec, &mut Rng::new(3).fork(0)));
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch: 16,
            epochs: 3,
            seed: 4,
        };
        let a = train_sgd(&spec, &blobs(1), &cfg).unwrap();
        let b = train_sgd(&spec, &blobs(1), &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_sgd(&spec, &blobs(1), &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(2);
        let spec = MlpSpec::new(vec![2, 32, 2]).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            batch: 16,
            epochs: 20,
            seed: 6,
        };
        let w = train_sgd(&spec, &data, &cfg).unwrap();
        let acc = accuracy(&forward(&spec, &w, data.features()).unwrap(), data.labels()).unwrap();
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let cfg = TrainConfig {
            lr: 1e200,
            batch: 8,
            epochs: 5,
            seed: 1,
        };
        match train_sgd(&spec, &blobs(3), &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![4, 6, 5, 3]).unwrap();
        let mut rng = Rng::new(8);
        let w = init_weights(&spec, &mut rng);
        let x = sample_gaussian(&mut rng, 4, 7, 0.0, 1.0);
        let labels: Vec<usize> = (0..7).map(|_| rng.index(3)).collect();
        let (_, grads) = loss_gradient(&w, &x, &labels).unwrap();
        let h = 1e-5;
        for (k, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let bump = |delta: f64| {
                    let mut v = w.clone();
                    v.layers_mut()[k].as_mut_slice()[idx] += delta;
                    loss_gradient(&v, &x, &labels).unwrap().0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = g.as_slice()[idx];
                let denom = a.abs().max(fd.abs());
                if denom > 1e-10 {
                    assert!((a - fd).abs() / denom < 1e-4, "layer {k} entry {idx}: {a} vs {fd}");
                }
            }
        }
    }
}
