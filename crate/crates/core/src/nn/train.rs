use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Freeze, ModelGraph};
use super::network::{self, Gradients, Mode};
use super::ops::softmax_cross_entropy;
use super::NnError;
use crate::dataset::LabeledDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the last epoch that ran.
    pub final_loss: f64,
    /// Accuracy on the training data after the last epoch.
    pub accuracy: f64,
    pub epochs_run: usize,
}

/// First- and second-moment estimates for every trainable tensor.
struct Adam {
    cfg: TrainConfig,
    step: i32,
    moments: std::collections::BTreeMap<(usize, bool), (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            moments: Default::default(),
        }
    }

    fn apply(&mut self, model: &mut ModelGraph, grads: &Gradients<f32>) {
        self.step += 1;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.cfg.learning_rate as f32;
        let eps = self.cfg.eps as f32;
        for (&idx, g) in &grads.layers {
            let Some(p) = model.params.get_mut(&idx) else {
                continue;
            };
            let targets = [
                (false, g.weight.as_ref(), Some(&mut p.weight)),
                (true, g.bias.as_ref(), p.bias.as_mut()),
            ];
            for (is_bias, grad, param) in targets {
                let (Some(grad), Some(param)) = (grad, param) else {
                    continue;
                };
                let (m, v) = self
                    .moments
                    .entry((idx, is_bias))
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Trains every non-frozen tensor with Adam on softmax cross-entropy.
///
/// Single-threaded; identical inputs give bit-identical parameters.
pub fn train(
    model: &mut ModelGraph,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    if data.is_empty() {
        return Err(NnError::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NnError::Data(
            "epochs and batch size must be positive".into(),
        ));
    }
    model.validate()?;
    let classes = model.num_classes()?;
    if let Some(bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Data(format!(
            "label {bad} out of range for {classes} outputs"
        )));
    }
    let fully_frozen = model
        .params
        .keys()
        .all(|k| model.frozen.get(k) == Some(&Freeze::All));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.inputs.gather_outer(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let trace =
                network::forward_traced(model, &batch, Mode::Train).map_err(|e| match e {
                    NnError::NonFinite { layer_index, .. } => NnError::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                        layer: Some(layer_index),
                    },
                    other => other,
                })?;
            let (loss, dlogits) = softmax_cross_entropy(trace.output().data(), &labels, classes);
            if !loss.is_finite() {
                return Err(NnError::Diverged {
                    epoch,
                    step,
                    loss,
                    layer: None,
                });
            }
            total += loss * chunk.len() as f64;
            if fully_frozen {
                continue;
            }
            let grads = network::backward(model, &trace, dlogits).map_err(|e| match e {
                NnError::NonFinite { layer_index, .. } => NnError::Diverged {
                    epoch,
                    step,
                    loss,
                    layer: Some(layer_index),
                },
                other => other,
            })?;
            network::update_running_stats(model, &trace);
            adam.apply(model, &grads);
        }
        final_loss = total / data.len() as f64;
        epochs_run = epoch + 1;
        if let Some(patience) = cfg.patience {
            if final_loss < best {
                best = final_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if !model.all_finite() {
        return Err(NnError::Diverged {
            epoch: epochs_run,
            step: 0,
            loss: final_loss,
            layer: None,
        });
    }
    let accuracy = evaluate(model, data)?;
    Ok(TrainReport {
        final_loss,
        accuracy,
        epochs_run,
    })
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy in evaluation mode.
pub fn evaluate(model: &ModelGraph, data: &LabeledDataset) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, &data.inputs)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Arg-max class per sample; ties go to the lowest class index.
pub fn predict(model: &ModelGraph, inputs: &Tensor) -> Result<Vec<usize>, NnError> {
    let n = inputs.shape()[0];
    let mut preds = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = network::forward(model, &inputs.slice_outer(start, end))?;
        let classes = logits.shape()[1];
        preds.extend(logits.data().chunks(classes).map(argmax));
    }
    Ok(preds)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over a dataset in evaluation mode.
pub fn mean_loss(model: &ModelGraph, data: &LabeledDataset) -> Result<f64, NnError> {
    let classes = model.num_classes()?;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = network::forward(model, &data.inputs.slice_outer(start, end))?;
        let (l, _) = softmax_cross_entropy(logits.data(), &data.labels[start..end], classes);
        total += l * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelBuilder;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Two Gaussian blobs whose points all sit at least `margin` from the line x0 = x1.
    fn blobs(seed: u64, n: usize, margin: f32) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.6).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        while ys.len() < n {
            let label = rng.random_range(0..2usize);
            let centre = if label == 0 { [-1.5, 1.5] } else { [1.5, -1.5] };
            let p = [
                centre[0] + normal.sample(&mut rng),
                centre[1] + normal.sample(&mut rng),
            ];
            // Signed distance to x0 = x1.
            let d = (p[0] - p[1]) / 2f32.sqrt();
            let ok = if label == 0 {
                d <= -margin
            } else {
                d >= margin
            };
            if ok {
                xs.extend_from_slice(&p);
                ys.push(label);
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, 2], xs).unwrap(), ys, 2).unwrap()
    }

    /// Perceptron oracle: converges with zero mistakes iff the set is separable.
    fn perceptron_separates(data: &LabeledDataset) -> bool {
        let mut w = [0.0f64; 3];
        for _ in 0..1000 {
            let mut mistakes = 0;
            for (i, &l) in data.labels.iter().enumerate() {
                let x = &data.inputs.data()[i * 2..i * 2 + 2];
                let y = if l == 1 { 1.0 } else { -1.0 };
                let s = w[0] * x[0] as f64 + w[1] * x[1] as f64 + w[2];
                if y * s <= 0.0 {
                    w[0] += y * x[0] as f64;
                    w[1] += y * x[1] as f64;
                    w[2] += y;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(7, 400, 1.0);
        assert!(perceptron_separates(&data));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("lin", vec![2])
            .fc(2)
            .softmax()
            .build(&mut rng)
            .unwrap();
        let before = mean_loss(&m, &data).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let rep = train(&mut m, &data, &cfg).unwrap();
        assert!(rep.accuracy >= 0.99, "accuracy {}", rep.accuracy);
        assert!(rep.final_loss < before);
    }

    #[test]
    fn fully_frozen_model_is_untouched() {
        let data = blobs(1, 64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("m", vec![2])
            .fc(4)
            .batch_norm()
            .relu()
            .fc(2)
            .build(&mut rng)
            .unwrap();
        m.freeze_all();
        let before = m.clone();
        let loss_before = mean_loss(&m, &data).unwrap();
        train(&mut m, &data, &TrainConfig::default()).unwrap();
        assert_eq!(m, before);
        assert_eq!(
            mean_loss(&m, &data).unwrap().to_bits(),
            loss_before.to_bits()
        );
    }

    #[test]
    fn frozen_layer_bitwise_unchanged_others_move() {
        let data = blobs(2, 64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("m", vec![2])
            .fc(4)
            .relu()
            .fc(4)
            .relu()
            .fc(2)
            .build(&mut rng)
            .unwrap();
        m.freeze(3, Freeze::All);
        m.freeze(5, Freeze::WeightOnly);
        let before = m.clone();
        train(
            &mut m,
            &data,
            &TrainConfig {
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.params[&3], before.params[&3]);
        assert_eq!(m.params[&5].weight, before.params[&5].weight);
        assert_ne!(m.params[&5].bias, before.params[&5].bias);
        assert_ne!(m.params[&1], before.params[&1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs(3, 96, 0.5);
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            ModelBuilder::new("m", vec![2])
                .fc(8)
                .batch_norm()
                .relu()
                .fc(2)
                .build(&mut rng)
                .unwrap()
        };
        let cfg = TrainConfig {
            epochs: 4,
            seed: 5,
            ..Default::default()
        };
        let mut a = build();
        let mut b = build();
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        for (pa, pb) in a.params.values().zip(b.params.values()) {
            assert!(pa.weight.bit_eq(&pb.weight));
            assert!(pa.bias.as_ref().unwrap().bit_eq(pb.bias.as_ref().unwrap()));
        }
    }

    #[test]
    fn diverging_run_is_reported() {
        let data = blobs(4, 32, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("m", vec![2])
            .fc(2)
            .build(&mut rng)
            .unwrap();
        m.params.get_mut(&1).unwrap().weight.data_mut()[0] = f32::INFINITY;
        let err = train(&mut m, &data, &TrainConfig::default()).unwrap_err();
        assert!(
            matches!(
                err,
                NnError::Diverged {
                    epoch: 0,
                    step: 0,
                    ..
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut data = blobs(5, 8, 0.5);
        data.num_classes = 5;
        data.labels[0] = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("m", vec![2])
            .fc(2)
            .build(&mut rng)
            .unwrap();
        assert!(matches!(
            train(&mut m, &data, &TrainConfig::default()),
            Err(NnError::Data(_))
        ));
    }
}
