//! Central-difference verification of the backward pass, in f64.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::ModelGraph;
use super::network::{self, Gradients, Mode};
use super::ops::softmax_cross_entropy;
use super::NnError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Entries probed per parameter tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Batch-statistics or running-statistics batch norm.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples_per_tensor: 12,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `grad` against central differences of `f` at the listed coordinates.
pub fn check_coordinates(
    theta: &mut [f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    grad: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(theta);
        theta[i] = orig - h;
        let minus = f(theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

/// Maximum relative error between backprop and central differences over a
/// sampled subset of every parameter tensor.
pub fn gradient_check(
    model: &ModelGraph<f64>,
    inputs: &Tensor<f64>,
    labels: &[usize],
    h: f64,
    opts: GradCheckOptions,
) -> Result<f64, NnError> {
    let mut model = model.clone();
    model.unfreeze_all();
    let classes = model.num_classes()?;
    let trace = network::forward_traced(&model, inputs, opts.mode)?;
    let (_, dlogits) = softmax_cross_entropy(trace.output().data(), labels, classes);
    let grads = network::backward(&model, &trace, dlogits)?;
    gradient_check_against(&model, inputs, labels, h, opts, &grads)
}

/// As [`gradient_check`], but against caller-supplied analytic gradients.
pub fn gradient_check_against(
    model: &ModelGraph<f64>,
    inputs: &Tensor<f64>,
    labels: &[usize],
    h: f64,
    opts: GradCheckOptions,
    grads: &Gradients<f64>,
) -> Result<f64, NnError> {
    let classes = model.num_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (&idx, g) in &grads.layers {
        for is_bias in [false, true] {
            let analytic = if is_bias {
                g.bias.as_ref()
            } else {
                g.weight.as_ref()
            };
            let Some(analytic) = analytic else { continue };
            let len = analytic.len();
            let coords: Vec<usize> = if len <= opts.samples_per_tensor {
                (0..len).collect()
            } else {
                let mut c = index::sample(&mut rng, len, opts.samples_per_tensor).into_vec();
                c.sort_unstable();
                c
            };
            let base = {
                let p = &model.params[&idx];
                if is_bias {
                    p.bias.clone().unwrap()
                } else {
                    p.weight.clone()
                }
            };
            let mut theta = base.data().to_vec();
            let mut f = |t: &[f64]| {
                let p = probe.params.get_mut(&idx).unwrap();
                let dst = if is_bias {
                    p.bias.as_mut().unwrap()
                } else {
                    &mut p.weight
                };
                dst.data_mut().copy_from_slice(t);
                let trace =
                    network::forward_traced(&probe, inputs, opts.mode).expect("probe forward");
                softmax_cross_entropy(trace.output().data(), labels, classes).0
            };
            worst = worst.max(check_coordinates(
                &mut theta,
                &mut f,
                analytic.data(),
                &coords,
                h,
            ));
            let p = probe.params.get_mut(&idx).unwrap();
            let dst = if is_bias {
                p.bias.as_mut().unwrap()
            } else {
                &mut p.weight
            };
            *dst = base;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelBuilder;
    use rand::Rng;

    #[test]
    fn quadratic_matches_analytic() {
        let mut theta = vec![0.3, -1.7, 2.5, 0.01];
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let mut f = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>();
        let err = check_coordinates(&mut theta, &mut f, &grad, &[0, 1, 2, 3], 1e-4);
        assert!(err < 1e-9, "{err}");
    }

    fn small_cnn(seed: u64) -> (ModelGraph<f64>, Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelBuilder::new("g", vec![2, 5, 5])
            .conv3x3(3, 1, 1)
            .relu()
            .flatten()
            .fc(3)
            .build(&mut rng)
            .unwrap()
            .cast::<f64>();
        let x: Vec<f64> = (0..4 * 50).map(|_| rng.random_range(-1.0..1.0)).collect();
        (
            m,
            Tensor::new(vec![4, 2, 5, 5], x).unwrap(),
            vec![0, 2, 1, 2],
        )
    }

    #[test]
    fn small_cnn_passes() {
        let (m, x, y) = small_cnn(9);
        let err = gradient_check(&m, &x, &y, 1e-4, GradCheckOptions::default()).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let (m, x, y) = small_cnn(9);
        let classes = m.num_classes().unwrap();
        let trace = network::forward_traced(&m, &x, Mode::Train).unwrap();
        let (_, dl) = softmax_cross_entropy(trace.output().data(), &y, classes);
        let mut grads = network::backward(&m, &trace, dl).unwrap();
        // Scale one layer's gradient.
        for g in grads
            .layers
            .get_mut(&1)
            .unwrap()
            .weight
            .as_mut()
            .unwrap()
            .data_mut()
        {
            *g *= 2.0;
        }
        let err =
            gradient_check_against(&m, &x, &y, 1e-4, GradCheckOptions::default(), &grads).unwrap();
        assert!(err > 1e-1, "{err}");
    }
}
