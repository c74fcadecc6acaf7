//! Forward and backward passes over a [`ModelGraph`].

use std::collections::BTreeMap;

use super::layer::LayerKind;
use super::model::{Freeze, LayerParams, ModelGraph, BN_EPS, BN_MOMENTUM};
use super::ops::{self, ConvGeom};
use super::NnError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm always uses running statistics.
    Eval,
    /// Batch norm uses batch statistics unless the model is in static-BN mode.
    Train,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch mean/variance (biased), present when batch statistics were used.
    batch_stats: Option<(Vec<T>, Vec<T>, usize)>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `activations[i]` is the input of layer `i + 1`; the last entry is the output.
    pub activations: Vec<Tensor<T>>,
    bn: BTreeMap<usize, BnCache<T>>,
    argmax: BTreeMap<usize, Vec<usize>>,
}

impl<T: Element> ForwardTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations
            .last()
            .expect("trace always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Parameter gradients keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: BTreeMap<usize, LayerGrad<T>>,
}

/// Runs the model in evaluation mode and returns the logits.
pub fn forward<T: Element>(model: &ModelGraph<T>, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let trace = forward_traced(model, batch, Mode::Eval)?;
    Ok(trace.activations.into_iter().last().unwrap())
}

/// Runs the model, keeping every intermediate activation.
pub fn forward_traced<T: Element>(
    model: &ModelGraph<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardTrace<T>, NnError> {
    let shape = batch.shape();
    if shape.len() != model.input_shape.len() + 1 || shape[1..] != model.input_shape[..] {
        return Err(NnError::ShapeMismatch {
            layer_index: model.layers.first().map_or(0, |l| l.index),
            kind: model.layers.first().map_or("input", |l| l.kind.name()),
            expected: format!("[N, {:?}]", model.input_shape),
            actual: shape.to_vec(),
        });
    }
    let n = shape[0];
    let mut trace = ForwardTrace {
        activations: vec![batch.clone()],
        bn: BTreeMap::new(),
        argmax: BTreeMap::new(),
    };
    let mut sample_shape = model.input_shape.clone();
    for layer in &model.layers {
        let out_shape = layer.kind.output_shape(&sample_shape, layer.index)?;
        let input = trace.activations.last().unwrap();
        let params = model.params.get(&layer.index);
        let mut full_shape = vec![n];
        full_shape.extend_from_slice(&out_shape);
        let out = match layer.kind {
            LayerKind::Conv3x3 {
                stride, padding, ..
            } => conv_forward(
                input,
                &sample_shape,
                &out_shape,
                3,
                stride,
                padding,
                params.unwrap(),
            ),
            LayerKind::Conv1x1 { stride, .. } => conv_forward(
                input,
                &sample_shape,
                &out_shape,
                1,
                stride,
                0,
                params.unwrap(),
            ),
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => fc_forward(input, in_features, out_features, params.unwrap()),
            LayerKind::BatchNorm { channels } => {
                let use_batch = mode == Mode::Train && !model.bn_static;
                let (y, cache) = bn_forward(input, channels, use_batch, params.unwrap());
                trace.bn.insert(layer.index, cache);
                y
            }
            LayerKind::ReLU => input
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            LayerKind::MaxPool { size } => {
                let (y, idx) = max_pool_forward(input, &sample_shape, &out_shape, size);
                trace.argmax.insert(layer.index, idx);
                y
            }
            LayerKind::AvgPool { size } => avg_pool_forward(input, &sample_shape, &out_shape, size),
            LayerKind::Flatten | LayerKind::SoftmaxClassifier => input.data().to_vec(),
        };
        let out = Tensor::new(full_shape, out).expect("kernel output matches inferred shape");
        if !out.all_finite() {
            return Err(NnError::NonFinite {
                layer_index: layer.index,
                context: "forward activation".into(),
            });
        }
        trace.activations.push(out);
        sample_shape = out_shape;
    }
    Ok(trace)
}

fn conv_geom(
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> ConvGeom {
    ConvGeom {
        channels: in_shape[0],
        height: in_shape[1],
        width: in_shape[2],
        kernel,
        stride,
        padding,
        out_h: out_shape[1],
        out_w: out_shape[2],
    }
}

fn conv_forward<T: Element>(
    input: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
    params: &LayerParams<T>,
) -> Vec<T> {
    let g = conv_geom(in_shape, out_shape, kernel, stride, padding);
    let n = input.shape()[0];
    let in_len: usize = in_shape.iter().product();
    let out_c = out_shape[0];
    let p = g.positions();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); n * out_c * p];
    let mut cols = vec![T::zero(); if g.is_identity_im2col() { 0 } else { kk * p }];
    let w = params.weight.data();
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let y = &mut out[s * out_c * p..(s + 1) * out_c * p];
        if let Some(b) = &params.bias {
            for (o, &bv) in b.data().iter().enumerate() {
                y[o * p..(o + 1) * p].fill(bv);
            }
        }
        let cols_ref: &[T] = if g.is_identity_im2col() {
            x
        } else {
            ops::im2col(&g, x, &mut cols);
            &cols
        };
        ops::gemm_nn(out_c, kk, p, w, cols_ref, y);
    }
    out
}

fn fc_forward<T: Element>(
    input: &Tensor<T>,
    fin: usize,
    fout: usize,
    params: &LayerParams<T>,
) -> Vec<T> {
    let n = input.shape()[0];
    let mut out = vec![T::zero(); n * fout];
    if let Some(b) = &params.bias {
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    ops::gemm_nt(n, fin, fout, input.data(), params.weight.data(), &mut out);
    out
}

/// Channel-major iteration helper: calls `f(channel, flat_index)` for every element.
fn for_each_channel(shape: &[usize], channels: usize, mut f: impl FnMut(usize, usize)) {
    let n = shape[0];
    let spatial: usize = shape[2..].iter().product();
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            for i in 0..spatial {
                f(c, base + i);
            }
        }
    }
}

fn bn_forward<T: Element>(
    input: &Tensor<T>,
    channels: usize,
    use_batch: bool,
    params: &LayerParams<T>,
) -> (Vec<T>, BnCache<T>) {
    let x = input.data();
    let gamma = params.weight.data();
    let beta = params.bias.as_ref().expect("validated").data();
    let count = x.len() / channels;
    let eps = T::cast_from(BN_EPS);
    let (mean, var, batch_stats) = if use_batch {
        let mut mean = vec![T::zero(); channels];
        for_each_channel(input.shape(), channels, |c, i| mean[c] += x[i]);
        let inv = T::cast_from(1.0 / count as f64);
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![T::zero(); channels];
        for_each_channel(input.shape(), channels, |c, i| {
            let d = x[i] - mean[c];
            var[c] += d * d;
        });
        var.iter_mut().for_each(|v| *v *= inv);
        (mean.clone(), var.clone(), Some((mean, var, count)))
    } else {
        (
            params
                .running_mean
                .as_ref()
                .expect("validated")
                .data()
                .to_vec(),
            params
                .running_var
                .as_ref()
                .expect("validated")
                .data()
                .to_vec(),
            None,
        )
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for_each_channel(input.shape(), channels, |c, i| {
        xhat[i] = (x[i] - mean[c]) * inv_std[c];
        y[i] = gamma[c] * xhat[i] + beta[c];
    });
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

fn max_pool_forward<T: Element>(
    input: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let n = input.shape()[0];
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(out.capacity());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = base + (oy * size + ky) * w + ox * size + kx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    idx.push(best);
                }
            }
        }
    }
    (out, idx)
}

fn avg_pool_forward<T: Element>(
    input: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
) -> Vec<T> {
    let n = input.shape()[0];
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let inv = T::cast_from(1.0 / (size * size) as f64);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..size {
                        for kx in 0..size {
                            acc += x[base + (oy * size + ky) * w + ox * size + kx];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    out
}

/// Which parameter gradients to produce for a layer.
fn wants(model_frozen: Option<&Freeze>) -> (bool, bool) {
    match model_frozen {
        None => (true, true),
        Some(Freeze::WeightOnly) => (false, true),
        Some(Freeze::All) => (false, false),
    }
}

/// Backpropagates `grad_output` (∂loss/∂logits) through the traced pass.
///
/// Frozen tensors get no gradient entry.
pub fn backward<T: Element>(
    model: &ModelGraph<T>,
    trace: &ForwardTrace<T>,
    grad_output: Vec<T>,
) -> Result<Gradients<T>, NnError> {
    let mut grads = BTreeMap::new();
    let mut upstream = grad_output;
    let shapes = model.activation_shapes()?;
    let first_param = model.params.keys().next().copied().unwrap_or(0);
    for layer in model.layers.iter().rev() {
        let pos = layer.index - 1;
        let input = &trace.activations[pos];
        let in_shape = &shapes[pos];
        let out_shape = &shapes[pos + 1];
        let params = model.params.get(&layer.index);
        let (want_w, want_b) = wants(model.frozen.get(&layer.index));
        // Nothing upstream of the first parameterized layer needs a gradient.
        let need_input = layer.index > first_param;
        let next = match layer.kind {
            LayerKind::Conv3x3 {
                stride, padding, ..
            } => {
                let (dx, g) = conv_backward(
                    input,
                    &upstream,
                    conv_geom(in_shape, out_shape, 3, stride, padding),
                    params.unwrap(),
                    (want_w, want_b, need_input),
                );
                grads.insert(layer.index, g);
                dx
            }
            LayerKind::Conv1x1 { stride, .. } => {
                let (dx, g) = conv_backward(
                    input,
                    &upstream,
                    conv_geom(in_shape, out_shape, 1, stride, 0),
                    params.unwrap(),
                    (want_w, want_b, need_input),
                );
                grads.insert(layer.index, g);
                dx
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => {
                let p = params.unwrap();
                let n = input.shape()[0];
                let weight = want_w.then(|| {
                    let mut dw = vec![T::zero(); out_features * in_features];
                    ops::gemm_tn(
                        out_features,
                        n,
                        in_features,
                        &upstream,
                        input.data(),
                        &mut dw,
                    );
                    Tensor::new(vec![out_features, in_features], dw).unwrap()
                });
                let bias = (want_b && p.bias.is_some()).then(|| {
                    let mut db = vec![T::zero(); out_features];
                    for row in upstream.chunks(out_features) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    Tensor::new(vec![out_features], db).unwrap()
                });
                grads.insert(layer.index, LayerGrad { weight, bias });
                let mut dx = vec![T::zero(); if need_input { n * in_features } else { 0 }];
                if need_input {
                    ops::gemm_nn(
                        n,
                        out_features,
                        in_features,
                        &upstream,
                        p.weight.data(),
                        &mut dx,
                    );
                }
                dx
            }
            LayerKind::BatchNorm { channels } => {
                let cache = &trace.bn[&layer.index];
                let (dx, g) = bn_backward(
                    input.shape(),
                    channels,
                    &upstream,
                    cache,
                    params.unwrap(),
                    (want_w, want_b),
                );
                grads.insert(layer.index, g);
                dx
            }
            LayerKind::ReLU => input
                .data()
                .iter()
                .zip(&upstream)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            LayerKind::MaxPool { .. } => {
                let mut dx = vec![T::zero(); input.len()];
                for (&i, &g) in trace.argmax[&layer.index].iter().zip(&upstream) {
                    dx[i] += g;
                }
                dx
            }
            LayerKind::AvgPool { size } => {
                avg_pool_backward(input.shape(), in_shape, out_shape, size, &upstream)
            }
            LayerKind::Flatten | LayerKind::SoftmaxClassifier => upstream,
        };
        upstream = next;
        if !upstream.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite {
                layer_index: layer.index,
                context: "backward gradient".into(),
            });
        }
        if layer.index <= first_param {
            break;
        }
    }
    Ok(Gradients { layers: grads })
}

fn conv_backward<T: Element>(
    input: &Tensor<T>,
    upstream: &[T],
    g: ConvGeom,
    params: &LayerParams<T>,
    (want_w, want_b, need_input): (bool, bool, bool),
) -> (Vec<T>, LayerGrad<T>) {
    let n = input.shape()[0];
    let in_len = g.channels * g.height * g.width;
    let out_c = params.weight.shape()[0];
    let p = g.positions();
    let kk = g.patch_len();
    let mut dw = vec![T::zero(); if want_w { out_c * kk } else { 0 }];
    let mut db = vec![T::zero(); out_c];
    let mut dx = vec![T::zero(); if need_input { n * in_len } else { 0 }];
    let mut cols = vec![T::zero(); if g.is_identity_im2col() { 0 } else { kk * p }];
    let mut dcols = vec![T::zero(); kk * p];
    for s in 0..n {
        let dy = &upstream[s * out_c * p..(s + 1) * out_c * p];
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        if want_w {
            let cols_ref: &[T] = if g.is_identity_im2col() {
                x
            } else {
                ops::im2col(&g, x, &mut cols);
                &cols
            };
            ops::gemm_nt(out_c, p, kk, dy, cols_ref, &mut dw);
        }
        if want_b {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }
        if need_input {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_identity_im2col() {
                ops::gemm_tn(kk, out_c, p, params.weight.data(), dy, dxs);
            } else {
                dcols.fill(T::zero());
                ops::gemm_tn(kk, out_c, p, params.weight.data(), dy, &mut dcols);
                ops::col2im(&g, &dcols, dxs);
            }
        }
    }
    let grad = LayerGrad {
        weight: want_w.then(|| Tensor::new(params.weight.shape().to_vec(), dw).unwrap()),
        bias: (want_b && params.bias.is_some()).then(|| Tensor::new(vec![out_c], db).unwrap()),
    };
    (dx, grad)
}

fn bn_backward<T: Element>(
    shape: &[usize],
    channels: usize,
    dy: &[T],
    cache: &BnCache<T>,
    params: &LayerParams<T>,
    (want_w, want_b): (bool, bool),
) -> (Vec<T>, LayerGrad<T>) {
    let gamma = params.weight.data();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for_each_channel(shape, channels, |c, i| {
        dgamma[c] += dy[i] * cache.xhat[i];
        dbeta[c] += dy[i];
    });
    let mut dx = vec![T::zero(); dy.len()];
    match &cache.batch_stats {
        Some((_, _, count)) => {
            let m = T::cast_from(*count as f64);
            for_each_channel(shape, channels, |c, i| {
                dx[i] = gamma[c] * cache.inv_std[c] / m
                    * (m * dy[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
            });
        }
        None => for_each_channel(shape, channels, |c, i| {
            dx[i] = dy[i] * gamma[c] * cache.inv_std[c];
        }),
    }
    let grad = LayerGrad {
        weight: want_w.then(|| Tensor::new(vec![channels], dgamma).unwrap()),
        bias: want_b.then(|| Tensor::new(vec![channels], dbeta).unwrap()),
    };
    (dx, grad)
}

fn avg_pool_backward<T: Element>(
    full_shape: &[usize],
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
    upstream: &[T],
) -> Vec<T> {
    let n = full_shape[0];
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let inv = T::cast_from(1.0 / (size * size) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut k = 0;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = upstream[k] * inv;
                    k += 1;
                    for ky in 0..size {
                        for kx in 0..size {
                            dx[base + (oy * size + ky) * w + ox * size + kx] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Folds the batch statistics of a training pass into the running estimates.
pub fn update_running_stats<T: Element>(model: &mut ModelGraph<T>, trace: &ForwardTrace<T>) {
    let mom = T::cast_from(BN_MOMENTUM);
    for (idx, cache) in &trace.bn {
        let Some((mean, var, count)) = &cache.batch_stats else {
            continue;
        };
        if model.frozen.get(idx) == Some(&Freeze::All) {
            continue;
        }
        let p = model.params.get_mut(idx).expect("bn layer has params");
        let unbias = if *count > 1 {
            T::cast_from(*count as f64 / (*count - 1) as f64)
        } else {
            T::one()
        };
        let rm = p.running_mean.as_mut().unwrap().data_mut();
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = (T::one() - mom) * *r + mom * m;
        }
        let rv = p.running_var.as_mut().unwrap().data_mut();
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = (T::one() - mom) * *r + mom * v * unbias;
        }
    }
}

/// Mean softmax cross-entropy of the model on a batch (evaluation mode).
pub fn loss<T: Element>(
    model: &ModelGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<f64, NnError> {
    let trace = forward_traced(model, batch, mode)?;
    let classes = model.num_classes()?;
    Ok(ops::softmax_cross_entropy(trace.output().data(), labels, classes).0)
}
