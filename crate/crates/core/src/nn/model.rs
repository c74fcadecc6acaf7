use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{LayerKind, LayerSpec};
use super::NnError;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters owned by one layer.
///
/// For batch norm `weight` is the scale (gamma) and `bias` the shift (beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
}

impl<T: Element> LayerParams<T> {
    pub fn cast<U: Element>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            running_mean: self.running_mean.as_ref().map(Tensor::cast),
            running_var: self.running_var.as_ref().map(Tensor::cast),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite()
            && [&self.bias, &self.running_mean, &self.running_var]
                .into_iter()
                .flatten()
                .all(Tensor::all_finite)
    }
}

/// How much of a layer is excluded from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Freeze {
    /// Nothing in the layer is updated.
    All,
    /// The weight tensor is fixed; bias / BN shift still train.
    WeightOnly,
}

/// A sequential network: the layer list plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct ModelGraph<T = f32> {
    pub name: String,
    /// Per-sample input shape, e.g. `[C, H, W]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<usize, LayerParams<T>>,
    pub frozen: BTreeMap<usize, Freeze>,
    /// Batch norm uses its running statistics during training too.
    pub bn_static: bool,
}

impl<T: Element> ModelGraph<T> {
    /// Checks layer numbering, parameter ownership and shape flow.
    pub fn validate(&self) -> Result<(), NnError> {
        for (pos, layer) in self.layers.iter().enumerate() {
            if layer.index != pos + 1 {
                return Err(NnError::Structure(format!(
                    "layer at position {pos} has index {} (expected {})",
                    layer.index,
                    pos + 1
                )));
            }
            let params = self.params.get(&layer.index);
            match (layer.kind.weight_shape(), params) {
                (Some(shape), Some(p)) => {
                    if p.weight.shape() != shape.as_slice() {
                        return Err(NnError::Structure(format!(
                            "layer {} weight shape {:?}, expected {shape:?}",
                            layer.index,
                            p.weight.shape()
                        )));
                    }
                    let blen = layer.kind.bias_len();
                    if let (Some(b), Some(n)) = (&p.bias, blen) {
                        if b.len() != n {
                            return Err(NnError::Structure(format!(
                                "layer {} bias length {} expected {n}",
                                layer.index,
                                b.len()
                            )));
                        }
                    }
                    if matches!(layer.kind, LayerKind::BatchNorm { .. })
                        && (p.bias.is_none() || p.running_mean.is_none() || p.running_var.is_none())
                    {
                        return Err(NnError::Structure(format!(
                            "batch norm layer {} lacks shift or running statistics",
                            layer.index
                        )));
                    }
                }
                (None, None) => {}
                (Some(_), None) => {
                    return Err(NnError::Structure(format!(
                        "layer {} ({}) has no parameters",
                        layer.index,
                        layer.kind.name()
                    )))
                }
                (None, Some(_)) => {
                    return Err(NnError::Structure(format!(
                        "layer {} ({}) must not own parameters",
                        layer.index,
                        layer.kind.name()
                    )))
                }
            }
        }
        for idx in self.frozen.keys() {
            if !self.params.contains_key(idx) {
                return Err(NnError::Structure(format!(
                    "frozen layer {idx} is not parameterized"
                )));
            }
        }
        self.output_shape().map(|_| ())
    }

    /// Per-sample output shape; errors name the first layer that cannot accept its input.
    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.kind.output_shape(&shape, layer.index)?;
        }
        Ok(shape)
    }

    /// Per-sample input shape of every layer, followed by the final output shape.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer
                .kind
                .output_shape(shapes.last().unwrap(), layer.index)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize, NnError> {
        Ok(self.output_shape()?.iter().product())
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Indices of layers whose weights go through the codebooks, in order.
    pub fn compressible_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_compressible())
            .map(|l| l.index)
            .collect()
    }

    /// First and last compressible layers.
    pub fn boundary_layers(&self) -> Option<(usize, usize)> {
        let c = self.compressible_layers();
        Some((*c.first()?, *c.last()?))
    }

    pub fn freeze(&mut self, index: usize, mode: Freeze) {
        self.frozen.insert(index, mode);
    }

    pub fn freeze_all(&mut self) {
        let keys: Vec<usize> = self.params.keys().copied().collect();
        for k in keys {
            self.frozen.insert(k, Freeze::All);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_set(&self) -> BTreeSet<usize> {
        self.frozen.keys().copied().collect()
    }

    pub fn weight(&self, index: usize) -> Option<&Tensor<T>> {
        self.params.get(&index).map(|p| &p.weight)
    }

    /// Number of scalar parameters, running statistics included.
    pub fn param_count(&self) -> usize {
        self.params
            .values()
            .map(|p| {
                p.weight.len()
                    + [&p.bias, &p.running_mean, &p.running_var]
                        .into_iter()
                        .flatten()
                        .map(Tensor::len)
                        .sum::<usize>()
            })
            .sum()
    }

    /// Bytes needed to store every parameter as f32.
    pub fn f32_bytes(&self) -> usize {
        self.param_count() * 4
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(LayerParams::all_finite)
    }

    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|(k, v)| (*k, v.cast())).collect(),
            frozen: self.frozen.clone(),
            bn_static: self.bn_static,
        }
    }
}

/// Assembles a sequential model, inferring channel counts from the previous layer.
pub struct ModelBuilder {
    name: String,
    input_shape: Vec<usize>,
    kinds: Vec<LayerKind>,
    shape: Vec<usize>,
    error: Option<NnError>,
}

impl ModelBuilder {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape: input_shape.clone(),
            input_shape,
            kinds: Vec::new(),
            error: None,
        }
    }

    fn push(mut self, kind: LayerKind) -> Self {
        if self.error.is_none() {
            match kind.output_shape(&self.shape, self.kinds.len() + 1) {
                Ok(s) => {
                    self.shape = s;
                    self.kinds.push(kind);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self
    }

    fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn conv3x3(self, out_channels: usize, stride: usize, padding: usize) -> Self {
        let in_channels = self.channels();
        self.push(LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            stride,
            padding,
        })
    }

    pub fn conv1x1(self, out_channels: usize) -> Self {
        self.conv1x1_strided(out_channels, 1)
    }

    pub fn conv1x1_strided(self, out_channels: usize, stride: usize) -> Self {
        let in_channels = self.channels();
        self.push(LayerKind::Conv1x1 {
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn fc(self, out_features: usize) -> Self {
        let in_features = self.shape.iter().product();
        self.push(LayerKind::FullyConnected {
            in_features,
            out_features,
        })
    }

    pub fn batch_norm(self) -> Self {
        let channels = self.channels();
        self.push(LayerKind::BatchNorm { channels })
    }

    pub fn relu(self) -> Self {
        self.push(LayerKind::ReLU)
    }

    pub fn max_pool(self, size: usize) -> Self {
        self.push(LayerKind::MaxPool { size })
    }

    pub fn avg_pool(self, size: usize) -> Self {
        self.push(LayerKind::AvgPool { size })
    }

    pub fn flatten(self) -> Self {
        self.push(LayerKind::Flatten)
    }

    pub fn softmax(self) -> Self {
        self.push(LayerKind::SoftmaxClassifier)
    }

    /// Appends a kind verbatim (no channel inference).
    pub fn layer(self, kind: LayerKind) -> Self {
        self.push(kind)
    }

    /// Finishes the model with He-uniform weights and zero biases.
    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> Result<ModelGraph, NnError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let layers: Vec<LayerSpec> = self
            .kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| LayerSpec { index: i + 1, kind })
            .collect();
        let mut params = BTreeMap::new();
        for layer in &layers {
            if let Some(p) = init_params(&layer.kind, rng) {
                params.insert(layer.index, p);
            }
        }
        let model = ModelGraph {
            name: self.name,
            input_shape: self.input_shape,
            layers,
            params,
            frozen: BTreeMap::new(),
            bn_static: false,
        };
        model.validate()?;
        Ok(model)
    }
}

fn init_params<R: Rng + ?Sized>(kind: &LayerKind, rng: &mut R) -> Option<LayerParams> {
    let shape = kind.weight_shape()?;
    let n_out = kind.bias_len()?;
    if let LayerKind::BatchNorm { channels } = *kind {
        return Some(LayerParams {
            weight: Tensor::from_elem(vec![channels], 1.0),
            bias: Some(Tensor::zeros(vec![channels])),
            running_mean: Some(Tensor::zeros(vec![channels])),
            running_var: Some(Tensor::from_elem(vec![channels], 1.0)),
        });
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Some(LayerParams {
        weight: Tensor::new(shape, data).expect("shape product matches"),
        bias: Some(Tensor::zeros(vec![n_out])),
        running_mean: None,
        running_var: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builder_infers_channels_and_numbers_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ModelBuilder::new("m", vec![2, 8, 8])
            .conv3x3(4, 1, 1)
            .batch_norm()
            .relu()
            .max_pool(2)
            .conv1x1(6)
            .flatten()
            .fc(3)
            .softmax()
            .build(&mut rng)
            .unwrap();
        assert_eq!(m.layers.len(), 8);
        assert_eq!(m.output_shape().unwrap(), vec![3]);
        assert_eq!(m.compressible_layers(), vec![1, 5, 7]);
        assert_eq!(m.boundary_layers(), Some((1, 7)));
        assert_eq!(m.weight(7).unwrap().shape(), &[3, 96]);
    }

    #[test]
    fn builder_reports_offending_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = ModelBuilder::new("m", vec![4])
            .fc(3)
            .max_pool(2)
            .build(&mut rng)
            .unwrap_err();
        match err {
            NnError::ShapeMismatch { layer_index, .. } => assert_eq!(layer_index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_frozen_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("m", vec![4])
            .fc(3)
            .relu()
            .build(&mut rng)
            .unwrap();
        m.freeze(2, Freeze::All);
        assert!(m.validate().is_err());
    }
}
