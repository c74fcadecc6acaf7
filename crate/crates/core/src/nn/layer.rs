use serde::{Deserialize, Serialize};

use super::NnError;

/// The layer kinds the compressor understands.
///
/// Convolution weights are laid out `(out, in, k, k)`, fully-connected
/// weights `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Conv1x1 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    ReLU,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Flatten,
    SoftmaxClassifier,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 { .. } => "Conv3x3",
            LayerKind::Conv1x1 { .. } => "Conv1x1",
            LayerKind::FullyConnected { .. } => "FullyConnected",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::AvgPool { .. } => "AvgPool",
            LayerKind::Flatten => "Flatten",
            LayerKind::SoftmaxClassifier => "SoftmaxClassifier",
        }
    }

    /// Owns a weight tensor.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 { .. }
                | LayerKind::Conv1x1 { .. }
                | LayerKind::FullyConnected { .. }
                | LayerKind::BatchNorm { .. }
        )
    }

    /// Weights of this layer go through the codebooks.
    pub fn is_compressible(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 { .. }
                | LayerKind::Conv1x1 { .. }
                | LayerKind::FullyConnected { .. }
        )
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => Some(vec![out_channels, in_channels, 3, 3]),
            LayerKind::Conv1x1 {
                in_channels,
                out_channels,
                ..
            } => Some(vec![out_channels, in_channels, 1, 1]),
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::BatchNorm { channels } => Some(vec![channels]),
            _ => None,
        }
    }

    /// Length of the bias (or BN shift) vector, if any.
    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv3x3 { out_channels, .. } | LayerKind::Conv1x1 { out_channels, .. } => {
                Some(out_channels)
            }
            LayerKind::FullyConnected { out_features, .. } => Some(out_features),
            LayerKind::BatchNorm { channels } => Some(channels),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>, NnError> {
        let mismatch = |expected: String| NnError::ShapeMismatch {
            layer_index: index,
            kind: self.name(),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                padding,
            } => match input {
                &[c, h, w] if c == in_channels => {
                    let out = |x: usize| (x + 2 * padding).checked_sub(3).map(|v| v / stride + 1);
                    match (out(h), out(w)) {
                        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(vec![out_channels, ho, wo]),
                        _ => Err(mismatch(format!(
                            "spatial extent >= {}",
                            3 - 2 * padding.min(1)
                        ))),
                    }
                }
                _ => Err(mismatch(format!("[{in_channels}, H, W]"))),
            },
            LayerKind::Conv1x1 {
                in_channels,
                out_channels,
                stride,
            } => match input {
                &[c, h, w] if c == in_channels => Ok(vec![
                    out_channels,
                    (h - 1) / stride + 1,
                    (w - 1) / stride + 1,
                ]),
                _ => Err(mismatch(format!("[{in_channels}, H, W]"))),
            },
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => match input {
                &[f] if f == in_features => Ok(vec![out_features]),
                _ => Err(mismatch(format!("[{in_features}]"))),
            },
            LayerKind::BatchNorm { channels } => match input.first() {
                Some(&c) if c == channels && (input.len() == 1 || input.len() == 3) => {
                    Ok(input.to_vec())
                }
                _ => Err(mismatch(format!("[{channels}] or [{channels}, H, W]"))),
            },
            LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::MaxPool { size } | LayerKind::AvgPool { size } => match input {
                &[c, h, w] if h >= size && w >= size && size > 0 => Ok(vec![c, h / size, w / size]),
                _ => Err(mismatch(format!("[C, H>={size}, W>={size}]"))),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::SoftmaxClassifier => match input {
                &[_] => Ok(input.to_vec()),
                _ => Err(mismatch("[classes]".into())),
            },
        }
    }
}

/// One entry of a model's topologically ordered layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// 1-based position in the layer list.
    pub index: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}
