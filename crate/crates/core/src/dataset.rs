//! Labeled sample collections.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// `(N, ...)` samples.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, String> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(format!("{n} samples but {} labels", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Train / test / holdout partition of one task's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: LabeledDataset,
    /// The split the compression loop evaluates against.
    pub test: LabeledDataset,
    /// Never seen by training or by the compression loop.
    pub holdout: LabeledDataset,
}

impl Splits {
    /// Splits a dataset whose samples are already shuffled: the last
    /// `test_frac` goes to test, the `holdout_frac` before it to holdout.
    pub fn partition(data: &LabeledDataset, test_frac: f64, holdout_frac: f64) -> Self {
        let n = data.len();
        let n_test = ((n as f64) * test_frac).round() as usize;
        let n_hold = ((n as f64) * holdout_frac).round() as usize;
        let n_train = n - n_test - n_hold;
        let idx: Vec<usize> = (0..n).collect();
        Self {
            train: data.subset(&idx[..n_train]),
            holdout: data.subset(&idx[n_train..n_train + n_hold]),
            test: data.subset(&idx[n_train + n_hold..]),
        }
    }
}
