//! Gathering convolution and fully-connected weights into the two
//! fixed-width vector pools the codebooks are trained on.
//!
//! 3×3 kernels go to one pool, 1×1 kernels and fully-connected weights to the
//! other. A layer's weight tensor is flattened in row-major order and cut into
//! rows of `d` values; the final row of each layer is zero-padded. Rows never
//! span two layers, so every row traces back to exactly one source.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::nn::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupId {
    /// 3×3 convolution kernels.
    G3x3,
    /// 1×1 convolutions and fully-connected layers.
    G1x1Fc,
}

impl GroupId {
    pub const ALL: [GroupId; 2] = [GroupId::G3x3, GroupId::G1x1Fc];

    pub fn of(kind: &LayerKind) -> Option<GroupId> {
        match kind {
            LayerKind::Conv3x3 { .. } => Some(GroupId::G3x3),
            LayerKind::Conv1x1 { .. } | LayerKind::FullyConnected { .. } => Some(GroupId::G1x1Fc),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            GroupId::G3x3 => 0,
            GroupId::G1x1Fc => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<GroupId> {
        match tag {
            0 => Some(GroupId::G3x3),
            1 => Some(GroupId::G1x1Fc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoolError {
    #[error("model {model}, layer {layer_index}: {reason}")]
    UnsupportedLayer {
        model: String,
        layer_index: usize,
        reason: String,
    },
    #[error("invalid group configuration: {0}")]
    Config(String),
    #[error("cannot unpool {model} layer {layer_index}: {reason}")]
    Unpool {
        model: String,
        layer_index: usize,
        reason: String,
    },
    #[error("no models to pool")]
    Empty,
}

/// Vector geometry of one weight group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightGroup {
    pub id: GroupId,
    /// Vector length.
    pub d: usize,
    /// Number of sub-vectors per vector.
    pub m: usize,
}

impl WeightGroup {
    pub fn dsub(&self) -> usize {
        self.d / self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub m: usize,
    pub d_3x3: usize,
    pub d_1x1fc: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            m: 2,
            d_3x3: 18,
            d_1x1fc: 8,
        }
    }
}

impl GroupConfig {
    pub fn group(&self, id: GroupId) -> WeightGroup {
        let d = match id {
            GroupId::G3x3 => self.d_3x3,
            GroupId::G1x1Fc => self.d_1x1fc,
        };
        WeightGroup { id, d, m: self.m }
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if self.m == 0 || self.d_3x3 == 0 || self.d_1x1fc == 0 {
            return Err(PoolError::Config("m and d must be positive".into()));
        }
        for (name, d) in [("d_3x3", self.d_3x3), ("d_1x1fc", self.d_1x1fc)] {
            if d % self.m != 0 {
                return Err(PoolError::Config(format!(
                    "{name}={d} is not divisible by m={}",
                    self.m
                )));
            }
        }
        if !self.d_3x3.is_multiple_of(9) {
            return Err(PoolError::Config(format!(
                "d_3x3={} must hold whole 3x3 kernels",
                self.d_3x3
            )));
        }
        Ok(())
    }
}

/// Where a block of pool rows came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub layer_index: usize,
    pub rows: Range<usize>,
    /// Zeros appended to the layer's final row.
    pub pad_count: usize,
    pub shape: Vec<usize>,
}

/// A `rows × d` matrix of weight vectors for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPool {
    pub group: WeightGroup,
    pub vectors: Vec<f32>,
    pub provenance: Vec<Provenance>,
}

impl WeightPool {
    pub fn new(group: WeightGroup) -> Self {
        Self {
            group,
            vectors: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.vectors.len() / self.group.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.group.d..(i + 1) * self.group.d]
    }

    /// The `sub`-th sub-vector column block, as a packed `rows × dsub` matrix.
    pub fn subvectors(&self, sub: usize) -> Vec<f32> {
        let dsub = self.group.dsub();
        self.vectors
            .chunks(self.group.d)
            .flat_map(|row| row[sub * dsub..(sub + 1) * dsub].iter().copied())
            .collect()
    }

    /// Indices of rows that hold no real weights at all.
    pub fn fully_padded_rows(&self) -> Vec<usize> {
        let d = self.group.d;
        self.provenance
            .iter()
            .filter(|p| p.pad_count >= d)
            .map(|p| p.rows.end - 1)
            .collect()
    }

    pub fn entry(&self, model: &str, layer_index: usize) -> Option<&Provenance> {
        self.provenance
            .iter()
            .find(|p| p.model == model && p.layer_index == layer_index)
    }

    /// Rows belonging to one provenance entry.
    pub fn rows_of(&self, entry: &Provenance) -> &[f32] {
        let d = self.group.d;
        &self.vectors[entry.rows.start * d..entry.rows.end * d]
    }

    fn push_layer(&mut self, model: &str, layer_index: usize, weight: &Tensor) {
        let d = self.group.d;
        let start = self.num_rows();
        let n = weight.len();
        let rows = n.div_ceil(d);
        let pad_count = rows * d - n;
        self.vectors.extend_from_slice(weight.data());
        self.vectors.extend(std::iter::repeat_n(0.0f32, pad_count));
        self.provenance.push(Provenance {
            model: model.to_string(),
            layer_index,
            rows: start..start + rows,
            pad_count,
            shape: weight.shape().to_vec(),
        });
    }
}

/// Checks that a parameterized layer can be pooled and returns its group.
fn classify(model: &ModelGraph, index: usize) -> Result<Option<GroupId>, PoolError> {
    let layer = model
        .layer(index)
        .ok_or_else(|| PoolError::UnsupportedLayer {
            model: model.name.clone(),
            layer_index: index,
            reason: "no such layer".into(),
        })?;
    if matches!(layer.kind, LayerKind::BatchNorm { .. }) {
        return Ok(None);
    }
    let Some(group) = GroupId::of(&layer.kind) else {
        return Err(PoolError::UnsupportedLayer {
            model: model.name.clone(),
            layer_index: index,
            reason: format!("{} layers cannot own pooled weights", layer.kind.name()),
        });
    };
    let weight = model
        .weight(index)
        .ok_or_else(|| PoolError::UnsupportedLayer {
            model: model.name.clone(),
            layer_index: index,
            reason: "missing weight tensor".into(),
        })?;
    let expected = layer.kind.weight_shape().unwrap_or_default();
    if weight.shape() != expected.as_slice() {
        return Err(PoolError::UnsupportedLayer {
            model: model.name.clone(),
            layer_index: index,
            reason: format!(
                "weight shape {:?} is not a {} kernel {:?}",
                weight.shape(),
                layer.kind.name(),
                expected
            ),
        });
    }
    Ok(Some(group))
}

/// Pools the selected layers of one model into `pools` (indexed by group).
pub fn pool_model_layers(
    model: &ModelGraph,
    include: impl Fn(usize) -> bool,
    pools: &mut [WeightPool; 2],
) -> Result<(), PoolError> {
    for &index in model.params.keys() {
        let Some(group) = classify(model, index)? else {
            continue;
        };
        if !include(index) {
            continue;
        }
        let pool = &mut pools[group.tag() as usize];
        pool.push_layer(&model.name, index, model.weight(index).expect("classified"));
    }
    Ok(())
}

pub fn empty_pools(cfg: &GroupConfig) -> [WeightPool; 2] {
    [
        WeightPool::new(cfg.group(GroupId::G3x3)),
        WeightPool::new(cfg.group(GroupId::G1x1Fc)),
    ]
}

/// Concatenates the compressible weights of all models into the two group pools.
///
/// Returns `(3×3 pool, 1×1/FC pool)`. Biases and batch-norm parameters are never pooled.
pub fn pool_weights(
    models: &[&ModelGraph],
    cfg: &GroupConfig,
) -> Result<(WeightPool, WeightPool), PoolError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(PoolError::Empty);
    }
    let mut pools = empty_pools(cfg);
    for model in models {
        pool_model_layers(model, |_| true, &mut pools)?;
    }
    let [g3, g1] = pools;
    Ok((g3, g1))
}

/// Rebuilds a layer's weight tensor from its pool rows, dropping the padding.
///
/// `rows` holds exactly the rows of `entry` (as returned by [`WeightPool::rows_of`]).
pub fn unpool_layer(rows: &[f32], d: usize, entry: &Provenance) -> Result<Tensor, PoolError> {
    let err = |reason: String| PoolError::Unpool {
        model: entry.model.clone(),
        layer_index: entry.layer_index,
        reason,
    };
    let n: usize = entry.shape.iter().product();
    let row_count = entry.rows.len();
    if rows.len() != row_count * d {
        return Err(err(format!(
            "expected {} rows of {d} values, got {} values",
            row_count,
            rows.len()
        )));
    }
    if row_count * d != n + entry.pad_count {
        return Err(err(format!(
            "{row_count} rows of {d} cannot hold {n} weights with {} padding",
            entry.pad_count
        )));
    }
    Tensor::new(entry.shape.clone(), rows[..n].to_vec()).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelBuilder;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn one_conv_two_kernels_one_row() {
        let m = ModelBuilder::new("a", vec![1, 4, 4])
            .conv3x3(2, 1, 1)
            .build(&mut rng(0))
            .unwrap();
        let (g3, g1) = pool_weights(&[&m], &GroupConfig::default()).unwrap();
        assert_eq!(g3.num_rows(), 1);
        assert_eq!(g3.provenance[0].pad_count, 0);
        assert_eq!(g3.row(0), m.weight(1).unwrap().data());
        assert_eq!(g1.num_rows(), 0);
    }

    #[test]
    fn ragged_fc_tail_is_padded() {
        let m = ModelBuilder::new("a", vec![5])
            .fc(2)
            .build(&mut rng(0))
            .unwrap();
        let (_, g1) = pool_weights(&[&m], &GroupConfig::default()).unwrap();
        assert_eq!(g1.num_rows(), 2);
        let e = &g1.provenance[0];
        assert_eq!(e.pad_count, 6);
        assert_eq!(&g1.row(1)[2..], &[0.0; 6]);
        let back = unpool_layer(g1.rows_of(e), 8, e).unwrap();
        assert_eq!(back.len(), 10);
        assert!(back.bit_eq(m.weight(1).unwrap()));
    }

    #[test]
    fn kws_layer_pair_ratio() {
        let small: usize = [140, 1, 3, 3].iter().product();
        let large: usize = [196, 112, 1, 1].iter().product();
        assert_eq!((small, large), (1260, 21952));
        assert!((large as f64 / small as f64 - 17.4).abs() < 0.05);
    }

    #[test]
    fn batch_norm_and_biases_stay_out() {
        let m = ModelBuilder::new("a", vec![2, 4, 4])
            .conv3x3(3, 1, 1)
            .batch_norm()
            .conv1x1(4)
            .flatten()
            .fc(3)
            .build(&mut rng(1))
            .unwrap();
        let (g3, g1) = pool_weights(&[&m], &GroupConfig::default()).unwrap();
        assert_eq!(
            g3.provenance
                .iter()
                .map(|p| p.layer_index)
                .collect::<Vec<_>>(),
            vec![1]
        );
        assert_eq!(
            g1.provenance
                .iter()
                .map(|p| p.layer_index)
                .collect::<Vec<_>>(),
            vec![3, 5]
        );
        let pooled: usize = g3.vectors.len() + g1.vectors.len();
        let pads: usize = g3
            .provenance
            .iter()
            .chain(&g1.provenance)
            .map(|p| p.pad_count)
            .sum();
        assert_eq!(pooled - pads, 54 + 12 + 192);
    }

    #[test]
    fn mismatched_weight_shape_names_layer() {
        let mut m = ModelBuilder::new("bad", vec![4])
            .fc(2)
            .build(&mut rng(0))
            .unwrap();
        m.params.get_mut(&1).unwrap().weight = Tensor::zeros(vec![2, 2, 2]);
        match pool_weights(&[&m], &GroupConfig::default()) {
            Err(PoolError::UnsupportedLayer {
                model, layer_index, ..
            }) => {
                assert_eq!((model.as_str(), layer_index), ("bad", 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unpool_rejects_wrong_row_count() {
        let m = ModelBuilder::new("a", vec![5])
            .fc(2)
            .build(&mut rng(0))
            .unwrap();
        let (_, g1) = pool_weights(&[&m], &GroupConfig::default()).unwrap();
        let e = &g1.provenance[0];
        assert!(unpool_layer(&g1.vectors[..8], 8, e).is_err());
    }

    #[derive(Debug, Clone)]
    enum Arch {
        Conv3(usize, usize),
        Conv1(usize, usize),
        Fc(usize, usize),
    }

    fn arch() -> impl Strategy<Value = Arch> {
        prop_oneof![
            (1usize..6, 1usize..6).prop_map(|(a, b)| Arch::Conv3(a, b)),
            (1usize..6, 1usize..6).prop_map(|(a, b)| Arch::Conv1(a, b)),
            (1usize..20, 1usize..9).prop_map(|(a, b)| Arch::Fc(a, b)),
        ]
    }

    fn build(name: &str, layers: &[Arch], seed: u64) -> ModelGraph {
        // Each layer sits in its own tiny model chain; channel counts are arbitrary.
        let mut b = match layers[0] {
            Arch::Fc(i, _) => ModelBuilder::new(name, vec![i]),
            Arch::Conv3(i, _) | Arch::Conv1(i, _) => ModelBuilder::new(name, vec![i, 3, 3]),
        };
        for l in layers {
            b = match *l {
                Arch::Conv3(_, o) => b.conv3x3(o, 1, 1),
                Arch::Conv1(_, o) => b.conv1x1(o),
                Arch::Fc(_, o) => b.flatten().fc(o),
            };
            if matches!(l, Arch::Fc(..)) {
                break;
            }
        }
        b.build(&mut rng(seed)).unwrap()
    }

    proptest! {
        #[test]
        fn three_model_round_trip(
            a in prop::collection::vec(arch(), 1..4),
            b in prop::collection::vec(arch(), 1..4),
            c in prop::collection::vec(arch(), 1..4),
            seed in 0u64..1000,
        ) {
            let models = [build("a", &a, seed), build("b", &b, seed + 1), build("c", &c, seed + 2)];
            let refs: Vec<&ModelGraph> = models.iter().collect();
            let (g3, g1) = pool_weights(&refs, &GroupConfig::default()).unwrap();
            let mut seen = 0;
            for pool in [&g3, &g1] {
                let mut next_row = 0;
                for e in &pool.provenance {
                    prop_assert_eq!(e.rows.start, next_row);
                    next_row = e.rows.end;
                    prop_assert!(e.pad_count < pool.group.d);
                    let model = models.iter().find(|m| m.name == e.model).unwrap();
                    let kind = model.layer(e.layer_index).unwrap().kind;
                    prop_assert_eq!(GroupId::of(&kind), Some(pool.group.id));
                    let back = unpool_layer(pool.rows_of(e), pool.group.d, e).unwrap();
                    prop_assert!(back.bit_eq(model.weight(e.layer_index).unwrap()));
                    seen += back.len();
                }
                prop_assert_eq!(next_row, pool.num_rows());
            }
            let total: usize = models.iter().flat_map(|m| m.compressible_layers().into_iter().map(move |i| m.weight(i).unwrap().len())).sum();
            prop_assert_eq!(seen, total);
        }
    }
}
