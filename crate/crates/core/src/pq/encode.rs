use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::codebook::{CodebookPair, GroupCodebook};
use super::PqError;
use crate::nn::ModelGraph;
use crate::pool::{self, GroupConfig, GroupId, Provenance};
use crate::tensor::Tensor;

/// Codes for the rows of one layer: `rows × m`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    pub group: GroupId,
    pub m: usize,
    pub codes: Vec<u16>,
}

impl CodeMatrix {
    pub fn rows(&self) -> usize {
        self.codes.len().checked_div(self.m).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }
}

/// Per-layer codes keyed by layer index.
pub type LayerCodes = BTreeMap<usize, CodeMatrix>;

/// Nearest-codeword codes for one `d`-vector of the given group.
pub fn encode(vector: &[f32], pair: &CodebookPair, group: GroupId) -> Result<Vec<u16>, PqError> {
    pair.group(group).encode_row(vector).map(|(c, _)| c)
}

fn encode_entry(book: &GroupCodebook, rows: &[f32]) -> Result<(CodeMatrix, f64), PqError> {
    let d = book.group().d;
    let mut codes = Vec::with_capacity(rows.len() / d * book.group().m);
    let mut err = 0.0;
    for row in rows.chunks_exact(d) {
        let (c, e) = book.encode_row(row)?;
        codes.extend(c);
        err += e;
    }
    Ok((
        CodeMatrix {
            group: book.group().id,
            m: book.group().m,
            codes,
        },
        err,
    ))
}

/// Encodes the compressible layers of `model` selected by `include`.
///
/// Returns the codes and each layer's squared reconstruction error (padding included).
pub fn encode_layers(
    model: &ModelGraph,
    pair: &CodebookPair,
    include: impl Fn(usize) -> bool,
) -> Result<(LayerCodes, BTreeMap<usize, f64>), PqError> {
    let cfg = GroupConfig {
        m: pair.group(GroupId::G3x3).group().m,
        d_3x3: pair.group(GroupId::G3x3).group().d,
        d_1x1fc: pair.group(GroupId::G1x1Fc).group().d,
    };
    let mut pools = pool::empty_pools(&cfg);
    pool::pool_model_layers(model, include, &mut pools)?;
    let mut codes = LayerCodes::new();
    let mut errors = BTreeMap::new();
    for p in &pools {
        let book = pair.group(p.group.id);
        for entry in &p.provenance {
            let (cm, err) = encode_entry(book, p.rows_of(entry))?;
            codes.insert(entry.layer_index, cm);
            errors.insert(entry.layer_index, err);
        }
    }
    Ok((codes, errors))
}

/// Encodes every compressible layer of a model.
pub fn encode_model(model: &ModelGraph, pair: &CodebookPair) -> Result<LayerCodes, PqError> {
    encode_layers(model, pair, |_| true).map(|(c, _)| c)
}

/// Expands one layer's codes back into a weight tensor of `shape`.
pub fn decode_layer(
    codes: &CodeMatrix,
    pair: &CodebookPair,
    layer_index: usize,
    shape: &[usize],
) -> Result<Tensor, PqError> {
    let book = pair.group(codes.group);
    if book.is_empty() {
        return Err(PqError::MissingGroup(codes.group));
    }
    let d = book.group().d;
    let n: usize = shape.iter().product();
    let rows = n.div_ceil(d);
    if codes.m != book.group().m || codes.rows() != rows {
        return Err(PqError::BadCodes {
            layer_index,
            reason: format!(
                "{} rows of {} codes for a tensor needing {rows} rows",
                codes.rows(),
                codes.m
            ),
        });
    }
    if let Some(&bad) = codes.codes.iter().find(|&&c| c as usize >= book.k()) {
        return Err(PqError::BadCodes {
            layer_index,
            reason: format!("code {bad} out of range for K={}", book.k()),
        });
    }
    let mut flat = Vec::with_capacity(rows * d);
    for i in 0..rows {
        book.decode_row(codes.row(i), &mut flat);
    }
    let entry = Provenance {
        model: String::new(),
        layer_index,
        rows: 0..rows,
        pad_count: rows * d - n,
        shape: shape.to_vec(),
    };
    Ok(pool::unpool_layer(&flat, d, &entry)?)
}

/// Builds Ŵ: compressible layers come from codewords, except `escapes`,
/// which keep the skeleton's stored weights. Biases and batch-norm
/// parameters are always copied from the skeleton.
pub fn reconstruct_model(
    codes: &LayerCodes,
    pair: &CodebookPair,
    skeleton: &ModelGraph,
    escapes: &BTreeSet<usize>,
) -> Result<ModelGraph, PqError> {
    let mut out = skeleton.clone();
    for index in skeleton.compressible_layers() {
        if escapes.contains(&index) {
            continue;
        }
        let cm = codes.get(&index).ok_or(PqError::MissingCodes(index))?;
        let shape = skeleton.layer(index).unwrap().kind.weight_shape().unwrap();
        let w = decode_layer(cm, pair, index, &shape)?;
        out.params
            .get_mut(&index)
            .expect("compressible layer has params")
            .weight = w;
    }
    Ok(out)
}
