//! Budgeted int8 execution: models are rebuilt from a bundle image into a
//! fixed-size arena, run layer by layer, and swapped in place.
//!
//! The bundle bytes play the role of flash and the arena of SRAM. Nothing
//! is simulated beyond byte counts: [`LoadStats`] reports how much of the
//! image a load touched and how much it wrote.

use std::collections::{BTreeMap, BTreeSet};

use crate::bundle::{
    self, Bundle, BundleError, EncodedModel, LayerPayload, WeightStorage, DIRECTORY_ENTRY_BYTES,
};
use crate::nn::LayerKind;
use crate::quant::{round_half_away, F16CodebookPair, FixedMultiplier, QuantParams};
use crate::tensor::Tensor;

pub const DEFAULT_ARENA_BYTES: usize = 524_288;
pub const DEFAULT_FLASH_BYTES: usize = 1_048_576;
/// Bytes of per-layer bookkeeping kept in the arena.
pub const LAYER_DESCRIPTOR_BYTES: usize = 24;
/// Per-channel batch-norm record: multiplier, shift, offset.
const BN_CHANNEL_BYTES: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("model {model:?} needs {required} arena bytes, {available} available")]
    Capacity {
        model: String,
        required: usize,
        available: usize,
    },
    #[error("no model named {0:?} in bundle")]
    UnknownModel(String),
    #[error("arena holds no model")]
    Empty,
    #[error("input has {actual} values, model {model:?} expects shape {expected:?}")]
    InputShape {
        model: String,
        expected: Vec<usize>,
        actual: usize,
    },
    #[error("model {model:?} layer {layer}: {reason}")]
    Corrupt {
        model: String,
        layer: usize,
        reason: String,
    },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// Read-only bundle image.
#[derive(Debug, Clone)]
pub struct Flash {
    bytes: Vec<u8>,
    bundle: Bundle,
    records: BTreeMap<String, usize>,
}

impl Flash {
    pub fn new(bytes: Vec<u8>) -> Result<Self, BundleError> {
        let (bundle, acct) = bundle::deserialize_with_accounting(&bytes)?;
        let records = acct
            .models
            .into_iter()
            .map(|(name, a)| (name, a.total()))
            .collect();
        Ok(Self {
            bytes,
            bundle,
            records,
        })
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self, BundleError> {
        Self::new(bundle::serialize(b)?)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn model_names(&self) -> Vec<String> {
        self.bundle.models.iter().map(|m| m.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Directory entry, model record and every distinct codeword looked up.
    pub bytes_read: usize,
    pub bytes_written: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Region {
    offset: usize,
    len: usize,
}

impl Region {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Dense {
        weights: Region,
        w_zp: i32,
        /// int32 biases at scale `S_w · S_x`.
        bias: Region,
        mult: FixedMultiplier,
    },
    Norm {
        params: Region,
    },
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
struct ResidentLayer {
    kind: LayerKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    in_qp: QuantParams,
    out_qp: QuantParams,
    op: Op,
}

/// Descriptor of the model currently held by an arena.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidentModel {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    pub output_len: usize,
    /// Arena bytes in use.
    pub bytes: usize,
    layers: Vec<ResidentLayer>,
    scratch: [Region; 2],
}

/// A fixed-capacity region that holds at most one model.
#[derive(Debug)]
pub struct Arena {
    mem: Vec<u8>,
    used: usize,
    high_water: usize,
    resident: Option<ResidentModel>,
}

struct Plan {
    shapes: Vec<Vec<usize>>,
    layer_bytes: Vec<usize>,
    scratch: usize,
    total: usize,
}

fn plan(m: &EncodedModel) -> Result<Plan, RuntimeError> {
    let corrupt = |layer: usize, reason: String| RuntimeError::Corrupt {
        model: m.name.clone(),
        layer,
        reason,
    };
    let mut shapes = vec![m.input_shape.clone()];
    let mut layer_bytes = Vec::with_capacity(m.layers.len());
    for (i, l) in m.layers.iter().enumerate() {
        let out = l
            .kind
            .output_shape(shapes.last().unwrap(), i + 1)
            .map_err(|e| corrupt(i + 1, e.to_string()))?;
        let params = match (&l.payload, l.kind) {
            (LayerPayload::Weighted { bias, .. }, k) => {
                k.weight_shape().unwrap().iter().product::<usize>() + 4 * bias.len()
            }
            (LayerPayload::BatchNorm { .. }, LayerKind::BatchNorm { channels }) => {
                BN_CHANNEL_BYTES * channels
            }
            _ => 0,
        };
        layer_bytes.push(LAYER_DESCRIPTOR_BYTES + params);
        shapes.push(out);
    }
    let scratch = shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .max()
        .unwrap_or(0);
    let total = layer_bytes.iter().sum::<usize>() + 2 * scratch;
    Ok(Plan {
        shapes,
        layer_bytes,
        scratch,
        total,
    })
}

/// Arena bytes a model needs when resident.
pub fn required_bytes(m: &EncodedModel) -> Result<usize, RuntimeError> {
    plan(m).map(|p| p.total)
}

fn quantize_i32(x: f64) -> i32 {
    round_half_away(x).clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

fn sat8(v: i32) -> i8 {
    v.clamp(-128, 127) as i8
}

impl Arena {
    pub fn new(capacity: usize) -> Self {
        Self {
            mem: vec![0; capacity],
            used: 0,
            high_water: 0,
            resident: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.mem.len()
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn resident(&self) -> Option<&ResidentModel> {
        self.resident.as_ref()
    }

    pub fn resident_name(&self) -> Option<&str> {
        self.resident.as_ref().map(|r| r.name.as_str())
    }

    fn clear(&mut self) {
        self.resident = None;
        self.used = 0;
    }

    fn alloc(&mut self, len: usize) -> Result<Region, RuntimeError> {
        if self.used + len > self.mem.len() {
            // The plan is checked up front, so this only fires on a bug.
            return Err(RuntimeError::Capacity {
                model: String::new(),
                required: self.used + len,
                available: self.mem.len(),
            });
        }
        let r = Region {
            offset: self.used,
            len,
        };
        self.used += len;
        self.high_water = self.high_water.max(self.used);
        Ok(r)
    }

    /// Loads `name`, replacing whatever is resident.
    ///
    /// A model that cannot fit is rejected before anything is touched; any
    /// later failure leaves the arena empty.
    pub fn load(&mut self, flash: &Flash, name: &str) -> Result<LoadStats, RuntimeError> {
        let model = flash
            .bundle
            .models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| RuntimeError::UnknownModel(name.to_string()))?;
        let plan = plan(model)?;
        if plan.total > self.capacity() {
            return Err(RuntimeError::Capacity {
                model: name.to_string(),
                required: plan.total,
                available: self.capacity(),
            });
        }
        // The old model is gone from here on: one model's worth of memory at a time.
        self.clear();
        match self.write_model(model, &flash.bundle.codebooks, &plan) {
            Ok((resident, mut stats)) => {
                stats.bytes_read += DIRECTORY_ENTRY_BYTES + flash.records[name];
                self.resident = Some(resident);
                Ok(stats)
            }
            Err(e) => {
                self.clear();
                Err(e)
            }
        }
    }

    /// Same as [`Arena::load`]; reloading the resident model is allowed.
    pub fn swap(&mut self, flash: &Flash, name: &str) -> Result<LoadStats, RuntimeError> {
        self.load(flash, name)
    }

    fn write_model(
        &mut self,
        m: &EncodedModel,
        pair: &F16CodebookPair,
        plan: &Plan,
    ) -> Result<(ResidentModel, LoadStats), RuntimeError> {
        let mut stats = LoadStats::default();
        // Distinct (group, sub-codebook, code) lookups: each costs one codeword read.
        let mut touched: BTreeSet<(u8, usize, u16)> = BTreeSet::new();
        let mut layers = Vec::with_capacity(m.layers.len());
        let mut in_qp = m.input_qp;
        for (i, l) in m.layers.iter().enumerate() {
            let index = i + 1;
            let corrupt = |reason: String| RuntimeError::Corrupt {
                model: m.name.clone(),
                layer: index,
                reason,
            };
            let desc = self.alloc(LAYER_DESCRIPTOR_BYTES)?;
            let op = match (&l.payload, l.kind) {
                (
                    LayerPayload::Weighted {
                        weight_qp,
                        storage,
                        bias,
                    },
                    kind,
                ) => {
                    let n: usize = kind.weight_shape().unwrap().iter().product();
                    let weights = self.alloc(n)?;
                    let dst = &mut self.mem[weights.range()];
                    match storage {
                        WeightStorage::Codes { group, codes, .. } => {
                            let g = pair.group(*group);
                            let (dsub, mm) = (g.group.dsub(), g.group.m);
                            if g.subs.len() != mm {
                                return Err(corrupt(format!("no {group:?} codebook")));
                            }
                            let mut w = 0;
                            'rows: for row in codes.chunks_exact(mm) {
                                for (s, &c) in row.iter().enumerate() {
                                    let sub = &g.subs[s];
                                    if c as usize >= sub.k {
                                        return Err(corrupt(format!("code {c} >= K={}", sub.k)));
                                    }
                                    touched.insert((group.tag(), s, c));
                                    for &bits in
                                        &sub.bits[c as usize * dsub..(c as usize + 1) * dsub]
                                    {
                                        if w == n {
                                            break 'rows;
                                        }
                                        let v = half::f16::from_bits(bits).to_f32();
                                        dst[w] = weight_qp.quantize_value(v) as u8;
                                        w += 1;
                                    }
                                }
                            }
                            if w != n {
                                return Err(corrupt(format!("codes cover {w} of {n} weights")));
                            }
                        }
                        WeightStorage::Int8(q) => {
                            if q.len() != n {
                                return Err(corrupt(format!(
                                    "{} int8 weights, expected {n}",
                                    q.len()
                                )));
                            }
                            for (d, &v) in dst.iter_mut().zip(q) {
                                *d = v as u8;
                            }
                        }
                        WeightStorage::RawF32(v) => {
                            if v.len() != n {
                                return Err(corrupt(format!(
                                    "{} f32 weights, expected {n}",
                                    v.len()
                                )));
                            }
                            for (d, &x) in dst.iter_mut().zip(v) {
                                *d = weight_qp.quantize_value(x) as u8;
                            }
                        }
                    }
                    let acc_scale = weight_qp.scale as f64 * in_qp.scale as f64;
                    let bias_r = self.alloc(4 * bias.len())?;
                    for (chunk, &b) in self.mem[bias_r.range()].chunks_exact_mut(4).zip(bias) {
                        chunk.copy_from_slice(&quantize_i32(b as f64 / acc_scale).to_le_bytes());
                    }
                    Op::Dense {
                        weights,
                        w_zp: weight_qp.zero_point as i32,
                        bias: bias_r,
                        mult: FixedMultiplier::new(acc_scale / l.out_qp.scale as f64),
                    }
                }
                (
                    LayerPayload::BatchNorm {
                        eps,
                        gamma,
                        beta,
                        mean,
                        var,
                    },
                    LayerKind::BatchNorm { channels },
                ) => {
                    let params = self.alloc(BN_CHANNEL_BYTES * channels)?;
                    let so = l.out_qp.scale as f64;
                    for c in 0..channels {
                        let a = gamma[c] as f64 / (var[c] as f64 + *eps as f64).sqrt();
                        let shift = beta[c] as f64 - a * mean[c] as f64;
                        let fm = FixedMultiplier::new(a * in_qp.scale as f64 / so);
                        let rec = &mut self.mem[params.offset + c * BN_CHANNEL_BYTES..]
                            [..BN_CHANNEL_BYTES];
                        rec[0..4].copy_from_slice(&fm.m0.to_le_bytes());
                        rec[4..8].copy_from_slice(&fm.shift.to_le_bytes());
                        rec[8..12].copy_from_slice(&quantize_i32(shift / so).to_le_bytes());
                    }
                    Op::Norm { params }
                }
                (LayerPayload::None, LayerKind::ReLU) => Op::Relu,
                (LayerPayload::None, LayerKind::MaxPool { size }) => Op::MaxPool(size),
                (LayerPayload::None, LayerKind::AvgPool { size }) => Op::AvgPool(size),
                (LayerPayload::None, LayerKind::Flatten | LayerKind::SoftmaxClassifier) => {
                    Op::Identity
                }
                _ => return Err(corrupt("payload does not match layer kind".into())),
            };
            if matches!(
                op,
                Op::Relu | Op::MaxPool(_) | Op::AvgPool(_) | Op::Identity
            ) && l.out_qp != in_qp
            {
                return Err(corrupt("shape-only layer changes quantization".into()));
            }
            // Descriptor: kind tag, zero points, requantization constants.
            let d = &mut self.mem[desc.range()];
            d.fill(0);
            d[0] = bundle::kind_tag(&l.kind);
            d[1] = in_qp.zero_point as u8;
            d[2] = l.out_qp.zero_point as u8;
            d[4..8].copy_from_slice(&l.out_qp.scale.to_le_bytes());
            if let Op::Dense { w_zp, mult, .. } = &op {
                d[3] = *w_zp as i8 as u8;
                d[8..12].copy_from_slice(&mult.m0.to_le_bytes());
                d[12..16].copy_from_slice(&mult.shift.to_le_bytes());
            }
            layers.push(ResidentLayer {
                kind: l.kind,
                in_shape: plan.shapes[i].clone(),
                out_shape: plan.shapes[i + 1].clone(),
                in_qp,
                out_qp: l.out_qp,
                op,
            });
            in_qp = l.out_qp;
        }
        let scratch = [self.alloc(plan.scratch)?, self.alloc(plan.scratch)?];
        debug_assert_eq!(self.used, plan.total);
        debug_assert_eq!(
            plan.layer_bytes.iter().sum::<usize>() + 2 * plan.scratch,
            self.used
        );
        stats.bytes_written = self.used - 2 * plan.scratch;
        for (tag, _, _) in &touched {
            let id = crate::pool::GroupId::from_tag(*tag).expect("tag from GroupId");
            stats.bytes_read += pair.group(id).group.dsub() * 2;
        }
        Ok((
            ResidentModel {
                name: m.name.clone(),
                input_shape: m.input_shape.clone(),
                input_qp: m.input_qp,
                output_qp: in_qp,
                output_len: plan.shapes.last().unwrap().iter().product(),
                bytes: self.used,
                layers,
                scratch,
            },
            stats,
        ))
    }

    /// The resident int8 weights of layer `index` (1-based).
    pub fn resident_weights(&self, index: usize) -> Option<Vec<i8>> {
        let r = self.resident.as_ref()?;
        match &r.layers.get(index.checked_sub(1)?)?.op {
            Op::Dense { weights, .. } => {
                Some(self.mem[weights.range()].iter().map(|&b| b as i8).collect())
            }
            _ => None,
        }
    }

    /// Runs one sample and returns dequantized class scores.
    pub fn infer(&mut self, input: &[f32]) -> Result<Vec<f32>, RuntimeError> {
        let r = self.resident.as_ref().ok_or(RuntimeError::Empty)?;
        let expected: usize = r.input_shape.iter().product();
        if input.len() != expected {
            return Err(RuntimeError::InputShape {
                model: r.name.clone(),
                expected: r.input_shape.clone(),
                actual: input.len(),
            });
        }
        let [a, b] = r.scratch;
        for (d, &x) in self.mem[a.range()].iter_mut().zip(input) {
            *d = r.input_qp.quantize_value(x) as u8;
        }
        // Parameters sit below the two scratch buffers, which are adjacent.
        debug_assert_eq!(a.offset + a.len, b.offset);
        let (params, scratch) = self.mem.split_at_mut(a.offset);
        let (mut src, mut dst) = scratch[..a.len + b.len].split_at_mut(a.len);
        for layer in &r.layers {
            let n_in: usize = layer.in_shape.iter().product();
            let n_out: usize = layer.out_shape.iter().product();
            compute(layer, &src[..n_in], &mut dst[..n_out], params);
            std::mem::swap(&mut src, &mut dst);
        }
        Ok(src[..r.output_len]
            .iter()
            .map(|&q| r.output_qp.dequantize_value(q as i8))
            .collect())
    }

    /// Runs every sample of a batch `[N, ...]`.
    pub fn infer_batch(&mut self, batch: &Tensor) -> Result<Tensor, RuntimeError> {
        let n = batch.shape().first().copied().unwrap_or(0);
        let per = batch.len().checked_div(n).unwrap_or(0);
        let mut out = Vec::new();
        let mut classes = 0;
        for s in 0..n {
            let scores = self.infer(&batch.data()[s * per..(s + 1) * per])?;
            classes = scores.len();
            out.extend(scores);
        }
        Ok(Tensor::new(vec![n, classes], out).expect("n × classes"))
    }

    /// Top-1 class for every sample of a batch.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Vec<usize>, RuntimeError> {
        let scores = self.infer_batch(batch)?;
        let c = scores.shape()[1];
        Ok(scores
            .data()
            .chunks_exact(c.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

fn read_i32(mem: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(mem[at..at + 4].try_into().unwrap())
}

/// Executes one layer; activations are int8 stored as raw bytes.
fn compute(l: &ResidentLayer, x: &[u8], out: &mut [u8], mem: &[u8]) {
    let x = |i: usize| x[i] as i8;
    let zx = l.in_qp.zero_point as i32;
    let zo = l.out_qp.zero_point as i32;
    match (&l.op, l.kind) {
        (
            Op::Dense {
                weights,
                w_zp,
                bias,
                mult,
            },
            kind,
        ) => {
            let w = &mem[weights.range()];
            let b = |o: usize| read_i32(mem, bias.offset + 4 * o);
            let finish = |acc: i64| {
                sat8(zo + mult.apply(acc.clamp(i32::MIN as i64, i32::MAX as i64) as i32))
            };
            match kind {
                LayerKind::FullyConnected {
                    in_features,
                    out_features,
                } => {
                    for o in 0..out_features {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        let mut acc = b(o) as i64;
                        for (p, &wq) in row.iter().enumerate() {
                            acc += ((wq as i8 as i32 - w_zp) * (x(p) as i32 - zx)) as i64;
                        }
                        out[o] = finish(acc) as u8;
                    }
                }
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                } => conv(
                    &x,
                    out,
                    w,
                    (in_channels, l.in_shape[1], l.in_shape[2]),
                    (out_channels, l.out_shape[1], l.out_shape[2]),
                    (3, stride, padding),
                    (*w_zp, zx),
                    &b,
                    &finish,
                ),
                LayerKind::Conv1x1 {
                    in_channels,
                    out_channels,
                    stride,
                } => conv(
                    &x,
                    out,
                    w,
                    (in_channels, l.in_shape[1], l.in_shape[2]),
                    (out_channels, l.out_shape[1], l.out_shape[2]),
                    (1, stride, 0),
                    (*w_zp, zx),
                    &b,
                    &finish,
                ),
                _ => unreachable!("dense op on {}", kind.name()),
            }
        }
        (Op::Norm { params }, LayerKind::BatchNorm { channels }) => {
            let spatial = out.len() / channels;
            for c in 0..channels {
                let at = params.offset + c * BN_CHANNEL_BYTES;
                let fm = FixedMultiplier {
                    m0: read_i32(mem, at),
                    shift: read_i32(mem, at + 4),
                };
                let offset = read_i32(mem, at + 8);
                for p in 0..spatial {
                    let i = c * spatial + p;
                    out[i] = sat8(
                        zo.saturating_add(fm.apply(x(i) as i32 - zx))
                            .saturating_add(offset),
                    ) as u8;
                }
            }
        }
        (Op::Relu, _) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = x(i).max(zo as i8) as u8;
            }
        }
        (Op::MaxPool(size), _) | (Op::AvgPool(size), _) => {
            let (c, h, w) = (l.in_shape[0], l.in_shape[1], l.in_shape[2]);
            let (ho, wo) = (l.out_shape[1], l.out_shape[2]);
            let avg = matches!(l.op, Op::AvgPool(_));
            let size = *size;
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut mx = i8::MIN;
                        let mut sum = 0i32;
                        for di in 0..size {
                            for dj in 0..size {
                                let v = x(ch * h * w + (i * size + di) * w + j * size + dj);
                                mx = mx.max(v);
                                sum += v as i32;
                            }
                        }
                        let n = (size * size) as f64;
                        out[ch * ho * wo + i * wo + j] = if avg {
                            sat8(round_half_away(sum as f64 / n) as i32)
                        } else {
                            mx
                        } as u8;
                    }
                }
            }
        }
        (Op::Identity, _) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = x(i) as u8;
            }
        }
        (op, kind) => unreachable!("{op:?} on {}", kind.name()),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv(
    x: &dyn Fn(usize) -> i8,
    out: &mut [u8],
    w: &[u8],
    (cin, h, wd): (usize, usize, usize),
    (cout, ho, wo): (usize, usize, usize),
    (k, stride, pad): (usize, usize, usize),
    (zw, zx): (i32, i32),
    bias: &dyn Fn(usize) -> i32,
    finish: &dyn Fn(i64) -> i8,
) {
    for o in 0..cout {
        let wo_base = o * cin * k * k;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias(o) as i64;
                for c in 0..cin {
                    for ki in 0..k {
                        let yi = (i * stride + ki) as isize - pad as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xj = (j * stride + kj) as isize - pad as isize;
                            if xj < 0 || xj >= wd as isize {
                                continue;
                            }
                            let xv = x(c * h * wd + yi as usize * wd + xj as usize) as i32 - zx;
                            let wv = w[wo_base + (c * k + ki) * k + kj] as i8 as i32 - zw;
                            acc += (xv * wv) as i64;
                        }
                    }
                }
                out[o * ho * wo + i * wo + j] = finish(acc) as u8;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{encode_for_deployment, EscapeFormat};
    use crate::nn::{self, ModelBuilder, ModelGraph};
    use crate::pool::{pool_weights, GroupConfig};
    use crate::pq::{self, learn_codebooks, LayerCodes};
    use crate::quant::to_f16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Vec<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        vec![
            ModelBuilder::new("cnn", vec![2, 8, 8])
                .conv3x3(8, 1, 1)
                .batch_norm()
                .relu()
                .max_pool(2)
                .conv3x3(8, 1, 1)
                .relu()
                .conv1x1(12)
                .avg_pool(2)
                .flatten()
                .fc(4)
                .softmax()
                .build(&mut rng)
                .unwrap(),
            ModelBuilder::new("mlp", vec![6])
                .fc(40)
                .relu()
                .fc(30)
                .relu()
                .fc(3)
                .build(&mut rng)
                .unwrap(),
        ]
    }

    fn inputs(shape: &[usize], n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = vec![n];
        s.extend_from_slice(shape);
        let len = s.iter().product();
        Tensor::new(s, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(escape: EscapeFormat, coded: bool) -> (Vec<ModelGraph>, Bundle) {
        let ms = models();
        let refs: Vec<&ModelGraph> = ms.iter().collect();
        let (g3, g1) = pool_weights(&refs, &GroupConfig::default()).unwrap();
        let pair = learn_codebooks((&g3, &g1), 16, 1).unwrap();
        let f16 = to_f16(&pair).unwrap();
        let encoded = ms
            .iter()
            .map(|m| {
                let codes = if coded {
                    let (first, last) = m.boundary_layers().unwrap();
                    let (mut c, _) =
                        pq::encode_layers(m, &pair, |i| i != first && i != last).unwrap();
                    c.remove(&first);
                    c
                } else {
                    LayerCodes::new()
                };
                encode_for_deployment(
                    m,
                    &codes,
                    &f16,
                    escape,
                    &inputs(&m.input_shape, 64, 9),
                    m.f32_bytes() as u64,
                )
                .unwrap()
            })
            .collect();
        (
            ms,
            Bundle {
                codebooks: f16,
                models: encoded,
            },
        )
    }

    #[test]
    fn resident_weights_match_offline_pipeline() {
        let (_, b) = setup(EscapeFormat::Int8, true);
        let flash = Flash::from_bundle(&b).unwrap();
        let mut arena = Arena::new(DEFAULT_ARENA_BYTES);
        for m in &b.models {
            arena.load(&flash, &m.name).unwrap();
            assert_eq!(arena.resident_name(), Some(m.name.as_str()));
            for (i, l) in m.layers.iter().enumerate() {
                if let LayerPayload::Weighted {
                    weight_qp, storage, ..
                } = &l.payload
                {
                    let want = match storage {
                        WeightStorage::Int8(q) => q.clone(),
                        _ => crate::quant::quantize(
                            &m.stored_weight(i + 1, &b.codebooks).unwrap(),
                            *weight_qp,
                        ),
                    };
                    assert_eq!(
                        arena.resident_weights(i + 1).unwrap(),
                        want,
                        "{} layer {}",
                        m.name,
                        i + 1
                    );
                }
            }
        }
    }

    #[test]
    fn int8_path_tracks_float_reference() {
        let (_, b) = setup(EscapeFormat::Int8, true);
        let flash = Flash::from_bundle(&b).unwrap();
        let mut arena = Arena::new(DEFAULT_ARENA_BYTES);
        for m in &b.models {
            arena.load(&flash, &m.name).unwrap();
            let x = inputs(&m.input_shape, 200, 77);
            let reference = nn::forward(&m.reference_model(&b.codebooks), &x).unwrap();
            let got = arena.infer_batch(&x).unwrap();
            let span = reference.data().iter().fold(0f32, |a, &v| a.max(v.abs()));
            let mae = got
                .data()
                .iter()
                .zip(reference.data())
                .map(|(g, r)| (g - r).abs())
                .sum::<f32>()
                / got.len() as f32;
            assert!(
                mae <= 0.05 * span,
                "{}: mean error {mae} of span {span}",
                m.name
            );
            let want = nn::train::predict(&m.reference_model(&b.codebooks), &x).unwrap();
            let agree = arena
                .predict(&x)
                .unwrap()
                .iter()
                .zip(&want)
                .filter(|(a, b)| a == b)
                .count();
            assert!(agree >= 180, "{}: {agree}/200", m.name);
            let again = arena.infer_batch(&x).unwrap();
            assert!(again.bit_eq(&got));
        }
    }

    #[test]
    fn zero_weights_output_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelBuilder::new("z", vec![4])
            .fc(3)
            .build(&mut rng)
            .unwrap();
        let p = m.params.get_mut(&1).unwrap();
        p.weight.data_mut().fill(0.0);
        p.bias = Some(Tensor::new(vec![3], vec![0.5, -0.25, 1.0]).unwrap());
        let (_, b) = setup(EscapeFormat::Int8, false);
        let em = encode_for_deployment(
            &m,
            &LayerCodes::new(),
            &b.codebooks,
            EscapeFormat::Int8,
            &inputs(&[4], 8, 1),
            0,
        )
        .unwrap();
        let out_qp = em.layers[0].out_qp;
        let flash = Flash::from_bundle(&Bundle {
            codebooks: b.codebooks.clone(),
            models: vec![em],
        })
        .unwrap();
        let mut arena = Arena::new(4096);
        arena.load(&flash, "z").unwrap();
        let y = arena.infer(&[0.3, -0.1, 0.9, 0.0]).unwrap();
        for (g, want) in y.iter().zip([0.5, -0.25, 1.0]) {
            assert!(
                (g - want).abs() <= out_qp.scale / 2.0 + 1e-6,
                "{g} vs {want}"
            );
        }
    }

    #[test]
    fn capacity_errors_leave_arena_untouched() {
        let (_, b) = setup(EscapeFormat::Int8, true);
        let flash = Flash::from_bundle(&b).unwrap();
        let mut tiny = Arena::new(1);
        let err = tiny.load(&flash, "cnn").unwrap_err();
        assert!(
            matches!(err, RuntimeError::Capacity { available: 1, .. }),
            "{err}"
        );
        assert!(tiny.resident().is_none());
        assert_eq!(tiny.high_water(), 0);

        let need_mlp = required_bytes(b.model("mlp").unwrap()).unwrap();
        let need_cnn = required_bytes(b.model("cnn").unwrap()).unwrap();
        assert!(need_cnn != need_mlp);
        let mut arena = Arena::new(need_mlp.min(need_cnn));
        let small = if need_mlp < need_cnn { "mlp" } else { "cnn" };
        let big = if small == "mlp" { "cnn" } else { "mlp" };
        arena.load(&flash, small).unwrap();
        let before = arena.resident_weights(1);
        assert!(arena.swap(&flash, big).is_err());
        assert_eq!(arena.resident_name(), Some(small));
        assert_eq!(arena.resident_weights(1), before);
        assert!(matches!(
            arena.load(&flash, "nope"),
            Err(RuntimeError::UnknownModel(_))
        ));
    }

    #[test]
    fn corrupt_model_leaves_arena_empty() {
        let (_, mut b) = setup(EscapeFormat::Int8, true);
        let flash_ok = Flash::from_bundle(&b).unwrap();
        // Poison the last coded layer of the CNN after serialization checks.
        let m = &mut b.models[0];
        let idx = *m.coded_layers().iter().last().unwrap();
        if let LayerPayload::Weighted {
            storage: WeightStorage::Codes { codes, .. },
            ..
        } = &mut m.layers[idx - 1].payload
        {
            *codes.last_mut().unwrap() = 999;
        }
        let mut flash = flash_ok.clone();
        flash.bundle = b;
        let mut arena = Arena::new(DEFAULT_ARENA_BYTES);
        arena.load(&flash, "mlp").unwrap();
        let err = arena.swap(&flash, "cnn").unwrap_err();
        assert!(matches!(err, RuntimeError::Corrupt { .. }), "{err}");
        assert!(arena.resident().is_none());
        assert!(matches!(arena.infer(&[0.0; 6]), Err(RuntimeError::Empty)));
        arena.load(&flash_ok, "cnn").unwrap();
    }

    #[test]
    fn swaps_are_deterministic_and_bounded() {
        let (_, b) = setup(EscapeFormat::Int8, true);
        let flash = Flash::from_bundle(&b).unwrap();
        let mut arena = Arena::new(DEFAULT_ARENA_BYTES);
        arena.load(&flash, "cnn").unwrap();
        let first: Vec<_> = (1..=11).map(|i| arena.resident_weights(i)).collect();
        arena.swap(&flash, "mlp").unwrap();
        arena.swap(&flash, "cnn").unwrap();
        arena.swap(&flash, "cnn").unwrap();
        let again: Vec<_> = (1..=11).map(|i| arena.resident_weights(i)).collect();
        assert_eq!(first, again);
        let max_need = b
            .models
            .iter()
            .map(|m| required_bytes(m).unwrap())
            .max()
            .unwrap();
        assert_eq!(arena.high_water(), max_need);
        assert!(matches!(
            arena.infer(&[0.0; 3]),
            Err(RuntimeError::InputShape { actual: 3, .. })
        ));
    }

    #[test]
    fn compressed_loads_read_less_than_raw() {
        let (_, coded) = setup(EscapeFormat::Int8, true);
        let (_, raw) = setup(EscapeFormat::RawF32, false);
        let fc = Flash::from_bundle(&coded).unwrap();
        let fr = Flash::from_bundle(&raw).unwrap();
        let mut arena = Arena::new(DEFAULT_ARENA_BYTES);
        for name in fc.model_names() {
            let a = arena.load(&fc, &name).unwrap();
            let wa = (1..=20)
                .map(|i| arena.resident_weights(i))
                .collect::<Vec<_>>();
            let b = arena.load(&fr, &name).unwrap();
            assert!(a.bytes_read < b.bytes_read, "{name}: {a:?} vs {b:?}");
            assert_eq!(a.bytes_written, b.bytes_written);
            assert_eq!(wa.len(), 20);
        }
    }
}
