//! The `YNB1` deployment bundle: one binary16 codebook pair plus N encoded
//! models, packed little-endian with no padding.
//!
//! ```text
//! header      magic "YNB1" | version u16 | model_count u16
//! codebooks   2 × (group u8 | m u8 | k u16 | dsub u8 | m·k·dsub × f16)
//! directory   model_count × (offset u32 | length u32)
//! models      model_count records, contiguous, in directory order
//! ```
//!
//! See `docs/bundle-format.md` for the record layout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::nn::model::BN_EPS;
use crate::nn::{self, LayerKind, LayerParams, LayerSpec, Mode, ModelGraph, NnError};
use crate::pool::{GroupId, WeightGroup};
use crate::pq::{self, CodeMatrix, LayerCodes, PqError};
use crate::quant::{
    self, F16CodebookPair, F16GroupCodebook, F16SubCodebook, QuantError, QuantParams,
};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"YNB1";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 8;
pub const DIRECTORY_ENTRY_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BundleError {
    #[error("bad magic {found:02x?} at offset 0 (expected \"YNB1\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported bundle version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u16),
    #[error("truncated at offset {offset}: {what} needs {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid data at offset {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("cannot encode: {0}")]
    Inconsistent(String),
    #[error("no model named {0:?} in bundle")]
    UnknownModel(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pq(#[from] PqError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How a layer's weight tensor is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightStorage {
    /// Codebook indices, `rows × m`.
    Codes {
        group: GroupId,
        rows: usize,
        codes: Vec<u16>,
    },
    /// Escape layer quantized offline.
    Int8(Vec<i8>),
    /// Uncompressed weights (baseline bundles).
    RawF32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerPayload {
    None,
    Weighted {
        /// Parameters the runtime quantizes (or has quantized) the weights with.
        weight_qp: QuantParams,
        storage: WeightStorage,
        bias: Vec<f32>,
    },
    BatchNorm {
        eps: f32,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedLayer {
    pub kind: LayerKind,
    /// Quantization of this layer's output activations.
    pub out_qp: QuantParams,
    pub payload: LayerPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedModel {
    pub name: String,
    pub input_shape: Vec<usize>,
    /// Size of the uncompressed original, for ratio reporting.
    pub original_f32_bytes: u64,
    pub input_qp: QuantParams,
    pub layers: Vec<EncodedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub codebooks: F16CodebookPair,
    pub models: Vec<EncodedModel>,
}

impl Bundle {
    pub fn model(&self, name: &str) -> Result<&EncodedModel, BundleError> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| BundleError::UnknownModel(name.to_string()))
    }
}

/// Bytes attributed to each kind of content.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub header: usize,
    pub codebooks: usize,
    pub directory: usize,
    /// Names, shapes, layer descriptors and storage tags.
    pub descriptors: usize,
    pub quant_params: usize,
    pub codes: usize,
    /// Escape-layer weights (int8 or raw f32).
    pub escapes: usize,
    pub biases: usize,
    pub batch_norm: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cat {
    Header,
    Codebooks,
    Directory,
    Descriptors,
    QuantParams,
    Codes,
    Escapes,
    Biases,
    BatchNorm,
}

impl Accounting {
    pub fn total(&self) -> usize {
        self.header
            + self.codebooks
            + self.directory
            + self.descriptors
            + self.quant_params
            + self.codes
            + self.escapes
            + self.biases
            + self.batch_norm
    }

    fn add(&mut self, cat: Cat, n: usize) {
        let slot = match cat {
            Cat::Header => &mut self.header,
            Cat::Codebooks => &mut self.codebooks,
            Cat::Directory => &mut self.directory,
            Cat::Descriptors => &mut self.descriptors,
            Cat::QuantParams => &mut self.quant_params,
            Cat::Codes => &mut self.codes,
            Cat::Escapes => &mut self.escapes,
            Cat::Biases => &mut self.biases,
            Cat::BatchNorm => &mut self.batch_norm,
        };
        *slot += n;
    }

    fn merge(&mut self, other: &Accounting) {
        self.header += other.header;
        self.codebooks += other.codebooks;
        self.directory += other.directory;
        self.descriptors += other.descriptors;
        self.quant_params += other.quant_params;
        self.codes += other.codes;
        self.escapes += other.escapes;
        self.biases += other.biases;
        self.batch_norm += other.batch_norm;
    }
}

/// Bundle-wide and per-model byte attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleAccounting {
    pub total: Accounting,
    /// Record bytes of each model (directory entry included), by name.
    pub models: Vec<(String, Accounting)>,
}

// ---------------------------------------------------------------- writing

struct Writer {
    buf: Vec<u8>,
    acct: Accounting,
}

impl Writer {
    fn put(&mut self, cat: Cat, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
        self.acct.add(cat, bytes.len());
    }
    fn u8(&mut self, cat: Cat, v: u8) {
        self.put(cat, &[v]);
    }
    fn u16(&mut self, cat: Cat, v: u16) {
        self.put(cat, &v.to_le_bytes());
    }
    fn u32(&mut self, cat: Cat, v: u32) {
        self.put(cat, &v.to_le_bytes());
    }
    fn f32s(&mut self, cat: Cat, v: &[f32]) {
        for x in v {
            self.put(cat, &x.to_le_bytes());
        }
    }
    fn qp(&mut self, qp: QuantParams) {
        self.put(Cat::QuantParams, &qp.scale.to_le_bytes());
        self.put(Cat::QuantParams, &[qp.zero_point as u8]);
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T, BundleError> {
    T::try_from(v)
        .map_err(|_| BundleError::Inconsistent(format!("{what} {v} does not fit its field")))
}

pub(crate) fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv3x3 { .. } => 0,
        LayerKind::Conv1x1 { .. } => 1,
        LayerKind::FullyConnected { .. } => 2,
        LayerKind::BatchNorm { .. } => 3,
        LayerKind::ReLU => 4,
        LayerKind::MaxPool { .. } => 5,
        LayerKind::AvgPool { .. } => 6,
        LayerKind::Flatten => 7,
        LayerKind::SoftmaxClassifier => 8,
    }
}

fn write_codebooks(w: &mut Writer, pair: &F16CodebookPair) -> Result<(), BundleError> {
    for id in GroupId::ALL {
        let g = pair.group(id);
        w.u8(Cat::Codebooks, id.tag());
        w.u8(Cat::Codebooks, narrow(g.group.m, "m")?);
        w.u16(Cat::Codebooks, narrow(g.k(), "K")?);
        w.u8(Cat::Codebooks, narrow(g.group.dsub(), "dsub")?);
        if !g.subs.is_empty() && g.subs.len() != g.group.m {
            return Err(BundleError::Inconsistent(format!(
                "group {id:?} has {} sub-codebooks",
                g.subs.len()
            )));
        }
        for sub in &g.subs {
            if sub.k != g.k() || sub.dsub != g.group.dsub() || sub.bits.len() != sub.k * sub.dsub {
                return Err(BundleError::Inconsistent(format!(
                    "group {id:?} sub-codebook shape"
                )));
            }
            for b in &sub.bits {
                w.u16(Cat::Codebooks, *b);
            }
        }
    }
    Ok(())
}

fn write_layer(
    w: &mut Writer,
    layer: &EncodedLayer,
    pair: &F16CodebookPair,
    index: usize,
) -> Result<(), BundleError> {
    let d = Cat::Descriptors;
    w.u8(d, kind_tag(&layer.kind));
    match layer.kind {
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            stride,
            padding,
        } => {
            w.u16(d, narrow(in_channels, "channels")?);
            w.u16(d, narrow(out_channels, "channels")?);
            w.u8(d, narrow(stride, "stride")?);
            w.u8(d, narrow(padding, "padding")?);
        }
        LayerKind::Conv1x1 {
            in_channels,
            out_channels,
            stride,
        } => {
            w.u16(d, narrow(in_channels, "channels")?);
            w.u16(d, narrow(out_channels, "channels")?);
            w.u8(d, narrow(stride, "stride")?);
        }
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            w.u16(d, narrow(in_features, "features")?);
            w.u16(d, narrow(out_features, "features")?);
        }
        LayerKind::BatchNorm { channels } => w.u16(d, narrow(channels, "channels")?),
        LayerKind::MaxPool { size } | LayerKind::AvgPool { size } => {
            w.u8(d, narrow(size, "pool size")?)
        }
        LayerKind::ReLU | LayerKind::Flatten | LayerKind::SoftmaxClassifier => {}
    }
    w.qp(layer.out_qp);
    let bad = |reason: String| {
        BundleError::Inconsistent(format!("layer {index} ({}): {reason}", layer.kind.name()))
    };
    match (&layer.payload, layer.kind.is_compressible(), layer.kind) {
        (LayerPayload::None, false, k) if !k.is_parameterized() => {}
        (
            LayerPayload::Weighted {
                weight_qp,
                storage,
                bias,
            },
            true,
            k,
        ) => {
            let n: usize = k.weight_shape().unwrap().iter().product();
            if bias.len() != k.bias_len().unwrap() {
                return Err(bad(format!("bias length {}", bias.len())));
            }
            w.qp(*weight_qp);
            match storage {
                WeightStorage::Codes { group, rows, codes } => {
                    let g = pair.group(*group);
                    if GroupId::of(&k) != Some(*group) {
                        return Err(bad(format!("codes reference group {group:?}")));
                    }
                    if g.subs.is_empty() {
                        return Err(bad(format!("group {group:?} has no codebook")));
                    }
                    if *rows != n.div_ceil(g.group.d) || codes.len() != rows * g.group.m {
                        return Err(bad(format!("{} codes in {rows} rows", codes.len())));
                    }
                    if let Some(c) = codes.iter().find(|&&c| c as usize >= g.k()) {
                        return Err(bad(format!("code {c} >= K={}", g.k())));
                    }
                    w.u8(d, 0);
                    w.u8(d, group.tag());
                    let width = code_width(g.k());
                    w.u8(d, width as u8);
                    w.u32(d, narrow(*rows, "rows")?);
                    for &c in codes {
                        if width == 1 {
                            w.u8(Cat::Codes, c as u8);
                        } else {
                            w.u16(Cat::Codes, c);
                        }
                    }
                }
                WeightStorage::Int8(q) => {
                    if q.len() != n {
                        return Err(bad(format!("{} int8 weights, expected {n}", q.len())));
                    }
                    w.u8(d, 1);
                    let bytes: Vec<u8> = q.iter().map(|&v| v as u8).collect();
                    w.put(Cat::Escapes, &bytes);
                }
                WeightStorage::RawF32(v) => {
                    if v.len() != n {
                        return Err(bad(format!("{} f32 weights, expected {n}", v.len())));
                    }
                    w.u8(d, 2);
                    w.f32s(Cat::Escapes, v);
                }
            }
            w.f32s(Cat::Biases, bias);
        }
        (
            LayerPayload::BatchNorm {
                eps,
                gamma,
                beta,
                mean,
                var,
            },
            false,
            LayerKind::BatchNorm { channels },
        ) => {
            if [gamma, beta, mean, var].iter().any(|v| v.len() != channels) {
                return Err(bad("statistics length".into()));
            }
            w.put(Cat::BatchNorm, &eps.to_le_bytes());
            for v in [gamma, beta, mean, var] {
                w.f32s(Cat::BatchNorm, v);
            }
        }
        _ => return Err(bad("payload does not match layer kind".into())),
    }
    Ok(())
}

fn write_model(
    w: &mut Writer,
    m: &EncodedModel,
    pair: &F16CodebookPair,
) -> Result<(), BundleError> {
    let d = Cat::Descriptors;
    let name = m.name.as_bytes();
    w.u8(d, narrow(name.len(), "name length")?);
    w.put(d, name);
    w.u8(d, narrow(m.input_shape.len(), "input rank")?);
    for &e in &m.input_shape {
        w.u16(d, narrow(e, "input extent")?);
    }
    w.u32(d, narrow(m.original_f32_bytes as usize, "original size")?);
    w.qp(m.input_qp);
    w.u16(d, narrow(m.layers.len(), "layer count")?);
    for (i, layer) in m.layers.iter().enumerate() {
        write_layer(w, layer, pair, i + 1)?;
    }
    Ok(())
}

pub fn code_width(k: usize) -> usize {
    if k <= 256 {
        1
    } else {
        2
    }
}

/// Serializes a bundle and reports where every byte went.
pub fn serialize_with_accounting(
    bundle: &Bundle,
) -> Result<(Vec<u8>, BundleAccounting), BundleError> {
    let mut w = Writer {
        buf: Vec::new(),
        acct: Accounting::default(),
    };
    w.put(Cat::Header, &MAGIC);
    w.u16(Cat::Header, VERSION);
    w.u16(Cat::Header, narrow(bundle.models.len(), "model count")?);
    write_codebooks(&mut w, &bundle.codebooks)?;

    // Records first (to learn their sizes), then splice in the directory.
    let dir_at = w.buf.len();
    let mut records = Writer {
        buf: Vec::new(),
        acct: Accounting::default(),
    };
    let mut spans = Vec::new();
    let mut per_model = Vec::new();
    let records_start = dir_at + bundle.models.len() * DIRECTORY_ENTRY_BYTES;
    for m in &bundle.models {
        let before = records.acct;
        let start = records.buf.len();
        write_model(&mut records, m, &bundle.codebooks)?;
        spans.push((records_start + start, records.buf.len() - start));
        let mut own = Accounting {
            directory: DIRECTORY_ENTRY_BYTES,
            ..Accounting::default()
        };
        own.descriptors = records.acct.descriptors - before.descriptors;
        own.quant_params = records.acct.quant_params - before.quant_params;
        own.codes = records.acct.codes - before.codes;
        own.escapes = records.acct.escapes - before.escapes;
        own.biases = records.acct.biases - before.biases;
        own.batch_norm = records.acct.batch_norm - before.batch_norm;
        per_model.push((m.name.clone(), own));
    }
    for (off, len) in spans {
        w.u32(Cat::Directory, narrow(off, "offset")?);
        w.u32(Cat::Directory, narrow(len, "record length")?);
    }
    w.buf.extend_from_slice(&records.buf);
    w.acct.merge(&records.acct);
    debug_assert_eq!(w.acct.total(), w.buf.len());
    Ok((
        w.buf,
        BundleAccounting {
            total: w.acct,
            models: per_model,
        },
    ))
}

pub fn serialize(bundle: &Bundle) -> Result<Vec<u8>, BundleError> {
    serialize_with_accounting(bundle).map(|(b, _)| b)
}

// ---------------------------------------------------------------- reading

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    acct: Accounting,
}

impl<'a> Reader<'a> {
    fn take(&mut self, cat: Cat, n: usize, what: &'static str) -> Result<&'a [u8], BundleError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(BundleError::Truncated {
                offset: self.pos,
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        self.acct.add(cat, n);
        Ok(s)
    }
    fn u8(&mut self, cat: Cat, what: &'static str) -> Result<u8, BundleError> {
        Ok(self.take(cat, 1, what)?[0])
    }
    fn u16(&mut self, cat: Cat, what: &'static str) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(
            self.take(cat, 2, what)?.try_into().unwrap(),
        ))
    }
    fn u32(&mut self, cat: Cat, what: &'static str) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(
            self.take(cat, 4, what)?.try_into().unwrap(),
        ))
    }
    fn f32(&mut self, cat: Cat, what: &'static str) -> Result<f32, BundleError> {
        Ok(f32::from_le_bytes(
            self.take(cat, 4, what)?.try_into().unwrap(),
        ))
    }
    fn f32s(&mut self, cat: Cat, n: usize, what: &'static str) -> Result<Vec<f32>, BundleError> {
        let raw = self.take(cat, n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn qp(&mut self) -> Result<QuantParams, BundleError> {
        let at = self.pos;
        let scale = self.f32(Cat::QuantParams, "quantization scale")?;
        let zero_point = self.u8(Cat::QuantParams, "zero point")? as i8;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(self.invalid(at, format!("quantization scale {scale} is not positive")));
        }
        Ok(QuantParams { scale, zero_point })
    }
    fn invalid(&self, offset: usize, reason: String) -> BundleError {
        BundleError::Invalid { offset, reason }
    }
}

fn read_codebooks(r: &mut Reader) -> Result<F16CodebookPair, BundleError> {
    let mut groups = Vec::new();
    for id in GroupId::ALL {
        let at = r.pos;
        let tag = r.u8(Cat::Codebooks, "codebook group tag")?;
        if tag != id.tag() {
            return Err(r.invalid(
                at,
                format!("codebook group tag {tag}, expected {}", id.tag()),
            ));
        }
        let m = r.u8(Cat::Codebooks, "codebook M")? as usize;
        let k = r.u16(Cat::Codebooks, "codebook K")? as usize;
        let dsub = r.u8(Cat::Codebooks, "codebook dsub")? as usize;
        if m == 0 || dsub == 0 {
            return Err(r.invalid(at, format!("codebook geometry M={m}, dsub={dsub}")));
        }
        let mut subs = Vec::new();
        if k > 0 {
            for _ in 0..m {
                let raw = r.take(Cat::Codebooks, k * dsub * 2, "codewords")?;
                let bits = raw
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect();
                subs.push(F16SubCodebook { k, dsub, bits });
            }
        }
        groups.push(F16GroupCodebook {
            group: WeightGroup { id, d: m * dsub, m },
            subs,
        });
    }
    let g1 = groups.pop().unwrap();
    let g3 = groups.pop().unwrap();
    Ok(F16CodebookPair {
        g3x3: g3,
        g1x1fc: g1,
    })
}

fn read_layer(r: &mut Reader, pair: &F16CodebookPair) -> Result<EncodedLayer, BundleError> {
    let d = Cat::Descriptors;
    let at = r.pos;
    let tag = r.u8(d, "layer kind")?;
    let kind = match tag {
        0 => LayerKind::Conv3x3 {
            in_channels: r.u16(d, "in channels")? as usize,
            out_channels: r.u16(d, "out channels")? as usize,
            stride: r.u8(d, "stride")? as usize,
            padding: r.u8(d, "padding")? as usize,
        },
        1 => LayerKind::Conv1x1 {
            in_channels: r.u16(d, "in channels")? as usize,
            out_channels: r.u16(d, "out channels")? as usize,
            stride: r.u8(d, "stride")? as usize,
        },
        2 => LayerKind::FullyConnected {
            in_features: r.u16(d, "in features")? as usize,
            out_features: r.u16(d, "out features")? as usize,
        },
        3 => LayerKind::BatchNorm {
            channels: r.u16(d, "channels")? as usize,
        },
        4 => LayerKind::ReLU,
        5 => LayerKind::MaxPool {
            size: r.u8(d, "pool size")? as usize,
        },
        6 => LayerKind::AvgPool {
            size: r.u8(d, "pool size")? as usize,
        },
        7 => LayerKind::Flatten,
        8 => LayerKind::SoftmaxClassifier,
        other => return Err(r.invalid(at, format!("unknown layer kind {other}"))),
    };
    if matches!(
        kind,
        LayerKind::Conv3x3 { stride: 0, .. } | LayerKind::Conv1x1 { stride: 0, .. }
    ) {
        return Err(r.invalid(at, "zero stride".into()));
    }
    let out_qp = r.qp()?;
    let payload = if kind.is_compressible() {
        let n: usize = kind.weight_shape().unwrap().iter().product();
        let weight_qp = r.qp()?;
        let st_at = r.pos;
        let storage = match r.u8(d, "storage tag")? {
            0 => {
                let g_at = r.pos;
                let gtag = r.u8(d, "code group")?;
                let group = GroupId::from_tag(gtag)
                    .filter(|g| GroupId::of(&kind) == Some(*g))
                    .ok_or_else(|| {
                        r.invalid(
                            g_at,
                            format!("code group {gtag} invalid for {}", kind.name()),
                        )
                    })?;
                let g = pair.group(group);
                let width = r.u8(d, "code width")? as usize;
                if g.subs.is_empty() || width != code_width(g.k()) {
                    return Err(r.invalid(g_at, format!("code width {width} for K={}", g.k())));
                }
                let rows = r.u32(d, "code rows")? as usize;
                if rows != n.div_ceil(g.group.d) {
                    return Err(r.invalid(g_at, format!("{rows} code rows for {n} weights")));
                }
                let c_at = r.pos;
                let raw = r.take(Cat::Codes, rows * g.group.m * width, "codes")?;
                let codes: Vec<u16> = if width == 1 {
                    raw.iter().map(|&b| b as u16).collect()
                } else {
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect()
                };
                if let Some(pos) = codes.iter().position(|&c| c as usize >= g.k()) {
                    return Err(r.invalid(
                        c_at + pos * width,
                        format!("code {} >= K={}", codes[pos], g.k()),
                    ));
                }
                WeightStorage::Codes { group, rows, codes }
            }
            1 => WeightStorage::Int8(
                r.take(Cat::Escapes, n, "int8 weights")?
                    .iter()
                    .map(|&b| b as i8)
                    .collect(),
            ),
            2 => WeightStorage::RawF32(r.f32s(Cat::Escapes, n, "f32 weights")?),
            other => return Err(r.invalid(st_at, format!("unknown storage tag {other}"))),
        };
        let bias = r.f32s(Cat::Biases, kind.bias_len().unwrap(), "bias")?;
        LayerPayload::Weighted {
            weight_qp,
            storage,
            bias,
        }
    } else if let LayerKind::BatchNorm { channels } = kind {
        LayerPayload::BatchNorm {
            eps: r.f32(Cat::BatchNorm, "batch-norm eps")?,
            gamma: r.f32s(Cat::BatchNorm, channels, "batch-norm scale")?,
            beta: r.f32s(Cat::BatchNorm, channels, "batch-norm shift")?,
            mean: r.f32s(Cat::BatchNorm, channels, "batch-norm mean")?,
            var: r.f32s(Cat::BatchNorm, channels, "batch-norm variance")?,
        }
    } else {
        LayerPayload::None
    };
    Ok(EncodedLayer {
        kind,
        out_qp,
        payload,
    })
}

fn read_model(r: &mut Reader, pair: &F16CodebookPair) -> Result<EncodedModel, BundleError> {
    let d = Cat::Descriptors;
    let name_len = r.u8(d, "name length")? as usize;
    let at = r.pos;
    let name = std::str::from_utf8(r.take(d, name_len, "model name")?)
        .map_err(|e| r.invalid(at, format!("model name is not UTF-8: {e}")))?
        .to_string();
    let rank = r.u8(d, "input rank")? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u16(d, "input extent")? as usize);
    }
    let original_f32_bytes = r.u32(d, "original size")? as u64;
    let input_qp = r.qp()?;
    let count = r.u16(d, "layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(read_layer(r, pair)?);
    }
    let m = EncodedModel {
        name,
        input_shape,
        original_f32_bytes,
        input_qp,
        layers,
    };
    m.skeleton()
        .validate()
        .map_err(|e| r.invalid(at, format!("model {}: {e}", m.name)))?;
    Ok(m)
}

/// Parses a bundle, rejecting anything the writer would not produce.
pub fn deserialize_with_accounting(
    bytes: &[u8],
) -> Result<(Bundle, BundleAccounting), BundleError> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        acct: Accounting::default(),
    };
    let magic = r.take(Cat::Header, 4, "magic")?;
    if magic != MAGIC {
        return Err(BundleError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u16(Cat::Header, "version")?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let count = r.u16(Cat::Header, "model count")? as usize;
    let codebooks = read_codebooks(&mut r)?;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let off = r.u32(Cat::Directory, "directory offset")? as usize;
        let len = r.u32(Cat::Directory, "directory length")? as usize;
        dir.push((off, len));
    }
    let mut models = Vec::with_capacity(count);
    let mut per_model = Vec::with_capacity(count);
    for (i, (off, len)) in dir.into_iter().enumerate() {
        if off != r.pos {
            return Err(r.invalid(
                HEADER_BYTES + r.acct.codebooks + i * DIRECTORY_ENTRY_BYTES,
                format!("model {i} offset {off}, but its record starts at {}", r.pos),
            ));
        }
        if off + len > bytes.len() {
            return Err(BundleError::Truncated {
                offset: off,
                what: "model record",
                needed: len,
                available: bytes.len() - off,
            });
        }
        let before = r.acct;
        let m = read_model(&mut r, &codebooks)?;
        if r.pos - off != len {
            return Err(r.invalid(
                off,
                format!(
                    "model {i} record is {} bytes, directory says {len}",
                    r.pos - off
                ),
            ));
        }
        let own = Accounting {
            directory: DIRECTORY_ENTRY_BYTES,
            descriptors: r.acct.descriptors - before.descriptors,
            quant_params: r.acct.quant_params - before.quant_params,
            codes: r.acct.codes - before.codes,
            escapes: r.acct.escapes - before.escapes,
            biases: r.acct.biases - before.biases,
            batch_norm: r.acct.batch_norm - before.batch_norm,
            ..Accounting::default()
        };
        per_model.push((m.name.clone(), own));
        models.push(m);
    }
    if r.pos != bytes.len() {
        return Err(r.invalid(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((
        Bundle { codebooks, models },
        BundleAccounting {
            total: r.acct,
            models: per_model,
        },
    ))
}

pub fn deserialize(bytes: &[u8]) -> Result<Bundle, BundleError> {
    deserialize_with_accounting(bytes).map(|(b, _)| b)
}

// ---------------------------------------------------------------- building

/// How layers outside the codebooks are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EscapeFormat {
    Int8,
    RawF32,
}

impl EncodedModel {
    /// The model structure with zero-initialized parameters.
    pub fn skeleton(&self) -> ModelGraph {
        let layers: Vec<LayerSpec> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSpec {
                index: i + 1,
                kind: l.kind,
            })
            .collect();
        let mut params = BTreeMap::new();
        for (spec, layer) in layers.iter().zip(&self.layers) {
            let Some(shape) = spec.kind.weight_shape() else {
                continue;
            };
            let (bias, rm, rv) = match &layer.payload {
                LayerPayload::BatchNorm { .. } => {
                    let c = shape[0];
                    (
                        Some(Tensor::zeros(vec![c])),
                        Some(Tensor::zeros(vec![c])),
                        Some(Tensor::from_elem(vec![c], 1.0)),
                    )
                }
                _ => (
                    spec.kind.bias_len().map(|n| Tensor::zeros(vec![n])),
                    None,
                    None,
                ),
            };
            params.insert(
                spec.index,
                LayerParams {
                    weight: Tensor::zeros(shape),
                    bias,
                    running_mean: rm,
                    running_var: rv,
                },
            );
        }
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers,
            params,
            frozen: BTreeMap::new(),
            bn_static: true,
        }
    }

    /// Indices of layers stored as codes.
    pub fn coded_layers(&self) -> BTreeSet<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(
                    l.payload,
                    LayerPayload::Weighted {
                        storage: WeightStorage::Codes { .. },
                        ..
                    }
                )
            })
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Float weights as stored: codes expand to binary16 codewords, int8
    /// escapes are dequantized, raw weights are copied.
    pub fn stored_weight(&self, index: usize, pair: &F16CodebookPair) -> Option<Vec<f32>> {
        let layer = self.layers.get(index.checked_sub(1)?)?;
        let LayerPayload::Weighted {
            weight_qp, storage, ..
        } = &layer.payload
        else {
            return None;
        };
        let n: usize = layer.kind.weight_shape()?.iter().product();
        Some(match storage {
            WeightStorage::Codes { group, codes, .. } => {
                decode_f16_codes(pair.group(*group), codes, n)
            }
            WeightStorage::Int8(q) => quant::dequantize(q, *weight_qp),
            WeightStorage::RawF32(v) => v.clone(),
        })
    }

    /// The int8 weights the runtime must hold for a layer.
    pub fn int8_weight(&self, index: usize, pair: &F16CodebookPair) -> Option<Vec<i8>> {
        let layer = self.layers.get(index.checked_sub(1)?)?;
        let LayerPayload::Weighted {
            weight_qp, storage, ..
        } = &layer.payload
        else {
            return None;
        };
        Some(match storage {
            WeightStorage::Int8(q) => q.clone(),
            _ => quant::quantize(&self.stored_weight(index, pair)?, *weight_qp),
        })
    }

    /// A float model whose weights are exactly what the int8 runtime
    /// computes with (dequantized int8), for reference execution.
    pub fn reference_model(&self, pair: &F16CodebookPair) -> ModelGraph {
        let mut g = self.skeleton();
        for (i, layer) in self.layers.iter().enumerate() {
            let idx = i + 1;
            let p = g.params.get_mut(&idx);
            match (&layer.payload, p) {
                (
                    LayerPayload::Weighted {
                        weight_qp, bias, ..
                    },
                    Some(p),
                ) => {
                    let q = self.int8_weight(idx, pair).expect("weighted layer");
                    p.weight =
                        Tensor::new(p.weight.shape().to_vec(), quant::dequantize(&q, *weight_qp))
                            .expect("shape from descriptor");
                    p.bias = Some(Tensor::new(vec![bias.len()], bias.clone()).expect("1-d"));
                }
                (
                    LayerPayload::BatchNorm {
                        gamma,
                        beta,
                        mean,
                        var,
                        ..
                    },
                    Some(p),
                ) => {
                    let t = |v: &Vec<f32>| Tensor::new(vec![v.len()], v.clone()).expect("1-d");
                    p.weight = t(gamma);
                    p.bias = Some(t(beta));
                    p.running_mean = Some(t(mean));
                    p.running_var = Some(t(var));
                }
                _ => {}
            }
        }
        g
    }
}

/// Expands `rows × m` codes with binary16 codewords, dropping tail padding.
pub fn decode_f16_codes(g: &F16GroupCodebook, codes: &[u16], n: usize) -> Vec<f32> {
    let dsub = g.group.dsub();
    let mut out = Vec::with_capacity(codes.len() * dsub);
    for row in codes.chunks_exact(g.group.m) {
        for (sub, &c) in g.subs.iter().zip(row) {
            let c = c as usize;
            out.extend(
                sub.bits[c * dsub..(c + 1) * dsub]
                    .iter()
                    .map(|&b| half::f16::from_bits(b).to_f32()),
            );
        }
    }
    out.truncate(n);
    out
}

/// Output activation ranges over a calibration batch; shape-preserving
/// layers without arithmetic reuse their input's parameters.
fn calibrate_activations(
    model: &ModelGraph,
    calib: &Tensor,
) -> Result<(QuantParams, Vec<QuantParams>), BundleError> {
    let trace = nn::forward_traced(model, calib, Mode::Eval)?;
    let input_qp = quant::calibrate(calib.data())?;
    let mut prev = input_qp;
    let mut out = Vec::with_capacity(model.layers.len());
    for (layer, act) in model.layers.iter().zip(&trace.activations[1..]) {
        let qp = match layer.kind {
            LayerKind::ReLU
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::Flatten
            | LayerKind::SoftmaxClassifier => prev,
            _ => quant::calibrate(act.data())?,
        };
        out.push(qp);
        prev = qp;
    }
    Ok((input_qp, out))
}

/// Encodes one model for deployment.
///
/// `model` holds the deployed float weights; layers with an entry in
/// `codes` are stored as indices into `pair`, every other weighted layer in
/// `escape` format. Activation ranges come from running the reference
/// (dequantized) model over `calib`.
pub fn encode_for_deployment(
    model: &ModelGraph,
    codes: &LayerCodes,
    pair: &F16CodebookPair,
    escape: EscapeFormat,
    calib: &Tensor,
    original_f32_bytes: u64,
) -> Result<EncodedModel, BundleError> {
    model.validate()?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for spec in &model.layers {
        let placeholder = QuantParams {
            scale: 1.0,
            zero_point: 0,
        };
        let payload = match spec.kind {
            k if k.is_compressible() => {
                let p = &model.params[&spec.index];
                let bias = p
                    .bias
                    .as_ref()
                    .map(|b| b.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; k.bias_len().unwrap()]);
                let (weight_qp, storage) = match codes.get(&spec.index) {
                    Some(cm) => coded_storage(cm, pair, spec.index, &k)?,
                    None => {
                        let w = p.weight.data();
                        let qp = quant::calibrate(w)?;
                        match escape {
                            EscapeFormat::Int8 => (qp, WeightStorage::Int8(quant::quantize(w, qp))),
                            EscapeFormat::RawF32 => (qp, WeightStorage::RawF32(w.to_vec())),
                        }
                    }
                };
                LayerPayload::Weighted {
                    weight_qp,
                    storage,
                    bias,
                }
            }
            LayerKind::BatchNorm { .. } => {
                let p = &model.params[&spec.index];
                let v = |t: &Option<Tensor>| t.as_ref().expect("validated").data().to_vec();
                LayerPayload::BatchNorm {
                    eps: BN_EPS as f32,
                    gamma: p.weight.data().to_vec(),
                    beta: v(&p.bias),
                    mean: v(&p.running_mean),
                    var: v(&p.running_var),
                }
            }
            _ => LayerPayload::None,
        };
        layers.push(EncodedLayer {
            kind: spec.kind,
            out_qp: placeholder,
            payload,
        });
    }
    let mut em = EncodedModel {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        original_f32_bytes,
        input_qp: QuantParams {
            scale: 1.0,
            zero_point: 0,
        },
        layers,
    };
    let reference = em.reference_model(pair);
    let (input_qp, outs) = calibrate_activations(&reference, calib)?;
    em.input_qp = input_qp;
    for (l, qp) in em.layers.iter_mut().zip(outs) {
        l.out_qp = qp;
    }
    Ok(em)
}

fn coded_storage(
    cm: &CodeMatrix,
    pair: &F16CodebookPair,
    index: usize,
    kind: &LayerKind,
) -> Result<(QuantParams, WeightStorage), BundleError> {
    let g = pair.group(cm.group);
    if GroupId::of(kind) != Some(cm.group) || g.subs.is_empty() || cm.m != g.group.m {
        return Err(BundleError::Inconsistent(format!(
            "layer {index} codes do not match the bundle's {:?} codebook",
            cm.group
        )));
    }
    let n: usize = kind.weight_shape().unwrap().iter().product();
    if cm.rows() != n.div_ceil(g.group.d) {
        return Err(PqError::BadCodes {
            layer_index: index,
            reason: format!("{} rows for {n} weights", cm.rows()),
        }
        .into());
    }
    let w = decode_f16_codes(g, &cm.codes, n);
    let qp = quant::calibrate(&w)?;
    Ok((
        qp,
        WeightStorage::Codes {
            group: cm.group,
            rows: cm.rows(),
            codes: cm.codes.clone(),
        },
    ))
}

/// Re-derives a model's deployed float weights with binary16 codewords, as
/// [`pq::reconstruct_model`] does with the f32 master copy.
pub fn reconstruct_f16(
    codes: &LayerCodes,
    pair: &F16CodebookPair,
    skeleton: &ModelGraph,
    escapes: &BTreeSet<usize>,
) -> Result<ModelGraph, BundleError> {
    Ok(pq::reconstruct_model(
        codes,
        &pair.widen(),
        skeleton,
        escapes,
    )?)
}

// ---------------------------------------------------------------- ratios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShare {
    pub name: String,
    pub original_bytes: usize,
    /// Own record and directory entry plus an equal share of the header and codebooks.
    pub bundle_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_original_bytes: usize,
    pub total_bundle_bytes: usize,
    pub ratio: f64,
    pub shared_bytes: usize,
    pub per_model: Vec<ModelShare>,
}

/// Σ f32 parameter bytes of the originals over the bundle length.
pub fn compression_ratio(
    originals: &[&ModelGraph],
    bundle: &[u8],
) -> Result<CompressionReport, BundleError> {
    let (b, acct) = deserialize_with_accounting(bundle)?;
    if originals.len() != b.models.len() {
        return Err(BundleError::Inconsistent(format!(
            "{} originals for {} bundled models",
            originals.len(),
            b.models.len()
        )));
    }
    let shared = acct.total.header + acct.total.codebooks;
    let share = if originals.is_empty() {
        0.0
    } else {
        shared as f64 / originals.len() as f64
    };
    let mut per_model = Vec::with_capacity(originals.len());
    for (orig, (name, own)) in originals.iter().zip(&acct.models) {
        if &orig.name != name {
            return Err(BundleError::Inconsistent(format!(
                "original {} vs bundled {name}",
                orig.name
            )));
        }
        per_model.push(ModelShare {
            name: name.clone(),
            original_bytes: orig.f32_bytes(),
            bundle_bytes: own.total() as f64 + share,
        });
    }
    let total_original_bytes: usize = originals.iter().map(|m| m.f32_bytes()).sum();
    Ok(CompressionReport {
        total_original_bytes,
        total_bundle_bytes: bundle.len(),
        ratio: total_original_bytes as f64 / bundle.len() as f64,
        shared_bytes: shared,
        per_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelBuilder;
    use crate::pool::{pool_weights, GroupConfig};
    use crate::pq::{learn_codebooks, CodebookPair};
    use crate::quant::to_f16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Vec<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = ModelBuilder::new("cnn", vec![2, 8, 8])
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
            .unwrap();
        let b = ModelBuilder::new("mlp", vec![6])
            .fc(40)
            .relu()
            .fc(30)
            .relu()
            .fc(3)
            .build(&mut rng)
            .unwrap();
        vec![a, b]
    }

    fn pair(ms: &[ModelGraph], k: usize) -> CodebookPair {
        let refs: Vec<&ModelGraph> = ms.iter().collect();
        let (g3, g1) = pool_weights(&refs, &GroupConfig::default()).unwrap();
        learn_codebooks((&g3, &g1), k, 3).unwrap()
    }

    fn calib(m: &ModelGraph, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut shape = vec![n];
        shape.extend_from_slice(&m.input_shape);
        let len = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn build(ms: &[ModelGraph], k: usize) -> Bundle {
        let p = pair(ms, k);
        let f16 = to_f16(&p).unwrap();
        let models = ms
            .iter()
            .map(|m| {
                let (first, last) = m.boundary_layers().unwrap();
                let (mut codes, _) = pq::encode_layers(m, &p, |_| true).unwrap();
                codes.remove(&first);
                codes.remove(&last);
                encode_for_deployment(
                    m,
                    &codes,
                    &f16,
                    EscapeFormat::Int8,
                    &calib(m, 32),
                    m.f32_bytes() as u64,
                )
                .unwrap()
            })
            .collect();
        Bundle {
            codebooks: f16,
            models,
        }
    }

    /// Byte count from first principles.
    fn count_oracle(b: &Bundle) -> usize {
        let mut n = 4 + 2 + 2;
        for id in GroupId::ALL {
            let g = b.codebooks.group(id);
            n += 5 + g.subs.len() * g.k() * g.group.dsub() * 2;
        }
        for m in &b.models {
            n += 8 + 1 + m.name.len() + 1 + 2 * m.input_shape.len() + 4 + 5 + 2;
            for l in &m.layers {
                n += 1 + 5;
                n += match l.kind {
                    LayerKind::Conv3x3 { .. } => 6,
                    LayerKind::Conv1x1 { .. } => 5,
                    LayerKind::FullyConnected { .. } => 4,
                    LayerKind::BatchNorm { .. } => 2,
                    LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => 1,
                    _ => 0,
                };
                match &l.payload {
                    LayerPayload::None => {}
                    LayerPayload::Weighted { storage, bias, .. } => {
                        n += 5 + 1 + bias.len() * 4;
                        n += match storage {
                            WeightStorage::Codes { group, codes, .. } => {
                                2 + 4 + codes.len() * code_width(b.codebooks.group(*group).k())
                            }
                            WeightStorage::Int8(q) => q.len(),
                            WeightStorage::RawF32(v) => v.len() * 4,
                        };
                    }
                    LayerPayload::BatchNorm { gamma, .. } => n += 4 + 4 * gamma.len() * 4,
                }
            }
        }
        n
    }

    #[test]
    fn round_trip_is_bit_exact_and_accounted() {
        let b = build(&models(), 16);
        let (bytes, acct) = serialize_with_accounting(&b).unwrap();
        assert_eq!(acct.total.total(), bytes.len());
        assert_eq!(bytes.len(), count_oracle(&b));
        let (back, acct2) = deserialize_with_accounting(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(acct2, acct);
        assert_eq!(serialize(&back).unwrap(), bytes);
        let per: usize = acct.models.iter().map(|(_, a)| a.total()).sum();
        assert_eq!(per + acct.total.header + acct.total.codebooks, bytes.len());
    }

    #[test]
    fn empty_bundle_is_header_plus_codebooks() {
        let ms = models();
        let f16 = to_f16(&pair(&ms, 16)).unwrap();
        let b = Bundle {
            codebooks: f16,
            models: vec![],
        };
        let bytes = serialize(&b).unwrap();
        assert_eq!(bytes.len(), 8 + 2 * 5 + 2 * 16 * 9 * 2 + 2 * 16 * 4 * 2);
        assert_eq!(deserialize(&bytes).unwrap(), b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = serialize(&build(&models(), 16)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            deserialize(&bad),
            Err(BundleError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(deserialize(&bad), Err(BundleError::UnsupportedVersion(9)));
        for cut in [3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = deserialize(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    BundleError::Truncated { .. } | BundleError::Invalid { .. }
                ),
                "{cut}: {err}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            deserialize(&long),
            Err(BundleError::Invalid { .. })
        ));
    }

    #[test]
    fn decoded_weights_follow_f16_codewords() {
        let ms = models();
        let p = pair(&ms, 16);
        let f16 = to_f16(&p).unwrap();
        let b = build(&ms, 16);
        let m = &ms[0];
        let codes = pq::encode_model(m, &p).unwrap();
        let recon = pq::reconstruct_model(&codes, &p, m, &BTreeSet::new()).unwrap();
        for idx in b.models[0].coded_layers() {
            let got = b.models[0].stored_weight(idx, &f16).unwrap();
            let want: Vec<f32> = recon
                .weight(idx)
                .unwrap()
                .data()
                .iter()
                .map(|&v| half::f16::from_f32(v).to_f32())
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn uncompressed_bundle_ratio_near_one() {
        let ms = models();
        let f16 = to_f16(&pair(&ms, 16)).unwrap();
        let b = Bundle {
            codebooks: F16CodebookPair {
                g3x3: F16GroupCodebook {
                    group: f16.g3x3.group,
                    subs: vec![],
                },
                g1x1fc: F16GroupCodebook {
                    group: f16.g1x1fc.group,
                    subs: vec![],
                },
            },
            models: ms
                .iter()
                .map(|m| {
                    encode_for_deployment(
                        m,
                        &LayerCodes::new(),
                        &f16,
                        EscapeFormat::RawF32,
                        &calib(m, 8),
                        m.f32_bytes() as u64,
                    )
                    .unwrap()
                })
                .collect(),
        };
        let bytes = serialize(&b).unwrap();
        let refs: Vec<&ModelGraph> = ms.iter().collect();
        let r = compression_ratio(&refs, &bytes).unwrap();
        assert!(r.ratio > 0.95 && r.ratio <= 1.0, "{}", r.ratio);
        let sum: f64 = r.per_model.iter().map(|m| m.bundle_bytes).sum();
        assert!((sum - bytes.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn published_ratio_arithmetic() {
        // 2.91 MB of originals against a 0.25 MB bundle.
        let ratio = 2.91 / 0.25;
        assert!((ratio - 11.57f64).abs() < 0.1, "{ratio}");
    }
}
