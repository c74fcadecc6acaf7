//! IDX image/label files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then count, rows, cols as big-endian u32,
//! then `count·rows·cols` unsigned bytes. Labels: magic `0x00000801`, count,
//! then one byte per label.

use std::path::Path;

use crate::dataset::LabeledDataset;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{file}: bad magic 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    Magic {
        file: String,
        found: u32,
        expected: u32,
    },
    #[error("{file}: truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        file: String,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{file}: {trailing} unexpected trailing bytes at byte {offset}")]
    Trailing {
        file: String,
        offset: usize,
        trailing: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte {offset} is not below the class count {classes}")]
    Label {
        label: u8,
        offset: usize,
        classes: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn header(bytes: &[u8], file: &str, magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 * (1 + dims);
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            file: file.into(),
            offset: 0,
            expected: need,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(IdxError::Magic {
            file: file.into(),
            found: word(0),
            expected: magic,
        });
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn body<'a>(bytes: &'a [u8], file: &str, offset: usize, len: usize) -> Result<&'a [u8], IdxError> {
    let have = bytes.len() - offset;
    if have < len {
        return Err(IdxError::Truncated {
            file: file.into(),
            offset,
            expected: offset + len,
            actual: bytes.len(),
        });
    }
    if have > len {
        return Err(IdxError::Trailing {
            file: file.into(),
            offset: offset + len,
            trailing: have - len,
        });
    }
    Ok(&bytes[offset..])
}

/// Parses an image/label pair into `(N, 1, rows, cols)` values in `[0, 1]`.
pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    num_classes: usize,
) -> Result<LabeledDataset, IdxError> {
    let dims = header(images, "images", IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = body(images, "images", 16, n * rows * cols)?;
    let count = header(labels, "labels", LABEL_MAGIC, 1)?[0];
    let label_bytes = body(labels, "labels", 8, count)?;
    if count != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: count,
        });
    }
    if let Some(i) = label_bytes.iter().position(|&l| l as usize >= num_classes) {
        return Err(IdxError::Label {
            label: label_bytes[i],
            offset: 8 + i,
            classes: num_classes,
        });
    }
    let inputs = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .expect("sized from header");
    Ok(LabeledDataset::new(
        inputs,
        label_bytes.iter().map(|&l| l as usize).collect(),
        num_classes,
    )
    .expect("checked"))
}

pub fn ingest_idx(
    images: &Path,
    labels: &Path,
    num_classes: usize,
) -> Result<LabeledDataset, IdxError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| IdxError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    parse_idx(&read(images)?, &read(labels)?, num_classes)
}

/// Encodes `(N, 1, rows, cols)` values in `[0, 1]` as an IDX pair.
pub fn write_idx(data: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let s = data.inputs.shape();
    let (n, rows, cols) = (s[0], s[s.len() - 2], s[s.len() - 1]);
    let mut images = Vec::with_capacity(16 + data.inputs.len());
    for w in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        images.extend(w.to_be_bytes());
    }
    images.extend(
        data.inputs
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend(LABEL_MAGIC.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    (images, labels)
}
