//! Byte-exact bundle fixtures. Regenerate with `UPDATE_GOLDEN=1 cargo test`.

use std::path::PathBuf;

use half::f16;
use pqmt::bundle::{
    deserialize, deserialize_with_accounting, serialize, serialize_with_accounting, Bundle,
    BundleError, EncodedLayer, EncodedModel, LayerPayload, WeightStorage,
};
use pqmt::nn::LayerKind;
use pqmt::pool::{GroupConfig, GroupId};
use pqmt::quant::{F16CodebookPair, F16GroupCodebook, F16SubCodebook, QuantParams};

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn qp(scale: f32, zero_point: i8) -> QuantParams {
    QuantParams { scale, zero_point }
}

fn books(k: usize) -> F16CodebookPair {
    let g = GroupConfig::default();
    let make = |id: GroupId, salt: f32| {
        let group = g.group(id);
        let dsub = group.dsub();
        F16GroupCodebook {
            group,
            subs: (0..group.m)
                .map(|s| F16SubCodebook {
                    k,
                    dsub,
                    bits: (0..k * dsub)
                        .map(|i| {
                            f16::from_f32(((i as f32 + salt) * 0.37 + s as f32).sin() * 0.5)
                                .to_bits()
                        })
                        .collect(),
                })
                .collect(),
        }
    };
    F16CodebookPair {
        g3x3: make(GroupId::G3x3, 0.0),
        g1x1fc: make(GroupId::G1x1Fc, 1.5),
    }
}

/// Two hand-built models covering every storage and payload kind.
fn golden_bundle() -> Bundle {
    let conv = EncodedLayer {
        kind: LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 2,
            stride: 1,
            padding: 1,
        },
        out_qp: qp(0.02, -5),
        payload: LayerPayload::Weighted {
            weight_qp: qp(0.004, 3),
            storage: WeightStorage::Codes {
                group: GroupId::G3x3,
                rows: 1,
                codes: vec![2, 1],
            },
            bias: vec![0.25, -0.5],
        },
    };
    let bn = EncodedLayer {
        kind: LayerKind::BatchNorm { channels: 2 },
        out_qp: qp(0.03, 0),
        payload: LayerPayload::BatchNorm {
            eps: 1e-5,
            gamma: vec![1.0, 0.5],
            beta: vec![0.0, 0.125],
            mean: vec![0.1, -0.1],
            var: vec![1.0, 2.0],
        },
    };
    let plain = |kind, out_qp| EncodedLayer {
        kind,
        out_qp,
        payload: LayerPayload::None,
    };
    let fc_int8 = EncodedLayer {
        kind: LayerKind::FullyConnected {
            in_features: 8,
            out_features: 3,
        },
        out_qp: qp(0.1, 7),
        payload: LayerPayload::Weighted {
            weight_qp: qp(0.01, -1),
            storage: WeightStorage::Int8((0..24).map(|i| (i * 11 % 256) as u8 as i8).collect()),
            bias: vec![1.0, 2.0, 3.0],
        },
    };
    let cnn = EncodedModel {
        name: "tiny-cnn".into(),
        input_shape: vec![1, 4, 4],
        original_f32_bytes: 4 * (18 + 2 + 8 + 24 + 3),
        input_qp: qp(1.0 / 255.0, -128),
        layers: vec![
            conv,
            bn,
            plain(LayerKind::ReLU, qp(0.03, -128)),
            plain(LayerKind::MaxPool { size: 2 }, qp(0.03, -128)),
            plain(LayerKind::Flatten, qp(0.03, -128)),
            fc_int8,
        ],
    };
    let mlp = EncodedModel {
        name: "mlp".into(),
        input_shape: vec![3],
        original_f32_bytes: 4 * (12 + 4 + 8 + 2),
        input_qp: qp(0.01, 0),
        layers: vec![
            EncodedLayer {
                kind: LayerKind::FullyConnected {
                    in_features: 3,
                    out_features: 4,
                },
                out_qp: qp(0.05, 1),
                payload: LayerPayload::Weighted {
                    weight_qp: qp(0.002, 0),
                    storage: WeightStorage::Codes {
                        group: GroupId::G1x1Fc,
                        rows: 2,
                        codes: vec![0, 3, 1, 2],
                    },
                    bias: vec![0.0; 4],
                },
            },
            plain(LayerKind::ReLU, qp(0.05, -128)),
            EncodedLayer {
                kind: LayerKind::FullyConnected {
                    in_features: 4,
                    out_features: 2,
                },
                out_qp: qp(0.2, 0),
                payload: LayerPayload::Weighted {
                    weight_qp: qp(0.001, 0),
                    storage: WeightStorage::RawF32(vec![
                        0.5, -0.5, 1.0, -1.0, 0.25, -0.25, 2.0, -2.0,
                    ]),
                    bias: vec![0.1, 0.2],
                },
            },
        ],
    };
    Bundle {
        codebooks: books(4),
        models: vec![cnn, mlp],
    }
}

fn check_or_update(name: &str, bytes: &[u8]) -> Vec<u8> {
    let path = fixture_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
    }
    std::fs::read(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()))
}

#[test]
fn golden_bundle_is_byte_exact() {
    let b = golden_bundle();
    let bytes = serialize(&b).unwrap();
    let golden = check_or_update("golden.ynb", &bytes);
    assert_eq!(
        bytes, golden,
        "serializer output drifted from the committed fixture"
    );
    assert_eq!(&golden[..4], b"YNB1");
    assert_eq!(deserialize(&golden).unwrap(), b);
}

#[test]
fn golden_layout_matches_hand_count() {
    let b = golden_bundle();
    let (bytes, acct) = serialize_with_accounting(&b).unwrap();
    // Header, then per group: tag, M, K, dsub, M·K·dsub f16 words.
    let codebooks = (5 + 2 * 4 * 9 * 2) + (5 + 2 * 4 * 4 * 2);
    assert_eq!(acct.total.header, 8);
    assert_eq!(acct.total.codebooks, codebooks);
    assert_eq!(acct.total.directory, 2 * 8);
    // 1 code byte per sub-vector at K=4.
    assert_eq!(acct.total.codes, 2 + 4);
    assert_eq!(acct.total.escapes, 24 + 8 * 4);
    assert_eq!(acct.total.biases, 4 * (2 + 3 + 4 + 2));
    assert_eq!(acct.total.batch_norm, 4 + 4 * 2 * 4);
    assert_eq!(acct.total.total(), bytes.len());
    // First directory entry points just past the directory.
    let off = u32::from_le_bytes(bytes[8 + codebooks..12 + codebooks].try_into().unwrap()) as usize;
    assert_eq!(off, 8 + codebooks + 16);
    let (_, back) = deserialize_with_accounting(&bytes).unwrap();
    assert_eq!(back, acct);
}

#[test]
fn corrupt_magic_fixture_is_rejected() {
    let mut bytes = serialize(&golden_bundle()).unwrap();
    bytes[..4].copy_from_slice(b"YNB0");
    let fixture = check_or_update("corrupt_magic.ynb", &bytes);
    let err = deserialize(&fixture).unwrap_err();
    assert!(matches!(err, BundleError::BadMagic { .. }), "{err:?}");
    assert!(
        err.to_string().contains("bad magic") && err.to_string().contains("offset 0"),
        "{err}"
    );
}

#[test]
fn truncated_fixture_is_rejected_with_offset() {
    let full = serialize(&golden_bundle()).unwrap();
    let bytes = full[..full.len() - 3].to_vec();
    let fixture = check_or_update("truncated.ynb", &bytes);
    let err = deserialize(&fixture).unwrap_err();
    match &err {
        BundleError::Truncated {
            offset,
            needed,
            available,
            ..
        } => {
            assert_eq!(needed - available, 3, "{err}");
            assert_eq!(offset + available, fixture.len(), "{err}");
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(err.to_string().contains("offset"), "{err}");
    // Every proper prefix fails.
    for n in 0..full.len() {
        assert!(
            deserialize(&full[..n]).is_err(),
            "prefix of {n} bytes accepted"
        );
    }
}
