use pqmt::dataset::LabeledDataset;
use pqmt::harness::idx::{ingest_idx, parse_idx, write_idx, IdxError};
use pqmt::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Images whose pixels are already multiples of 1/255, so the writer is lossless.
fn fixture(n: usize, rows: usize, cols: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px: Vec<f32> = (0..n * rows * cols)
        .map(|_| rng.random_range(0..=255u8) as f32 / 255.0)
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(
        Tensor::new(vec![n, 1, rows, cols], px).unwrap(),
        labels,
        classes,
    )
    .unwrap()
}

#[test]
fn round_trip_gives_identical_tensors() {
    let d = fixture(17, 5, 7, 4, 1);
    let (img, lab) = write_idx(&d);
    assert_eq!(parse_idx(&img, &lab, 4).unwrap(), d);
}

#[test]
fn hundred_image_fixture_from_disk() {
    let d = fixture(100, 12, 12, 10, 2);
    let (img, lab) = write_idx(&d);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (
        dir.path().join("images.idx3"),
        dir.path().join("labels.idx1"),
    );
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    let back = ingest_idx(&ip, &lp, 10).unwrap();
    assert_eq!(back.inputs.shape(), &[100, 1, 12, 12]);
    assert!(back.labels.iter().all(|&l| l < 10));
    assert!(back.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(back, d);
}

#[test]
fn truncation_names_expected_and_actual_bytes() {
    let (img, lab) = write_idx(&fixture(3, 4, 4, 2, 3));
    let cut = &img[..img.len() - 5];
    let err = parse_idx(cut, &lab, 2).unwrap_err();
    match &err {
        IdxError::Truncated {
            offset,
            expected,
            actual,
            ..
        } => {
            assert_eq!((*offset, *expected, *actual), (16, 16 + 48, 16 + 43));
        }
        other => panic!("{other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("64") && msg.contains("59"), "{msg}");
    // Even the header can be short.
    assert!(matches!(
        parse_idx(&img[..10], &lab, 2),
        Err(IdxError::Truncated {
            expected: 16,
            actual: 10,
            ..
        })
    ));
}

#[test]
fn malformed_files_are_rejected() {
    let (img, lab) = write_idx(&fixture(3, 4, 4, 2, 4));
    let mut bad = img.clone();
    bad[3] = 0x01;
    assert!(matches!(
        parse_idx(&bad, &lab, 2),
        Err(IdxError::Magic { found: 0x801, .. })
    ));
    let mut long = img.clone();
    long.push(0);
    assert!(matches!(
        parse_idx(&long, &lab, 2),
        Err(IdxError::Trailing { trailing: 1, .. })
    ));
    let (_, lab2) = write_idx(&fixture(2, 4, 4, 2, 5));
    assert!(matches!(
        parse_idx(&img, &lab2, 2),
        Err(IdxError::CountMismatch {
            images: 3,
            labels: 2
        })
    ));
    let mut lab3 = lab.clone();
    lab3[9] = 7;
    assert!(matches!(
        parse_idx(&img, &lab3, 2),
        Err(IdxError::Label {
            label: 7,
            offset: 9,
            ..
        })
    ));
    let missing = std::path::Path::new("/nonexistent/images");
    assert!(matches!(
        ingest_idx(missing, missing, 2),
        Err(IdxError::Io { .. })
    ));
}
