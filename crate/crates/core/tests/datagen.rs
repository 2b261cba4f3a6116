use std::collections::HashSet;

use dtnet_core::datagen::{
    decode_features, encode_features, gen_dataset, pooled_features, rule_decode, task_vocabulary, Dataset, Family,
    GridSpec, COLORS,
};
use dtnet_core::vocab::UNK;
use dtnet_tensor::{RngState, TensorError};
use proptest::prelude::*;

fn data(seed: u64, n: usize, sigma: f64) -> Dataset {
    gen_dataset(&mut RngState::new(seed), n, GridSpec::default(), sigma).unwrap()
}

#[test]
fn noiseless_generation_is_bitwise_reproducible() {
    let a = data(3, 20, 0.0);
    let b = data(3, 20, 0.0);
    assert_eq!(encode_features(&a), encode_features(&b));
    assert_eq!(a.captions, b.captions);
    assert_ne!(encode_features(&a), encode_features(&data(4, 20, 0.0)));
}

#[test]
fn families_alternate_and_ids_count_up() {
    let d = data(5, 10, 0.1);
    assert_eq!(d.len(), 20);
    for i in 0..d.len() {
        assert_eq!(d.ids[i], i as u64);
        let want = if i % 2 == 0 { Family::Local } else { Family::Global };
        assert_eq!(d.family(i), want);
    }
}

#[test]
fn rule_decoder_recovers_noiseless_captions() {
    for (seed, grid) in [(0, GridSpec::default()), (1, GridSpec { h: 5, w: 6, c: 16 })] {
        let d = gen_dataset(&mut RngState::new(seed), 250, grid, 0.0).unwrap();
        let hits = (0..d.len()).filter(|&i| rule_decode(grid, d.sample(i)) == d.captions[i]).count();
        assert!(hits as f64 >= 0.99 * d.len() as f64, "{hits}/{}", d.len());
    }
}

#[test]
fn feature_files_round_trip() {
    let empty = Dataset::empty(GridSpec::default());
    let back = decode_features(&encode_features(&empty)[..]).unwrap();
    assert_eq!(back.len(), 0);
    assert_eq!(back.grid, empty.grid);

    let grid = GridSpec { h: 7, w: 7, c: 16 };
    let one = gen_dataset(&mut RngState::new(9), 1, grid, 0.3).unwrap();
    let mut one = Dataset {
        ids: one.ids[..1].to_vec(),
        features: one.sample(0).to_vec(),
        captions: one.captions[..1].to_vec(),
        ..one
    };
    one.ids[0] = u64::MAX - 7;
    let bytes = encode_features(&one);
    let back = decode_features(&bytes[..]).unwrap();
    assert_eq!(back.ids, one.ids);
    let bits = |d: &Dataset| d.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&one));
    assert_eq!(encode_features(&back), bytes);
}

#[test]
fn split_files_round_trip_with_captions() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(2, 6, 0.1);
    d.write(dir.path(), "train").unwrap();
    assert_eq!(Dataset::read(dir.path(), "train").unwrap(), d);
}

#[test]
fn corrupted_length_field_names_the_offset() {
    let grid = GridSpec { h: 7, w: 7, c: 16 };
    let d = gen_dataset(&mut RngState::new(1), 1, grid, 0.0).unwrap();
    let mut bytes = encode_features(&d);
    // Claim three samples where there are two.
    bytes[4..8].copy_from_slice(&3u32.to_le_bytes());
    let want = 20 + 2 * (8 + 4 * grid.cells()) as u64;
    match decode_features(&bytes[..]) {
        Err(TensorError::Format { offset, msg }) => {
            assert_eq!(offset, want, "{msg}");
            assert!(msg.contains("sample 2"), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    // Claiming fewer samples leaves trailing bytes.
    bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
    let err = decode_features(&bytes[..]).unwrap_err().to_string();
    assert!(err.contains(&format!("byte {}", 20 + 8 + 4 * grid.cells())), "{err}");
    bytes[0] = b'X';
    assert!(decode_features(&bytes[..]).unwrap_err().to_string().contains("byte 0"));
}

#[test]
fn reading_mismatched_caption_ids_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(2, 2, 0.0);
    d.write(dir.path(), "val").unwrap();
    std::fs::write(dir.path().join("val.cap"), "0\tred patch top left\n").unwrap();
    assert!(Dataset::read(dir.path(), "val").is_err());
    std::fs::write(dir.path().join("val.cap"), "no tab here\n").unwrap();
    let err = Dataset::read(dir.path(), "val").unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
}

/// Logistic regression on pooled features, trained by full-batch descent.
fn probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let xs: Vec<Vec<f64>> = (0..train.len()).map(|i| pooled_features(train, i)).collect();
    let ys: Vec<f64> = (0..train.len()).map(|i| f64::from(train.family(i) == Family::Global)).collect();
    let c = train.grid.c;
    let mut w = vec![0.0; c];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; c];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi);
            gb += err;
        }
        let n = xs.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= 2.0 * g / n);
        b -= 2.0 * gb / n;
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let z: f64 = pooled_features(test, i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == (test.family(i) == Family::Global)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn pooled_features_separate_the_families() {
    let acc = probe_accuracy(&data(10, 100, 0.1), &data(11, 100, 0.1));
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn vocabulary_covers_every_caption() {
    let vocab = task_vocabulary();
    assert!(vocab.len() <= 64);
    let d = data(12, 300, 0.2);
    let mut seen = HashSet::new();
    for cap in &d.captions {
        let ids = vocab.encode(cap);
        assert!(!ids.contains(&UNK), "{cap}");
        assert!(ids.len() <= 8);
        assert_eq!(vocab.decode(&ids), *cap);
        seen.insert(cap.clone());
    }
    // Every color appears in both families.
    for color in COLORS {
        for fam in ["patch", "mostly"] {
            assert!(seen.iter().any(|c| c.contains(color) && c.contains(fam)), "{color} {fam}");
        }
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let mut rng = RngState::new(0);
    assert!(gen_dataset(&mut rng, 1, GridSpec::default(), -1.0).is_err());
    assert!(gen_dataset(&mut rng, 1, GridSpec::default(), f64::NAN).is_err());
    assert!(gen_dataset(&mut rng, 1, GridSpec { h: 7, w: 7, c: 8 }, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn noisy_datasets_round_trip_bitwise(seed in 0u64..1000, n in 0usize..4, h in 3usize..6, sigma in 0.0f64..1.0) {
        let grid = GridSpec { h, w: 4, c: 16 };
        let d = gen_dataset(&mut RngState::new(seed), n, grid, sigma).unwrap();
        let bytes = encode_features(&d);
        let back = decode_features(&bytes[..]).unwrap();
        prop_assert_eq!(encode_features(&back), bytes);
        prop_assert_eq!(back.len(), 2 * n);
    }
}
