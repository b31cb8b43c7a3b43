mod common;

use std::collections::VecDeque;

use proptest::prelude::*;
use rand::Rng;
use segadapt::imaging::{
    augment_sample, clahe_slice, connected_components, crop_or_pad_mask, preprocess_volume, remove_small_components,
    zscore_normalize_volume, AugmentParams, ClaheParams, PreprocessConfig,
};
use segadapt::phantom::{render_subject, source_id, DatasetConfig, CANONICAL_SEED};
use segadapt::seed;
use segadapt::volume::{Domain, LabelMask};
use sha2::{Digest, Sha256};

/// Breadth-first flood fill over the eight neighbours, one slice at a time.
/// Returns component sizes in order of discovery.
fn flood_fill_sizes(mask: &LabelMask, class: u8) -> Vec<usize> {
    let d = mask.dims();
    let (h, w) = (d.height as i64, d.width as i64);
    let mut sizes = Vec::new();
    for s in 0..d.slices {
        let slice = mask.slice(s);
        let mut seen = vec![false; slice.len()];
        for start in 0..slice.len() {
            if slice[start] != class || seen[start] {
                continue;
            }
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(p) = queue.pop_front() {
                size += 1;
                let (r, c) = ((p as i64) / w, (p as i64) % w);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= h || nc >= w {
                            continue;
                        }
                        let q = (nr * w + nc) as usize;
                        if slice[q] == class && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    sizes
}

#[test]
fn component_sizes_match_a_flood_fill() {
    let mut rng = common::seeded(17);
    for _ in 0..200 {
        let m = common::random_mask(&mut rng, 16);
        for class in 1..=3 {
            let cc = connected_components(&m, class);
            assert_eq!(cc.sizes, flood_fill_sizes(&m, class));
            // Labels are dense and each size matches its label count.
            for (i, &size) in cc.sizes.iter().enumerate() {
                let n = cc.labels.iter().filter(|&&l| l == i as u32 + 1).count();
                assert_eq!(n, size);
            }
        }
    }
}

#[test]
fn only_components_below_the_threshold_disappear() {
    let mut rng = common::seeded(3);
    for _ in 0..100 {
        let m = common::random_mask(&mut rng, 16);
        let min_size = rng.random_range(0..8);
        let out = remove_small_components(&m, min_size);
        for class in 1..=3 {
            let mut kept: Vec<usize> = flood_fill_sizes(&m, class)
                .into_iter()
                .filter(|&s| s >= min_size)
                .collect();
            let mut after = flood_fill_sizes(&out, class);
            kept.sort_unstable();
            after.sort_unstable();
            assert_eq!(kept, after);
        }
    }
}

fn sha256_f32(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[test]
fn preprocessing_of_a_canonical_subject_is_pinned() {
    let cfg = DatasetConfig::desk();
    let (image, _) = render_subject(&cfg, CANONICAL_SEED, &source_id(0), Domain::Bssfp).unwrap();
    let pre = preprocess_volume(&image, &PreprocessConfig::default()).unwrap();
    assert_eq!(
        pre.data(),
        preprocess_volume(&image, &PreprocessConfig::default()).unwrap().data()
    );
    assert_eq!(
        sha256_f32(pre.data()),
        "2aecae37d04142001d4c2d249e61dd2d27f784e9892ba78e1a06dd4101b93ba8"
    );

    // Normalizing before equalization is a different pipeline.
    let d = image.dims();
    let z = zscore_normalize_volume(&image);
    let mut eq = Vec::new();
    for s in 0..d.slices {
        let sl: Vec<f32> = z.slice(s).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        eq.extend(clahe_slice(&sl, d.height, d.width, &ClaheParams::default()).unwrap());
    }
    assert_ne!(sha256_f32(&eq), sha256_f32(pre.data()));
}

#[test]
fn augmentation_keeps_masks_aligned_with_images() {
    // A mask rendered from the image itself must still match after the
    // spatial transform: bright pixels stay class 1, dark ones class 0.
    let n = 32;
    let mut img = vec![0.0f32; n * n];
    let mut mask = vec![0u8; n * n];
    for r in 8..20 {
        for c in 10..26 {
            img[r * n + c] = 1.0;
            mask[r * n + c] = 1;
        }
    }
    let params = AugmentParams {
        intensity_shift: [0.0, 0.0],
        ..AugmentParams::default()
    };
    for k in 0..50 {
        let mut rng = seed::stream(k, &[1]);
        let (ai, am) = augment_sample(&img, &mask, n, n, &params, &mut rng).unwrap();
        let mut disagree = 0;
        for (v, m) in ai.iter().zip(&am) {
            if (*v > 0.99 && *m == 0) || (*v < 0.01 && *m == 1) {
                disagree += 1;
            }
        }
        assert_eq!(disagree, 0, "draw {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn crop_of_a_mask_keeps_only_known_classes(n in 4usize..24, target in 4usize..24, s in any::<u64>()) {
        let mut rng = common::seeded(s);
        let m = common::random_mask(&mut rng, n);
        let c = crop_or_pad_mask(&m, target);
        prop_assert_eq!(c.dims().height, target);
        for class in 1..=3 {
            prop_assert!(c.count(class) <= m.count(class));
        }
        if target >= n {
            for class in 1..=3 {
                prop_assert_eq!(c.count(class), m.count(class));
            }
        }
    }
}
