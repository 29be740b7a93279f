mod common;

use common::flood_fill;
use cac_core::phantom::{generate, random_spec, PhantomRanges};
use cac_core::preprocess::{
    make_stack, normalize_hu, random_crop_resize, resize_slice, CropSpec, Image, StackOptions,
};
use cac_core::scoring::{
    agatston_score, connected_components, extract_lesions, score_pipeline, Connectivity, ScoringParams,
};
use cac_core::volume::{CtVolume, Dims, MaskRole, MaskVolume, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, dims: Dims) -> MaskVolume {
    let density = rng.random_range(0.05..0.5);
    let labels = (0..dims.len()).map(|_| rng.random_bool(density) as u8).collect();
    MaskVolume::new(dims, Spacing::new(1.0, 1.0, 1.0), labels, MaskRole::Prediction).unwrap()
}

#[test]
fn components_match_flood_fill_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let m = random_mask(&mut rng, Dims::new(6, 6, 6));
        for conn in [Connectivity::Volume26, Connectivity::Slice8] {
            // flood fill discovers components in scan order of their first voxel
            assert_eq!(connected_components(&m, conn), flood_fill(&m, conn));
        }
    }
}

#[test]
fn pipeline_matches_phantom_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ranges = PhantomRanges::default();
    for _ in 0..500 {
        let mut spec = random_spec(&ranges, &mut rng);
        for min_mm2 in [1.0, 0.0] {
            spec.min_lesion_mm2 = min_mm2;
            let p = generate(&spec).unwrap();
            let params = ScoringParams { min_lesion_mm2: min_mm2, ..Default::default() };
            let r = score_pipeline(&p.mask.to_probs(), &p.volume, &params).unwrap();
            assert!((r.total - p.oracle.total).abs() <= 1e-9, "{} vs {}", r.total, p.oracle.total);
            assert_eq!(r.lesions.len(), p.oracle.n_kept());
        }
    }
}

#[test]
fn two_separated_phantom_lesions_are_two_components() {
    use cac_core::phantom::{LesionSpec, PhantomSpec};
    let mut spec = PhantomSpec::empty(Dims::new(4, 16, 16), Spacing::new(3.0, 1.0, 1.0), 1);
    spec.lesions.push(LesionSpec { center: (1, 4, 4), radius_px: 1.0, n_slices: 2, hu: 250.0 });
    spec.lesions.push(LesionSpec { center: (1, 10, 10), radius_px: 2.0, n_slices: 1, hu: 500.0 });
    let p = generate(&spec).unwrap();
    let lesions = extract_lesions(&p.mask, &p.volume, Connectivity::Volume26, 1.0).unwrap();
    assert_eq!(lesions.len(), 2);
    // 5-pixel disc, weight 2, two slices; 13-pixel disc, weight 4
    let expect = 2.0 * 5.0 * 2.0 + 4.0 * 13.0;
    assert!((p.oracle.total - expect).abs() < 1e-12);
}

#[test]
fn hand_evaluated_single_slice_lesion() {
    let dims = Dims::new(1, 4, 5);
    let mut hu = vec![-50i16; dims.len()];
    let mut labels = vec![0u8; dims.len()];
    for i in 0..10 {
        hu[i] = if i == 3 { 250 } else { 180 };
        labels[i] = 1;
    }
    for (ds, expect) in [(3.0, 9.8), (1.0, 9.8 / 3.0)] {
        let sp = Spacing::new(ds, 0.7, 0.7);
        let vol = CtVolume::new(dims, sp, hu.clone()).unwrap();
        let mask = MaskVolume::new(dims, sp, labels.clone(), MaskRole::Prediction).unwrap();
        let r = score_pipeline(&mask.to_probs(), &vol, &ScoringParams::default()).unwrap();
        assert!((r.total - expect).abs() < 1e-12, "{}", r.total);
    }
}

#[test]
fn spacing_scales_scores_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ranges = PhantomRanges { n_lesions: (1, 5), ..Default::default() };
    for _ in 0..100 {
        let p = generate(&random_spec(&ranges, &mut rng)).unwrap();
        let lesions = extract_lesions(&p.mask, &p.volume, Connectivity::Volume26, 0.0).unwrap();
        let sp = p.volume.spacing();
        let base = agatston_score(&lesions, sp).unwrap();
        for k in [0.5, 2.0, 4.0, 3.0, 1.7] {
            let scaled = agatston_score(&lesions, Spacing::new(sp.slice_mm * k, sp.row_mm, sp.col_mm)).unwrap();
            for (a, b) in base.lesions.iter().zip(&scaled.lesions) {
                if k == 0.5 || k == 2.0 || k == 4.0 {
                    assert_eq!(b.score, a.score * k);
                } else {
                    assert!((b.score - a.score * k).abs() <= 1e-12 * b.score.abs());
                }
            }
        }
    }
}

#[test]
fn bilinear_reproduces_affine_images() {
    // bilinear interpolation is exact on affine functions of the sample
    // position, so the resized image must equal the function itself
    let f = |y: f64, x: f64| 2.0 + 3.0 * y - 0.5 * x;
    let img = Image::from_fn(7, 5, |r, c| f(r as f64, c as f64)).unwrap();
    for (oh, ow) in [(13, 9), (4, 3), (7, 11), (1, 1), (30, 2)] {
        let out = resize_slice(&img, oh, ow).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let y = if oh == 1 { 0.0 } else { i as f64 * 6.0 / (oh - 1) as f64 };
                let x = if ow == 1 { 0.0 } else { j as f64 * 4.0 / (ow - 1) as f64 };
                assert!((out.get(i, j) - f(y, x)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_resize_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Image::from_fn(512, 512, |_, _| 0.0).unwrap();
    let img = Image::new(512, 512, img.data().iter().map(|_| rng.random::<f64>()).collect()).unwrap();
    assert_eq!(resize_slice(&img, 512, 512).unwrap(), img);
}

#[test]
fn checkerboard_crop_is_upsampled_quadrant() {
    let board = Image::from_fn(512, 512, |r, c| ((r + c) % 2) as f64).unwrap();
    let spec = CropSpec { row0: 0, col0: 0, side: 256 };
    let out = random_crop_resize(&board, spec).unwrap();
    let quadrant = Image::from_fn(256, 256, |r, c| ((r + c) % 2) as f64).unwrap();
    assert_eq!(out, resize_slice(&quadrant, 512, 512).unwrap());
    assert_eq!(random_crop_resize(&board, CropSpec::full(512)).unwrap(), board);
}

#[test]
fn constant_image_survives_any_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Image::filled(64, 64, -3.25).unwrap();
    for _ in 0..20 {
        let spec = CropSpec::sample(64, &mut rng);
        assert!(spec.side >= 16 && spec.side <= 32);
        assert!(random_crop_resize(&img, spec).unwrap().data().iter().all(|&v| v == -3.25));
    }
}

/// Slice `s` is filled with HU `100·s − 900`, so every channel names its source.
fn striped_volume(n_slices: usize, side: usize) -> (CtVolume, MaskVolume) {
    let dims = Dims::new(n_slices, side, side);
    let sp = Spacing::new(2.0, 1.0, 1.0);
    let hu = (0..dims.len()).map(|i| (100 * (i / dims.slice_len()) as i16) - 900).collect();
    let vol = CtVolume::new(dims, sp, hu).unwrap();
    let labels = (0..dims.len()).map(|i| (i % 3 == 0) as u8).collect();
    (vol, MaskVolume::new(dims, sp, labels, MaskRole::GroundTruth).unwrap())
}

#[test]
fn stack_channels_follow_edge_replication() {
    let (vol, mask) = striped_volume(20, 8);
    let opts = StackOptions { canvas: 8, ..Default::default() };
    let cases: [(usize, [usize; 9]); 4] = [
        (0, [0, 0, 0, 0, 0, 1, 2, 3, 4]),
        (1, [0, 0, 0, 0, 1, 2, 3, 4, 5]),
        (10, [6, 7, 8, 9, 10, 11, 12, 13, 14]),
        (19, [15, 16, 17, 18, 19, 19, 19, 19, 19]),
    ];
    for (center, slices) in cases {
        let st = make_stack(&vol, &mask, center, &opts).unwrap();
        for (k, &s) in slices.iter().enumerate() {
            let expect = normalize_hu((100 * s as i32 - 900) as f64);
            assert!(st.channel(k).iter().all(|&v| v == expect), "center {center} channel {k}");
        }
    }
}

#[test]
fn full_size_stack_shape() {
    let (vol, mask) = striped_volume(3, 32);
    let st = make_stack(&vol, &mask, 1, &StackOptions::default()).unwrap();
    assert_eq!(st.input_tensor().shape(), &[1, 9, 512, 512]);
    assert!(st.label.data().iter().all(|&v| v <= 1));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let crop = Some(CropSpec::sample(512, &mut rng));
    let st = make_stack(&vol, &mask, 1, &StackOptions { crop, ..Default::default() }).unwrap();
    assert_eq!(st.input_tensor().shape(), &[1, 9, 512, 512]);
}

#[test]
fn single_slice_volume_repeats_one_channel() {
    let (vol, mask) = striped_volume(1, 4);
    let st = make_stack(&vol, &mask, 0, &StackOptions { canvas: 4, ..Default::default() }).unwrap();
    for k in 1..9 {
        assert_eq!(st.channel(k), st.channel(0));
    }
}

#[test]
fn stack_label_is_floored_before_resampling() {
    // striped slices below 130 HU lose every label, slices at or above keep them
    let (vol, mask) = striped_volume(20, 8);
    let opts = StackOptions { canvas: 8, ..Default::default() };
    let low = make_stack(&vol, &mask, 10, &opts).unwrap(); // 100 HU
    assert!(low.label.data().iter().all(|&v| v == 0));
    let high = make_stack(&vol, &mask, 11, &opts).unwrap(); // 200 HU
    assert_eq!(high.label.data(), mask.slice(11));
}
