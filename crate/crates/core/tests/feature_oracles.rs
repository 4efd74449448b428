//! Brute-force oracles for GLCM pair counts and LBP codes.

use evmf_core::features::{
    compute_glcm, compute_lbp, extract_raw_features, glcm_counts, glcm_features, lbp_histogram, uniform_bin,
    FeatureConfig, GlcmAngle, GrayImage, LbpMode,
};
use evmf_tensor::SeedRng;

mod common;
use common::{oracle_glcm_counts, oracle_lbp, random_image};

#[test]
fn feature_criterion_holds() {
    let o = common::criterion_feature_oracles(100);
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn glcm_counts_match_brute_force() {
    let mut rng = SeedRng::new(100);
    for case in 0..100 {
        let img = random_image(&mut rng, 8, 8);
        let levels = [2, 4, 8, 16][case % 4];
        for angle in GlcmAngle::ALL {
            for d in [1, 2] {
                for symmetric in [false, true] {
                    let got = glcm_counts(&img, d, angle, levels, symmetric).unwrap();
                    let want = oracle_glcm_counts(&img, angle.degrees(), d, levels, symmetric);
                    assert_eq!(got, want, "case {case} angle {} d {d} sym {symmetric}", angle.degrees());
                }
            }
        }
    }
}

#[test]
fn lbp_codes_match_brute_force() {
    let mut rng = SeedRng::new(101);
    for case in 0..100 {
        let img = random_image(&mut rng, 8, 8);
        let got = compute_lbp(&img, 8, 1.0).unwrap();
        assert_eq!((got.height, got.width), (6, 6));
        assert_eq!(got.codes, oracle_lbp(&img), "case {case}");
    }
}

#[test]
fn uniform_bins_match_pattern_enumeration() {
    // A pattern is uniform iff its ones form one contiguous circular run.
    for p in [4usize, 8, 12] {
        for code in 0..(1u32 << p) {
            let bits: Vec<bool> = (0..p).map(|i| code >> i & 1 == 1).collect();
            let changes = (0..p).filter(|&i| bits[i] != bits[(i + 1) % p]).count();
            let want = if changes <= 2 { bits.iter().filter(|&&b| b).count() } else { p + 1 };
            assert_eq!(uniform_bin(code, p), want, "P={p} code={code:b}");
        }
    }
}

#[test]
fn constant_image_degenerate_values() {
    for v in [0.0, 0.37, 1.0] {
        let img = GrayImage::new(8, 8, vec![v; 64]).unwrap();
        for angle in GlcmAngle::ALL {
            let s = glcm_features(&compute_glcm(&img, 1, angle, 16, true).unwrap()).unwrap();
            assert_eq!(s.contrast, 0.0);
            assert_eq!(s.energy, 1.0);
            assert_eq!(s.homogeneity, 1.0);
            assert_eq!(s.correlation, 0.0);
        }
        let codes = compute_lbp(&img, 8, 1.0).unwrap();
        assert!(codes.codes.iter().all(|&c| c == 0xff));
        let hist = lbp_histogram(&codes, LbpMode::Uniform).unwrap();
        assert_eq!(hist.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(hist[8], 1.0);
        let raw = extract_raw_features(&img, &FeatureConfig::default()).unwrap();
        assert_eq!(raw.values.len(), 26);
    }
}

#[test]
fn glcm_normalization_and_histogram_mass() {
    let mut rng = SeedRng::new(102);
    for _ in 0..50 {
        let img = random_image(&mut rng, 9, 7);
        let m = compute_glcm(&img, 1, GlcmAngle::Deg45, 8, false).unwrap();
        assert!((m.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = lbp_histogram(&compute_lbp(&img, 8, 1.0).unwrap(), LbpMode::Full).unwrap();
        assert_eq!(h.len(), 256);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
