use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use volflow::metrics::*;
use volflow::slice::SliceImage;
use volflow::text::{Finding, Report};

fn gaussian_rows(n: usize, mean: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect()
        })
        .collect()
}

fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

#[test]
fn sqrtm_of_simple_matrices() {
    let i = DMatrix::<f64>::identity(5, 5);
    assert!((sqrtm_spd(&i).unwrap() - &i).amax() < 1e-12);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 0.25, 0.0]));
    let r = sqrtm_spd(&d).unwrap();
    let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.5, 0.0]));
    assert!((r - expect).amax() < 1e-12);
}

#[test]
fn sqrtm_residual_on_random_spd() {
    for seed in 0..5 {
        let a = random_spd(32, seed);
        let r = sqrtm_spd(&a).unwrap();
        let res = (&r * &r - &a).norm() / a.norm();
        assert!(res <= 1e-6, "residual {res}");
        assert!((&r - r.transpose()).amax() < 1e-9);
    }
}

#[test]
fn sqrtm_rejects_bad_input() {
    let mut a = DMatrix::<f64>::identity(3, 3);
    a[(0, 1)] = 0.5;
    assert!(sqrtm_spd(&a).is_err());
    let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
    assert!(sqrtm_spd(&neg).is_err());
    assert!(sqrtm_spd(&DMatrix::<f64>::zeros(2, 3)).is_err());
}

#[test]
fn frechet_identities() {
    let s = FrechetStats::from_rows(&gaussian_rows(500, &[0.0; 8], 1)).unwrap();
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);

    let one = |m: f64, v: f64| FrechetStats::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v), 0).unwrap();
    assert_eq!(frechet_distance(&one(0.0, 1.0), &one(3.0, 1.0)).unwrap(), 9.0);
    // (σ1 − σ2)² for one-dimensional variances
    assert!((frechet_distance(&one(0.0, 4.0), &one(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);

    let a = FrechetStats::from_rows(&gaussian_rows(300, &[0.0; 6], 2)).unwrap();
    let b = FrechetStats::from_rows(&gaussian_rows(300, &[0.3; 6], 3)).unwrap();
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
}

#[test]
fn frechet_mean_shift_in_64_dimensions() {
    let mu = vec![0.5; 64];
    let shift: f64 = mu.iter().map(|m| m * m).sum();
    let a = FrechetStats::from_rows(&gaussian_rows(10_000, &[0.0; 64], 10)).unwrap();
    let b = FrechetStats::from_rows(&gaussian_rows(10_000, &mu, 11)).unwrap();
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - shift).abs() < 0.05 * shift, "{d} vs {shift}");
}

#[test]
fn frechet_needs_two_rows() {
    assert!(FrechetStats::from_rows(&[vec![1.0, 2.0]]).is_err());
    assert!(FrechetStats::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn inception_score_extremes() {
    let onehot: Vec<Vec<f64>> = (0..80)
        .map(|i| (0..8).map(|k| if k == i % 8 { 1.0 } else { 0.0 }).collect())
        .collect();
    let (mean, std) = inception_score(&onehot, IS_SPLITS).unwrap();
    assert!((mean - 8.0).abs() < 1e-12 && std < 1e-12, "{mean} ± {std}");

    let same = vec![vec![0.5, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0]; 40];
    let (mean, std) = inception_score(&same, IS_SPLITS).unwrap();
    assert!((mean - 1.0).abs() < 1e-12 && std < 1e-12, "{mean} ± {std}");

    assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
    assert!(inception_score(&[], 1).is_err());
}

#[test]
fn alignment_scores_and_permutation_test() {
    let findings = [Finding::Nodule, Finding::Effusion, Finding::Fibrosis, Finding::Normal];
    let reports: Vec<Report> = (0..40).map(|i| Report::new([findings[i % 4]], 64).unwrap()).collect();
    let detected: Vec<BTreeSet<Finding>> = reports.iter().map(|r| r.findings().clone()).collect();
    assert_eq!(alignment_score(&reports, &detected).unwrap(), 100.0);

    let t = alignment_permutation_test(&reports, &detected, 999, 4).unwrap();
    assert_eq!(t.matched, 100.0);
    assert!(t.shuffled_mean < 50.0);
    assert!(t.p_value < 0.01);

    let none = vec![BTreeSet::new(); 40];
    assert_eq!(alignment_score(&reports, &none).unwrap(), 0.0);
    assert!(alignment_score(&reports, &none[..3]).is_err());
}

#[test]
fn feature_net_is_seeded_and_checks_input() {
    let vol: Vec<SliceImage> = (0..16).map(|i| SliceImage::filled(64, 64, i as f32 / 16.0)).collect();
    let a = FeatureNet::new(1).features(&vol).unwrap();
    assert_eq!(a.len(), FEATURE_DIM);
    assert_eq!(a, FeatureNet::new(1).features(&vol).unwrap());
    assert_ne!(a, FeatureNet::new(2).features(&vol).unwrap());
    assert!(FeatureNet::new(1).features(&[SliceImage::filled(40, 40, 0.5)]).is_err());

    let rows = extract_features(&[vol.clone(), vol[..5].to_vec()], &FeatureNet::new(1), Window::F16).unwrap();
    assert_eq!(rows.len(), 1);
    let rows = extract_features(&[vol], &FeatureNet::new(1), Window::Slice).unwrap();
    assert_eq!(rows.len(), 16);
}
