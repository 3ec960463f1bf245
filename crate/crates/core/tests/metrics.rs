use aqgt_core::metrics::{diversity, diversity_samples, fgd, maje};
use aqgt_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v + shift)
        .collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[test]
fn fgd_grows_with_mean_shift() {
    let base = gaussian(400, 6, 0.0, 1);
    let noise = gaussian(400, 6, 0.0, 2);
    let shifted = |s: f64| noise.map(|v| v + s);
    let d: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&s| fgd(&base, &shifted(s)).unwrap())
        .collect();
    assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    assert!(fgd(&base, &base).unwrap() <= 1e-6);
}

#[test]
fn diversity_repeats_shrink_the_spread() {
    let features = gaussian(200, 8, 0.0, 3);
    let single = diversity_samples(&features, 500, 2000, 4).unwrap();
    let averaged: Vec<f64> = (0..30)
        .map(|s| diversity(&features, 500, 1000, 100 + s).unwrap())
        .collect();
    assert!(
        std(&averaged) < std(&single) / 10.0,
        "{} vs {}",
        std(&averaged),
        std(&single)
    );
}

#[test]
fn diversity_of_identical_features_is_zero() {
    let one = Tensor::new(vec![10, 3], [0.3, -1.0, 2.0].repeat(10)).unwrap();
    assert_eq!(diversity(&one, 500, 50, 0).unwrap(), 0.0);
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || prop::collection::vec(-3.0f64..3.0, 12);
    (v(), v(), v())
}

fn t(v: &[f64]) -> Tensor {
    Tensor::new(vec![4, 3], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn maje_is_a_metric((a, b, c) in triple()) {
        let (a, b, c) = (t(&a), t(&b), t(&c));
        prop_assert_eq!(maje(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(maje(&a, &b).unwrap(), maje(&b, &a).unwrap());
        prop_assert!(maje(&a, &c).unwrap() <= maje(&a, &b).unwrap() + maje(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn fgd_is_non_negative_and_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, shift in -1.0f64..1.0) {
        let a = gaussian(60, 4, 0.0, s1);
        let b = gaussian(60, 4, shift, s2 + 5000);
        let ab = fgd(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fgd(&b, &a).unwrap()).abs() <= 1e-8 * (1.0 + ab));
    }
}
