mod common;

use common::quant_trial;
use outlierlab::diagnostics::{kurtosis, norm_ratio};
use outlierlab::optim::{make_ortho, OrthoBackend};
use outlierlab::quant::{fake_quantize, Granularity, Scheme};
use outlierlab::Tensor;
use proptest::prelude::*;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn backend() -> impl Strategy<Value = OrthoBackend> {
    prop_oneof![
        Just(OrthoBackend::Identity),
        Just(OrthoBackend::DenseRandom),
        (0u32..8).prop_map(|k| OrthoBackend::HadamardBlock { block_size: 1 << k }),
        (0u32..8).prop_map(|k| OrthoBackend::Auto { block_size: 1 << k }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_preserve_norms_and_invert(
        x in prop::collection::vec(-10.0f64..10.0, 1..300),
        backend in backend(),
        seed in any::<u64>(),
    ) {
        let q = make_ortho(x.len(), backend, 4096, seed).unwrap();
        let y = q.apply(&x).unwrap();
        prop_assert_eq!(y.len(), q.basis_len());
        prop_assert!((norm(&y) - norm(&x)).abs() <= 1e-12 * norm(&x).max(1.0));
        let back = q.apply_transpose(&y).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kurtosis_ignores_scale_and_shift(
        x in prop::collection::vec(-5.0f64..5.0, 4..64),
        a in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
        b in -50.0f64..50.0,
    ) {
        if let Ok(k) = kurtosis(&x) {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ky = kurtosis(&y).unwrap();
            prop_assert!((k - ky).abs() < 1e-6 * k, "{} vs {}", k, ky);
            prop_assert!(k >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn permuting_coordinates_keeps_statistics(mut x in prop::collection::vec(-5.0f64..5.0, 4..64), rot in 0usize..64) {
        let (k, r) = (kurtosis(&x), norm_ratio(&x));
        let n = x.len();
        x.rotate_left(rot % n);
        x.reverse();
        match (k, kurtosis(&x)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9 * a),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        if let (Ok(a), Ok(b)) = (r, norm_ratio(&x)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fake_quantisation_is_idempotent(
        rows in 1usize..6,
        cols in 2usize..20,
        seed in any::<u64>(),
        zeropoint in any::<bool>(),
    ) {
        let x = common::randn(&[rows, cols], seed);
        let (scheme, bits) = if zeropoint { (Scheme::Zeropoint, 4) } else { (Scheme::Absmax, 8) };
        for g in [Granularity::PerTensor, Granularity::PerChannel { axis: 1 }, Granularity::PerChannel { axis: 0 }] {
            let once = fake_quantize(&x, scheme, bits, g).unwrap();
            let twice = fake_quantize(&once, scheme, bits, g).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12, "{:?} {:?}: {} vs {}", scheme, g, a, b);
            }
        }
    }
}

#[test]
fn quantisation_bounds_over_a_thousand_trials() {
    for seed in 0..1000 {
        let t = quant_trial(seed);
        assert!(t.worst_bound_ratio <= 1.0, "trial {seed}: {}", t.worst_bound_ratio);
        let (pc, pt) = t.mse[0];
        assert!(pc <= pt, "trial {seed}: per-channel {pc} > per-tensor {pt}");
    }
}

#[test]
fn values_on_the_grid_survive_exactly() {
    // 8-bit absmax with absmax 127 has unit steps
    let x = Tensor::new(&[2, 3], vec![127.0, -3.0, 0.0, 5.0, -127.0, 64.0]).unwrap();
    assert_eq!(fake_quantize(&x, Scheme::Absmax, 8, Granularity::PerTensor).unwrap(), x);
    // 4-bit zeropoint over [0, 15] has unit steps
    let x = Tensor::new(&[1, 4], vec![0.0, 15.0, 7.0, 3.0]).unwrap();
    assert_eq!(
        fake_quantize(&x, Scheme::Zeropoint, 4, Granularity::PerTensor).unwrap(),
        x
    );
}

/// Integer zero-points can cost a per-channel grid more than the shared one:
/// this row's range excludes zero, so rounding `Z` shifts both end points
/// close to half a step from the nearest level.
#[test]
fn zeropoint_refinement_is_not_monotone() {
    use outlierlab::quant::mse;
    let x = Tensor::new(&[2, 4], vec![-6.0, -0.57, -3.1, -4.4, -0.03, 0.005, -0.01, 0.0]).unwrap();
    let pc = fake_quantize(&x, Scheme::Zeropoint, 4, Granularity::PerChannel { axis: 0 }).unwrap();
    let pt = fake_quantize(&x, Scheme::Zeropoint, 4, Granularity::PerTensor).unwrap();
    let row = |t: &Tensor| Tensor::new(&[4], t.data()[..4].to_vec()).unwrap();
    let x0 = row(&x);
    assert!(mse(&x0, &row(&pc)) > mse(&x0, &row(&pt)));
}

/// While the step is below the bulk's spread, per-tensor absmax error on the
/// ordinary coordinates grows with the square of a single outlier.
#[test]
fn outlier_inflates_per_tensor_error_quadratically() {
    let d = 4096;
    let z = common::randn(&[d], 77);
    let rest_mse = |alpha: f64| {
        let mut x = z.clone();
        x.data_mut()[0] = alpha;
        let y = fake_quantize(&x, Scheme::Absmax, 8, Granularity::PerTensor).unwrap();
        x.data()[1..]
            .iter()
            .zip(&y.data()[1..])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (d - 1) as f64
    };
    for alpha in [4.0, 8.0, 16.0, 32.0] {
        let growth = rest_mse(2.0 * alpha) / rest_mse(alpha);
        assert!((3.0..5.0).contains(&growth), "alpha {alpha}: {growth}");
    }
}
