use kflow::linalg::{det, eig, evolve, expm, reconstruct, Complex64, LinalgError};
use kflow::ndcore::Tensor;
use kflow::seeded_rng;
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(n: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * scale)
}

/// Plain power series `Σ_{k<150} A^k / k!` with compensated summation.
fn series_oracle(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut sum = Tensor::eye(n);
    let mut comp = Tensor::zeros([n, n]);
    let mut term = Tensor::eye(n);
    for k in 1..150 {
        term = term.matmul(a).scale(1.0 / k as f64);
        for ((s, c), t) in sum
            .data_mut()
            .iter_mut()
            .zip(comp.data_mut().iter_mut())
            .zip(term.data())
        {
            let y = t - *c;
            let u = *s + y;
            *c = (u - *s) - y;
            *s = u;
        }
    }
    sum
}

fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm()
}

#[test]
fn expm_matches_series_on_random_matrices() {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let raw = random_matrix(8, 100 + seed, 1.0);
        // rescale to a 1-norm spread over (0, 5]
        let target = 5.0 * (seed + 1) as f64 / 50.0;
        let a = raw.scale(target / raw.norm1());
        let e = rel_frobenius(&expm(&a).unwrap(), &series_oracle(&a));
        assert!(e <= 1e-10, "seed {seed}: relative error {e:e}");
        worst = worst.max(e);
    }
    eprintln!("expm worst relative error {worst:e}");
}

#[test]
fn eig_reconstructs_seed_nine_matrix() {
    let a = random_matrix(8, 9, 1.0);
    let pairs = eig(&a).unwrap();
    let back = reconstruct(&pairs).unwrap();
    let err = back.sub(&a).frobenius_norm();
    assert!(err <= 1e-7 * a.frobenius_norm(), "reconstruction error {err:e}");
    let scale = a.frobenius_norm();
    assert!(pairs.residuals(&a).iter().all(|&r| r <= 1e-8 * scale));
}

#[test]
fn eig_conjugate_pairs_and_sorting() {
    for seed in 0..20 {
        let a = random_matrix(7, 300 + seed, 2.0);
        let pairs = eig(&a).unwrap().sorted_by_real_desc();
        let partners = pairs.conjugate_partners();
        for (i, &j) in partners.iter().enumerate() {
            let d = pairs.values[i] - pairs.values[j].conj();
            assert!(d.norm() <= 1e-12 * a.frobenius_norm(), "seed {seed}: unpaired {i}");
        }
        assert!(pairs
            .values
            .windows(2)
            .all(|w| w[0].re > w[1].re || (w[0].re == w[1].re && w[0].im >= w[1].im)));
        let scale = a.frobenius_norm();
        assert!(pairs.residuals(&a).iter().all(|&r| r <= 1e-8 * scale));
    }
}

#[test]
fn eig_of_rotation_generator() {
    let a = Tensor::from_rows(&[[0.0, -1.0], [1.0, 0.0]]);
    let p = eig(&a).unwrap().sorted_by_real_desc();
    assert!((p.values[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    assert!((p.values[1] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
}

#[test]
fn evolve_semigroup() {
    let l = random_matrix(6, 17, 1.5);
    let z = random_matrix(6, 18, 1.0).slice_rows(0, 4);
    let stepped = evolve(&l, &evolve(&l, &z, 0.3).unwrap(), 0.7).unwrap();
    let direct = evolve(&l, &z, 1.0).unwrap();
    let err = stepped.sub(&direct).max_abs() / direct.max_abs();
    assert!(err <= 1e-9, "semigroup error {err:e}");
}

#[test]
fn eig_rejects_nan() {
    let mut a = Tensor::eye(3);
    a.set(1, 2, f64::NAN);
    assert!(matches!(eig(&a), Err(LinalgError::Nd(_))));
}

fn matrix_strategy(n: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-scale..scale, n * n)
        .prop_map(move |v| Tensor::new([n, n], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expm_inverse_identity(a in matrix_strategy(5, 1.0)) {
        let a = a.scale(10.0 / a.norm1().max(10.0));
        let prod = expm(&a).unwrap().matmul(&expm(&a.scale(-1.0)).unwrap());
        prop_assert!(prod.sub(&Tensor::eye(5)).max_abs() <= 1e-9);
    }

    #[test]
    fn det_of_exponential_is_exp_trace(a in matrix_strategy(4, 1.5)) {
        let trace: f64 = (0..4).map(|i| a.get(i, i)).sum();
        let d = det(&expm(&a).unwrap()).unwrap();
        prop_assert!((d - trace.exp()).abs() <= 1e-8 * trace.exp());
    }

    #[test]
    fn symmetric_spectrum_is_real(a in matrix_strategy(6, 3.0)) {
        let s = a.add(&a.transpose()).scale(0.5);
        let p = eig(&s).unwrap();
        prop_assert!(p.values.iter().all(|v| v.im.abs() <= 1e-10));
        let scale = s.frobenius_norm().max(1e-300);
        prop_assert!(p.residuals(&s).iter().all(|&r| r <= 1e-8 * scale));
    }

    #[test]
    fn eig_residuals_within_tolerance(a in matrix_strategy(6, 2.0)) {
        let p = eig(&a).unwrap();
        let scale = a.frobenius_norm().max(1e-300);
        prop_assert!(p.residuals(&a).iter().all(|&r| r <= 1e-8 * scale));
    }
}
