use kflow::analysis::{mmd, progressive_reconstruction, spectral_decompose, Bandwidth};
use kflow::cfm::{integrate_endpoint, AnalyticField, OdeMethod, VectorFieldModel};
use kflow::checkpoint::{Checkpoint, CheckpointError, TaskInfo};
use kflow::datasets::Distribution2D;
use kflow::koopman::{
    generator_loss, prediction_loss, train_koopman, CurriculumSchedule, DataSource,
    EncoderConfig, KoopmanModel, KoopmanTrainConfig, ScheduleMode,
};
use kflow::linalg::evolve;
use kflow::ndcore::Tensor;
use kflow::nn::MlpSpec;
use kflow::sampler::koopman_sample_from;
use kflow::{seeded_rng, seeded_stream};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(n: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) * scale)
}

#[test]
fn spectral_sum_equals_evolution() {
    let l = random_matrix(8, 4, 1.0);
    let mut rng = seeded_stream(4, 1);
    let z0: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let d = spectral_decompose(&l, &z0).unwrap();
    let want = evolve(&l, &Tensor::new([1, 8], z0.clone()).unwrap(), 0.37).unwrap();
    let (got, imag) = d.reconstruct(0.37);
    let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-8, "reconstruction error {err:e}");
    assert!(imag <= 1e-10, "imaginary residue {imag:e}");

    let (at0, _) = d.reconstruct(0.0);
    for (a, b) in at0.data().iter().zip(&z0) {
        assert!((a - b).abs() <= 1e-8);
    }
    let full = progressive_reconstruction(&d, 8, 0.37).unwrap();
    assert_eq!(full.z, got);
    let values = &d.pairs.values;
    assert!(values.windows(2).all(|w| w[0].re >= w[1].re));
}

#[test]
fn zero_coefficients_beyond_k_leave_partial_equal_to_full() {
    let l = Tensor::from_rows(&[[-0.5, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -2.0]]);
    let d = spectral_decompose(&l, &[1.5, 0.0, 0.0]).unwrap();
    let part = progressive_reconstruction(&d, 1, 0.8).unwrap();
    assert_eq!(part.z, d.reconstruct(0.8).0);
}

#[test]
fn sample_times_form_a_semigroup() {
    let l = random_matrix(4, 30, 0.8);
    let model = KoopmanModel::from_parts(None, vec![], l.clone()).unwrap();
    let x0 = Distribution2D::Gauss.sample(20, 31);
    let direct = koopman_sample_from(&model, &x0, &[0.9]).unwrap().last();
    let mut z = model.encode(&x0, &[0.0; 20]);
    for dt in [0.2, 0.35, 0.1, 0.25] {
        z = evolve(&l, &z, dt).unwrap();
    }
    assert!(direct.sub(&z.slice_cols(0, 2)).max_abs() <= 1e-8);
}

#[test]
fn euler_converges_at_first_order() {
    // dx/dt = -x has the exact flow x0·e^{-t}
    let field = AnalyticField(|x: [f64; 2], _t: f64| [-x[0], -x[1]]);
    let x0 = Tensor::from_rows(&[[1.0, -2.0]]);
    let exact = x0.scale((-1.0f64).exp());
    let err = |n| integrate_endpoint(&field, &x0, n, OdeMethod::Euler).unwrap().sub(&exact).max_abs();
    let ratio = err(50) / err(100);
    assert!((ratio - 2.0).abs() < 0.1, "error ratio {ratio}");
    let rk = integrate_endpoint(&field, &x0, 100, OdeMethod::Rk4).unwrap().sub(&exact).max_abs();
    assert!(rk < 1e-9);
}

#[test]
fn training_leaves_the_field_untouched() {
    let field = VectorFieldModel::new(MlpSpec::new(3, 8, 2, 2), 3).unwrap();
    let before = field.clone();
    let cfg = KoopmanTrainConfig {
        encoder: EncoderConfig {
            p_learned: 2,
            hidden: 8,
            depth: 1,
        },
        schedule: CurriculumSchedule {
            epochs: 1,
            ..Default::default()
        },
        source: DataSource::UniformDomain {
            n_pairs: 100,
            half_width: 8.0,
        },
        batch: 20,
        n_traj: 8,
        ..Default::default()
    };
    train_koopman(&field, &Distribution2D::Gauss, &cfg).unwrap();
    assert_eq!(field.params(), before.params());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.ckpt");
    let model = KoopmanModel::new(EncoderConfig::default(), 6, 1e-3).unwrap();
    let task = TaskInfo {
        prior: "gauss".into(),
        target: "8g".into(),
        path: "ot".into(),
    };
    let ck = Checkpoint::from_koopman(&model, 6, Some(task));
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.meta.p_total, Some(32));
    assert_eq!(back.to_koopman().unwrap(), model);

    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 100;
    bytes[at] = bytes[at].wrapping_add(1);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Checksum { .. })));
}

fn points(n: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-5.0f64..5.0, 2 * n).prop_map(move |v| Tensor::new([n, 2], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mmd_symmetric_and_nonnegative(a in points(17), b in points(23)) {
        let ab = mmd(&a, &b, Bandwidth::Auto).unwrap();
        let ba = mmd(&b, &a, Bandwidth::Auto).unwrap();
        prop_assert!((ab.value - ba.value).abs() <= 1e-12);
        prop_assert!(ab.value >= 0.0);
    }

    #[test]
    fn mmd_ignores_row_order(a in points(15), b in points(15), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..15).collect();
        let mut rng = seeded_rng(seed);
        for i in (1..15).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let r0 = mmd(&a, &b, Bandwidth::Fixed(1.3)).unwrap().value;
        let r1 = mmd(&a.select_rows(&idx), &b.select_rows(&idx), Bandwidth::Fixed(1.3)).unwrap().value;
        prop_assert!((r0 - r1).abs() <= 1e-12);
    }

    #[test]
    fn encode_preserves_state_time_and_constant(x in points(9), t in 0.0f64..1.0, seed in 0u64..1000) {
        let m = KoopmanModel::new(EncoderConfig { p_learned: 5, hidden: 12, depth: 2 }, seed, 0.1).unwrap();
        let z = m.encode(&x, &[t; 9]);
        for i in 0..9 {
            prop_assert_eq!(&z.row(i)[..4], &[x.get(i, 0), x.get(i, 1), t, 1.0][..]);
        }
        prop_assert_eq!(z.slice_cols(0, 2), x);
    }

    #[test]
    fn zero_generator_residual_implies_zero_prediction(x in points(6), t in 0.0f64..1.0) {
        // no learned block, so the analytic decay system is exact
        let l = Tensor::from_rows(&[
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let m = KoopmanModel::from_parts(None, vec![], l).unwrap();
        let v = x.scale(-1.0);
        prop_assert_eq!(generator_loss(&m, &x, &[t; 6], &v).unwrap(), 0.0);
        prop_assert_eq!(prediction_loss(&m, &x, &[t; 6], &v).unwrap(), 0.0);
    }

    #[test]
    fn prediction_bounded_by_generator(x in points(8), seed in 0u64..500) {
        let m = KoopmanModel::new(EncoderConfig { p_learned: 3, hidden: 8, depth: 1 }, seed, 0.5).unwrap();
        let v = Distribution2D::Gauss.sample(8, seed);
        let t = [0.5; 8];
        let g = generator_loss(&m, &x, &t, &v).unwrap();
        let p = prediction_loss(&m, &x, &t, &v).unwrap();
        prop_assert!(p <= m.p_total() as f64 * g + 1e-12);
    }

    #[test]
    fn reverse_schedule_never_increases(total in 2usize..2000, ramp in 0.05f64..1.0) {
        let s = CurriculumSchedule { ramp_fraction: ramp, mode: ScheduleMode::ReverseLinear, ..Default::default() };
        let mut rng = seeded_rng(0);
        let mut prev = f64::INFINITY;
        for k in 0..total {
            let t = s.t_at(k, total, &mut rng);
            prop_assert!(t <= prev && (0.0..=1.0).contains(&t));
            prev = t;
        }
    }
}
