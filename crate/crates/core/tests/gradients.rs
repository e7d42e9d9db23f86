//! Reverse-mode gradients and forward-mode directional derivatives against
//! central finite differences.

use kflow::cfm::{cfm_loss, cfm_loss_on_tape, path_sample, ConditionalPath, VectorFieldModel};
use kflow::datasets::Distribution2D;
use kflow::koopman::{
    generator_loss, generator_loss_on_tape, model_on_tape, prediction_loss,
    prediction_loss_on_tape, target_consistency_loss, target_consistency_loss_on_tape,
    EncoderConfig, KoopmanModel,
};
use kflow::ndcore::{jvp, jvp_central_difference, Tape, Tensor, Var};
use kflow::nn::{Mlp, MlpSpec};
use kflow::seeded_rng;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const COORDS: usize = 80;

/// `(tensor, flat index)` pairs drawn uniformly over all parameters.
fn pick_coords(params: &[Tensor], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded_rng(seed);
    let total: usize = params.iter().map(Tensor::len).sum();
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut t = 0;
            while k >= params[t].len() {
                k -= params[t].len();
                t += 1;
            }
            (t, k)
        })
        .collect()
}

fn central_difference(params: &[Tensor], (t, k): (usize, usize), f: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let base = p[t].data()[k];
    p[t].data_mut()[k] = base + H;
    let up = f(&p);
    p[t].data_mut()[k] = base - H;
    let down = f(&p);
    (up - down) / (2.0 * H)
}

/// Relative error with a small absolute floor for coordinates whose
/// gradient is essentially zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check(name: &str, params: &[Tensor], grads: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, seed: u64) {
    let mut worst = 0.0f64;
    for c in pick_coords(params, COORDS, seed) {
        let fd = central_difference(params, c, f);
        let ad = grads[c.0].data()[c.1];
        let e = rel_err(ad, fd);
        assert!(
            e <= TOL,
            "{name}: tensor {} index {}: reverse {ad:e} vs fd {fd:e} (rel {e:e})",
            c.0,
            c.1
        );
        worst = worst.max(e);
    }
    eprintln!("{name}: worst relative error {worst:e} over {COORDS} coordinates");
}

fn koopman_fixture() -> (KoopmanModel, Tensor, Vec<f64>, Tensor) {
    let enc = EncoderConfig {
        p_learned: 6,
        hidden: 16,
        depth: 2,
    };
    let mut m = KoopmanModel::new(enc, 21, 0.2).unwrap();
    // larger generator so the exponential is far from identity
    let l = m.generator().scale(2.0);
    m.set_generator(l).unwrap();
    let x = Distribution2D::Gauss.sample(12, 3).scale(2.0);
    let mut rng = seeded_rng(4);
    let t: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let v = Distribution2D::Gauss.sample(12, 5);
    (m, x, t, v)
}

fn rebuild(m: &KoopmanModel, p: &[Tensor]) -> KoopmanModel {
    let (l, enc) = p.split_last().unwrap();
    KoopmanModel::from_parts(m.encoder_spec().copied(), enc.to_vec(), l.clone()).unwrap()
}

fn koopman_grads<F>(m: &KoopmanModel, loss: F) -> Vec<Tensor>
where
    F: for<'a, 't> Fn(&'t Tape, &kflow::koopman::TapeModel<'a, 't>) -> Var<'t>,
{
    let tape = Tape::new();
    let mut enc = Vec::new();
    let tm = model_on_tape(&tape, m, &mut enc);
    let out = loss(&tape, &tm);
    let mut g = tape.backward(out).unwrap();
    let mut grads: Vec<Tensor> = tm.encoder.iter().map(|&v| g.take(v)).collect();
    grads.push(g.take(tm.l));
    grads
}

#[test]
fn cfm_loss_gradient() {
    let spec = MlpSpec::new(3, 16, 2, 2);
    let model = VectorFieldModel::new(spec, 8).unwrap();
    let x0 = Distribution2D::Gauss.sample(16, 1);
    let x1 = Distribution2D::EIGHT_GAUSS.sample(16, 2);
    let mut rng = seeded_rng(3);
    let t: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = path_sample(&ConditionalPath::gaussian(), &x0, &x1, &t, &mut rng).unwrap();

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = model.params().iter().map(|p| tape.var(p.clone())).collect();
    let loss = cfm_loss_on_tape(&tape, &spec, &vars, &batch);
    let mut g = tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.take(v)).collect();

    let f = |p: &[Tensor]| cfm_loss(&VectorFieldModel::from_params(spec, p.to_vec()).unwrap(), &batch);
    check("cfm", model.params(), &grads, &f, 10);
}

#[test]
fn generator_loss_gradient() {
    let (m, x, t, v) = koopman_fixture();
    let grads = koopman_grads(&m, |tape, tm| generator_loss_on_tape(tape, tm, &x, &t, &v));
    let f = |p: &[Tensor]| generator_loss(&rebuild(&m, p), &x, &t, &v).unwrap();
    check("generator", &m.params(), &grads, &f, 11);
}

#[test]
fn consistency_loss_gradient() {
    let (m, x, _, v) = koopman_fixture();
    let x1 = x.add(&v);
    let ti = 0.23;
    let grads = koopman_grads(&m, |tape, tm| {
        target_consistency_loss_on_tape(tape, tm, &x, ti, &x1).unwrap()
    });
    let f = |p: &[Tensor]| {
        target_consistency_loss(&rebuild(&m, p), &x, &vec![ti; x.rows()], &x1).unwrap()
    };
    check("consistency", &m.params(), &grads, &f, 12);
}

#[test]
fn prediction_loss_gradient() {
    let (m, x, t, v) = koopman_fixture();
    let grads = koopman_grads(&m, |tape, tm| prediction_loss_on_tape(tape, tm, &x, &t, &v));
    let f = |p: &[Tensor]| prediction_loss(&rebuild(&m, p), &x, &t, &v).unwrap();
    check("prediction", &m.params(), &grads, &f, 13);
}

#[test]
fn generator_gradient_hits_every_tensor() {
    let (m, x, t, v) = koopman_fixture();
    let grads = koopman_grads(&m, |tape, tm| generator_loss_on_tape(tape, tm, &x, &t, &v));
    assert!(grads.iter().all(|g| g.max_abs() > 0.0));
}

#[test]
fn mlp_jvp_matches_directional_difference() {
    let mlp = Mlp::new(MlpSpec::new(3, 32, 3, 5), 11).unwrap();
    let x = Distribution2D::Gauss.sample(9, 1).scale(1.5);
    let x = Tensor::concat_cols(&[&x, &Tensor::full([9, 1], 0.4)]);
    let v = Tensor::from_fn(9, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
    let ad = jvp(|d| mlp.forward_dual(d), &x, &v).unwrap();
    let fd = jvp_central_difference(|y| mlp.forward(y), &x, &v, H).unwrap();
    for (a, b) in ad.data().iter().zip(fd.data()) {
        assert!(rel_err(*a, *b) <= TOL, "jvp {a:e} vs fd {b:e}");
    }
}

#[test]
fn encode_jvp_matches_directional_difference() {
    let (m, x, t, v) = koopman_fixture();
    let ad = m.encode_dual(&x, &t, &v).tangent;
    // step the state along v and the time along 1 together
    let plus = m.encode(&x.add(&v.scale(H)), &t.iter().map(|s| s + H).collect::<Vec<_>>());
    let minus = m.encode(&x.sub(&v.scale(H)), &t.iter().map(|s| s - H).collect::<Vec<_>>());
    let fd = plus.sub(&minus).scale(0.5 / H);
    for (a, b) in ad.data().iter().zip(fd.data()) {
        assert!(rel_err(*a, *b) <= TOL, "encode jvp {a:e} vs fd {b:e}");
    }
}
