use approx_eq::assert_close;
use egoprompt_core::numerics::{grad_check, GradCheckOptions, Objective, Tape, Tensor, Var};
use egoprompt_core::{Error, Result, Scalar};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod approx_eq {
    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b, tol): (f64, f64, f64) = ($a as f64, $b as f64, $tol as f64);
            assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
        }};
    }
    pub(crate) use assert_close;
}

fn t32(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_oracle() {
    let mut tape = Tape::<f32>::new();
    let i = tape.constant(t32(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(t32(&[2, 2], &[3., 4., 5., 6.]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

    let a_data = [1., 2., 3., 4.];
    let b_data = [5., 6., 7., 8.];
    let expected = triple_loop(&a_data, &b_data, 2, 2, 2);
    assert_eq!(expected, vec![19., 22., 43., 50.]);
    let a = tape.constant(t32(&[2, 2], &a_data));
    let b = tape.constant(t32(&[2, 2], &b_data));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).to_f64_vec(), expected);

    let z = tape.constant(Tensor::zeros(vec![2, 3]));
    let c = tape.matmul(a, z).unwrap();
    assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_random_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::from_f64(vec![m, k], &a).unwrap());
        let bv = tape.constant(Tensor::from_f64(vec![k, n], &b).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(triple_loop(&a, &b, m, k, n)) {
            assert_close!(*x, y, 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_temp_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[3], &[1., 1., 1.]));
    let y = tape.softmax_temp(x, 1.0).unwrap();
    for &v in tape.value(y).data() {
        assert_close!(v, 1.0 / 3.0, 1e-7);
    }

    // 1 / (1 + e^-2), evaluated in f64.
    let p0 = 1.0 / (1.0 + (-2.0f64).exp());
    assert_close!(p0, 0.880797, 1e-6);
    let x = tape.constant(t32(&[2], &[2., 0.]));
    let y = tape.softmax_temp(x, 1.0).unwrap();
    assert_close!(tape.value(y).data()[0], p0, 1e-6);
    assert_close!(tape.value(y).data()[1], 1.0 - p0, 1e-6);

    let y = tape.softmax_temp(x, 0.01).unwrap();
    assert_close!(tape.value(y).data()[0], 1.0, 1e-6);
    assert_close!(tape.value(y).data()[1], 0.0, 1e-6);
}

#[test]
fn softmax_rejects_bad_tau_and_empty_input() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[2], &[1., 2.]));
    assert!(matches!(tape.softmax_temp(x, 0.0), Err(Error::Parameter { .. })));
    assert!(matches!(tape.softmax_temp(x, -1.0), Err(Error::Parameter { .. })));
    assert!(matches!(Tensor::<f32>::new(vec![0], vec![]), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_is_overflow_safe() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[3], &[1000., 999., -1000.]));
    let y = tape.softmax_temp(x, 0.07).unwrap();
    assert!(tape.value(y).is_finite());
    assert_close!(tape.value(y).data().iter().sum::<f32>(), 1.0, 1e-6);
}

#[test]
fn cosine_similarity_examples() {
    let mut tape = Tape::<f32>::new();
    let mut cos = |a: &[f64], b: &[f64]| {
        let a = tape.constant(t32(&[a.len()], a));
        let b = tape.constant(t32(&[b.len()], b));
        let c = tape.cosine_similarity(a, b)?;
        Ok::<f32, Error>(tape.scalar_value(c))
    };
    assert_close!(cos(&[1., 0.], &[0., 1.]).unwrap(), 0.0, 1e-7);
    assert_close!(cos(&[1., 2.], &[2., 4.]).unwrap(), 1.0, 1e-6);
    assert_close!(cos(&[1., 0.], &[-1., 0.]).unwrap(), -1.0, 1e-7);
    assert!(matches!(cos(&[0., 0.], &[1., 0.]), Err(Error::DegenerateInput { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let ones = tape.constant(Tensor::filled(vec![4], 1.0));
    let zeros = tape.constant(Tensor::zeros(vec![4]));
    let x = tape.constant(t32(&[4], &[5., 5., 5., 5.]));
    let y = tape.layer_norm(x, ones, zeros).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t32(&[2, 4], &[0.3, -1.0, 2.0, 0.1, 4.0, 4.5, -3.0, 0.0]));
    let beta = tape.constant(t32(&[4], &[0.5, -0.5, 1.5, 2.0]));
    let y = tape.layer_norm(x, zeros, beta).unwrap();
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, &[0.5, -0.5, 1.5, 2.0]);
    }

    let one2 = tape.constant(Tensor::filled(vec![2], 1.0));
    let zero2 = tape.constant(Tensor::zeros(vec![2]));
    let x = tape.constant(t32(&[2], &[1., 3.]));
    let y = tape.layer_norm(x, one2, zero2).unwrap();
    // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
    assert_close!(tape.value(y).data()[0], -1.0, 1e-5);
    assert_close!(tape.value(y).data()[1], 1.0, 1e-5);

    assert!(matches!(tape.layer_norm(x, ones, zeros), Err(Error::Dimension { .. })));
}

#[test]
fn backward_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let unrelated = tape.param(Tensor::from_f64(vec![2], &[4.0, 4.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    assert_eq!(tape.grad_or_zero(unrelated), vec![0.0, 0.0]);

    // a second pass without reset accumulates
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
}

// ---- finite-difference checks ------------------------------------------

struct MatmulChain;
impl Objective for MatmulChain {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, l: &[Var]) -> Result<Var> {
        let ab = tape.matmul(l[0], l[1])?;
        let abc = tape.matmul(ab, l[2])?;
        let sq = tape.mul(abc, abc)?;
        Ok(tape.sum(sq))
    }
}

struct Constant;
impl Objective for Constant {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, _: &[Var]) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(T::of(3.5))))
    }
}

struct SoftmaxDot {
    tau: f64,
}
impl Objective for SoftmaxDot {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, l: &[Var]) -> Result<Var> {
        // logits = W·x, then a weighted read-out of the tempered softmax
        let logits = tape.matmul(l[0], l[1])?;
        let logits = tape.reshape(logits, vec![tape.value(l[0]).shape()[0]])?;
        let p = tape.softmax_temp(logits, T::of(self.tau))?;
        tape.dot(p, l[2])
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn grad_check_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let leaves = [
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4, 2]),
    ];
    let report = grad_check::<f32, _>(&MatmulChain, &leaves, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_constant_is_exactly_zero() {
    let leaves = [Tensor::from_f64(vec![2], &[0.1, 0.2]).unwrap()];
    let report = grad_check::<f32, _>(&Constant, &leaves, GradCheckOptions::default()).unwrap();
    assert_eq!(report.max_rel_error(), 0.0);
    assert_eq!(report.leaves[0].scale, 0.0);
}

#[test]
fn grad_check_softmax_dot_low_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = [
        rand_tensor(&mut rng, &[5, 3]).cast::<f64>(),
        rand_tensor(&mut rng, &[3, 1]),
        rand_tensor(&mut rng, &[5]),
    ];
    // keep logits within a few tau of each other so the check is informative
    let leaves = [
        Tensor::new(vec![5, 3], leaves[0].data().iter().map(|v| v * 0.1).collect()).unwrap(),
        leaves[1].clone(),
        leaves[2].clone(),
    ];
    let report = grad_check::<f32, _>(&SoftmaxDot { tau: 0.07 }, &leaves, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

struct NonFinite;
impl Objective for NonFinite {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, l: &[Var]) -> Result<Var> {
        let s = tape.sum(l[0]);
        let inf = tape.constant(Tensor::scalar(T::infinity()));
        tape.add(s, inf)
    }
}

#[test]
fn grad_check_reports_probe_error_on_non_finite_objective() {
    let leaves = [Tensor::from_f64(vec![2], &[0.1, 0.2]).unwrap()];
    let err = grad_check::<f64, _>(&NonFinite, &leaves, GradCheckOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Probe(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one(
        logits in prop::collection::vec(-50.0f64..50.0, 1..12),
        log_tau in (1e-3f64).ln()..(10.0f64).ln(),
    ) {
        let tau = log_tau.exp();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(vec![logits.len()], &logits).unwrap());
        let y = tape.softmax_temp(x, tau as f32).unwrap();
        let vals = tape.value(y).data();
        let sum: f64 = vals.iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (&v, &l) in vals.iter().zip(&logits) {
            prop_assert!((0.0..=1.0).contains(&v));
            // strictly positive wherever exp((l - max)/tau) is representable in f32
            if (mx - l) / tau < 80.0 {
                prop_assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        la in 0.01f64..100.0,
        mu in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::from_f64(vec![4], &a).unwrap());
        let bv = tape.constant(Tensor::from_f64(vec![4], &b).unwrap());
        let sa: Vec<f64> = a.iter().map(|v| v * la).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * mu).collect();
        let sav = tape.constant(Tensor::from_f64(vec![4], &sa).unwrap());
        let sbv = tape.constant(Tensor::from_f64(vec![4], &sb).unwrap());
        let ab = tape.cosine_similarity(av, bv).unwrap();
        let ba = tape.cosine_similarity(bv, av).unwrap();
        let scaled = tape.cosine_similarity(sav, sbv).unwrap();
        let (ab, ba, scaled) = (tape.scalar_value(ab), tape.scalar_value(ba), tape.scalar_value(scaled));
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!((ab - scaled).abs() <= 1e-6);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn backward_is_linear(x in prop::collection::vec(-1.0f64..1.0, 3..6)) {
        let n = x.len();
        let grad_of = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let v = tape.param(Tensor::from_f64(vec![n], &x).unwrap());
            let f = { let s = tape.mul(v, v).unwrap(); tape.sum(s) };
            let g = { let a = tape.abs(v); let e = tape.gelu(a); tape.sum(e) };
            let root = match which { 0 => f, 1 => g, _ => tape.add(f, g).unwrap() };
            tape.backward(root).unwrap();
            tape.grad_or_zero(v)
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..n {
            prop_assert!((gf[i] + gg[i] - gs[i]).abs() <= 1e-6);
        }
    }
}
