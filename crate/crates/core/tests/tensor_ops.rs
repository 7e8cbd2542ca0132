use proptest::prelude::*;
use prospectr::tensor::{grad_check, grad_check_mixed};
use prospectr::{Error, Result, RngStream, Scalar, Tape, Tensor, Var};

/// Fixed, non-uniform weights so that `Σ w ⊙ y` exercises every output entry.
fn weighted_sum<T: Scalar>(t: &mut Tape<T>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(t.shape(y), |i| T::from_f64_lossy((i as f64 * 1.7 + 0.3).sin() + 0.1));
    let w = t.constant(&w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// `x^2 + 0.5`, a strictly positive reparametrization for log/pow/div.
fn positive<T: Scalar>(t: &mut Tape<T>, x: Var) -> Var {
    let s = t.square(x);
    t.add_scalar(s, T::from_f64_lossy(0.5))
}

type OpFn<T> = fn(&mut Tape<T>, Var, &Tensor<T>) -> Result<Var>;

struct Case<T: Scalar> {
    name: &'static str,
    shape: &'static [usize],
    other: &'static [usize],
    f: OpFn<T>,
}

fn c<T: Scalar>(name: &'static str, shape: &'static [usize], other: &'static [usize], f: OpFn<T>) -> Case<T> {
    Case { name, shape, other, f }
}

fn cases<T: Scalar>() -> Vec<Case<T>> {
    vec![
        c("add", &[3, 4], &[3, 4], |t, x, o| {
            let o = t.constant(o);
            let y = t.add(x, o)?;
            weighted_sum(t, y)
        }),
        c("add_broadcast_rhs", &[2, 3, 4], &[4], |t, x, o| {
            let o = t.constant(o);
            let y = t.add(o, x)?;
            weighted_sum(t, y)
        }),
        c("add_broadcast_grad_side", &[4], &[2, 3, 4], |t, x, o| {
            let o = t.constant(o);
            let y = t.add(x, o)?;
            weighted_sum(t, y)
        }),
        c("sub", &[3, 4], &[3, 1], |t, x, o| {
            let o = t.constant(o);
            let y = t.sub(o, x)?;
            weighted_sum(t, y)
        }),
        c("mul", &[2, 5], &[2, 5], |t, x, o| {
            let o = t.constant(o);
            let y = t.mul(x, o)?;
            weighted_sum(t, y)
        }),
        c("mul_self", &[6], &[1], |t, x, _| {
            let y = t.mul(x, x)?;
            weighted_sum(t, y)
        }),
        c("div_numerator", &[2, 3], &[2, 3], |t, x, o| {
            let o = t.constant(o);
            let d = positive(t, o);
            let y = t.div(x, d)?;
            weighted_sum(t, y)
        }),
        c("div_denominator", &[2, 3], &[2, 3], |t, x, o| {
            let o = t.constant(o);
            let d = positive(t, x);
            let y = t.div(o, d)?;
            weighted_sum(t, y)
        }),
        c("add_scalar", &[5], &[1], |t, x, _| {
            let y = t.add_scalar(x, T::from_f64_lossy(1.25));
            weighted_sum(t, y)
        }),
        c("mul_scalar", &[5], &[1], |t, x, _| {
            let y = t.mul_scalar(x, T::from_f64_lossy(-0.75));
            weighted_sum(t, y)
        }),
        c("neg", &[5], &[1], |t, x, _| {
            let y = t.neg(x);
            weighted_sum(t, y)
        }),
        c("exp", &[2, 3], &[1], |t, x, _| {
            let y = t.exp(x);
            weighted_sum(t, y)
        }),
        c("log", &[2, 3], &[1], |t, x, _| {
            let p = positive(t, x);
            let y = t.log(p);
            weighted_sum(t, y)
        }),
        c("pow", &[2, 3], &[1], |t, x, _| {
            let p = positive(t, x);
            let y = t.pow(p, T::from_f64_lossy(-0.5));
            weighted_sum(t, y)
        }),
        c("square", &[4], &[1], |t, x, _| {
            let y = t.square(x);
            weighted_sum(t, y)
        }),
        c("sigmoid", &[2, 4], &[1], |t, x, _| {
            let y = t.sigmoid(x);
            weighted_sum(t, y)
        }),
        c("gelu", &[2, 4], &[1], |t, x, _| {
            let y = t.gelu(x);
            weighted_sum(t, y)
        }),
        c("clamp", &[8], &[1], |t, x, _| {
            let y = t.clamp(x, T::from_f64_lossy(-0.5), T::from_f64_lossy(0.7));
            weighted_sum(t, y)
        }),
        c("prelu_input", &[3, 4], &[4], |t, x, o| {
            let s = t.constant(o);
            let y = t.prelu(x, s)?;
            weighted_sum(t, y)
        }),
        c("prelu_slope", &[1], &[3, 4], |t, x, o| {
            let i = t.constant(o);
            let y = t.prelu(i, x)?;
            weighted_sum(t, y)
        }),
        c("matmul_lhs", &[3, 4], &[4, 2], |t, x, o| {
            let b = t.constant(o);
            let y = t.matmul(x, b)?;
            weighted_sum(t, y)
        }),
        c("matmul_rhs", &[4, 2], &[3, 4], |t, x, o| {
            let a = t.constant(o);
            let y = t.matmul(a, x)?;
            weighted_sum(t, y)
        }),
        c("matmul_shared_rhs", &[3, 2], &[2, 4, 3], |t, x, o| {
            let a = t.constant(o);
            let y = t.matmul(a, x)?;
            weighted_sum(t, y)
        }),
        c("matmul_batched", &[2, 3, 2], &[2, 2, 3], |t, x, o| {
            let a = t.constant(o);
            let y = t.matmul(a, x)?;
            weighted_sum(t, y)
        }),
        c("sum", &[2, 3], &[1], |t, x, _| {
            let s = t.sum(x);
            t.square(s).pipe_ok()
        }),
        c("mean", &[2, 3], &[1], |t, x, _| {
            let s = t.mean(x);
            t.square(s).pipe_ok()
        }),
        c("var", &[7], &[1], |t, x, _| t.var(x)),
        c("sum_axis", &[2, 3, 4], &[1], |t, x, _| {
            let y = t.sum_axis(x, 1, false)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("mean_axis", &[2, 3, 4], &[1], |t, x, _| {
            let y = t.mean_axis(x, 2, true)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("var_axis", &[3, 5], &[1], |t, x, _| {
            let y = t.var_axis(x, 1, false)?;
            weighted_sum(t, y)
        }),
        c("max_axis", &[3, 5], &[1], |t, x, _| {
            let y = t.max_axis(x, 0, false)?;
            weighted_sum(t, y)
        }),
        c("softmax", &[2, 5], &[1], |t, x, _| {
            let y = t.softmax(x)?;
            weighted_sum(t, y)
        }),
        c("reshape", &[2, 6], &[1], |t, x, _| {
            let y = t.reshape(x, &[3, 4])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("permute", &[2, 3, 4], &[1], |t, x, _| {
            let y = t.permute(x, &[2, 0, 1])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("transpose", &[3, 4], &[1], |t, x, _| {
            let y = t.transpose(x)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("concat", &[2, 3], &[2, 2], |t, x, o| {
            let o = t.constant(o);
            let y = t.concat(&[o, x, x], 1)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("slice", &[4, 3], &[1], |t, x, _| {
            let y = t.slice(x, 0, 1, 3)?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("gather_rows", &[2, 4, 3], &[1], |t, x, _| {
            let y = t.gather_rows(x, &[vec![3, 0, 0], vec![1, 2, 3]])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
        c("broadcast_to", &[1, 3], &[1], |t, x, _| {
            let y = t.broadcast_to(x, &[2, 4, 3])?;
            let y = t.square(y);
            weighted_sum(t, y)
        }),
    ]
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl PipeOk for Var {}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut RngStream::from_seed(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_grad_checks_in_f64(seed in any::<u64>()) {
        for (i, case) in cases::<f64>().into_iter().enumerate() {
            let x = random(case.shape, seed ^ i as u64);
            let other = random(case.other, seed.wrapping_add(977) ^ i as u64);
            let f = case.f;
            let r = grad_check(|t, v| f(t, v, &other), &x, 1e-6, 1e-6).unwrap();
            prop_assert!(r.passed, "{}: rel err {:e}", case.name, r.max_rel_error);
        }
    }

    #[test]
    fn every_op_grad_checks_in_f32(seed in any::<u64>()) {
        let hi = cases::<f64>();
        for (i, case) in cases::<f32>().into_iter().enumerate() {
            let x: Tensor<f32> = random(case.shape, seed ^ i as u64).cast();
            let other: Tensor<f32> = random(case.other, seed.wrapping_add(977) ^ i as u64).cast();
            let other_hi: Tensor<f64> = other.cast();
            let (f, g) = (case.f, hi[i].f);
            let r = grad_check_mixed(|t, v| f(t, v, &other), |t, v| g(t, v, &other_hi), &x, 1e-6, 1e-3).unwrap();
            prop_assert!(r.passed, "{}: rel err {:e}", case.name, r.max_rel_error);
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x = random(&[6], seed);
        let grad_of = |a: f64, b: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let v = t.variable(&x);
            let f = t.exp(v);
            let f = t.sum(f);
            let g = t.square(v);
            let g = t.mean(g);
            let f = t.mul_scalar(f, a);
            let g = t.mul_scalar(g, b);
            let r = t.add(f, g).unwrap();
            t.backward(r).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let combined = grad_of(alpha, beta);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..6 {
            let expect = alpha * gf[i] + beta * gg[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn reshape_and_permute_round_trip_bit_exactly(seed in any::<u64>()) {
        let x = random(&[2, 3, 4], seed);
        let mut t = Tape::new();
        let v = t.variable(&x);
        let a = t.permute(v, &[1, 2, 0]).unwrap();
        let b = t.permute(a, &[2, 0, 1]).unwrap();
        let c = t.reshape(b, &[6, 4]).unwrap();
        let d = t.transpose(c).unwrap();
        let e = t.transpose(d).unwrap();
        let back = t.reshape(e, &[2, 3, 4]).unwrap();
        prop_assert_eq!(t.value(back), x.data());
        let s = t.sum(back);
        t.backward(s).unwrap();
        prop_assert!(t.grad(v).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>()) {
        let x = random(&[4, 7], seed).cast::<f32>();
        let mut t = Tape::new();
        let v = t.constant(&x);
        let y = t.softmax(v).unwrap();
        for row in t.value(y).chunks(7) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn polynomial_passes_at_tight_tolerance() {
    let x = Tensor::<f64>::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
    let r = grad_check(
        |t, v| {
            let c = t.pow(v, 3.0);
            let s = t.square(v);
            let s = t.mul_scalar(s, 2.0);
            let y = t.add(c, s)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

#[test]
fn wrong_backward_is_caught() {
    let x = Tensor::<f64>::new(&[4], vec![0.3, -0.2, 1.1, 0.7]).unwrap();
    let r = grad_check(
        |t, v| {
            let value: Vec<f64> = t.value(v).iter().map(|a| a * a).collect();
            // Deliberately wrong: claims d(x^2)/dx = x.
            let y = t.custom(&[v], &[4], value, Box::new(|ins, _, g| vec![ins[0].iter().zip(g).map(|(x, g)| x * g).collect()]))?;
            Ok(t.sum(y))
        },
        &x,
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(!r.passed);
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let r = grad_check(|t, _| Ok(t.constant(&Tensor::scalar(4.0))), &x, 1e-6, 1e-6).unwrap();
    assert!(r.passed);
    assert!(r.analytic.iter().chain(&r.numeric).all(|&g| g == 0.0));
}

#[test]
fn nondeterministic_function_is_rejected() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
    let r = grad_check(
        |t, v| {
            calls.set(calls.get() + 1.0);
            let s = t.sum(v);
            Ok(t.add_scalar(s, calls.get()))
        },
        &x,
        1e-6,
        1e-6,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_matches_finite_differences_in_f32() {
    let mut rng = RngStream::from_seed(5);
    let w1 = Tensor::<f32>::randn(&[4, 6], 0.5, &mut rng);
    let w2 = Tensor::<f32>::randn(&[6, 1], 0.5, &mut rng);
    let x = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);
    let f = |w1: Tensor<f32>, w2: Tensor<f32>| {
        move |t: &mut Tape<f32>, v: Var| -> Result<Var> {
            let a = t.constant(&w1);
            let b = t.constant(&w2);
            let h = t.matmul(v, a)?;
            let h = t.gelu(h);
            let y = t.matmul(h, b)?;
            let y = t.sigmoid(y);
            Ok(t.mean(y))
        }
    };
    // Same precision throughout: the looser eps keeps float32 differences meaningful.
    let r = grad_check(f(w1, w2), &x, 1e-3, 1e-2).unwrap();
    assert!(r.passed, "{:e}", r.max_rel_error);
}

#[test]
fn matmul_by_identity_is_exact() {
    let a = random(&[4, 4], 3).cast::<f32>();
    let mut t = Tape::new();
    let va = t.constant(&a);
    let i = t.constant(&Tensor::eye(4));
    let y = t.matmul(va, i).unwrap();
    assert_eq!(t.value(y), a.data());
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::<f32>::new();
    let v = t.constant(&Tensor::full(&[5], 3.5));
    let y = t.softmax(v).unwrap();
    assert!(t.value(y).iter().all(|&p| (p - 0.2).abs() < 1e-7));
}

#[test]
fn prelu_of_negative_two() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(&Tensor::new(&[2], vec![-2.0, 3.0]).unwrap());
    let s = t.constant(&Tensor::new(&[1], vec![0.25]).unwrap());
    let y = t.prelu(x, s).unwrap();
    assert_eq!(t.value(y), &[-0.5, 3.0]);
}

#[test]
fn simple_analytic_gradients() {
    let mut t = Tape::<f32>::new();
    let x = t.variable(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = t.square(x);
    let r = t.sum(sq);
    t.backward(r).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut t = Tape::<f32>::new();
    let x = t.variable(&Tensor::new(&[4], vec![1.0, -2.0, 5.0, 0.0]).unwrap());
    let r = t.mean(x);
    t.backward(r).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut t = Tape::<f64>::new();
    let x = t.variable(&Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
    let sq = t.square(x);
    let r = t.sum(sq);
    t.backward(r).unwrap();
    t.backward(r).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 12.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_from_non_scalar_is_a_contract_error() {
    let mut t = Tape::<f32>::new();
    let x = t.variable(&Tensor::ones(&[3]));
    let y = t.exp(x);
    assert!(matches!(t.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(&Tensor::ones(&[2, 3]));
    let b = t.constant(&Tensor::ones(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
    assert!(t.matmul(a, a).is_err());
}

#[test]
fn log_of_zero_propagates_infinity() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(&Tensor::zeros(&[1]));
    let y = t.log(a);
    assert_eq!(t.value(y)[0], f32::NEG_INFINITY);
}
