use pdt_core::gradcheck::{self, ActivationCase, BatchNormCase, CheckOptions, ConvTranspose2dCase, WrongGradientFixture};
use pdt_core::rng::Stream;
use pdt_core::{Activation, Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Stream::with_id(seed, 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn gradients_accumulate_over_uses() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let a = g.mul(x, x).unwrap();
    let b = g.scale(x, 3.0);
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    // d/dx (x^2 + 3x) = 2x + 3
    assert_eq!(g.grad(x).unwrap().data(), &[5.0, -1.0, 4.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([2], vec![2.0, 3.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([2]));
    let c = g.constant(Tensor::full([2], 4.0));
    let y = g.mul(x, c).unwrap();
    let loss = g.mean(y);
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn backward_twice_and_non_scalar_loss_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([2]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
}

#[test]
fn shape_mismatches_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.mse(a, b).is_err());
    assert!(g.bce(a, &[0.0; 5]).is_err());
    assert!(g.reshape(a, &[4]).is_err());
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let (n, c, h, w) = (4, 3, 5, 5);
    let x = random(&[n, c, h, w], 11).map(|v| 3.0 * v + 7.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones([c]));
    let beta = g.constant(Tensor::zeros([c]));
    let (y, stats) = g.batch_norm(xv, gamma, beta, 1e-5, None).unwrap();
    assert!(stats.is_some());
    let y = g.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| y.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let x = random(&[2, 2, 3, 3], 12);
    let mean = Tensor::new([2], vec![0.5, -1.0]).unwrap();
    let var = Tensor::new([2], vec![4.0, 0.25]).unwrap();
    let gamma = Tensor::new([2], vec![2.0, -1.0]).unwrap();
    let beta = Tensor::new([2], vec![0.1, 0.3]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gamma.clone());
    let bv = g.constant(beta.clone());
    let (y, stats) = g.batch_norm(xv, gv, bv, 1e-5, Some((&mean, &var))).unwrap();
    assert!(stats.is_none());
    for (i, (&out, &inp)) in g.value(y).data().iter().zip(x.data()).enumerate() {
        let ch = (i / 9) % 2;
        let want = (inp - mean.data()[ch]) / (var.data()[ch] + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
        assert!((out - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_needs_two_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 1, 1]));
    let gm = g.constant(Tensor::ones([2]));
    let bt = g.constant(Tensor::zeros([2]));
    assert!(g.batch_norm(x, gm, bt, 1e-5, None).is_err());
}

#[test]
fn bce_half_is_ln2() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full([1], 0.5));
    let l = g.bce(p, &[1.0]).unwrap();
    assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_is_clamped() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    let l = g.bce(p, &[1.0, 0.0]).unwrap();
    let v = g.value(l).clone();
    assert!(v.all_finite());
    assert!((v.data()[0] + (1e-7f64).ln()).abs() < 1e-9);
    let s = g.sum(l);
    g.backward(s).unwrap();
    assert!(g.grad(p).unwrap().all_finite());
}

fn opts() -> CheckOptions {
    CheckOptions::default()
}

#[test]
fn tanh_gradient_is_tight() {
    let r = gradcheck::finite_difference_check::<f64, _>(&ActivationCase(Activation::Tanh), &opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn batch_norm_and_transposed_conv_gradients() {
    for r in [
        gradcheck::finite_difference_check::<f64, _>(&BatchNormCase, &opts()).unwrap(),
        gradcheck::finite_difference_check::<f64, _>(&ConvTranspose2dCase, &opts()).unwrap(),
    ] {
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        assert!(r.coords > 0);
    }
}

#[test]
fn operator_suite_passes_in_both_precisions() {
    for r in gradcheck::run_suite::<f64>(&opts(), false).unwrap() {
        assert!(r.passed(), "{r:?}");
    }
    // f32 analytic gradients per operator. The deep end-to-end case
    // accumulates single-precision roundoff past the tolerance (about 3e-3).
    for r in gradcheck::run_suite::<f32>(&opts(), false).unwrap() {
        if r.name.starts_with("converter") {
            assert!(r.max_rel_error < 1e-2, "{r:?}");
        } else {
            assert!(r.passed(), "{r:?}");
        }
    }
}

#[test]
fn injected_fault_is_detected() {
    let r = gradcheck::finite_difference_check::<f64, _>(&WrongGradientFixture, &opts()).unwrap();
    assert!(!r.passed(), "{r:?}");
    assert!(r.max_rel_error > 0.3);
}

#[test]
fn relu_kinks_are_skipped_not_failed() {
    let r = gradcheck::finite_difference_check::<f64, _>(&ActivationCase(Activation::Relu), &opts()).unwrap();
    assert!(r.passed(), "{r:?}");
}

proptest! {
    #[test]
    fn bce_is_nonnegative(p in 0.0f64..=1.0, t in prop::bool::ANY) {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::full([1], p));
        let l = g.bce(pv, &[if t { 1.0 } else { 0.0 }]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn sigmoid_and_tanh_stay_in_range(x in -50.0f64..50.0) {
        let s = Activation::Sigmoid.apply(x);
        let t = Activation::Tanh.apply(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((-1.0..=1.0).contains(&t));
    }

    #[test]
    fn mse_of_self_is_zero(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let mut g = Graph::<f64>::new();
        let n = v.len();
        let a = g.constant(Tensor::new([n], v.clone()).unwrap());
        let b = g.constant(Tensor::new([n], v).unwrap());
        let l = g.mse(a, b).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
    }
}
