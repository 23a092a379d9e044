//! Finite-difference verification of analytic gradients.
//!
//! A [`Differentiable`] case records a computation on a [`Graph`] of any
//! precision. The analytic gradient is taken at the requested precision and
//! compared with central differences evaluated in 64-bit on a random subset of
//! coordinates. Vector outputs are reduced to a scalar by a fixed random
//! projection so no gradient cancels by symmetry.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Activation, Graph, Var};
use crate::networks::{self, NetworkKind, NetworkParams, Phase};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient suites pass when every case stays below this error.
pub const TOLERANCE: f64 = 1e-3;

pub trait Differentiable {
    fn name(&self) -> String;
    fn inputs(&self) -> Vec<Tensor<f64>>;
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub coords_per_input: usize,
    /// Denominator floor of the relative error, so vanishing gradients are
    /// compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-4,
            coords_per_input: 24,
            floor: 1e-6,
            seed: 0x9e37,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Probes discarded because they crossed a non-differentiable point.
    pub straddled: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn projected<T: Scalar, D: Differentiable + ?Sized>(case: &D, g: &mut Graph<T>, vars: &[Var], proj: &mut Option<Tensor<f64>>, seed: u64) -> Result<Var> {
    let out = case.eval(g, vars)?;
    let shape = g.value(out).shape().to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = Stream::with_id(seed, 1);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    });
    let r = g.constant(r.cast());
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Max relative error between analytic gradients (precision `T`) and 64-bit
/// central differences `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// A central difference is only meaningful where `f` is smooth on
/// `[x - eps, x + eps]`. Probes whose perturbed evaluations land on another
/// side of a ReLU kink or BCE clamp than the unperturbed one are counted in
/// [`CheckResult::straddled`] and replaced by further random coordinates.
pub fn finite_difference_check<T: Scalar, D: Differentiable + ?Sized>(case: &D, opts: &CheckOptions) -> Result<CheckResult> {
    let inputs = case.inputs();
    let mut proj = None;

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let loss = projected(case, &mut g, &vars, &mut proj, opts.seed)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = projected(case, &mut g, &vars, proj, opts.seed)?;
        Ok((g.value(loss).item(), g.kink_pattern()))
    };
    let (_, base) = eval(&inputs, &mut proj)?;

    let mut rng = Stream::with_id(opts.seed, 2);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut straddled = 0;
    let mut work = inputs.clone();
    for (ti, input) in inputs.iter().enumerate() {
        let order = index::sample(&mut rng, input.len(), input.len().min(opts.coords_per_input * 16));
        let mut accepted = 0;
        for k in order {
            if accepted == opts.coords_per_input {
                break;
            }
            let x0 = input.data()[k];
            work[ti].data_mut()[k] = x0 + opts.eps;
            let (plus, plus_kinks) = eval(&work, &mut proj)?;
            work[ti].data_mut()[k] = x0 - opts.eps;
            let (minus, minus_kinks) = eval(&work, &mut proj)?;
            work[ti].data_mut()[k] = x0;
            if plus_kinks != base || minus_kinks != base {
                straddled += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].data()[k].as_f64();
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(opts.floor);
            worst = worst.max(libm::fabs(a - numeric) / denom);
            accepted += 1;
        }
        coords += accepted;
    }
    Ok(CheckResult {
        name: case.name(),
        max_rel_error: worst,
        coords,
        straddled,
    })
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Stream::with_id(seed, 3);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub struct Conv2dCase;

impl Differentiable for Conv2dCase {
    fn name(&self) -> String {
        "conv2d".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 7, 7], 11, -1.0, 1.0), random(&[4, 3, 3, 3], 12, -0.5, 0.5)]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.conv2d(v[0], v[1], 2, 1)
    }
}

pub struct ConvTranspose2dCase;

impl Differentiable for ConvTranspose2dCase {
    fn name(&self) -> String {
        "conv2d_transposed".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 5, 5], 21, -1.0, 1.0), random(&[3, 4, 5, 5], 22, -0.5, 0.5)]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.conv_transpose2d(v[0], v[1], 2, 2, 1)
    }
}

pub struct BatchNormCase;

impl Differentiable for BatchNormCase {
    fn name(&self) -> String {
        "batch_norm2d (train)".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![
            random(&[8, 4, 6, 6], 31, -2.0, 3.0),
            random(&[4], 32, 0.5, 1.5),
            random(&[4], 33, -0.5, 0.5),
        ]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        Ok(g.batch_norm(v[0], v[1], v[2], networks::NORM_EPS, None)?.0)
    }
}

pub struct ActivationCase(pub Activation);

impl Differentiable for ActivationCase {
    fn name(&self) -> String {
        match self.0 {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(_) => "leaky_relu".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Tanh => "tanh".into(),
        }
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        // Keep samples away from the kink at zero.
        let t = random(&[4, 4], 41, 0.05, 2.0);
        let mut rng = Stream::with_id(42, 0);
        vec![t.map(|x| if rng.random_bool(0.5) { -x } else { x })]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        Ok(g.activation(v[0], self.0))
    }
}

pub struct BceCase;

impl Differentiable for BceCase {
    fn name(&self) -> String {
        "binary_cross_entropy".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![random(&[8], 51, 0.05, 0.95)]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let t: Vec<T> = (0..8).map(|i| T::from_usize(i % 2).unwrap()).collect();
        g.bce(v[0], &t)
    }
}

pub struct MseCase;

impl Differentiable for MseCase {
    fn name(&self) -> String {
        "loss_mse".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 4, 4], 61, -1.0, 1.0), random(&[2, 3, 4, 4], 62, -1.0, 1.0)]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.mse(v[0], v[1])
    }
}

/// Converter followed by both discriminators, scored with the converter
/// objective on generated targets, differentiated with respect to every
/// trainable tensor of the four networks.
pub struct EndToEndCase {
    pub width: f64,
    nets: [NetworkParams<f64>; 4],
    source: Tensor<f64>,
}

impl EndToEndCase {
    pub fn new(width: f64, seed: u64) -> Self {
        let mut nets = NetworkKind::ALL.map(|k| NetworkParams::<f64>::init(k, width, seed));
        // Perturb the affine batch-norm parameters so they are not at their
        // symmetric initial values.
        let mut rng = Stream::with_id(seed, 9);
        for n in &mut nets {
            for l in &mut n.layers {
                if let Some(bn) = &mut l.norm {
                    bn.gamma = bn.gamma.map(|_| rng.random_range(0.5..1.5));
                    bn.beta = bn.beta.map(|_| rng.random_range(-0.3..0.3));
                }
                if let Some(b) = &mut l.bias {
                    *b = b.map(|_| rng.random_range(-0.1..0.1));
                }
            }
        }
        EndToEndCase {
            width,
            nets,
            source: random(&[2, 3, 64, 64], seed ^ 0x55, -1.0, 1.0),
        }
    }
}

impl Differentiable for EndToEndCase {
    fn name(&self) -> String {
        alloc::format!("converter+discriminators (width {})", self.width)
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut v = vec![self.source.clone()];
        for n in &self.nets {
            v.extend(n.trainable().into_iter().cloned());
        }
        v
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let nets: Vec<NetworkParams<T>> = self.nets.iter().map(|n| n.cast()).collect();
        let mut offset = 1;
        let mut slices = Vec::new();
        for n in &nets {
            let k = n.trainable().len();
            slices.push(&v[offset..offset + k]);
            offset += k;
        }
        let source = v[0];
        let code = networks::encode(g, &nets[0], slices[0], source, Phase::Frozen)?;
        let generated = networks::decode(g, &nets[1], slices[1], code.output, Phase::Frozen)?;
        let rf = networks::discriminate_real_fake(g, &nets[2], slices[2], generated.output, Phase::Frozen)?;
        let da = networks::discriminate_domain(g, &nets[3], slices[3], source, generated.output, Phase::Frozen)?;
        let zeros = vec![T::zero(); 2];
        let lr = g.bce(rf.output, &zeros)?;
        let la = g.bce(da.output, &zeros)?;
        let both = g.add(lr, la)?;
        let m = g.mean(both);
        Ok(g.scale(m, -0.5))
    }
}

/// Deliberately wrong gradient: `x * detach(x)` differentiates as `x`
/// instead of `2x`. The harness must reject it.
pub struct WrongGradientFixture;

impl Differentiable for WrongGradientFixture {
    fn name(&self) -> String {
        "injected wrong gradient".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![random(&[3, 3], 71, 0.5, 1.5)]
    }
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let d = g.detach(v[0]);
        g.mul(v[0], d)
    }
}

/// Run the full operator suite plus an end-to-end network check at width
/// 1/16, with analytic gradients in precision `T`.
pub fn run_suite<T: Scalar>(opts: &CheckOptions, include_fault: bool) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        finite_difference_check::<T, _>(&Conv2dCase, opts)?,
        finite_difference_check::<T, _>(&ConvTranspose2dCase, opts)?,
        finite_difference_check::<T, _>(&BatchNormCase, opts)?,
        finite_difference_check::<T, _>(&ActivationCase(Activation::Relu), opts)?,
        finite_difference_check::<T, _>(&ActivationCase(Activation::LeakyRelu(networks::LEAK)), opts)?,
        finite_difference_check::<T, _>(&ActivationCase(Activation::Sigmoid), opts)?,
        finite_difference_check::<T, _>(&ActivationCase(Activation::Tanh), opts)?,
        finite_difference_check::<T, _>(&BceCase, opts)?,
        finite_difference_check::<T, _>(&MseCase, opts)?,
    ];
    let e2e_opts = CheckOptions {
        coords_per_input: 4,
        ..*opts
    };
    out.push(finite_difference_check::<T, _>(&EndToEndCase::new(1.0 / 16.0, 5), &e2e_opts)?);
    if include_fault {
        out.push(finite_difference_check::<T, _>(&WrongGradientFixture, opts)?);
    }
    Ok(out)
}
