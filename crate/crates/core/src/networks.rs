//! Converter (encoder + decoder) and the two discriminators.
//!
//! All three convolutional stacks share the same shape: four 5x5 stride-2
//! convolutions (128, 256, 512, 1024 filters) with leaky ReLU, followed by a
//! layer with full 4x4 support that collapses the map to 1x1. The decoder
//! projects the code to 4x4x1024 and doubles the resolution four times with
//! fractionally strided convolutions up to 64x64x3.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::graph::{Activation, BatchStats, Graph, Var};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 64;
pub const LEAK: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Encoder,
    Decoder,
    RealFake,
    Domain,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 4] = [
        NetworkKind::Encoder,
        NetworkKind::Decoder,
        NetworkKind::RealFake,
        NetworkKind::Domain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Encoder => "encoder",
            NetworkKind::Decoder => "decoder",
            NetworkKind::RealFake => "disc_rf",
            NetworkKind::Domain => "disc_da",
        }
    }

    fn init_purpose(self) -> Purpose {
        match self {
            NetworkKind::Encoder => Purpose::InitEncoder,
            NetworkKind::Decoder => Purpose::InitDecoder,
            NetworkKind::RealFake => Purpose::InitRealFake,
            NetworkKind::Domain => Purpose::InitDomain,
        }
    }
}

/// Channel count after width scaling: `max(1, round(channels * width))`.
pub fn scaled(channels: usize, width: f64) -> usize {
    (libm::round(channels as f64 * width) as usize).max(1)
}

/// Size of the semantic code at a given width.
pub fn code_channels(width: f64) -> usize {
    scaled(64, width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    TransposedConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    /// Reshape `N x C x 1 x 1` to `N x c x h x w` right after the convolution.
    pub reshape_to: Option<[usize; 3]>,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    /// Layers without batch norm carry a bias.
    pub fn has_bias(&self) -> bool {
        !self.batch_norm
    }

    /// Channels seen by batch norm and the activation.
    pub fn norm_channels(&self) -> usize {
        self.reshape_to.map_or(self.out_channels, |r| r[0])
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::TransposedConv => [self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }
}

/// Layer table of a network at width multiplier `width`.
pub fn layer_specs(kind: NetworkKind, width: f64) -> Vec<LayerSpec> {
    let s = |c| scaled(c, width);
    let conv = |name, cin, cout, bn| LayerSpec {
        name,
        kind: LayerKind::Conv,
        in_channels: cin,
        out_channels: cout,
        kernel: 5,
        stride: 2,
        pad: 2,
        out_pad: 0,
        reshape_to: None,
        batch_norm: bn,
        activation: Activation::LeakyRelu(LEAK),
    };
    let fconv = |name, cin, cout, last: bool| LayerSpec {
        name,
        kind: LayerKind::TransposedConv,
        in_channels: cin,
        out_channels: cout,
        kernel: 5,
        stride: 2,
        pad: 2,
        out_pad: 1,
        reshape_to: None,
        batch_norm: !last,
        activation: if last { Activation::Tanh } else { Activation::Relu },
    };
    match kind {
        NetworkKind::Encoder | NetworkKind::RealFake | NetworkKind::Domain => {
            let input = if kind == NetworkKind::Domain { 6 } else { 3 };
            let (filters, bn, act) = match kind {
                NetworkKind::Encoder => (s(64), true, Activation::LeakyRelu(LEAK)),
                _ => (1, false, Activation::Sigmoid),
            };
            vec![
                conv("conv1", input, s(128), false),
                conv("conv2", s(128), s(256), true),
                conv("conv3", s(256), s(512), true),
                conv("conv4", s(512), s(1024), true),
                LayerSpec {
                    name: "conv5",
                    kind: LayerKind::Conv,
                    in_channels: s(1024),
                    out_channels: filters,
                    kernel: 4,
                    stride: 1,
                    pad: 0,
                    out_pad: 0,
                    reshape_to: None,
                    batch_norm: bn,
                    activation: act,
                },
            ]
        }
        NetworkKind::Decoder => vec![
            LayerSpec {
                name: "conv1",
                kind: LayerKind::Conv,
                in_channels: s(64),
                out_channels: 16 * s(1024),
                kernel: 1,
                stride: 1,
                pad: 0,
                out_pad: 0,
                reshape_to: Some([s(1024), 4, 4]),
                batch_norm: true,
                activation: Activation::Relu,
            },
            fconv("fconv2", s(1024), s(512), false),
            fconv("fconv3", s(512), s(256), false),
            fconv("fconv4", s(256), s(128), false),
            fconv("fconv5", s(128), 3, true),
        ],
    }
}

/// Learnable affine parameters and running statistics of one batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of running-statistic updates so far.
    pub updates: u64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: NORM_MOMENTUM,
            eps: NORM_EPS,
            updates: 0,
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::from_f64_lossy(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::from_f64_lossy((m * r.as_f64() + (1.0 - m) * b).max(0.0));
        }
        self.updates += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    pub spec: LayerSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub norm: Option<BatchNormState<T>>,
}

/// How batch norm behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    Frozen,
    /// Running statistics.
    Eval,
}

/// Parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Scalar = f32> {
    pub kind: NetworkKind,
    pub width: f64,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// Weights drawn from N(0, 0.02^2) on the network's own seeded stream;
    /// biases and beta zero, gamma one, running mean 0 and variance 1.
    pub fn init(kind: NetworkKind, width: f64, seed: u64) -> Self {
        assert!(width > 0.0 && width <= 1.0, "width multiplier must lie in (0, 1]");
        let mut rng = Stream::new(seed, kind.init_purpose());
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let layers = layer_specs(kind, width)
            .into_iter()
            .map(|spec| {
                let weight = Tensor::from_fn(spec.weight_shape(), |_| T::from_f64_lossy(normal.sample(&mut rng)));
                let bias = spec.has_bias().then(|| Tensor::zeros([spec.out_channels]));
                let norm = spec.batch_norm.then(|| BatchNormState::new(spec.norm_channels()));
                Layer {
                    spec,
                    weight,
                    bias,
                    norm,
                }
            })
            .collect();
        NetworkParams { kind, width, layers }
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, gamma, beta.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    /// Every tensor with a stable name, trainable ones first within a layer,
    /// followed by running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            let p = l.spec.name;
            out.push((alloc::format!("{p}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((alloc::format!("{p}.bias"), b));
            }
            if let Some(n) = &l.norm {
                out.push((alloc::format!("{p}.bn.gamma"), &n.gamma));
                out.push((alloc::format!("{p}.bn.beta"), &n.beta));
                out.push((alloc::format!("{p}.bn.running_mean"), &n.running_mean));
                out.push((alloc::format!("{p}.bn.running_var"), &n.running_var));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let p = l.spec.name;
            out.push((alloc::format!("{p}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((alloc::format!("{p}.bias"), b));
            }
            if let Some(n) = &mut l.norm {
                out.push((alloc::format!("{p}.bn.gamma"), &mut n.gamma));
                out.push((alloc::format!("{p}.bn.beta"), &mut n.beta));
                out.push((alloc::format!("{p}.bn.running_mean"), &mut n.running_mean));
                out.push((alloc::format!("{p}.bn.running_var"), &mut n.running_var));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            kind: self.kind,
            width: self.width,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(|b| b.cast()),
                    norm: l.norm.as_ref().map(|n| BatchNormState {
                        gamma: n.gamma.cast(),
                        beta: n.beta.cast(),
                        running_mean: n.running_mean.cast(),
                        running_var: n.running_var.cast(),
                        momentum: n.momentum,
                        eps: n.eps,
                        updates: n.updates,
                    }),
                })
                .collect(),
        }
    }

    /// Record the trainable tensors as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.trainable().into_iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients of bound parameters, in [`Self::trainable`] order.
    pub fn grads(g: &mut Graph<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
        vars.iter().map(|&v| g.take_grad(v)).collect()
    }

    /// Fold the batch statistics of a `Phase::Train` pass into the running
    /// statistics.
    pub fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        for (l, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(n), Some(s)) = (&mut l.norm, s) {
                n.update(s);
            }
        }
    }

    fn input_channels(&self) -> usize {
        self.layers[0].spec.in_channels
    }
}

/// Outcome of a network forward pass.
pub struct Forward {
    pub output: Var,
    /// Output of every layer, after its activation.
    pub layers: Vec<Var>,
    /// Batch statistics per layer (train-mode batch norms only).
    pub stats: Vec<Option<BatchStats>>,
}

/// Run a network on `x` with parameters bound at `vars` (see
/// [`NetworkParams::bind`]). Running statistics are read in `Phase::Eval`
/// and never written; see [`NetworkParams::update_running`].
pub fn forward<T: Scalar>(g: &mut Graph<T>, net: &NetworkParams<T>, vars: &[Var], x: Var, phase: Phase) -> Result<Forward> {
    let mut vi = vars.iter().copied();
    let mut next = |what: &str| {
        vi.next()
            .ok_or_else(|| invalid("forward", alloc::format!("missing bound parameter for {what}")))
    };
    let mut h = x;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut stats = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let s = &layer.spec;
        let w = next(s.name)?;
        h = match s.kind {
            LayerKind::Conv => g.conv2d(h, w, s.stride, s.pad)?,
            LayerKind::TransposedConv => g.conv_transpose2d(h, w, s.stride, s.pad, s.out_pad)?,
        };
        if layer.bias.is_some() {
            let b = next(s.name)?;
            h = g.channel_bias(h, b)?;
        }
        if let Some([c, hh, ww]) = s.reshape_to {
            let n = g.value(h).shape()[0];
            h = g.reshape(h, &[n, c, hh, ww])?;
        }
        let mut layer_stats = None;
        if let Some(norm) = &layer.norm {
            let (gamma, beta) = (next(s.name)?, next(s.name)?);
            let running = match phase {
                Phase::Eval => {
                    if norm.updates == 0 {
                        log::warn!(
                            "{}.{}: eval-mode batch norm before any running-statistic update; using mean 0, var 1",
                            net.kind.name(),
                            s.name
                        );
                    }
                    Some((&norm.running_mean, &norm.running_var))
                }
                Phase::Train | Phase::Frozen => None,
            };
            let (y, st) = g.batch_norm(h, gamma, beta, norm.eps, running)?;
            h = y;
            if phase == Phase::Train {
                layer_stats = st;
            }
        }
        h = g.activation(h, s.activation);
        layers.push(h);
        stats.push(layer_stats);
    }
    Ok(Forward {
        output: h,
        layers,
        stats,
    })
}

fn check_image<T: Scalar>(g: &Graph<T>, x: Var, channels: usize, op: &'static str) -> Result<usize> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != channels || h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![n, channels, IMAGE_SIDE, IMAGE_SIDE],
            right: g.value(x).shape().to_vec(),
        });
    }
    Ok(n)
}

fn expect_kind<T: Scalar>(net: &NetworkParams<T>, kind: NetworkKind) -> Result<()> {
    if net.kind != kind {
        return Err(invalid(
            "network",
            alloc::format!("expected {} parameters, got {}", kind.name(), net.kind.name()),
        ));
    }
    Ok(())
}

/// `N x 3 x 64 x 64` image to an `N x 64w x 1 x 1` code.
pub fn encode<T: Scalar>(g: &mut Graph<T>, net: &NetworkParams<T>, vars: &[Var], image: Var, phase: Phase) -> Result<Forward> {
    expect_kind(net, NetworkKind::Encoder)?;
    check_image(g, image, 3, "encode")?;
    forward(g, net, vars, image, phase)
}

/// `N x 64w x 1 x 1` code to an `N x 3 x 64 x 64` image in (-1, 1).
pub fn decode<T: Scalar>(g: &mut Graph<T>, net: &NetworkParams<T>, vars: &[Var], code: Var, phase: Phase) -> Result<Forward> {
    expect_kind(net, NetworkKind::Decoder)?;
    let (n, c, h, w) = g.value(code).dims4()?;
    if c != net.input_channels() || h != 1 || w != 1 {
        return Err(Error::ShapeMismatch {
            op: "decode",
            left: vec![n, net.input_channels(), 1, 1],
            right: g.value(code).shape().to_vec(),
        });
    }
    forward(g, net, vars, code, phase)
}

/// Real/fake probability per image.
pub fn discriminate_real_fake<T: Scalar>(
    g: &mut Graph<T>,
    net: &NetworkParams<T>,
    vars: &[Var],
    target: Var,
    phase: Phase,
) -> Result<Forward> {
    expect_kind(net, NetworkKind::RealFake)?;
    let n = check_image(g, target, 3, "discriminate_real_fake")?;
    let mut f = forward(g, net, vars, target, phase)?;
    f.output = g.reshape(f.output, &[n])?;
    Ok(f)
}

/// Association probability per (source, target) pair; the pair is stacked
/// along the channel axis, source first.
pub fn discriminate_domain<T: Scalar>(
    g: &mut Graph<T>,
    net: &NetworkParams<T>,
    vars: &[Var],
    source: Var,
    target: Var,
    phase: Phase,
) -> Result<Forward> {
    expect_kind(net, NetworkKind::Domain)?;
    let ns = check_image(g, source, 3, "discriminate_domain (source)")?;
    let nt = check_image(g, target, 3, "discriminate_domain (target)")?;
    if ns != nt {
        return Err(Error::ShapeMismatch {
            op: "discriminate_domain (batch sizes)",
            left: g.value(source).shape().to_vec(),
            right: g.value(target).shape().to_vec(),
        });
    }
    let pair = g.concat_channels(&[source, target])?;
    let mut f = forward(g, net, vars, pair, phase)?;
    f.output = g.reshape(f.output, &[ns])?;
    Ok(f)
}

/// The four networks of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T: Scalar = f32> {
    pub encoder: NetworkParams<T>,
    pub decoder: NetworkParams<T>,
    pub real_fake: NetworkParams<T>,
    pub domain: NetworkParams<T>,
}

impl<T: Scalar> Networks<T> {
    pub fn init(width: f64, seed: u64) -> Self {
        Networks {
            encoder: NetworkParams::init(NetworkKind::Encoder, width, seed),
            decoder: NetworkParams::init(NetworkKind::Decoder, width, seed),
            real_fake: NetworkParams::init(NetworkKind::RealFake, width, seed),
            domain: NetworkParams::init(NetworkKind::Domain, width, seed),
        }
    }

    pub fn get(&self, kind: NetworkKind) -> &NetworkParams<T> {
        match kind {
            NetworkKind::Encoder => &self.encoder,
            NetworkKind::Decoder => &self.decoder,
            NetworkKind::RealFake => &self.real_fake,
            NetworkKind::Domain => &self.domain,
        }
    }

    pub fn get_mut(&mut self, kind: NetworkKind) -> &mut NetworkParams<T> {
        match kind {
            NetworkKind::Encoder => &mut self.encoder,
            NetworkKind::Decoder => &mut self.decoder,
            NetworkKind::RealFake => &mut self.real_fake,
            NetworkKind::Domain => &mut self.domain,
        }
    }
}

/// Converter output recorded on a graph.
pub struct Converted {
    pub output: Var,
    pub code: Var,
    pub encoder_vars: Vec<Var>,
    pub decoder_vars: Vec<Var>,
    pub encoder_stats: Vec<Option<BatchStats>>,
    pub decoder_stats: Vec<Option<BatchStats>>,
}

/// `decode(encode(source))` with the converter parameters bound on `g`.
pub fn convert<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &NetworkParams<T>,
    decoder: &NetworkParams<T>,
    source: Var,
    phase: Phase,
    trainable: bool,
) -> Result<Converted> {
    let encoder_vars = encoder.bind(g, trainable);
    let decoder_vars = decoder.bind(g, trainable);
    let enc = encode(g, encoder, &encoder_vars, source, phase)?;
    let dec = decode(g, decoder, &decoder_vars, enc.output, phase)?;
    Ok(Converted {
        output: dec.output,
        code: enc.output,
        encoder_vars,
        decoder_vars,
        encoder_stats: enc.stats,
        decoder_stats: dec.stats,
    })
}

/// Eval-mode conversion of a batch; mutates nothing.
pub fn convert_eval<T: Scalar>(encoder: &NetworkParams<T>, decoder: &NetworkParams<T>, source: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(source.clone());
    let c = convert(&mut g, encoder, decoder, x, Phase::Eval, false)?;
    Ok(g.value(c.output).clone())
}

/// Eval-mode association scores for a batch of pairs.
pub fn domain_scores_eval<T: Scalar>(domain: &NetworkParams<T>, source: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = domain.bind(&mut g, false);
    let s = g.constant(source.clone());
    let t = g.constant(target.clone());
    let f = discriminate_domain(&mut g, domain, &vars, s, t, Phase::Eval)?;
    Ok(g.value(f.output).clone())
}

/// Eval-mode real/fake scores for a batch.
pub fn real_fake_scores_eval<T: Scalar>(real_fake: &NetworkParams<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = real_fake.bind(&mut g, false);
    let t = g.constant(target.clone());
    let f = discriminate_real_fake(&mut g, real_fake, &vars, t, Phase::Eval)?;
    Ok(g.value(f.output).clone())
}

impl NetworkKind {
    pub fn parse(s: &str) -> Option<Self> {
        NetworkKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl core::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}
