//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is the computation record: every operation appends one node
//! holding its output value and whatever forward state its backward pass
//! needs. [`Graph::backward`] walks the nodes once in reverse order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Probability clamp applied before the logarithms of binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            Activation::Tanh => libm::tanh(x),
        }
    }
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Reshape {
        input: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    GatherItems {
        parts: Vec<(Var, usize)>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Mean {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Computation record for one forward/backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last backward pass, if `v` was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Which side of every non-differentiable point the recorded values lie
    /// on: the sign of each ReLU / leaky-ReLU input and whether each BCE
    /// probability is clamped. Two evaluations with equal patterns lie in the
    /// same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu | Activation::LeakyRelu(_),
                } => out.extend(self.value(*input).data().iter().map(|&x| x > T::zero())),
                Op::Bce { probs, .. } => out.extend(self.value(*probs).data().iter().map(|&p| p != clamp_prob(p))),
                _ => {}
            }
        }
        out
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input vs weight)",
                left: self.value(input).shape().to_vec(),
                right: self.value(weight).shape().to_vec(),
            });
        }
        let geom = ConvGeometry::forward(cin, h, w, kh, stride, pad)
            .ok_or_else(|| invalid("conv2d", alloc::format!("kernel {kh} stride {stride} pad {pad} does not fit {h}x{w}")))?;
        let out = kernels::conv2d_forward(self.value(input).data(), n, &geom, self.value(weight).data(), cout);
        let value = Tensor::new([n, cout, geom.out_height, geom.out_width], out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, geom }))
    }

    /// Fractionally strided convolution; `weight` is `C_in x C_out x k x k`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        if stride == 0 || out_pad >= stride {
            return Err(invalid(
                "conv_transpose2d",
                alloc::format!("out_pad {out_pad} must be smaller than stride {stride}"),
            ));
        }
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d (input vs weight)",
                left: self.value(input).shape().to_vec(),
                right: self.value(weight).shape().to_vec(),
            });
        }
        let (oh, ow) = match (
            kernels::transposed_out(h, kh, stride, pad, out_pad),
            kernels::transposed_out(w, kh, stride, pad, out_pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(invalid("conv_transpose2d", "padding leaves an empty output")),
        };
        let geom = ConvGeometry::forward(cout, oh, ow, kh, stride, pad)
            .filter(|g| g.out_height == h && g.out_width == w)
            .ok_or_else(|| invalid("conv_transpose2d", "inconsistent geometry"))?;
        let out = kernels::conv_transpose2d_forward(self.value(input).data(), n, cin, &geom, self.value(weight).data());
        let value = Tensor::new([n, cout, oh, ow], out)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(value, rg, Op::ConvTranspose2d { input, weight, geom }))
    }

    /// Add a per-channel bias to an N x C x H x W tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).len() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                left: self.value(input).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let spatial = h * w;
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(input).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / spatial) % c];
        }
        let rg = self.needs(input) || self.needs(bias);
        Ok(self.push(value, rg, Op::ChannelBias { input, bias }))
    }

    /// Batch normalization over N, H, W per channel. `running = None` uses
    /// batch statistics (train mode, returned alongside the output);
    /// otherwise the given running mean and variance (eval mode).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm (input vs gamma/beta)",
                left: self.value(input).shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        if running.is_none() && n * h * w < 2 {
            return Err(invalid(
                "batch_norm",
                alloc::format!("train mode needs at least 2 values per channel, got N*H*W = {}", n * h * w),
            ));
        }
        let fwd = kernels::batch_norm_forward(
            self.value(input).data(),
            n,
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            running.map(|(m, v)| (m.data(), v.data())),
        );
        let value = Tensor::new([n, c, h, w], fwd.output)?;
        let stats = running.is_none().then_some(BatchStats {
            mean: fwd.mean,
            var: fwd.var,
        });
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                batch_stats: running.is_none(),
            },
        );
        Ok((v, stats))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(input).map(|x| if x > T::zero() { x } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                let s: T = lit(slope);
                self.value(input).map(|x| if x > T::zero() { x } else { s * x })
            }
            Activation::Sigmoid => self.value(input).map(|x| T::one() / (T::one() + (-x).exp())),
            Activation::Tanh => self.value(input).map(|x| x.tanh()),
        };
        let rg = self.needs(input);
        self.push(value, rg, Op::Activation { input, kind })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Stack N x C_i x H x W tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            channels += pc;
        }
        let spatial = h * w;
        let mut data = Vec::with_capacity(n * channels * spatial);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).batch_item(i));
            }
        }
        let value = Tensor::new([n, channels, h, w], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            rg,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Build a batch whose item `i` is item `parts[i].1` of `parts[i].0`.
    pub fn gather_items(&mut self, parts: &[(Var, usize)]) -> Result<Var> {
        let (first, _) = *parts.first().ok_or_else(|| invalid("gather_items", "empty selection"))?;
        let item_shape = self.value(first).shape()[1..].to_vec();
        let mut data = Vec::new();
        for &(v, i) in parts {
            let t = self.value(v);
            if t.shape()[1..] != item_shape[..] || i >= t.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "gather_items",
                    left: self.value(first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.batch_item(i));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&item_shape);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            value,
            rg,
            Op::GatherItems {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Elementwise binary cross-entropy `-t log p + (t - 1) log(1 - p)` with
    /// `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                left: p.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let value = Tensor::new(
            p.shape().to_vec(),
            p.data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    let p = clamp_prob(p);
                    -t * p.ln() + (t - T::one()) * (T::one() - p).ln()
                })
                .collect(),
        )?;
        let rg = self.needs(probs);
        Ok(self.push(
            value,
            rg,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let sum: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(sum / T::from_usize(ta.len()).unwrap());
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mse { a, b }))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        let rg = self.needs(input);
        self.push(value, rg, Op::Mean { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(input);
        self.push(value, rg, Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor: T = lit(factor);
        let value = self.value(input).map(|x| x * factor);
        let rg = self.needs(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Populate gradients of `loss` with respect to every node that requires
    /// them. A record can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let seed = Tensor::full(self.value(loss).shape().to_vec(), T::one());
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let grads = self.node_backward(i, &dy)?;
            self.grads[i] = Some(dy);
            for (v, g) in grads {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (dx, dw) = kernels::conv2d_backward(
                    x.data(),
                    x.shape()[0],
                    geom,
                    w.data(),
                    w.shape()[0],
                    dy.data(),
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, Tensor::new(x.shape().to_vec(), dx)?));
                }
                if let Some(dw) = dw {
                    out.push((*weight, Tensor::new(w.shape().to_vec(), dw)?));
                }
            }
            Op::ConvTranspose2d { input, weight, geom } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    x.data(),
                    x.shape()[0],
                    x.shape()[1],
                    geom,
                    w.data(),
                    dy.data(),
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, Tensor::new(x.shape().to_vec(), dx)?));
                }
                if let Some(dw) = dw {
                    out.push((*weight, Tensor::new(w.shape().to_vec(), dw)?));
                }
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, h, w) = dy.dims4()?;
                let spatial = h * w;
                let mut db = vec![T::zero(); c];
                for (k, &g) in dy.data().iter().enumerate() {
                    db[(k / spatial) % c] += g;
                }
                out.push((*input, dy.clone()));
                out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = dy.dims4()?;
                let (dx, dg, db) = kernels::batch_norm_backward(
                    dy.data(),
                    normalized,
                    inv_std,
                    self.value(*gamma).data(),
                    n,
                    c,
                    h * w,
                    *batch_stats,
                );
                out.push((*input, Tensor::new(dy.shape().to_vec(), dx)?));
                out.push((*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?));
                out.push((*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?));
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                let d: Vec<T> = match kind {
                    Activation::Relu => dy
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu(slope) => {
                        let s: T = lit(*slope);
                        dy.data()
                            .iter()
                            .zip(y)
                            .map(|(&g, &y)| if y > T::zero() { g } else { g * s })
                            .collect()
                    }
                    Activation::Sigmoid => dy.data().iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                    Activation::Tanh => dy.data().iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                };
                out.push((*input, Tensor::new(dy.shape().to_vec(), d)?));
            }
            Op::Reshape { input } => {
                out.push((*input, dy.clone().reshape(self.value(*input).shape().to_vec())?));
            }
            Op::ConcatChannels { parts } => {
                let n = dy.shape()[0];
                let item = dy.item_len();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let plen = t.item_len();
                    let mut d = Vec::with_capacity(t.len());
                    for s in 0..n {
                        d.extend_from_slice(&dy.data()[s * item + offset..s * item + offset + plen]);
                    }
                    offset += plen;
                    out.push((p, Tensor::new(t.shape().to_vec(), d)?));
                }
            }
            Op::GatherItems { parts } => {
                let item = dy.item_len();
                for (k, &(v, j)) in parts.iter().enumerate() {
                    let t = self.value(v);
                    let mut d = Tensor::zeros(t.shape().to_vec());
                    d.data_mut()[j * item..(j + 1) * item].copy_from_slice(&dy.data()[k * item..(k + 1) * item]);
                    out.push((v, d));
                }
            }
            Op::Bce { probs, targets } => {
                let p = self.value(*probs);
                let d = p
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(dy.data())
                    .map(|((&p, &t), &g)| {
                        let p = clamp_prob(p);
                        g * (p - t) / (p * (T::one() - p))
                    })
                    .collect();
                out.push((*probs, Tensor::new(p.shape().to_vec(), d)?));
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = dy.item() * lit::<T>(2.0) / T::from_usize(ta.len()).unwrap();
                let da: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| k * (x - y)).collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                out.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                out.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
            }
            Op::Mean { input } => {
                let t = self.value(*input);
                let g = dy.item() / T::from_usize(t.len()).unwrap();
                out.push((*input, Tensor::full(t.shape().to_vec(), g)));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape().to_vec(), dy.item())));
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                out.push((*input, dy.map(|g| g * f)));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                let db = dy.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                out.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                out.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
            }
        }
        Ok(out)
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo: T = lit(BCE_EPS);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64 - 2.5));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.activation(x, Activation::Sigmoid);
        assert_eq!(g.value(y).item(), 0.5);
        g.backward(y).unwrap();
        approx(g.grad(x).unwrap().item(), 0.25, 1e-15);
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let l = g.activation(x, Activation::LeakyRelu(0.2));
        assert_eq!(g.value(l).data(), &[-0.2, 0.0, 2.0]);
        let t = g.activation(x, Activation::Tanh);
        assert_eq!(g.value(t).data()[1], 0.0);
        assert!(g.value(t).data().iter().all(|v| v.abs() < 1.0));
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn bce_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::scalar(0.5));
        let l = g.bce(p, &[1.0]).unwrap();
        approx(g.value(l).item(), core::f64::consts::LN_2, 1e-12);
        g.backward(l).unwrap();
        approx(g.grad(p).unwrap().item(), -2.0, 1e-12);

        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::scalar(0.9));
        let l = g.bce(p, &[0.0]).unwrap();
        approx(g.value(l).item(), -(0.1f64.ln()), 1e-12);
    }

    #[test]
    fn bce_clamps_endpoints() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        let expected = -(BCE_EPS.ln());
        for &v in g.value(l).data() {
            assert!(v.is_finite());
            approx(v, expected, 1e-6);
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 3.0);
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(Error::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let data = Tensor::from_fn([4], |i| 0.3 * i as f64 - 0.4);
        let single = {
            let mut g = Graph::<f64>::new();
            let x = g.param(data.clone());
            let y = g.activation(x, Activation::Tanh);
            let s = g.sum(y);
            g.backward(s).unwrap();
            g.grad(x).unwrap().clone()
        };
        let mut g = Graph::<f64>::new();
        let x = g.param(data);
        let a = g.activation(x, Activation::Tanh);
        let b = g.activation(x, Activation::Tanh);
        let s = g.add(a, b).unwrap();
        let s = g.sum(s);
        g.backward(s).unwrap();
        for (d, s) in g.grad(x).unwrap().data().iter().zip(single.data()) {
            assert_eq!(*d, s + s);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
        let w = g.constant(Tensor::zeros([4, 2, 3, 3]));
        let err = g.conv2d(x, w, 1, 1).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn transposed_conv_rejects_large_out_pad() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([2, 3, 5, 5]));
        assert!(g.conv_transpose2d(x, w, 2, 2, 2).is_err());
        assert!(g.conv_transpose2d(x, w, 2, 2, 1).is_ok());
    }

    #[test]
    fn batch_norm_constant_input_gives_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([4, 2, 3, 3], 0.37));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-5, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().var, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_norm_needs_two_values_in_train_mode() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 1, 1]));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        assert!(g.batch_norm(x, gamma, beta, 1e-5, None).is_err());
        let (m, v) = (Tensor::zeros([2]), Tensor::ones([2]));
        assert!(g.batch_norm(x, gamma, beta, 1e-5, Some((&m, &v))).is_ok());
    }
}
