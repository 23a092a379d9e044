//! Raw numeric kernels over flat NCHW buffers. Convolutions lower to
//! im2col/col2im plus a single-threaded GEMM, so results are bit-identical
//! run to run.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Upper bound on the number of elements in one im2col scratch matrix; larger
/// batches are processed in chunks.
const COLS_LIMIT: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution reading a `channels x height x width` image.
    pub fn forward(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel > height + 2 * pad || kernel > width + 2 * pad {
            return None;
        }
        Some(ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height * self.out_width
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Output side length of a transposed convolution.
pub fn transposed_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((size - 1) * stride + kernel + out_pad).checked_sub(2 * pad).filter(|&s| s > 0)
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
/// transposes. `a` is stored as `m x k` (or `k x m` when transposed).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Unfold one image into columns `cols[row * ld + offset + p]`, with rows
/// ordered `(channel, ky, kx)` and `p` the output pixel.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T], ld: usize, offset: usize) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + g.out_len()];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, ld: usize, offset: usize, img: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + offset..row * ld + offset + g.out_len()];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn chunk_len(batch: usize, per_item: usize) -> usize {
    (COLS_LIMIT / per_item.max(1)).clamp(1, batch.max(1))
}

/// Copy `[batch][rows][p]` items `start..start + nb` into a `[rows][nb * p]` matrix.
fn gather<T: Scalar>(src: &[T], start: usize, nb: usize, rows: usize, p: usize, dst: &mut [T]) {
    for j in 0..nb {
        let item = &src[(start + j) * rows * p..(start + j + 1) * rows * p];
        for r in 0..rows {
            dst[r * nb * p + j * p..r * nb * p + (j + 1) * p].copy_from_slice(&item[r * p..(r + 1) * p]);
        }
    }
}

/// Inverse of [`gather`]; `accumulate` adds instead of overwriting.
fn scatter<T: Scalar>(src: &[T], start: usize, nb: usize, rows: usize, p: usize, dst: &mut [T], accumulate: bool) {
    for j in 0..nb {
        let item = &mut dst[(start + j) * rows * p..(start + j + 1) * rows * p];
        for r in 0..rows {
            let from = &src[r * nb * p + j * p..r * nb * p + (j + 1) * p];
            let to = &mut item[r * p..(r + 1) * p];
            if accumulate {
                for (t, &f) in to.iter_mut().zip(from) {
                    *t += f;
                }
            } else {
                to.copy_from_slice(from);
            }
        }
    }
}

/// Strided convolution. `weight` is `out_channels x (channels * k * k)`.
pub fn conv2d_forward<T: Scalar>(input: &[T], batch: usize, g: &ConvGeometry, weight: &[T], out_channels: usize) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.out_len());
    let mut out = vec![T::zero(); batch * out_channels * p];
    let chunk = chunk_len(batch, rows * p);
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut res = vec![T::zero(); out_channels * chunk * p];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        for j in 0..nb {
            let img = &input[(start + j) * g.image_len()..(start + j + 1) * g.image_len()];
            im2col(img, g, &mut cols, nb * p, j * p);
        }
        gemm(out_channels, rows, nb * p, weight, false, &cols, false, T::zero(), &mut res);
        scatter(&res, start, nb, out_channels, p, &mut out, false);
        start += nb;
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_weight)`, each only
/// when requested.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    out_channels: usize,
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, p) = (g.col_rows(), g.out_len());
    let mut d_input = want_input.then(|| vec![T::zero(); batch * g.image_len()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); out_channels * rows]);
    let chunk = chunk_len(batch, rows * p);
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut dy = vec![T::zero(); out_channels * chunk * p];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        gather(d_out, start, nb, out_channels, p, &mut dy);
        if let Some(dw) = d_weight.as_mut() {
            for j in 0..nb {
                let img = &input[(start + j) * g.image_len()..(start + j + 1) * g.image_len()];
                im2col(img, g, &mut cols, nb * p, j * p);
            }
            gemm(out_channels, nb * p, rows, &dy, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(rows, out_channels, nb * p, weight, true, &dy, false, T::zero(), &mut cols);
            for j in 0..nb {
                let img = &mut dx[(start + j) * g.image_len()..(start + j + 1) * g.image_len()];
                col2im(&cols, g, nb * p, j * p, img);
            }
        }
        start += nb;
    }
    (d_input, d_weight)
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with geometry
/// `g`, where `g` describes the convolution from the *output* image
/// (`g.channels x g.height x g.width`) down to the input
/// (`in_channels x g.out_height x g.out_width`). `weight` is
/// `in_channels x (g.channels * k * k)`.
pub fn conv_transpose2d_forward<T: Scalar>(input: &[T], batch: usize, in_channels: usize, g: &ConvGeometry, weight: &[T]) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.out_len());
    let mut out = vec![T::zero(); batch * g.image_len()];
    let chunk = chunk_len(batch, rows * p);
    let mut xg = vec![T::zero(); in_channels * chunk * p];
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        gather(input, start, nb, in_channels, p, &mut xg);
        gemm(rows, in_channels, nb * p, weight, true, &xg, false, T::zero(), &mut cols);
        for j in 0..nb {
            let img = &mut out[(start + j) * g.image_len()..(start + j + 1) * g.image_len()];
            col2im(&cols, g, nb * p, j * p, img);
        }
        start += nb;
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`]; returns `(d_input, d_weight)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_channels: usize,
    g: &ConvGeometry,
    weight: &[T],
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, p) = (g.col_rows(), g.out_len());
    let mut d_input = want_input.then(|| vec![T::zero(); batch * in_channels * p]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); in_channels * rows]);
    let chunk = chunk_len(batch, rows * p);
    let mut xg = vec![T::zero(); in_channels * chunk * p];
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        for j in 0..nb {
            let img = &d_out[(start + j) * g.image_len()..(start + j + 1) * g.image_len()];
            im2col(img, g, &mut cols, nb * p, j * p);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(in_channels, rows, nb * p, weight, false, &cols, false, T::zero(), &mut xg);
            scatter(&xg, start, nb, in_channels, p, dx, false);
        }
        if let Some(dw) = d_weight.as_mut() {
            gather(input, start, nb, in_channels, p, &mut xg);
            gemm(in_channels, nb * p, rows, &xg, false, &cols, true, T::one(), dw);
        }
        start += nb;
    }
    (d_input, d_weight)
}

/// Saved state of a batch-norm forward pass.
pub struct NormForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization over `batch x spatial`. With `stats = None`
/// the batch statistics (biased variance) are used; otherwise the given
/// `(mean, var)`.
pub fn batch_norm_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    stats: Option<(&[T], &[T])>,
) -> NormForward<T> {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    match stats {
        Some((m, v)) => {
            for c in 0..channels {
                mean[c] = m[c].as_f64();
                var[c] = v[c].as_f64();
            }
        }
        None => {
            for c in 0..channels {
                let mut s = 0.0f64;
                for n in 0..batch {
                    let base = (n * channels + c) * spatial;
                    s += input[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count;
                let mut sq = 0.0f64;
                for n in 0..batch {
                    let base = (n * channels + c) * spatial;
                    sq += input[base..base + spatial]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[c] = mu;
                var[c] = sq / count;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / libm::sqrt(v + eps))).collect();
    let mut output = vec![T::zero(); input.len()];
    let mut normalized = vec![T::zero(); input.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            let mu = T::from_f64_lossy(mean[c]);
            for i in base..base + spatial {
                let xh = (input[i] - mu) * inv_std[c];
                normalized[i] = xh;
                output[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    NormForward {
        output,
        normalized,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(d_input, d_gamma, d_beta)`. When `batch_stats` is false the
/// statistics are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    d_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(batch * spatial).unwrap();
    let mut dx = vec![T::zero(); d_out.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                sum_dy += d_out[i];
                sum_dy_xh += d_out[i] * normalized[i];
            }
        }
        dgamma[c] = sum_dy_xh;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                dx[i] = if batch_stats {
                    scale * (d_out[i] - sum_dy / count - normalized[i] * sum_dy_xh / count)
                } else {
                    scale * d_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
