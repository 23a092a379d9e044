//! Pixel-level image metrics, model evaluation over a split, and
//! retrieval by domain-discriminator score.
//!
//! Images are `3 x H x W` tensors in `[-1, 1]`; both metrics work on pixels
//! mapped to `[0, 1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{PairedDataset, Split};
use crate::error::{invalid, Error, Result};
use crate::networks::{self, NetworkParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

/// Images converted per batch during evaluation.
pub const EVAL_BATCH: usize = 32;

fn image_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(invalid("metric", format!("expected C x H x W image, got {:?}", t.shape()))),
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let da = image_dims(a)?;
    if da != image_dims(b)? {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(da)
}

fn unit(v: f64) -> f64 {
    (v + 1.0) * 0.5
}

/// Root mean square difference over all channels and pixels.
pub fn rmse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b, "rmse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = unit(x.as_f64()) - unit(y.as_f64());
            d * d
        })
        .sum();
    Ok(libm::sqrt(sum / a.len() as f64))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filtering over the 'valid' region.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel pair already mapped to `[0, 1]`.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
    let c2 = (SSIM_K2 * SSIM_RANGE) * (SSIM_K2 * SSIM_RANGE);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter(x, h, w, win);
    let my = filter(y, h, w, win);
    let sxx = filter(&xx, h, w, win);
    let syy = filter(&yy, h, w, win);
    let sxy = filter(&xy, h, w, win);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// SSIM averaged over the three color channels (11 x 11 Gaussian window,
/// sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn color_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b, "color_ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(
            "color_ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|v| unit(v.as_f64())).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|v| unit(v.as_f64())).collect();
        total += ssim_plane(&x, &y, h, w, &win);
    }
    Ok(total / c as f64)
}

/// Metrics of one converted source image against its product's target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetric {
    pub product: String,
    pub source: usize,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mode: String,
    pub split: Split,
    pub images: Vec<ImageMetric>,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(self.images.iter().map(|m| m.rmse))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|m| m.ssim))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Convert every source of `split` in eval mode and score it against its
/// product's target.
pub fn evaluate_model(
    encoder: &NetworkParams<f32>,
    decoder: &NetworkParams<f32>,
    ds: &PairedDataset,
    split: Split,
    mode: &str,
) -> Result<MetricReport> {
    let pairs = ds.pairs(split);
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("split {split} has no source images")));
    }
    let mut images = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let outputs = convert_pairs(encoder, decoder, ds, chunk)?;
        for (i, &(p, s)) in chunk.iter().enumerate() {
            let out = outputs.select_item(i);
            let target = &ds.products()[p].target;
            let out = out.reshape(target.shape().to_vec())?;
            images.push(ImageMetric {
                product: ds.products()[p].id.clone(),
                source: s,
                rmse: rmse(&out, target)?,
                ssim: color_ssim(&out, target)?,
            });
        }
    }
    Ok(MetricReport {
        mode: mode.into(),
        split,
        images,
    })
}

/// Eval-mode converter outputs for `(product, source)` pairs, stacked.
pub fn convert_pairs(
    encoder: &NetworkParams<f32>,
    decoder: &NetworkParams<f32>,
    ds: &PairedDataset,
    pairs: &[(usize, usize)],
) -> Result<Tensor<f32>> {
    let sources: Vec<&Tensor<f32>> = pairs.iter().map(|&(p, s)| &ds.products()[p].sources[s]).collect();
    let batch = Tensor::stack(&sources)?;
    networks::convert_eval(encoder, decoder, &batch)
}

/// Index into `gallery` of the target the domain discriminator scores
/// highest against `source`. Ties go to the lowest id.
pub fn dd_retrieve(domain: &NetworkParams<f32>, source: &Tensor<f32>, gallery: &[(&str, &Tensor<f32>)]) -> Result<usize> {
    if gallery.is_empty() {
        return Err(Error::Dataset("retrieval gallery is empty".into()));
    }
    let mut best: Option<(f32, usize)> = None;
    for (c, chunk) in gallery.chunks(EVAL_BATCH).enumerate() {
        let targets: Vec<&Tensor<f32>> = chunk.iter().map(|g| g.1).collect();
        let targets = Tensor::stack(&targets)?;
        let sources = Tensor::stack(&vec![source; chunk.len()])?;
        let scores = networks::domain_scores_eval(domain, &sources, &targets)?;
        for (i, &s) in scores.data().iter().enumerate() {
            let idx = c * EVAL_BATCH + i;
            best = match best {
                Some((bs, bi)) if s < bs || (s == bs && gallery[bi].0 <= gallery[idx].0) => Some((bs, bi)),
                _ => Some((s, idx)),
            };
        }
    }
    Ok(best.unwrap().1)
}

/// Retrieval accuracy over every source of `queries` against the targets of
/// the `gallery` products.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub correct: usize,
    pub total: usize,
    pub gallery: usize,
}

impl RetrievalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Accuracy of uniform guessing.
    pub fn chance(&self) -> f64 {
        1.0 / self.gallery as f64
    }
}

pub fn retrieval_accuracy(domain: &NetworkParams<f32>, ds: &PairedDataset, queries: Split, gallery: &[usize]) -> Result<RetrievalReport> {
    let items: Vec<(&str, &Tensor<f32>)> = gallery
        .iter()
        .map(|&p| (ds.products()[p].id.as_str(), &ds.products()[p].target))
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for (p, s) in ds.pairs(queries) {
        let hit = dd_retrieve(domain, &ds.products()[p].sources[s], &items)?;
        if gallery[hit] == p {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Dataset(format!("split {queries} has no source images")));
    }
    Ok(RetrievalReport {
        correct,
        total,
        gallery: gallery.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_extremes() {
        let lo = Tensor::<f32>::full([3, 16, 16], -1.0);
        let hi = Tensor::<f32>::full([3, 16, 16], 1.0);
        assert_eq!(rmse(&lo, &hi).unwrap(), 1.0);
        assert_eq!(rmse(&lo, &lo).unwrap(), 0.0);
    }

    #[test]
    fn window_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f32>::zeros([3, 10, 10]);
        assert!(color_ssim(&a, &a).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f32>::zeros([3, 16, 16]);
        let b = Tensor::<f32>::zeros([3, 16, 12]);
        assert!(rmse(&a, &b).is_err());
    }
}
