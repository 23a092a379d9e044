//! Paired source/target datasets held in memory, product-level splits and
//! negative sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::networks::IMAGE_SIDE;
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;

/// Shape of every preprocessed image.
pub const IMAGE_SHAPE: [usize; 3] = [3, IMAGE_SIDE, IMAGE_SIDE];

/// One product: its target-domain photo and the source-domain photos showing it.
#[derive(Clone, Debug, PartialEq)]
pub struct Product {
    pub id: String,
    pub target: Tensor<f32>,
    pub sources: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|k| k.name() == s)
    }
}

impl core::fmt::Display for Split {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Products ordered by id, each assigned to exactly one split.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    products: Vec<Product>,
    assignment: Vec<Split>,
}

impl PairedDataset {
    /// Validates images and sorts products by id. Every product starts in
    /// the training split.
    pub fn new(mut products: Vec<Product>) -> Result<Self> {
        products.sort_by(|a, b| a.id.cmp(&b.id));
        for w in products.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Dataset(format!("duplicate product id {:?}", w[0].id)));
            }
        }
        for p in &products {
            if p.sources.is_empty() {
                return Err(Error::Dataset(format!("product {:?} has no source images", p.id)));
            }
            for img in core::iter::once(&p.target).chain(&p.sources) {
                if img.shape() != IMAGE_SHAPE {
                    return Err(Error::Dataset(format!(
                        "product {:?}: image shape {:?}, expected {:?}",
                        p.id,
                        img.shape(),
                        IMAGE_SHAPE
                    )));
                }
            }
        }
        let assignment = alloc::vec![Split::Train; products.len()];
        Ok(PairedDataset { products, assignment })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn source_count(&self) -> usize {
        self.products.iter().map(|p| p.sources.len()).sum()
    }

    pub fn split_of(&self, product: usize) -> Split {
        self.assignment[product]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.products.binary_search_by(|p| p.id.as_str().cmp(id)).ok()
    }

    /// Indices of the products in `split`, ascending by id.
    pub fn products_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignment[i] == split).collect()
    }

    /// `(product, source)` index pairs of `split` in dataset order.
    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.products_in(split)
            .into_iter()
            .flat_map(|p| (0..self.products[p].sources.len()).map(move |s| (p, s)))
            .collect()
    }

    /// Replace the split assignment, one entry per product in id order.
    pub fn with_assignment(mut self, assignment: Vec<Split>) -> Result<Self> {
        if assignment.len() != self.len() {
            return Err(Error::Dataset(format!(
                "assignment covers {} products, dataset has {}",
                assignment.len(),
                self.len()
            )));
        }
        self.assignment = assignment;
        Ok(self)
    }
}

/// Shuffle products with the seeded split stream; the first
/// `floor(val_frac * n)` go to validation, the next `floor(test_frac * n)` to
/// test, the rest to training.
pub fn split_dataset(ds: PairedDataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<PairedDataset> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::Dataset(format!(
            "split fractions must be non-negative with val + test < 1, got {val_frac} + {test_frac}"
        )));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 products to split, got {n}")));
    }
    let (val, test) = split_sizes(n, val_frac, test_frac);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Stream::new(seed, Purpose::Split));
    let mut assignment = alloc::vec![Split::Train; n];
    for (rank, &p) in order.iter().enumerate() {
        if rank < val {
            assignment[p] = Split::Val;
        } else if rank < val + test {
            assignment[p] = Split::Test;
        }
    }
    ds.with_assignment(assignment)
}

/// Validation and test sizes for `n` products (rounded down).
pub fn split_sizes(n: usize, val_frac: f64, test_frac: f64) -> (usize, usize) {
    let floor = |f: f64| libm::floor(f * n as f64 + 1e-9) as usize;
    (floor(val_frac), floor(test_frac))
}

/// A product drawn uniformly from `candidates` other than `product`.
pub fn sample_negative<R: Rng + ?Sized>(candidates: &[usize], product: usize, rng: &mut R) -> Result<usize> {
    let others = candidates.iter().filter(|&&c| c != product).count();
    if others == 0 {
        return Err(Error::Dataset("negative sampling needs at least two products".into()));
    }
    let k = rng.random_range(0..others);
    Ok(*candidates.iter().filter(|&&c| c != product).nth(k).unwrap())
}

/// Map 8-bit RGB pixels of a 64 x 64 image to a 3 x 64 x 64 tensor in [-1, 1].
pub fn rgb_to_tensor(rgb: &[u8]) -> Result<Tensor<f32>> {
    let side = IMAGE_SIDE;
    if rgb.len() != side * side * 3 {
        return Err(Error::Dataset(format!(
            "expected {} RGB bytes for a {side}x{side} image, got {}",
            side * side * 3,
            rgb.len()
        )));
    }
    let mut data = alloc::vec![0f32; rgb.len()];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * side * side + i] = byte_to_unit(px[c]);
        }
    }
    Tensor::new(IMAGE_SHAPE, data)
}

/// Inverse of [`rgb_to_tensor`]: `[-1, 1]` to `[0, 255]`, rounded and clamped.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => return Err(crate::error::invalid("tensor_to_rgb", format!("expected 3 x H x W, got {:?}", t.shape()))),
    };
    if c != 3 {
        return Err(crate::error::invalid("tensor_to_rgb", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(unit_to_byte(t.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    libm::roundf(((v + 1.0) * 127.5).clamp(0.0, 255.0)) as u8
}
