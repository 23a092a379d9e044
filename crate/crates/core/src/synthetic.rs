//! Procedural paired images: a garment glyph on white (target domain) and
//! the same glyph worn by a stylized figure over a textured background
//! (source domain). Color, pattern and silhouette are the attributes a
//! converter has to carry across.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{rgb_to_tensor, PairedDataset, Product};
use crate::error::{invalid, Result};
use crate::networks::IMAGE_SIDE;
use crate::rng::{Purpose, Stream};

/// Saturated garment colors; a dataset uses the first `colors` entries.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 30, 30],
    [30, 170, 50],
    [40, 70, 220],
    [240, 200, 20],
    [200, 40, 190],
    [20, 190, 200],
    [245, 130, 20],
    [120, 40, 180],
];

pub const STRIPE_PERIOD: usize = 8;

/// Pixels whose channel spread is below this are treated as achromatic.
pub const CHROMA_THRESHOLD: u8 = 50;

const WHITE: [u8; 3] = [255, 255, 255];
const OUTLINE: [u8; 3] = [50, 50, 50];
const SKIN: [u8; 3] = [210, 186, 172];
const LEGS: [u8; 3] = [70, 70, 76];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Silhouette {
    Tee,
    LongSleeve,
    Dress,
}

impl Silhouette {
    pub const ALL: [Silhouette; 3] = [Silhouette::Tee, Silhouette::LongSleeve, Silhouette::Dress];

    /// Whether `(u, v)` in the unit box lies inside the garment.
    fn contains(self, u: f32, v: f32) -> bool {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        let du = u - 0.5;
        // Neckline.
        if du * du + (v - 0.08) * (v - 0.08) < 0.012 {
            return false;
        }
        match self {
            Silhouette::Tee => {
                let body = (0.25..0.75).contains(&u) && v >= 0.08;
                let sleeves = (0.04..0.96).contains(&u) && (0.08..0.36).contains(&v);
                body || sleeves
            }
            Silhouette::LongSleeve => {
                let body = (0.27..0.73).contains(&u) && v >= 0.08;
                let shoulders = (0.05..0.95).contains(&u) && (0.08..0.26).contains(&v);
                let arms = ((0.05..0.21).contains(&u) || (0.79..0.95).contains(&u)) && (0.08..0.92).contains(&v);
                body || shoulders || arms
            }
            Silhouette::Dress => {
                let half = 0.14 + 0.36 * v;
                let bodice = du.abs() < half && v >= 0.08;
                let straps = (du.abs() - 0.12).abs() < 0.04 && v < 0.12;
                bodice || straps
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_products: usize,
    /// Palette size K, between 2 and 8.
    pub colors: usize,
    pub seed: u64,
    /// Source images per product, inclusive range.
    pub min_sources: usize,
    pub max_sources: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_products: 200,
            colors: 6,
            seed: 0,
            min_sources: 2,
            max_sources: 4,
        }
    }
}

/// A 64 x 64 RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn filled(color: [u8; 3]) -> Self {
        Canvas {
            rgb: color.iter().copied().cycle().take(IMAGE_SIDE * IMAGE_SIDE * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * IMAGE_SIDE + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * IMAGE_SIDE + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticProduct {
    pub id: String,
    pub color: usize,
    pub pattern: Pattern,
    pub silhouette: Silhouette,
    pub target: Canvas,
    pub sources: Vec<Canvas>,
}

/// Where a glyph is drawn, in pixels.
#[derive(Clone, Copy, Debug)]
struct Placement {
    x0: f32,
    y0: f32,
    w: f32,
    h: f32,
}

fn draw_glyph(canvas: &mut Canvas, s: Silhouette, color: [u8; 3], pattern: Pattern, at: Placement) {
    let inside = |x: isize, y: isize| {
        let u = (x as f32 + 0.5 - at.x0) / at.w;
        let v = (y as f32 + 0.5 - at.y0) / at.h;
        s.contains(u, v)
    };
    let side = IMAGE_SIDE as isize;
    for y in 0..side {
        for x in 0..side {
            if !inside(x, y) {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dx, dy)| !inside(x + dx, y + dy));
            let c = if edge {
                OUTLINE
            } else if pattern == Pattern::Stripes && (y as usize % STRIPE_PERIOD) >= STRIPE_PERIOD / 2 {
                WHITE
            } else {
                color
            };
            canvas.set(x as usize, y as usize, c);
        }
    }
}

fn fill_rect(canvas: &mut Canvas, x0: isize, y0: isize, x1: isize, y1: isize, c: [u8; 3]) {
    let side = IMAGE_SIDE as isize;
    for y in y0.max(0)..y1.min(side) {
        for x in x0.max(0)..x1.min(side) {
            canvas.set(x as usize, y as usize, c);
        }
    }
}

fn render_target(s: Silhouette, color: [u8; 3], pattern: Pattern) -> Canvas {
    let mut c = Canvas::filled(WHITE);
    draw_glyph(
        &mut c,
        s,
        color,
        pattern,
        Placement {
            x0: 10.0,
            y0: 8.0,
            w: 44.0,
            h: 48.0,
        },
    );
    c
}

fn render_source<R: Rng>(s: Silhouette, color: [u8; 3], pattern: Pattern, rng: &mut R) -> Canvas {
    // Achromatic background: a gray level, a linear shade and per-pixel noise.
    let base = rng.random_range(80.0f32..200.0);
    let gx = rng.random_range(-1.2f32..1.2);
    let gy = rng.random_range(-1.2f32..1.2);
    let mut c = Canvas::filled(WHITE);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let noise = rng.random_range(-18.0f32..18.0);
            let v = (base + gx * (x as f32 - 32.0) + gy * (y as f32 - 32.0) + noise).clamp(0.0, 255.0) as u8;
            c.set(x, y, [v, v, v]);
        }
    }
    let scale = rng.random_range(0.8f32..1.1);
    let w = 30.0 * scale;
    let h = 30.0 * scale;
    let cx = 32.0 + rng.random_range(-8.0f32..8.0);
    let top = 16.0 + rng.random_range(-3.0f32..3.0);
    // Head and legs of the figure.
    let head = 5.0 * scale;
    let hy = top - head - 1.0;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - hy;
            if dx * dx + dy * dy < head * head {
                c.set(x, y, SKIN);
            }
        }
    }
    let leg_w = (4.0 * scale) as isize;
    let legs_top = (top + h * 0.8) as isize;
    let cxi = cx as isize;
    fill_rect(&mut c, cxi - leg_w - 2, legs_top, cxi - 2, IMAGE_SIDE as isize, LEGS);
    fill_rect(&mut c, cxi + 2, legs_top, cxi + leg_w + 2, IMAGE_SIDE as isize, LEGS);
    draw_glyph(
        &mut c,
        s,
        color,
        pattern,
        Placement {
            x0: cx - w / 2.0,
            y0: top,
            w,
            h,
        },
    );
    c
}

/// Render `config.n_products` products with ids `p0000`, `p0001`, ...
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SyntheticProduct>> {
    if !(2..=PALETTE.len()).contains(&config.colors) {
        return Err(invalid("synthetic", format!("palette size must lie in 2..={}, got {}", PALETTE.len(), config.colors)));
    }
    if config.min_sources == 0 || config.min_sources > config.max_sources {
        return Err(invalid("synthetic", "source count range must be non-empty and start at 1 or more"));
    }
    let mut rng = Stream::new(config.seed, Purpose::Synthetic);
    let mut out = Vec::with_capacity(config.n_products);
    for i in 0..config.n_products {
        let color = rng.random_range(0..config.colors);
        let pattern = if rng.random_bool(0.5) { Pattern::Stripes } else { Pattern::Solid };
        let silhouette = Silhouette::ALL[rng.random_range(0..Silhouette::ALL.len())];
        let n_sources = rng.random_range(config.min_sources..=config.max_sources);
        let rgb = PALETTE[color];
        let target = render_target(silhouette, rgb, pattern);
        let sources = (0..n_sources).map(|_| render_source(silhouette, rgb, pattern, &mut rng)).collect();
        out.push(SyntheticProduct {
            id: format!("p{i:04}"),
            color,
            pattern,
            silhouette,
            target,
            sources,
        });
    }
    Ok(out)
}

/// In-memory dataset of synthetic products (all in the training split).
pub fn to_dataset(products: &[SyntheticProduct]) -> Result<PairedDataset> {
    let products = products
        .iter()
        .map(|p| {
            Ok(Product {
                id: p.id.clone(),
                target: rgb_to_tensor(&p.target.rgb)?,
                sources: p.sources.iter().map(|s| rgb_to_tensor(&s.rgb)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(products)
}

/// Palette index most chromatic pixels are closest to, among the first
/// `colors` entries. `None` when no pixel is chromatic.
pub fn dominant_color(rgb: &[u8], colors: usize) -> Option<usize> {
    let colors = colors.min(PALETTE.len());
    let mut votes = vec![0usize; colors];
    for px in rgb.chunks_exact(3) {
        let hi = px.iter().max().unwrap();
        let lo = px.iter().min().unwrap();
        if hi - lo < CHROMA_THRESHOLD {
            continue;
        }
        let nearest = (0..colors)
            .min_by_key(|&k| {
                PALETTE[k]
                    .iter()
                    .zip(px)
                    .map(|(&a, &b)| {
                        let d = a as i32 - b as i32;
                        d * d
                    })
                    .sum::<i32>()
            })
            .unwrap();
        votes[nearest] += 1;
    }
    let best = (0..colors).max_by_key(|&k| (votes[k], core::cmp::Reverse(k)))?;
    (votes[best] > 0).then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_chromatic_and_background_is_not() {
        for c in PALETTE {
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() >= CHROMA_THRESHOLD);
        }
        for c in [WHITE, OUTLINE, SKIN, LEGS] {
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() < CHROMA_THRESHOLD);
        }
    }

    #[test]
    fn silhouettes_differ() {
        let cover = |s: Silhouette| render_target(s, PALETTE[0], Pattern::Solid);
        let t = cover(Silhouette::Tee);
        let l = cover(Silhouette::LongSleeve);
        let d = cover(Silhouette::Dress);
        assert_ne!(t, l);
        assert_ne!(t, d);
        assert_ne!(l, d);
    }

    #[test]
    fn dominant_color_of_blank_is_none() {
        assert_eq!(dominant_color(&Canvas::filled(WHITE).rgb, 6), None);
        assert_eq!(dominant_color(&Canvas::filled(PALETTE[3]).rgb, 6), Some(3));
    }
}
