use std::collections::HashSet;

use pdt_core::data::{self, sample_negative, split_dataset, split_sizes, PairedDataset, Product, Split};
use pdt_core::rng::{Purpose, Stream};
use pdt_core::synthetic::{dominant_color, generate_synthetic, to_dataset, SyntheticConfig, PALETTE};
use pdt_core::Tensor;
use proptest::prelude::*;

fn blank_products(n: usize) -> Vec<Product> {
    (0..n)
        .map(|i| Product {
            id: format!("item{i:03}"),
            target: Tensor::zeros([3, 64, 64]),
            sources: vec![Tensor::zeros([3, 64, 64]); 1 + i % 3],
        })
        .collect()
}

#[test]
fn hundred_products_split_five_five_ninety() {
    let ds = split_dataset(PairedDataset::new(blank_products(100)).unwrap(), 0.05, 0.05, 1).unwrap();
    assert_eq!(ds.products_in(Split::Val).len(), 5);
    assert_eq!(ds.products_in(Split::Test).len(), 5);
    assert_eq!(ds.products_in(Split::Train).len(), 90);
}

#[test]
fn split_sizes_round_down() {
    assert_eq!(split_sizes(9732, 0.05, 0.05), (486, 486));
    assert_eq!(split_sizes(200, 0.05, 0.05), (10, 10));
    assert_eq!(split_sizes(19, 0.1, 0.2), (1, 3));
}

#[test]
fn split_partitions_products_and_is_seeded() {
    let ds = PairedDataset::new(blank_products(40)).unwrap();
    let a = split_dataset(ds.clone(), 0.1, 0.2, 7).unwrap();
    let b = split_dataset(ds.clone(), 0.1, 0.2, 7).unwrap();
    let c = split_dataset(ds, 0.1, 0.2, 8).unwrap();
    let assign = |d: &PairedDataset| (0..d.len()).map(|i| d.split_of(i)).collect::<Vec<_>>();
    assert_eq!(assign(&a), assign(&b));
    assert_ne!(assign(&a), assign(&c));

    // Every source follows its product.
    let mut seen = HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for (p, _) in a.pairs(split) {
            assert_eq!(a.split_of(p), split);
            seen.insert(p);
        }
    }
    assert_eq!(seen.len(), 40);
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| a.pairs(s).len()).sum();
    assert_eq!(total, a.source_count());
}

#[test]
fn split_rejects_bad_input() {
    let ds = PairedDataset::new(blank_products(10)).unwrap();
    assert!(split_dataset(ds.clone(), 0.5, 0.5, 0).is_err());
    assert!(split_dataset(ds.clone(), -0.1, 0.1, 0).is_err());
    assert!(split_dataset(PairedDataset::new(blank_products(2)).unwrap(), 0.0, 0.0, 0).is_err());
}

#[test]
fn dataset_validation() {
    let mut dup = blank_products(2);
    dup[1].id = dup[0].id.clone();
    assert!(PairedDataset::new(dup).is_err());
    let mut empty = blank_products(2);
    empty[0].sources.clear();
    assert!(PairedDataset::new(empty).is_err());
    let mut small = blank_products(2);
    small[1].target = Tensor::zeros([3, 32, 32]);
    assert!(PairedDataset::new(small).is_err());

    let mut shuffled = blank_products(5);
    shuffled.reverse();
    let ds = PairedDataset::new(shuffled).unwrap();
    assert_eq!(ds.products()[0].id, "item000");
    assert_eq!(ds.index_of("item003"), Some(3));
    assert_eq!(ds.index_of("nope"), None);
    assert!(ds.clone().with_assignment(vec![Split::Train; 4]).is_err());
}

#[test]
fn negatives_are_uniform_over_other_products() {
    let candidates: Vec<usize> = (0..5).collect();
    let mut rng = Stream::new(0, Purpose::Negatives);
    let mut counts = [0usize; 5];
    let draws = 10_000;
    for _ in 0..draws {
        counts[sample_negative(&candidates, 2, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[2], 0);
    for (i, &c) in counts.iter().enumerate() {
        if i != 2 {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() <= 0.02, "product {i}: {f}");
        }
    }
    assert!(sample_negative(&[4], 4, &mut rng).is_err());
}

#[test]
fn pixel_mapping() {
    assert_eq!(data::byte_to_unit(255), 1.0);
    assert_eq!(data::byte_to_unit(0), -1.0);
    for b in 0..=255u8 {
        assert_eq!(data::unit_to_byte(data::byte_to_unit(b)), b);
    }
    let rgb: Vec<u8> = (0..64 * 64 * 3).map(|i| (i % 251) as u8).collect();
    let t = data::rgb_to_tensor(&rgb).unwrap();
    assert_eq!(t.shape(), &[3, 64, 64]);
    // Channel-major layout: pixel (x=1, y=0) green.
    assert_eq!(t.data()[64 * 64 + 1], data::byte_to_unit(rgb[4]));
    assert_eq!(data::tensor_to_rgb(&t).unwrap(), rgb);
    assert!(data::rgb_to_tensor(&rgb[..30]).is_err());
}

#[test]
fn synthetic_sizes_and_range() {
    let cfg = SyntheticConfig {
        n_products: 10,
        colors: 4,
        seed: 0,
        ..SyntheticConfig::default()
    };
    let products = generate_synthetic(&cfg).unwrap();
    assert_eq!(products.len(), 10);
    let sources: usize = products.iter().map(|p| p.sources.len()).sum();
    assert!((20..=40).contains(&sources), "{sources}");
    let ds = to_dataset(&products).unwrap();
    for p in ds.products() {
        for img in std::iter::once(&p.target).chain(&p.sources) {
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
    assert_eq!(products[3].id, "p0003");
}

#[test]
fn synthetic_is_seeded() {
    let cfg = SyntheticConfig {
        n_products: 6,
        ..SyntheticConfig::default()
    };
    assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    let other = SyntheticConfig { seed: 1, ..cfg };
    assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
}

#[test]
fn synthetic_colors_are_recoverable() {
    let products = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let mut used = HashSet::new();
    for p in &products {
        used.insert(p.color);
        assert_eq!(dominant_color(&p.target.rgb, 6), Some(p.color), "{} target", p.id);
        for (i, s) in p.sources.iter().enumerate() {
            assert_eq!(dominant_color(&s.rgb, 6), Some(p.color), "{} source {i}", p.id);
        }
    }
    assert_eq!(used.len(), 6);
}

#[test]
fn synthetic_rejects_bad_config() {
    for bad in [
        SyntheticConfig { colors: 1, ..SyntheticConfig::default() },
        SyntheticConfig { colors: PALETTE.len() + 1, ..SyntheticConfig::default() },
        SyntheticConfig { min_sources: 0, ..SyntheticConfig::default() },
        SyntheticConfig { min_sources: 5, max_sources: 4, ..SyntheticConfig::default() },
    ] {
        assert!(generate_synthetic(&bad).is_err());
    }
}

#[test]
fn dominant_color_ignores_grey() {
    let grey = vec![128u8; 64 * 64 * 3];
    assert_eq!(dominant_color(&grey, 6), None);
    let mut img = grey.clone();
    for px in img.chunks_exact_mut(3).take(10) {
        px.copy_from_slice(&PALETTE[2]);
    }
    assert_eq!(dominant_color(&img, 6), Some(2));
    // Colors outside the first K map to the nearest allowed one.
    assert!(dominant_color(&img, 2).is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_sizes_partition(n in 3usize..500, val in 0.0f64..0.45, test in 0.0f64..0.45) {
        let (v, t) = split_sizes(n, val, test);
        prop_assert!(v as f64 <= val * n as f64 + 1e-6);
        prop_assert!(t as f64 <= test * n as f64 + 1e-6);
        prop_assert!(v + t < n);
    }
}
