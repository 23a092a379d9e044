use pdt_core::data::{PairedDataset, Product, Split};
use pdt_core::metrics::{color_ssim, dd_retrieve, evaluate_model, retrieval_accuracy, rmse};
use pdt_core::networks::{NetworkKind, NetworkParams, Networks};
use pdt_core::rng::Stream;
use pdt_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Stream::with_id(seed, 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// SSIM straight from the definition: a full 2-D Gaussian window at every
/// valid position, statistics by direct weighted sums.
fn reference_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = 11;
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            win[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let u = |v: f64| (v + 1.0) / 2.0;
    let mut total = 0.0;
    for ch in 0..c {
        let px = |t: &Tensor<f64>, y: usize, x: usize| u(t.data()[(ch * h + y) * w + x]);
        let mut sum = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let g = win[y * k + x];
                        let (p, q) = (px(a, oy + y, ox + x), px(b, oy + y, ox + x));
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / c as f64
}

#[test]
fn ssim_matches_direct_definition() {
    for seed in 0..4 {
        let a = noise(&[3, 20, 17], seed);
        let b = a.map(|v| (0.7 * v + 0.1).clamp(-1.0, 1.0));
        let c = noise(&[3, 20, 17], seed + 100);
        for (x, y) in [(&a, &b), (&a, &c)] {
            let got = color_ssim(x, y).unwrap();
            let want = reference_ssim(x, y);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn rmse_by_hand() {
    // [0, 1]-mapped differences of 0.5 everywhere.
    let a = Tensor::<f64>::full([3, 4, 4], 0.0);
    let b = Tensor::<f64>::full([3, 4, 4], 1.0);
    assert!((rmse(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    let mut c = a.clone();
    c.data_mut()[0] = 1.0;
    // One of 48 values off by 0.5.
    assert!((rmse(&a, &c).unwrap() - (0.25f64 / 48.0).sqrt()).abs() < 1e-15);
}

#[test]
fn identity_and_symmetry_on_fifty_images() {
    for seed in 0..50 {
        let x = noise(&[3, 64, 64], seed);
        let y = noise(&[3, 64, 64], seed + 1000);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(color_ssim(&x, &x).unwrap(), 1.0);
        assert!((rmse(&x, &y).unwrap() - rmse(&y, &x).unwrap()).abs() < 1e-7);
        assert!((color_ssim(&x, &y).unwrap() - color_ssim(&y, &x).unwrap()).abs() < 1e-7);
        let r = rmse(&x, &y).unwrap();
        let s = color_ssim(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn pixel_permutation_keeps_rmse_not_ssim() {
    let x = noise(&[3, 32, 32], 1);
    let y = x.map(|v| (v * 0.5 + 0.2).clamp(-1.0, 1.0));
    let mut order: Vec<usize> = (0..32 * 32).collect();
    order.shuffle(&mut Stream::with_id(2, 0));
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn([3, 32, 32], |i| {
            let (ch, p) = (i / 1024, i % 1024);
            t.data()[ch * 1024 + order[p]]
        })
    };
    let (px, py) = (permute(&x), permute(&y));
    assert!((rmse(&x, &y).unwrap() - rmse(&px, &py).unwrap()).abs() < 1e-12);
    let smooth = Tensor::from_fn([3, 32, 32], |i| ((i % 32) as f64 / 31.0) * 2.0 - 1.0);
    let smooth_noisy = smooth.map(|v| v * 0.9);
    let (ps, pn) = (permute(&smooth), permute(&smooth_noisy));
    assert!((rmse(&smooth, &smooth_noisy).unwrap() - rmse(&ps, &pn).unwrap()).abs() < 1e-12);
    assert!((color_ssim(&smooth, &smooth_noisy).unwrap() - color_ssim(&ps, &pn).unwrap()).abs() > 1e-3);
}

#[test]
fn constant_against_noise_is_dissimilar() {
    let flat = Tensor::<f64>::zeros([3, 64, 64]);
    let n = noise(&[3, 64, 64], 5);
    assert!(color_ssim(&flat, &n).unwrap() < 0.2);
}

#[test]
fn metric_shape_errors() {
    let a = Tensor::<f64>::zeros([3, 16, 16]);
    assert!(rmse(&a, &Tensor::zeros([3, 16, 15])).is_err());
    assert!(color_ssim(&Tensor::<f64>::zeros([3, 10, 10]), &Tensor::zeros([3, 10, 10])).is_err());
    assert!(rmse(&Tensor::<f64>::zeros([16, 16]), &Tensor::zeros([16, 16])).is_err());
    // A leading batch axis of one is accepted.
    assert_eq!(rmse(&Tensor::<f64>::zeros([1, 3, 16, 16]), &Tensor::zeros([1, 3, 16, 16])).unwrap(), 0.0);
}

/// Domain discriminator whose last layer is zeroed: every pair scores
/// sigmoid(0) = 0.5.
fn constant_domain() -> NetworkParams<f32> {
    let mut net = NetworkParams::<f32>::init(NetworkKind::Domain, 0.125, 0);
    let last = net.layers.last_mut().unwrap();
    last.weight = Tensor::zeros(last.weight.shape().to_vec());
    last.bias = last.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec()));
    net
}

fn image(seed: u64) -> Tensor<f32> {
    noise(&[3, 64, 64], seed).cast()
}

#[test]
fn retrieval_ties_go_to_lowest_id() {
    let net = constant_domain();
    let (a, b, c) = (image(1), image(2), image(3));
    let gallery = [("p02", &a), ("p00", &b), ("p01", &c)];
    assert_eq!(dd_retrieve(&net, &image(4), &gallery).unwrap(), 1);
    assert!(dd_retrieve(&net, &image(4), &[]).is_err());
}

#[test]
fn retrieval_picks_highest_score() {
    let nets = Networks::<f32>::init(0.125, 4);
    let gallery_imgs: Vec<Tensor<f32>> = (0..40).map(|i| image(10 + i)).collect();
    let ids: Vec<String> = (0..40).map(|i| format!("g{i:02}")).collect();
    let gallery: Vec<(&str, &Tensor<f32>)> = ids.iter().map(|s| s.as_str()).zip(gallery_imgs.iter()).collect();
    let q = image(99);
    let hit = dd_retrieve(&nets.domain, &q, &gallery).unwrap();
    let scores: Vec<f32> = gallery_imgs
        .iter()
        .map(|t| {
            let s = q.clone().reshape([1, 3, 64, 64]).unwrap();
            let t = t.clone().reshape([1, 3, 64, 64]).unwrap();
            pdt_core::networks::domain_scores_eval(&nets.domain, &s, &t).unwrap().item()
        })
        .collect();
    let best = scores.iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(scores[hit], best);
}

fn small_dataset() -> PairedDataset {
    let products = (0..4)
        .map(|i| Product {
            id: format!("p{i}"),
            target: image(20 + i),
            sources: vec![image(30 + i), image(40 + i)],
        })
        .collect();
    PairedDataset::new(products)
        .unwrap()
        .with_assignment(vec![Split::Train, Split::Train, Split::Test, Split::Test])
        .unwrap()
}

#[test]
fn retrieval_accuracy_with_constant_discriminator() {
    let ds = small_dataset();
    let gallery: Vec<usize> = (0..4).collect();
    // All ties: every query retrieves p0, which is never a test product.
    let r = retrieval_accuracy(&constant_domain(), &ds, Split::Test, &gallery).unwrap();
    assert_eq!((r.correct, r.total, r.gallery), (0, 4, 4));
    assert_eq!(r.chance(), 0.25);
    let r = retrieval_accuracy(&constant_domain(), &ds, Split::Test, &[2, 3]).unwrap();
    // p2 wins every tie; its two sources are correct.
    assert_eq!((r.correct, r.total), (2, 4));
    assert_eq!(r.accuracy(), 0.5);
    assert!(retrieval_accuracy(&constant_domain(), &ds, Split::Val, &gallery).is_err());
}

#[test]
fn evaluation_covers_every_source_of_the_split() {
    let ds = small_dataset();
    let nets = Networks::<f32>::init(0.125, 5);
    let r = evaluate_model(&nets.encoder, &nets.decoder, &ds, Split::Test, "C_MSE").unwrap();
    assert_eq!(r.count(), 4);
    assert_eq!(r.images[0].product, "p2");
    assert_eq!(r.images[1].source, 1);
    let mean = r.images.iter().map(|m| m.rmse).sum::<f64>() / 4.0;
    assert!((r.mean_rmse() - mean).abs() < 1e-15);
    assert!(r.mean_ssim().is_finite());
    assert!(evaluate_model(&nets.encoder, &nets.decoder, &ds, Split::Val, "C_MSE").is_err());
}
