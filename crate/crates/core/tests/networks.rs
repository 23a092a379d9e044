use pdt_core::networks::{
    self, convert_eval, domain_scores_eval, layer_specs, real_fake_scores_eval, NetworkKind, NetworkParams, Networks, Phase,
};
use pdt_core::rng::Stream;
use pdt_core::{Graph, Tensor};
use rand::Rng;

fn image(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Stream::with_id(seed, 0);
    Tensor::from_fn([n, 3, 64, 64], |_| rng.random_range(-1.0..1.0))
}

/// Trainable parameter count of a 5x5 / 4x4 network at width 1, written
/// out layer by layer: weights, then bias (no BN) or gamma + beta (BN).
fn expected_counts() -> [(NetworkKind, usize); 4] {
    let conv = |cin: usize, cout: usize, k: usize, bn: bool| cout * cin * k * k + if bn { 2 * cout } else { cout };
    let body = |cin| conv(cin, 128, 5, false) + conv(128, 256, 5, true) + conv(256, 512, 5, true) + conv(512, 1024, 5, true);
    let encoder = body(3) + conv(1024, 64, 4, true);
    // 1x1 conv to 16 * 1024 channels, batch-normalized over 1024 after the
    // reshape to 4x4.
    let decoder = 64 * 16 * 1024 + 2 * 1024 + conv(1024, 512, 5, true) + conv(512, 256, 5, true) + conv(256, 128, 5, true) + conv(128, 3, 5, false);
    let real_fake = body(3) + conv(1024, 1, 4, false);
    let domain = body(6) + conv(1024, 1, 4, false);
    [
        (NetworkKind::Encoder, encoder),
        (NetworkKind::Decoder, decoder),
        (NetworkKind::RealFake, real_fake),
        (NetworkKind::Domain, domain),
    ]
}

#[test]
fn parameter_counts_at_full_width() {
    let pinned = [18_265_216, 18_265_219, 17_232_897, 17_242_497];
    for ((kind, want), pin) in expected_counts().into_iter().zip(pinned) {
        let net = NetworkParams::<f32>::init(kind, 1.0, 0);
        assert_eq!(net.parameter_count(), want, "{}", kind.name());
        assert_eq!(want, pin, "{}", kind.name());
    }
}

#[test]
fn full_width_shapes() {
    let nets = Networks::<f32>::init(1.0, 3);
    let x = image(2, 1);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let ev = nets.encoder.bind(&mut g, false);
    let enc = networks::encode(&mut g, &nets.encoder, &ev, xv, Phase::Train).unwrap();
    let shapes: Vec<Vec<usize>> = enc.layers.iter().map(|&v| g.value(v).shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![2, 128, 32, 32],
            vec![2, 256, 16, 16],
            vec![2, 512, 8, 8],
            vec![2, 1024, 4, 4],
            vec![2, 64, 1, 1],
        ]
    );

    let dv = nets.decoder.bind(&mut g, false);
    let dec = networks::decode(&mut g, &nets.decoder, &dv, enc.output, Phase::Train).unwrap();
    let shapes: Vec<Vec<usize>> = dec.layers.iter().map(|&v| g.value(v).shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![2, 1024, 4, 4],
            vec![2, 512, 8, 8],
            vec![2, 256, 16, 16],
            vec![2, 128, 32, 32],
            vec![2, 3, 64, 64],
        ]
    );
    assert!(g.value(dec.output).data().iter().all(|v| (-1.0..=1.0).contains(v)));

    let rv = nets.real_fake.bind(&mut g, false);
    let rf = networks::discriminate_real_fake(&mut g, &nets.real_fake, &rv, xv, Phase::Train).unwrap();
    assert_eq!(g.value(rf.output).shape(), &[2]);
    assert_eq!(g.value(rf.layers[4]).shape(), &[2, 1, 1, 1]);

    let av = nets.domain.bind(&mut g, false);
    let da = networks::discriminate_domain(&mut g, &nets.domain, &av, xv, dec.output, Phase::Train).unwrap();
    assert_eq!(g.value(da.output).shape(), &[2]);
    assert_eq!(nets.domain.layers[0].weight.shape(), &[128, 6, 5, 5]);
    for v in g.value(rf.output).data().iter().chain(g.value(da.output).data()) {
        assert!(*v > 0.0 && *v < 1.0);
    }
}

#[test]
fn width_scaling_rounds_with_floor_of_one() {
    assert_eq!(networks::scaled(128, 0.25), 32);
    assert_eq!(networks::scaled(3, 0.1), 1);
    assert_eq!(networks::scaled(64, 1.0 / 16.0), 4);
    assert_eq!(networks::code_channels(0.25), 16);
    for kind in NetworkKind::ALL {
        let specs = layer_specs(kind, 0.25);
        for pair in specs.windows(2) {
            assert_eq!(pair[0].norm_channels(), pair[1].in_channels, "{}", kind.name());
        }
    }
}

#[test]
fn init_statistics() {
    let net = NetworkParams::<f64>::init(NetworkKind::Encoder, 0.25, 9);
    let w: Vec<f64> = net.layers.iter().flat_map(|l| l.weight.data().iter().copied()).take(100_000).collect();
    assert_eq!(w.len(), 100_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!(mean.abs() < 0.001, "mean {mean}");
    assert!((std - 0.02).abs() < 0.002, "std {std}");
    for l in &net.layers {
        if let Some(b) = &l.bias {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        if let Some(n) = &l.norm {
            assert!(n.gamma.data().iter().all(|&v| v == 1.0));
            assert!(n.beta.data().iter().all(|&v| v == 0.0));
            assert!(n.running_var.data().iter().all(|&v| v == 1.0));
        }
    }
}

#[test]
fn init_is_seeded_per_network() {
    let a = Networks::<f32>::init(0.125, 4);
    let b = Networks::<f32>::init(0.125, 4);
    let c = Networks::<f32>::init(0.125, 5);
    assert_eq!(a, b);
    assert_ne!(a.encoder, c.encoder);
    // Streams differ between networks of one seed.
    assert_ne!(a.real_fake.layers[0].weight.data()[..10], a.encoder.layers[0].weight.data()[..10]);
}

#[test]
fn untrained_discriminators_are_undecided() {
    let x = image(1, 2);
    let y = image(1, 3);
    let mut inside = 0;
    for seed in 0..100 {
        let rf = NetworkParams::<f32>::init(NetworkKind::RealFake, 1.0, seed);
        let da = NetworkParams::<f32>::init(NetworkKind::Domain, 1.0, seed);
        let p = real_fake_scores_eval(&rf, &x).unwrap().item();
        let q = domain_scores_eval(&da, &x, &y).unwrap().item();
        if (0.2..0.8).contains(&p) && (0.2..0.8).contains(&q) {
            inside += 1;
        }
    }
    assert!(inside >= 95, "{inside} of 100");
}

#[test]
fn eval_batches_are_independent() {
    let nets = Networks::<f64>::init(0.125, 6);
    let x = image(2, 4).cast::<f64>();
    let both = convert_eval(&nets.encoder, &nets.decoder, &x).unwrap();
    for i in 0..2 {
        let one = convert_eval(&nets.encoder, &nets.decoder, &x.select_item(i)).unwrap();
        for (a, b) in one.data().iter().zip(both.batch_item(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_does_not_mutate() {
    let nets = Networks::<f32>::init(0.125, 7);
    let before = nets.clone();
    let x = image(3, 5);
    let a = convert_eval(&nets.encoder, &nets.decoder, &x).unwrap();
    let b = convert_eval(&nets.encoder, &nets.decoder, &x).unwrap();
    assert_eq!(a, b);
    assert_eq!(nets, before);
}

#[test]
fn zero_code_decodes_to_zero() {
    let nets = Networks::<f32>::init(0.25, 8);
    let mut g = Graph::<f32>::new();
    let code = g.constant(Tensor::zeros([2, 16, 1, 1]));
    let vars = nets.decoder.bind(&mut g, false);
    let out = networks::decode(&mut g, &nets.decoder, &vars, code, Phase::Eval).unwrap();
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));
}

#[test]
fn domain_discriminator_sees_pair_order() {
    let nets = Networks::<f32>::init(0.25, 9);
    let s = image(2, 6);
    let t = image(2, 7);
    let st = domain_scores_eval(&nets.domain, &s, &t).unwrap();
    let ts = domain_scores_eval(&nets.domain, &t, &s).unwrap();
    assert_ne!(st, ts);
}

#[test]
fn frozen_phase_leaves_running_stats() {
    let mut nets = Networks::<f32>::init(0.125, 10);
    let x = image(2, 8);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let vars = nets.encoder.bind(&mut g, false);
    let f = networks::encode(&mut g, &nets.encoder, &vars, xv, Phase::Frozen).unwrap();
    assert!(f.stats.iter().all(Option::is_none));
    let f = networks::encode(&mut g, &nets.encoder, &vars, xv, Phase::Train).unwrap();
    assert!(f.stats.iter().filter(|s| s.is_some()).count() == 4);
    let before = nets.encoder.clone();
    nets.encoder.update_running(&f.stats);
    assert_ne!(before, nets.encoder);
    let n = nets.encoder.layers[1].norm.as_ref().unwrap();
    assert_eq!(n.updates, 1);
    assert!(n.running_var.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn input_shape_errors() {
    let nets = Networks::<f32>::init(0.125, 11);
    let bad = Tensor::<f32>::zeros([1, 3, 32, 32]);
    assert!(convert_eval(&nets.encoder, &nets.decoder, &bad).is_err());
    assert!(real_fake_scores_eval(&nets.real_fake, &Tensor::zeros([1, 6, 64, 64])).is_err());
    let s = image(2, 9);
    assert!(domain_scores_eval(&nets.domain, &s, &image(1, 10)).is_err());
    // Parameters of the wrong network.
    assert!(real_fake_scores_eval(&nets.domain, &s).is_err());
}
