use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check_sampled;

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Reduces `y` to a scalar with fixed random weights so every output entry
/// contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let s = g.shape(y).to_vec();
    let w = rand_tensor(s[0], s[1..].iter().product(), seed).reshape(&s)?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.mean(p))
}

fn to_tensor_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::MalformedCheckpoint(other.to_string()),
    }
}

#[test]
fn semantic_projection_preserves_shape_and_starts_at_zero() {
    let (model, store) = Model::init(ModelConfig::default(), 1).unwrap();
    for l1 in [10, 751] {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(l1, 64, 2));
        let y = model.semantic_projection(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[l1, 64]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
    let mut g = Graph::new();
    let bad = g.constant(rand_tensor(10, 63, 2));
    assert!(model.semantic_projection(&mut g, &store, bad).is_err());
}

#[test]
fn semantic_projection_gradient_check() {
    let (model, mut store) = Model::init(ModelConfig::default(), 3).unwrap();
    store.perturb(4, 0.05);
    let x = rand_tensor(8, 64, 5);
    let r = grad_check_sampled(&store, 1e-5, 6, 1500, |g, p| {
        let xv = g.constant(x.clone());
        let y = model.semantic_projection(g, p, xv).map_err(to_tensor_err)?;
        project(g, y, 7)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn mix_semantic_cases() {
    let one = SemanticFeature::new(Tensor::full(&[1, 64], 1.0)).unwrap();
    let two = SemanticFeature::new(Tensor::full(&[1, 64], 2.0)).unwrap();
    let three = mix_semantic(&one, &two).unwrap();
    assert!(three.values().data().iter().all(|&v| v == 3.0));
    assert_eq!(mix_semantic(&two, &one).unwrap(), three);
    let zero = SemanticFeature::new(Tensor::zeros(&[1, 64])).unwrap();
    assert_eq!(mix_semantic(&one, &zero).unwrap(), one);
    let other = SemanticFeature::new(Tensor::zeros(&[2, 64])).unwrap();
    assert!(mix_semantic(&one, &other).is_err());
}

#[test]
fn bilinear_identity_constant_and_ramp() {
    let x = rand_tensor(12, 9, 1);
    assert!(resample_bilinear(&x, (12, 9)).unwrap().max_abs_diff(&x) < 1e-6);

    let c = Tensor::full(&[7, 5], 0.3);
    let y = resample_bilinear(&c, (23, 11)).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));

    let ramp = Tensor::from_fn(10, 4, |r, _| 2.0 * r as f64 - 1.0);
    let up = resample_bilinear(&ramp, (19, 4)).unwrap();
    for r in 1..18 {
        let d2 = up.get2(r + 1, 0) - 2.0 * up.get2(r, 0) + up.get2(r - 1, 0);
        assert!(d2.abs() < 1e-6);
    }
    assert!(matches!(
        resample_bilinear(&Tensor::zeros(&[1, 5]), (4, 4)),
        Err(ModelError::DegenerateInput { .. })
    ));
}

#[test]
fn bilinear_graph_matches_tensor_path() {
    let x = rand_tensor(13, 64, 9);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = resample_bilinear_graph(&mut g, v, (40, 100)).unwrap();
    let direct = resample_bilinear(&x, (40, 100)).unwrap();
    assert!(g.value(y).max_abs_diff(&direct) < 1e-12);
}

fn perceiver_model() -> (Model, ParamStore) {
    let cfg = ModelConfig {
        resampler: ResamplerKind::Perceiver,
        ..ModelConfig::default()
    };
    Model::init(cfg, 11).unwrap()
}

#[test]
fn perceiver_shapes_are_length_independent() {
    let (model, store) = perceiver_model();
    let Resampler::Perceiver(p) = &model.resampler else {
        unreachable!()
    };
    for l1 in [5, 100, 751] {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(l1, 64, l1 as u64));
        let z1 = p.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(z1), &[32, 256]);
        let y = model.resample(&mut g, &store, x, 938).unwrap();
        assert_eq!(g.shape(y), &[938, 100]);
    }
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(5, 64, 0));
    assert!(matches!(
        model.resample(&mut g, &store, x, 939),
        Err(ModelError::SequenceTooLong { .. })
    ));
}

#[test]
fn perceiver_gradient_check_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = PerceiverConfig {
        in_dim: 8,
        latents: 4,
        width: 8,
        self_layers: 4,
        max_out_len: 5,
        out_dim: 7,
    };
    let p = Perceiver::init(&mut store, "resamp.", cfg, &mut rng).unwrap();
    store.perturb(13, 0.05);
    let x = rand_tensor(6, 8, 14);
    let r = grad_check_sampled(&store, 1e-5, 15, 3000, |g, s| {
        let xv = g.constant(x.clone());
        let y = p.forward(g, s, xv, 5).map_err(to_tensor_err)?;
        assert_eq!(g.shape(y), &[5, 7]);
        project(g, y, 16)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn prior_encoder_shape_range_and_gradients() {
    let cfg = ModelConfig {
        prior_channels: 16,
        ..ModelConfig::default()
    };
    let (model, store) = Model::init(cfg, 20).unwrap();
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(50, 100, 21).map(|v| 5.0 * v));
    let y = model.prior_encoder(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[50, 100]);
    assert!(g.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));

    let x = rand_tensor(12, 100, 22);
    let r = grad_check_sampled(&store, 1e-5, 23, 1500, |g, p| {
        let xv = g.constant(x.clone());
        let y = model.prior_encoder(g, p, xv).map_err(to_tensor_err)?;
        project(g, y, 24)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn unet_shape_and_live_noise_conditioning() {
    let (model, mut store) = Model::init(ModelConfig::default(), 30).unwrap();
    store.perturb(31, 0.02);
    let x = rand_tensor(96, 100, 32);
    let prior = rand_tensor(96, 100, 33).map(f64::tanh);
    let run = |ln_sigma: f64| {
        let mut g = Graph::new();
        let (xv, pv) = (g.constant(x.clone()), g.constant(prior.clone()));
        let y = model.denoiser_net(&mut g, &store, xv, ln_sigma, pv).unwrap();
        g.value(y).clone()
    };
    let a = run(-2.0);
    assert_eq!(a.shape(), &[96, 100]);
    assert!(a.max_abs_diff(&run(1.5)) > 0.0);
}

#[test]
fn unet_pads_and_crops_odd_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let cfg = UNetConfig {
        channels: [8, 16, 32],
        emb_dim: 16,
    };
    let net = UNet::init(&mut store, "unet.", cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(13, 7, 41));
    let p = g.constant(rand_tensor(13, 7, 42));
    let y = net.forward(&mut g, &store, x, 0.0, p).unwrap();
    assert_eq!(g.shape(y), &[13, 7]);
    let bad = g.constant(rand_tensor(13, 8, 42));
    assert!(net.forward(&mut g, &store, x, 0.0, bad).is_err());
}

#[test]
fn unet_gradient_check_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let cfg = UNetConfig {
        channels: [8, 16, 32],
        emb_dim: 16,
    };
    let net = UNet::init(&mut store, "unet.", cfg, &mut rng).unwrap();
    store.perturb(51, 0.05);
    let x = rand_tensor(16, 20, 52);
    let prior = rand_tensor(16, 20, 53);
    let r = grad_check_sampled(&store, 1e-5, 54, 1500, |g, p| {
        let (xv, pv) = (g.constant(x.clone()), g.constant(prior.clone()));
        let y = net.forward(g, p, xv, 0.7, pv).map_err(to_tensor_err)?;
        project(g, y, 55)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn vocal(seconds: f64) -> AudioClip {
    let n = (seconds * 24_000.0) as usize;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / 24_000.0;
            0.4 * (2.0 * std::f64::consts::PI * (220.0 + 30.0 * (3.0 * t).sin()) * t).sin()
        })
        .collect();
    AudioClip::new(x, 24_000).unwrap()
}

#[test]
fn build_condition_shapes_for_both_resamplers() {
    let clip = vocal(10.0);
    for kind in [ResamplerKind::Bilinear, ResamplerKind::Perceiver] {
        let cfg = ModelConfig {
            resampler: kind,
            ..ModelConfig::default()
        };
        let (model, store) = Model::init(cfg, 60).unwrap();
        let (s, p) = build_condition(&model, &store, &clip).unwrap();
        assert_eq!(s.values().shape(), &[751, 64]);
        assert_eq!(p.values().shape(), &[938, 100]);
        assert_eq!(p.kind(), MelKind::Normalized);
        let (s2, p2) = build_condition(&model, &store, &clip).unwrap();
        assert_eq!((s, p), (s2, p2));
    }
}

#[test]
fn for_store_checks_compatibility() {
    let (_, store) = Model::init(ModelConfig::default(), 70).unwrap();
    assert!(Model::for_store(ModelConfig::default(), &store).is_ok());
    let other = ModelConfig {
        semantic_channels: 32,
        ..ModelConfig::default()
    };
    assert!(matches!(
        Model::for_store(other, &store),
        Err(ModelError::IncompatibleParams(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn blocks_preserve_shapes(l1 in 2usize..40, l2 in 1usize..30, d2 in 2usize..24) {
        let cfg = ModelConfig {
            semantic_channels: 8,
            prior_channels: 8,
            mel: MelConfig { n_mels: d2, ..MelConfig::default() },
            unet: UNetConfig { channels: [4, 8, 8], emb_dim: 8 },
            ..ModelConfig::default()
        };
        let (model, store) = Model::init(cfg, 80).unwrap();
        let sv = SemanticFeature::new(rand_tensor(l1, 64, l1 as u64)).unwrap();
        let mut g = Graph::new();
        let c = model.condition(&mut g, &store, &sv, l2.max(2)).unwrap();
        prop_assert_eq!(g.shape(c.semantic), &[l1, 64]);
        prop_assert_eq!(g.shape(c.prior), &[l2.max(2), d2]);
        let x = g.constant(rand_tensor(l2.max(2), d2, 1));
        let y = model.denoiser_net(&mut g, &store, x, 0.0, c.prior).unwrap();
        prop_assert_eq!(g.shape(y), &[l2.max(2), d2]);
    }
}
