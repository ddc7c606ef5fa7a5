use super::*;
use crate::blocks::{ModelConfig, ResamplerKind};
use crate::data::synth_pair_seeded;
use crate::tensor::{grad_check_sampled, load_checkpoint};

fn tiny(kind: ResamplerKind, pairs: usize) -> (Model, ParamStore, Vec<PreparedPair>) {
    let cfg = ModelConfig {
        resampler: kind,
        ..ModelConfig::miniature()
    };
    let data = (0..pairs as u64)
        .map(|s| PreparedPair::new(&synth_pair_seeded(s, 2.0).unwrap(), &cfg.mel).unwrap())
        .collect();
    let (model, store) = Model::init(cfg, 3).unwrap();
    (model, store, data)
}

fn quiet() -> TrainConfig {
    TrainConfig {
        batch: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn single(name: &str, w: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(name, Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
    s
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = single("w", 0.0);
    let mut converged_at = None;
    for t in 1..=2000 {
        let w = store.value("w").unwrap().data()[0];
        let mut g = Grads::new();
        g.insert("w", vec![2.0 * (w - 3.0)]);
        adam_update(&mut store, &g, 0.05, &AdamConfig::default()).unwrap();
        if (store.value("w").unwrap().data()[0] - 3.0).abs() < 1e-3 && converged_at.is_none() {
            converged_at = Some(t);
        }
    }
    let w = store.value("w").unwrap().data()[0];
    assert!(converged_at.is_some() && (w - 3.0).abs() < 1e-3, "w = {w}");
    assert_eq!(store.step(), 2000);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // bias correction makes the first step exactly lr·sign(g)
    let mut store = single("w", 1.0);
    let mut g = Grads::new();
    g.insert("w", vec![-0.37]);
    adam_update(&mut store, &g, 0.01, &AdamConfig::default()).unwrap();
    let w = store.value("w").unwrap().data()[0];
    assert!((w - 1.01).abs() < 1e-6, "{w}");
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let (_, mut store, _) = tiny(ResamplerKind::Bilinear, 0);
    let before = store.clone();
    adam_update(&mut store, &Grads::new(), 1e-3, &AdamConfig::default()).unwrap();
    for (name, p) in before.iter() {
        assert_eq!(p.value(), store.value(name).unwrap());
    }
    assert_eq!(store.step(), 1);
}

#[test]
fn adam_ignores_insertion_order() {
    let mk = |names: &[&str]| {
        let mut s = ParamStore::new();
        for (i, n) in names.iter().enumerate() {
            let v = if *n == "a" { 0.5 } else { -1.5 };
            s.insert(*n, Tensor::new(vec![2], vec![v, v + i as f64 * 0.0]).unwrap())
                .unwrap();
        }
        s
    };
    let mut a = mk(&["a", "b"]);
    let mut b = mk(&["b", "a"]);
    let mut ga = Grads::new();
    ga.insert("a", vec![0.1, -0.2]);
    ga.insert("b", vec![3.0, 0.0]);
    let mut gb = Grads::new();
    gb.insert("b", vec![3.0, 0.0]);
    gb.insert("a", vec![0.1, -0.2]);
    for _ in 0..5 {
        adam_update(&mut a, &ga, 0.1, &AdamConfig::default()).unwrap();
        adam_update(&mut b, &gb, 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut store = single("w", 0.0);
    let mut g = Grads::new();
    g.insert("nope", vec![1.0]);
    assert!(matches!(
        adam_update(&mut store, &g, 0.1, &AdamConfig::default()),
        Err(TensorError::UnknownParam(_))
    ));
    let mut g = Grads::new();
    g.insert("w", vec![1.0, 2.0]);
    assert!(matches!(
        adam_update(&mut store, &g, 0.1, &AdamConfig::default()),
        Err(TensorError::ShapeMismatch { .. })
    ));
    assert_eq!(store.step(), 0);
}

#[test]
fn unit_weights_sum_components() {
    let l = combine_losses(&TrainConfig::default(), 0.5, 0.25, 0.25);
    assert_eq!(l.total, 1.0);
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let (model, mut store, data) = tiny(ResamplerKind::Bilinear, 1);
    store.perturb(1, 0.05);
    let cfg = TrainConfig {
        lambda_s: 0.0,
        lambda_p: 0.0,
        lambda_d: 0.0,
        ..quiet()
    };
    let edm = EdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, g) = training_step(&model, &store, &cfg, &edm, &data[0], &mut rng).unwrap();
    assert_eq!(l.total, 0.0);
    assert!(l.semantic > 0.0 && l.prior > 0.0 && l.diffusion > 0.0);
    assert_eq!(g.len(), store.len());
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn total_is_the_weighted_sum_and_deterministic() {
    let (model, mut store, data) = tiny(ResamplerKind::Bilinear, 1);
    store.perturb(2, 0.05);
    let cfg = TrainConfig {
        lambda_s: 0.3,
        lambda_p: 2.0,
        lambda_d: 0.7,
        ..quiet()
    };
    let edm = EdmConfig::default();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        training_step(&model, &store, &cfg, &edm, &data[0], &mut rng).unwrap()
    };
    let (l, g) = run();
    let want = 0.3 * l.semantic + 2.0 * l.prior + 0.7 * l.diffusion;
    assert!((l.total - want).abs() < 1e-7);
    assert!(l.semantic >= 0.0 && l.prior >= 0.0 && l.diffusion >= 0.0);
    let (l2, g2) = run();
    assert_eq!(l, l2);
    for (name, v) in g.iter() {
        assert_eq!(v, g2.get(name).unwrap());
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for kind in [ResamplerKind::Bilinear, ResamplerKind::Perceiver] {
        let (model, mut store, data) = tiny(kind, 1);
        store.perturb(6, 0.05);
        let cfg = quiet();
        let edm = EdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draw = StepDraw::sample(&edm, &data[0], &mut rng);
        // a mid-range noise level keeps every loss term active
        let scale = 0.8 / draw.diffusion.sigma;
        draw.diffusion.sigma = 0.8;
        draw.diffusion.noise = draw.diffusion.noise.map(|v| v * scale);
        let r = grad_check_sampled(&store, 1e-5, 8, 400, |g, p| {
            let l = training_loss_graph(g, &model, p, &cfg, &edm, &data[0], &draw)
                .map_err(|e| TensorError::MalformedCheckpoint(e.to_string()))?;
            Ok(l.total)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{kind}: {r:?}");
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    for kind in [ResamplerKind::Bilinear, ResamplerKind::Perceiver] {
        let (model, mut store, data) = tiny(kind, 4);
        let cfg = TrainConfig {
            lr: 1e-3,
            ..quiet()
        };
        let edm = EdmConfig::default();
        let mut seen: std::collections::BTreeMap<String, f64> = Default::default();
        for step in 0..10 {
            let (_, g) = batch_step(&model, &store, &cfg, &edm, &data, step).unwrap();
            for (name, v) in g.iter() {
                let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                *seen.entry(name.to_string()).or_default() += m;
            }
            adam_update(&mut store, &g, cfg.lr, &AdamConfig::default()).unwrap();
        }
        assert_eq!(seen.len(), store.len());
        for (name, m) in seen {
            assert!(m > 0.0, "{kind}: `{name}` never received gradient");
        }
    }
}

#[test]
fn resume_reproduces_losses() {
    let (model, store0, data) = tiny(ResamplerKind::Bilinear, 3);
    let edm = EdmConfig::default();
    let cfg = TrainConfig {
        steps: 6,
        lr: 1e-3,
        ..quiet()
    };
    let mut full = store0.clone();
    let a = train(&model, &mut full, &data, &cfg, &edm, None, |_, _| {}).unwrap();
    assert_eq!(a.losses.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.bin");
    let mut half = store0.clone();
    let first = TrainConfig { steps: 3, ..cfg.clone() };
    train(&model, &mut half, &data, &first, &edm, Some(&ck), |_, _| {}).unwrap();
    let mut resumed = load_checkpoint(&ck).unwrap();
    assert_eq!(resumed.step(), 3);
    let b = train(&model, &mut resumed, &data, &cfg, &edm, None, |_, _| {}).unwrap();
    assert_eq!(b.first_step, 3);
    assert_eq!(&a.losses[3..], &b.losses[..]);
    assert_eq!(resumed, full);
}

#[test]
fn log_windows_and_csv() {
    let mk = |v: f64| StepLosses {
        total: v,
        semantic: v / 2.0,
        prior: v / 4.0,
        diffusion: v / 4.0,
    };
    let log = TrainLog {
        first_step: 0,
        losses: vec![mk(1.0), mk(3.0), mk(5.0)],
    };
    let w = log.window_means(2);
    assert_eq!(w.len(), 2);
    assert_eq!((w[0].0, w[0].1.total), (2, 2.0));
    assert_eq!((w[1].0, w[1].1.total), (3, 5.0));
    let mut out = Vec::new();
    log.write_csv(&mut out, 2).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text,
        "step,loss_total,loss_s,loss_p,loss_d\n2,2.000000,1.000000,0.500000,0.500000\n3,5.000000,2.500000,1.250000,1.250000\n"
    );
}

#[test]
fn train_errors() {
    let (model, mut store, data) = tiny(ResamplerKind::Bilinear, 1);
    let edm = EdmConfig::default();
    assert!(matches!(
        train(&model, &mut store, &[], &quiet(), &edm, None, |_, _| {}),
        Err(TrainError::EmptyDataset)
    ));
    let bad = TrainConfig {
        lambda_p: -1.0,
        ..quiet()
    };
    assert!(matches!(
        train(&model, &mut store, &data, &bad, &edm, None, |_, _| {}),
        Err(TrainError::InvalidConfig(_))
    ));

    let name = store.names().next().unwrap().to_string();
    let shape = store.value(&name).unwrap().shape().to_vec();
    let n = shape.iter().product();
    store
        .set_value(&name, Tensor::new(shape, vec![f64::NAN; n]).unwrap())
        .unwrap();
    let cfg = TrainConfig { steps: 1, ..quiet() };
    let e = train(&model, &mut store, &data, &cfg, &edm, None, |_, _| {}).unwrap_err();
    assert!(e.is_numeric(), "{e}");
}
