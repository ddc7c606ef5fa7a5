use sagkit_core::blocks::{Model, ModelConfig};
use sagkit_core::data::{load_dataset, make_synthetic_dataset};
use sagkit_core::edm::EdmConfig;
use sagkit_core::generate::generate;
use sagkit_core::tensor::{load_checkpoint, save_checkpoint};
use sagkit_core::training::{train, PreparedPair, TrainConfig};

fn edm(steps: usize) -> EdmConfig {
    EdmConfig {
        steps,
        ..EdmConfig::default()
    }
}

#[test]
fn dataset_train_checkpoint_generate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let accepted = make_synthetic_dataset(&root, 3, 4, 2.0).unwrap();
    let (pairs, total) = load_dataset(&root).unwrap();
    assert_eq!((pairs.len(), total), (accepted, 3));

    let cfg = ModelConfig::miniature();
    let prepared: Vec<PreparedPair> = pairs.iter().map(|p| PreparedPair::new(p, &cfg.mel).unwrap()).collect();
    let (model, mut store) = Model::init(cfg.clone(), 2).unwrap();
    let tc = TrainConfig {
        steps: 3,
        batch: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let log = train(&model, &mut store, &prepared, &tc, &edm(2), None, |s, _| seen.push(s)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(log.losses.len(), 3);
    assert!(log.losses.iter().all(|l| l.total.is_finite()));

    let ck = tmp.path().join("m.ckpt");
    save_checkpoint(&store, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    let reloaded = Model::for_store(cfg, &loaded).unwrap();

    let vocal = &pairs[0].vocal;
    let a = generate(&model, &store, &edm(3), vocal, 4, 7).unwrap();
    let b = generate(&reloaded, &loaded, &edm(3), vocal, 4, 7).unwrap();
    assert_eq!(a.accompaniment.samples(), b.accompaniment.samples());
    assert!(a.accompaniment.peak() <= 1.0);
    let hop = 256;
    assert!((a.accompaniment.len() as i64 - vocal.len() as i64).abs() <= hop);
    assert!(a.rtf() > 0.0);
}

#[test]
fn for_store_rejects_a_mismatched_model() {
    let (_, store) = Model::init(ModelConfig::miniature(), 1).unwrap();
    let bigger = ModelConfig {
        prior_channels: 32,
        ..ModelConfig::miniature()
    };
    assert!(Model::for_store(bigger, &store).is_err());
}
