mod common;

use color_core::experts::{fit, predict_batch, train_expert, Backbone, ClassifierHead, TrainConfig};
use color_core::harness::{generate_sequence, Method};
use color_core::scenarios::{generate_dil_sequence, generate_pool, pretrain_backbone, PretrainConfig, SyntheticImageSpec};
use color_core::{count_trainable_params, Error, ModelConfig, Scenario};
use common::{tiny, tiny_backbone};

#[test]
fn training_updates_exactly_the_expert_parameters() {
    let backbone = tiny_backbone();
    let cfg = tiny(Scenario::Cil, Method::Color);
    let seq = generate_sequence(&cfg).unwrap();
    let u = &seq.updates[0];
    let before: Vec<_> = backbone.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let e = train_expert(&backbone, &u.train, u.label_map.clone(), 0, &cfg.train(0)).unwrap();
    let expected = count_trainable_params(backbone.config(), cfg.rank, u.label_map.len());
    assert_eq!(e.updated_scalars, expected);
    assert_eq!(e.param_count(), expected);
    for ((_, after), b) in backbone.named_params().into_iter().zip(before) {
        assert!(after.bitwise_eq(&b));
    }
    assert_eq!(e.log.len(), cfg.epochs);
    assert!(e.log.last().unwrap().mean_loss < e.log[0].mean_loss);
}

#[test]
fn training_is_deterministic() {
    let backbone = tiny_backbone();
    let cfg = tiny(Scenario::Dil, Method::Color);
    let seq = generate_sequence(&cfg).unwrap();
    let u = &seq.updates[1];
    let a = train_expert(&backbone, &u.train, u.label_map.clone(), 1, &cfg.train(0)).unwrap();
    let b = train_expert(&backbone, &u.train, u.label_map.clone(), 1, &cfg.train(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn merged_prediction_matches_live_adapters() {
    let backbone = tiny_backbone();
    let cfg = tiny(Scenario::Dil, Method::Color);
    let seq = generate_sequence(&cfg).unwrap();
    let u = &seq.updates[0];
    let e = train_expert(&backbone, &u.train, u.label_map.clone(), 0, &cfg.train(0)).unwrap();
    let live = e.predict(&backbone, &u.test.images).unwrap();
    let merged = e.predict_merged(&backbone, &u.test.images).unwrap();
    for (a, b) in live.iter().zip(&merged) {
        assert_eq!(a.class_id, b.class_id);
        let gap = a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-6);
    }
}

#[test]
fn experts_need_a_frozen_backbone_and_data() {
    let backbone = tiny_backbone();
    let cfg = tiny(Scenario::Dil, Method::Color);
    let seq = generate_sequence(&cfg).unwrap();
    let u = &seq.updates[0];
    let thawed = backbone.thawed_copy();
    assert!(matches!(
        train_expert(&thawed, &u.train, u.label_map.clone(), 0, &cfg.train(0)),
        Err(Error::Contract(_))
    ));
    let empty = u.train.subset(&[]);
    assert!(matches!(
        train_expert(&backbone, &empty, u.label_map.clone(), 0, &cfg.train(0)),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        train_expert(&backbone, &u.train, vec![0], 0, &cfg.train(0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn masked_classes_get_no_gradient() {
    let backbone = tiny_backbone();
    let cfg = tiny(Scenario::Cil, Method::Ftseq);
    let seq = generate_sequence(&cfg).unwrap();
    let u = &seq.updates[1];
    let mut head = ClassifierHead::new(backbone.config().embed_dim, (0..6).collect(), 0).unwrap();
    let before = head.clone();
    let allowed: Vec<bool> = (0..6).map(|c| u.label_map.contains(&c)).collect();
    let train = TrainConfig {
        weight_decay: 0.0,
        ..cfg.train(0)
    };
    fit(Backbone::Frozen(&backbone), None, &mut head, &u.train, &train, Some(&allowed)).unwrap();
    let c = head.num_classes();
    for class in 0..c {
        let col = |h: &ClassifierHead| -> Vec<f64> { (0..h.w.shape()[0]).map(|r| h.w.data()[r * c + class]).collect() };
        if allowed[class] {
            assert_ne!(col(&head), col(&before));
        } else {
            assert_eq!(col(&head), col(&before));
            assert_eq!(head.b.data()[class], before.b.data()[class]);
        }
    }
}

#[test]
fn pretraining_is_deterministic_and_accurate() {
    let spec = SyntheticImageSpec {
        num_classes: 20,
        train_per_class: 60,
        test_per_class: 20,
        image_size: 16,
        margin: 0.5,
        seed: 0,
    };
    let pool = generate_pool(&spec).unwrap();
    let (a, acc) = pretrain_backbone(&pool, &PretrainConfig::default(), ModelConfig::desk()).unwrap();
    assert!(acc >= 0.8, "{acc}");
    assert!(a.is_frozen());
    let small = SyntheticImageSpec {
        num_classes: 6,
        train_per_class: 30,
        test_per_class: 10,
        ..spec
    };
    let pool = generate_pool(&small).unwrap();
    let (x, _) = pretrain_backbone(&pool, &PretrainConfig::default(), ModelConfig::desk()).unwrap();
    let (y, _) = pretrain_backbone(&pool, &PretrainConfig::default(), ModelConfig::desk()).unwrap();
    for ((_, p), (_, q)) in x.named_params().into_iter().zip(y.named_params()) {
        assert!(p.bitwise_eq(q));
    }
}

#[test]
fn pretraining_below_threshold_reports_accuracy() {
    let spec = SyntheticImageSpec {
        num_classes: 8,
        train_per_class: 4,
        test_per_class: 10,
        image_size: 16,
        margin: 0.0,
        seed: 2,
    };
    let pool = generate_pool(&spec).unwrap();
    let cfg = PretrainConfig {
        epochs: 1,
        learning_rate: 1e-6,
        ..PretrainConfig::default()
    };
    match pretrain_backbone(&pool, &cfg, ModelConfig::desk()) {
        Err(Error::Pretrain { accuracy, required }) => assert!(accuracy < required),
        other => panic!("expected a pretraining error, got {other:?}"),
    }
}

/// At maximum margin a linear head on frozen features separates the
/// classes of every domain.
#[test]
fn linear_probe_on_frozen_features_at_max_margin() {
    let backbone = color_core::harness::Harness::new()
        .backbone(&color_core::RunConfig::desk(Scenario::Dil))
        .unwrap();
    let spec = SyntheticImageSpec {
        num_classes: 10,
        train_per_class: 100,
        test_per_class: 40,
        image_size: 16,
        margin: 1.0,
        seed: 1,
    };
    let seq = generate_dil_sequence(&spec, 6).unwrap();
    let train = TrainConfig {
        epochs: 30,
        learning_rate: 2e-2,
        ..TrainConfig::desk()
    };
    for u in &seq.updates {
        let mut head = ClassifierHead::new(backbone.config().embed_dim, u.label_map.clone(), 0).unwrap();
        fit(Backbone::Frozen(&backbone), None, &mut head, &u.train, &train, None).unwrap();
        let preds = predict_batch(&backbone, None, &head, &u.test.images).unwrap();
        let acc = preds.iter().zip(&u.test.labels).filter(|(p, &l)| p.class_id == l).count() as f64 / u.test.len() as f64;
        assert!(acc >= 0.95, "domain {}: {acc}", u.dataset_id);
    }
}
