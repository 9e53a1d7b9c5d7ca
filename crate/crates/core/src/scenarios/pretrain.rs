use serde::{Deserialize, Serialize};

use super::PretrainPool;
use crate::error::{Error, Result};
use crate::experts::{fit, predict_batch, Backbone, ClassifierHead, TrainConfig};
use crate::vit::{ModelConfig, ViTParams};

/// Held-out accuracy a pretrained backbone must reach before use.
pub const PRETRAIN_MIN_ACCURACY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 0.0002,
            seed: 0,
        }
    }
}

/// Trains every backbone parameter plus a throwaway head on the pool, checks
/// held-out accuracy, and returns the frozen backbone with that accuracy.
pub fn pretrain_backbone(
    pool: &PretrainPool,
    config: &PretrainConfig,
    model: ModelConfig,
) -> Result<(ViTParams, f64)> {
    if pool.train.is_empty() || pool.test.is_empty() {
        return Err(Error::Data("pretraining pool is empty".into()));
    }
    if pool.train.image_len != model.image_len() {
        return Err(Error::Data(format!(
            "pool images have {} values, the model expects {}",
            pool.train.image_len,
            model.image_len()
        )));
    }
    let mut vit = ViTParams::init(model, config.seed)?;
    let mut head = ClassifierHead::new(model.embed_dim, (0..pool.num_classes).collect(), config.seed ^ 0x4EAD)?;
    let train_cfg = TrainConfig {
        batch_size: config.batch_size,
        weight_decay: config.weight_decay,
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        rank: 1,
        seed: config.seed,
        augment_flip: false,
        augment_crop: false,
    };
    fit(Backbone::Trainable(&mut vit), None, &mut head, &pool.train, &train_cfg, None)?;

    let preds = predict_batch(&vit, None, &head, &pool.test.images)?;
    let correct = preds.iter().zip(&pool.test.labels).filter(|(p, &l)| p.class_id == l).count();
    let accuracy = correct as f64 / pool.test.len() as f64;
    if accuracy < PRETRAIN_MIN_ACCURACY {
        return Err(Error::Pretrain {
            accuracy,
            required: PRETRAIN_MIN_ACCURACY,
        });
    }
    vit.freeze();
    Ok((vit, accuracy))
}
