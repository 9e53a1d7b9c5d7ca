//! Per-dataset experts: a set of low-rank adapters and a classifier head
//! trained on one dataset while the backbone stays frozen.

mod optim;

pub use optim::{AdamW, CosineSchedule};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::scenarios::Dataset;
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::vit::{encode, patchify, ViTParams};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rank: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_crop: bool,
}

/// Full-scale protocol values.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            weight_decay: 0.0002,
            epochs: 50,
            learning_rate: 1e-3,
            rank: 64,
            seed: 0,
            augment_flip: false,
            augment_crop: false,
        }
    }
}

impl TrainConfig {
    /// Budget used on the synthetic desk suites.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            epochs: 4,
            learning_rate: 5e-3,
            rank: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.rank == 0 {
            return Err(Error::Config(format!("batch size, epochs and rank must be positive: {self:?}")));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} / weight decay {} out of range",
                self.learning_rate, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// `softmax(wᵀ h + b)` over the classes in `label_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[D, C]`
    pub w: Tensor,
    /// `[C]`
    pub b: Tensor,
    pub label_map: Vec<usize>,
}

impl ClassifierHead {
    pub fn new(dim: usize, label_map: Vec<usize>, seed: u64) -> Result<Self> {
        let mut sorted = label_map.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if label_map.is_empty() || sorted.len() != label_map.len() {
            return Err(Error::Contract(format!("label map {label_map:?} must be non-empty and unique")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w: Tensor::trunc_normal(&[dim, label_map.len()], 0.02, &mut rng),
            b: Tensor::zeros(&[label_map.len()]),
            label_map,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn local_index(&self, class_id: usize) -> Option<usize> {
        self.label_map.iter().position(|&c| c == class_id)
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (tape.param(&self.w, trainable), tape.param(&self.b, trainable))
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }

    fn logits(&self, tape: &mut Tape, features: Var, bound: (Var, Var)) -> Result<Var> {
        let z = tape.matmul(features, bound.0)?;
        tape.add_broadcast(z, bound.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub dataset_id: usize,
    pub adapters: AdapterSet,
    pub head: ClassifierHead,
    pub log: Vec<EpochLog>,
    /// Scalars changed by the optimizer in one training step.
    pub updated_scalars: usize,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub probs: Vec<f64>,
}

/// How a training run may touch the backbone.
pub enum Backbone<'a> {
    Frozen(&'a ViTParams),
    Trainable(&'a mut ViTParams),
}

impl Backbone<'_> {
    fn params(&self) -> &ViTParams {
        match self {
            Backbone::Frozen(p) => p,
            Backbone::Trainable(p) => p,
        }
    }
}

pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    pub updated_scalars: usize,
}

fn augment(images: &mut [f32], size: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) {
    let len = size * size * 3;
    for img in images.chunks_mut(len) {
        if cfg.augment_flip && rng.gen_bool(0.5) {
            for y in 0..size {
                for x in 0..size / 2 {
                    for c in 0..3 {
                        img.swap((y * size + x) * 3 + c, (y * size + size - 1 - x) * 3 + c);
                    }
                }
            }
        }
        if cfg.augment_crop {
            let dx = rng.gen_range(-2i32..=2);
            let dy = rng.gen_range(-2i32..=2);
            let src = img.to_vec();
            let clamp = |v: i32| v.clamp(0, size as i32 - 1) as usize;
            for y in 0..size {
                for x in 0..size {
                    let (sx, sy) = (clamp(x as i32 + dx), clamp(y as i32 + dy));
                    for c in 0..3 {
                        img[(y * size + x) * 3 + c] = src[(sy * size + sx) * 3 + c];
                    }
                }
            }
        }
    }
}

/// Mini-batch softmax cross-entropy training of `head` on top of the
/// backbone, optionally through `adapters`. Only tensors reachable through a
/// trainable binding receive updates. With `allowed`, logits of the other
/// classes are masked to `-inf` in the loss.
pub fn fit(
    mut backbone: Backbone<'_>,
    mut adapters: Option<&mut AdapterSet>,
    head: &mut ClassifierHead,
    data: &Dataset,
    cfg: &TrainConfig,
    allowed: Option<&[bool]>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let local: Vec<usize> = data
        .labels
        .iter()
        .map(|&l| {
            head.local_index(l)
                .ok_or_else(|| Error::Data(format!("label {l} is not in the head's label map")))
        })
        .collect::<Result<_>>()?;
    let model_cfg = *backbone.params().config();
    if let Some(a) = adapters.as_deref() {
        a.check_config(&model_cfg)?;
    }
    let backbone_trainable = matches!(backbone, Backbone::Trainable(_));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5EED);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, cfg.total_steps(data.len()));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut updated_scalars = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut images = data.gather(batch);
            augment(&mut images, model_cfg.image_size, cfg, &mut rng);
            let labels: Vec<usize> = batch.iter().map(|&i| local[i]).collect();

            let mut tape = Tape::new();
            let bound_vit = backbone.params().bind(&mut tape, backbone_trainable);
            let bound_adapters = adapters.as_deref().map(|a| a.bind(&mut tape, true));
            let bound_head = head.bind(&mut tape, true);
            let patches = patchify(&mut tape, &model_cfg, &images)?;
            let features = encode(&mut tape, &bound_vit, bound_adapters.as_ref(), patches, batch.len())?;
            let logits = head.logits(&mut tape, features, bound_head)?;
            let loss = tape.cross_entropy(logits, &labels, allowed)?;

            loss_sum += tape.value(loss)[0] * batch.len() as f64;
            correct += count_correct(tape.value(logits), &labels, head.num_classes(), allowed);

            let mut grads: Gradients = tape.backward(loss)?;
            let mut params: Vec<(String, &mut Tensor)> = Vec::new();
            if let Backbone::Trainable(p) = &mut backbone {
                p.collect_grads(&bound_vit, &mut grads)?;
                params.extend(p.params_mut()?.into_iter().map(|(n, t)| (format!("backbone.{n}"), t)));
            }
            if let (Some(a), Some(bound)) = (adapters.as_deref_mut(), bound_adapters.as_ref()) {
                a.collect_grads(bound, &mut grads);
                params.extend(a.params_mut().into_iter().map(|(n, t)| (format!("adapters.{n}"), t)));
            }
            head.w.grad = grads.take(bound_head.0);
            head.b.grad = grads.take(bound_head.1);
            params.extend(head.params_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)));

            let n = opt.step(params, step)?;
            if step == 0 {
                updated_scalars = n;
            }
            step += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(FitOutcome { log, updated_scalars })
}

fn argmax(row: &[f64], allowed: Option<&[bool]>) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in row.iter().enumerate() {
        if allowed.is_some_and(|m| !m[c]) {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = c;
        }
    }
    best
}

fn count_correct(logits: &[f64], labels: &[usize], classes: usize, allowed: Option<&[bool]>) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row, allowed) == l)
        .count()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class predictions of `head` on top of `backbone` (with `adapters`, if
/// any). Ties go to the lowest head index.
pub fn predict_batch(
    backbone: &ViTParams,
    adapters: Option<&AdapterSet>,
    head: &ClassifierHead,
    images: &[f32],
) -> Result<Vec<Prediction>> {
    let image_len = backbone.config().image_len();
    let mut out = Vec::with_capacity(images.len() / image_len.max(1));
    for chunk in images.chunks(EVAL_CHUNK * image_len) {
        let feats = backbone.features(adapters, chunk)?;
        let logits = feats.matmul(&head.w)?;
        for row in logits.data().chunks(head.num_classes()) {
            let z: Vec<f64> = row.iter().zip(head.b.data()).map(|(a, b)| a + b).collect();
            let best = argmax(&z, None);
            out.push(Prediction {
                class_id: head.label_map[best],
                probs: softmax_row(&z),
            });
        }
    }
    Ok(out)
}

impl Expert {
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Reassembles a trained expert, e.g. from a checkpoint.
    pub fn from_parts(dataset_id: usize, adapters: AdapterSet, head: ClassifierHead, log: Vec<EpochLog>) -> Result<Self> {
        if adapters.dataset_id != dataset_id {
            return Err(Error::Data(format!(
                "adapters belong to dataset {}, expert to {dataset_id}",
                adapters.dataset_id
            )));
        }
        if head.w.shape()[1] != head.label_map.len() {
            return Err(Error::Data("head width does not match its label map".into()));
        }
        let updated_scalars = adapters.param_count() + head.param_count();
        Ok(Self {
            dataset_id,
            adapters,
            head,
            log,
            updated_scalars,
            trained: true,
        })
    }

    pub fn param_count(&self) -> usize {
        self.adapters.param_count() + self.head.param_count()
    }

    pub fn predict(&self, backbone: &ViTParams, images: &[f32]) -> Result<Vec<Prediction>> {
        if !self.trained {
            return Err(Error::Contract(format!("expert {} has not been trained", self.dataset_id)));
        }
        predict_batch(backbone, Some(&self.adapters), &self.head, images)
    }

    /// Same predictions through a backbone with the adapters merged in.
    pub fn predict_merged(&self, backbone: &ViTParams, images: &[f32]) -> Result<Vec<Prediction>> {
        if !self.trained {
            return Err(Error::Contract(format!("expert {} has not been trained", self.dataset_id)));
        }
        let merged = backbone.merged(&self.adapters)?;
        predict_batch(&merged, None, &self.head, images)
    }

    /// An expert with fresh adapters and head that has not been trained.
    pub fn untrained(backbone: &ViTParams, label_map: Vec<usize>, dataset_id: usize, cfg: &TrainConfig) -> Result<Self> {
        let config = backbone.config();
        let adapters = AdapterSet::new(config, cfg.rank, cfg.seed, dataset_id)?;
        let head = ClassifierHead::new(config.embed_dim, label_map, cfg.seed.wrapping_add(1))?;
        Ok(Self {
            dataset_id,
            adapters,
            head,
            log: Vec::new(),
            updated_scalars: 0,
            trained: false,
        })
    }
}

/// Trains the adapters and head for one dataset. The backbone must be
/// frozen and is only read.
pub fn train_expert(
    backbone: &ViTParams,
    data: &Dataset,
    label_map: Vec<usize>,
    dataset_id: usize,
    cfg: &TrainConfig,
) -> Result<Expert> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("experts train on a frozen backbone only".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract(format!("dataset {dataset_id} is empty")));
    }
    let mut expert = Expert::untrained(backbone, label_map, dataset_id, cfg)?;
    let outcome = fit(
        Backbone::Frozen(backbone),
        Some(&mut expert.adapters),
        &mut expert.head,
        data,
        cfg,
        None,
    )?;
    expert.log = outcome.log;
    expert.updated_scalars = outcome.updated_scalars;
    expert.trained = true;
    Ok(expert)
}
