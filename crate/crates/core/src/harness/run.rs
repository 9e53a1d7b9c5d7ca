use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Method, RunConfig};
use super::report::{write_results_csv, write_sweep_csv};
use crate::error::{Error, Result};
use crate::experts::{fit, predict_batch, train_expert, Backbone, ClassifierHead, EpochLog, Expert, TrainConfig};
use crate::lora::{count_trainable_params, AdapterSet};
use crate::metrics::{average_accuracy, forgetting, mean_std, AccuracyMatrix};
use crate::router::{prototypes_from_features, routing_features, Extractor, PrototypeSet, Router};
use crate::scenarios::{
    generate_cil_sequence, generate_dil_sequence, generate_pool, generate_til_sequence, mix_seed, pretrain_backbone,
    Dataset, DatasetSequence, Scenario,
};
use crate::tensor::Tensor;
use crate::vit::ViTParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    /// 1-based count of updates seen.
    pub update_index: usize,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
    pub routing_acc: Option<f64>,
    /// Accuracy the same experts reach when told the dataset id.
    pub oracle_avg_acc: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub init_seed: u64,
    pub kmeans_seed: u64,
    pub matrix: AccuracyMatrix,
    pub oracle_matrix: Option<AccuracyMatrix>,
    pub updates: Vec<UpdateMetrics>,
}

impl RepeatRecord {
    pub fn final_metrics(&self) -> &UpdateMetrics {
        self.updates.last().expect("a repeat covers at least one update")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub params_trainable: usize,
    pub repeats: Vec<RepeatRecord>,
}

impl RunRecord {
    pub fn final_avg_accs(&self) -> Vec<f64> {
        self.repeats.iter().map(|r| r.final_metrics().avg_acc).collect()
    }

    pub fn final_oracle_accs(&self) -> Option<Vec<f64>> {
        self.repeats.iter().map(|r| r.final_metrics().oracle_avg_acc).collect()
    }

    pub fn final_forgetting(&self) -> Option<Vec<f64>> {
        self.repeats.iter().map(|r| r.final_metrics().forgetting).collect()
    }

    pub fn final_routing_accs(&self) -> Option<Vec<f64>> {
        self.repeats.iter().map(|r| r.final_metrics().routing_acc).collect()
    }

    /// Mean and, with at least two repeats, standard deviation.
    pub fn summary(values: &[f64]) -> (f64, Option<f64>) {
        let (m, s) = mean_std(values);
        (m, (values.len() >= 2).then_some(s))
    }
}

/// Everything needed to re-evaluate one finished repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub repeat: usize,
    pub backbone: ViTParams,
    pub experts: Vec<Expert>,
    pub router: Option<Router>,
    /// Head of the single shared model (fine-tuning baselines).
    pub shared_head: Option<ClassifierHead>,
    pub record: RepeatRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Rank,
    Clusters,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Clusters => "clusters",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "clusters" => Ok(SweepAxis::Clusters),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub records: Vec<RunRecord>,
    /// Values whose run failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

pub fn generate_sequence(cfg: &RunConfig) -> Result<DatasetSequence> {
    let spec = cfg.data_spec();
    match cfg.scenario {
        Scenario::Dil => generate_dil_sequence(&spec, cfg.num_updates),
        Scenario::Cil => generate_cil_sequence(&spec, cfg.num_updates, cfg.classes_per_update()),
        Scenario::Til => generate_til_sequence(&spec, cfg.num_updates, cfg.classes_per_update()),
    }
}

/// Runs experiments while caching pretrained backbones and trained
/// experts, so that runs differing only in routing reuse training work.
#[derive(Default)]
pub struct Harness {
    backbones: HashMap<String, ViTParams>,
    experts: HashMap<String, Expert>,
    /// Write results and checkpoints under the output root.
    pub write_outputs: bool,
}

fn backbone_key(cfg: &RunConfig) -> String {
    match &cfg.backbone {
        Some(path) => format!("file:{}", path.display()),
        None => format!("{:?}|{:?}|{:?}", cfg.model(), cfg.pool_spec(), cfg.pretrain()),
    }
}

pub fn save_backbone(backbone: &ViTParams, pool_accuracy: Option<f64>, path: &Path) -> Result<()> {
    let metadata = serde_json::json!({
        "kind": "backbone",
        "model": backbone.config(),
        "pool_accuracy": pool_accuracy,
    });
    let tensors = backbone
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
        .collect();
    Checkpoint { metadata, tensors }.save(path)
}

fn model_from_meta(meta: &serde_json::Value) -> Result<crate::vit::ModelConfig> {
    serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Data(format!("checkpoint metadata lacks a model config: {e}")))
}

/// Loads a frozen backbone written by [`save_backbone`] or by a run.
pub fn load_backbone(path: &Path) -> Result<ViTParams> {
    let ckpt = Checkpoint::load(path)?;
    let model = model_from_meta(&ckpt.metadata)?;
    ViTParams::from_named(model, ckpt.with_prefix("backbone."), true)
}

impl Harness {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn writing_outputs() -> Self {
        Self {
            write_outputs: true,
            ..Self::default()
        }
    }

    /// The frozen backbone for `cfg`: loaded, cached, or pretrained now.
    pub fn backbone(&mut self, cfg: &RunConfig) -> Result<ViTParams> {
        let key = backbone_key(cfg);
        if let Some(b) = self.backbones.get(&key) {
            return Ok(b.clone());
        }
        let backbone = match &cfg.backbone {
            Some(path) => {
                let b = load_backbone(path)?;
                if *b.config() != cfg.model() {
                    return Err(Error::Config(format!(
                        "backbone {} was built for {:?}, the run expects {:?}",
                        path.display(),
                        b.config(),
                        cfg.model()
                    )));
                }
                b
            }
            None => {
                let pool = generate_pool(&cfg.pool_spec())?;
                pretrain_backbone(&pool, &cfg.pretrain(), cfg.model())?.0
            }
        };
        self.backbones.insert(key, backbone.clone());
        Ok(backbone)
    }

    fn expert(
        &mut self,
        cfg: &RunConfig,
        backbone: &ViTParams,
        data: &Dataset,
        label_map: &[usize],
        dataset_id: usize,
        train: &TrainConfig,
    ) -> Result<Expert> {
        let key = format!(
            "{}|{:?}|{}|{}|{:?}|{dataset_id}|{:?}",
            backbone_key(cfg),
            cfg.data_spec(),
            cfg.scenario.as_str(),
            cfg.num_updates,
            train,
            label_map
        );
        if let Some(e) = self.experts.get(&key) {
            return Ok(e.clone());
        }
        let e = train_expert(backbone, data, label_map.to_vec(), dataset_id, train)?;
        self.experts.insert(key, e.clone());
        Ok(e)
    }

    pub fn run(&mut self, cfg: &RunConfig) -> Result<RunRecord> {
        Ok(self.run_with_states(cfg)?.0)
    }

    /// Runs every repeat and also returns the final state of each.
    pub fn run_with_states(&mut self, cfg: &RunConfig) -> Result<(RunRecord, Vec<RunState>)> {
        cfg.validate()?;
        let seq = generate_sequence(cfg)?;
        let backbone = self.backbone(cfg)?;
        if !backbone.is_frozen() {
            return Err(Error::Contract("the pretrained backbone must be frozen".into()));
        }
        let model = cfg.model();
        let params_trainable = match cfg.method {
            Method::Color | Method::Colorpp | Method::Oracle => {
                count_trainable_params(&model, cfg.rank, cfg.classes_per_update())
            }
            Method::Joint if !cfg.joint_full_finetune => count_trainable_params(&model, cfg.rank, seq.total_classes()),
            Method::Ftseq | Method::Joint => backbone.param_count() + model.embed_dim * seq.total_classes() + seq.total_classes(),
        };
        let mut repeats = Vec::with_capacity(cfg.repeats);
        let mut states = Vec::with_capacity(cfg.repeats);
        for repeat in 0..cfg.repeats {
            let state = match cfg.method {
                Method::Color | Method::Colorpp | Method::Oracle => self.run_experts(cfg, &seq, &backbone, repeat)?,
                Method::Ftseq => run_ftseq(cfg, &seq, &backbone, repeat)?,
                Method::Joint => self.run_joint(cfg, &seq, &backbone, repeat)?,
            };
            repeats.push(state.record.clone());
            states.push(state);
        }
        let record = RunRecord {
            run_id: cfg.run_id(),
            config: cfg.clone(),
            params_trainable,
            repeats,
        };
        if self.write_outputs {
            write_run_outputs(&record, &states, &seq)?;
        }
        Ok((record, states))
    }

    fn run_experts(&mut self, cfg: &RunConfig, seq: &DatasetSequence, backbone: &ViTParams, repeat: usize) -> Result<RunState> {
        let train = cfg.train(repeat);
        let kmeans_seed = cfg.kmeans_seed.wrapping_add(repeat as u64);
        let routed = seq.scenario != Scenario::Til && cfg.method != Method::Oracle;
        let mut router = routed.then(|| {
            Router::new(match cfg.method {
                Method::Colorpp => Extractor::FirstExpert,
                _ => Extractor::Frozen,
            })
        });
        let mut experts: Vec<Expert> = Vec::with_capacity(seq.updates.len());
        let mut eval = Evaluator::new(seq, backbone, router.is_some());
        let mut updates = Vec::with_capacity(seq.updates.len());
        for (t, u) in seq.updates.iter().enumerate() {
            let start = Instant::now();
            let expert_cfg = TrainConfig {
                seed: mix_seed(&[train.seed, t as u64]),
                ..train.clone()
            };
            let expert = self
                .expert(cfg, backbone, &u.train, &u.label_map, u.dataset_id, &expert_cfg)
                .map_err(|e| e.in_update(t + 1, "train"))?;
            experts.push(expert);
            if let Some(router) = router.as_mut() {
                let set = (|| {
                    let first = (router.extractor() == Extractor::FirstExpert).then(|| &experts[0]);
                    let feats = routing_features(backbone, router.extractor(), first, &u.train.images)?;
                    prototypes_from_features(
                        &feats,
                        router.extractor(),
                        cfg.effective_clusters(),
                        mix_seed(&[kmeans_seed, t as u64]),
                        u.dataset_id,
                    )
                })()
                .map_err(|e| e.in_update(t + 1, "prototypes"))?;
                router.push(set).map_err(|e| e.in_update(t + 1, "prototypes"))?;
            }
            eval.row(t, &experts, router.as_ref()).map_err(|e| e.in_update(t + 1, "evaluate"))?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            updates.push(eval.metrics(t + 1, cfg.record_timing.then_some(elapsed))?);
        }
        let (matrix, oracle_matrix) = eval.into_matrices();
        Ok(RunState {
            config: cfg.clone(),
            repeat,
            backbone: backbone.clone(),
            experts,
            router,
            shared_head: None,
            record: RepeatRecord {
                repeat,
                init_seed: train.seed,
                kmeans_seed,
                matrix,
                oracle_matrix,
                updates,
            },
        })
    }

    fn run_joint(&mut self, cfg: &RunConfig, seq: &DatasetSequence, backbone: &ViTParams, repeat: usize) -> Result<RunState> {
        let train = cfg.train(repeat);
        let start = Instant::now();
        let all = Dataset::concat(seq.updates.iter().map(|u| &u.train));
        let classes = union_classes(seq);
        let (model, experts, head) = if cfg.joint_full_finetune {
            let mut model = backbone.thawed_copy();
            let mut head = ClassifierHead::new(cfg.embed_dim, classes, train.seed)?;
            fit(Backbone::Trainable(&mut model), None, &mut head, &all, &train, None)
                .map_err(|e| e.in_update(seq.updates.len(), "train"))?;
            model.freeze();
            (model, Vec::new(), Some(head))
        } else {
            let e = train_expert(backbone, &all, classes, 0, &train).map_err(|e| e.in_update(seq.updates.len(), "train"))?;
            (backbone.clone(), vec![e], None)
        };
        let predict = |images: &[f32]| -> Result<Vec<usize>> {
            let p = match &head {
                Some(h) => predict_batch(&model, None, h, images)?,
                None => experts[0].predict(&model, images)?,
            };
            Ok(p.into_iter().map(|p| p.class_id).collect())
        };
        let mut matrix = AccuracyMatrix::new(seq.updates.iter().map(|u| u.test.len()).collect())?;
        let hits: Vec<usize> = seq
            .updates
            .iter()
            .map(|u| Ok(count_hits(&predict(&u.test.images)?, &u.test.labels)))
            .collect::<Result<_>>()
            .map_err(|e: Error| e.in_update(seq.updates.len(), "evaluate"))?;
        for t in 1..=seq.updates.len() {
            for tau in 1..=t {
                matrix.record(t, tau, hits[tau - 1])?;
            }
        }
        let t = seq.updates.len();
        let updates = vec![UpdateMetrics {
            update_index: t,
            avg_acc: average_accuracy(&matrix, t)?,
            forgetting: None,
            routing_acc: None,
            oracle_avg_acc: None,
            wall_ms: cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        }];
        Ok(RunState {
            config: cfg.clone(),
            repeat,
            backbone: model,
            experts,
            router: None,
            shared_head: head,
            record: RepeatRecord {
                repeat,
                init_seed: train.seed,
                kmeans_seed: cfg.kmeans_seed.wrapping_add(repeat as u64),
                matrix,
                oracle_matrix: None,
                updates,
            },
        })
    }

    /// One run per value of `axis`; every other setting stays fixed. A
    /// failing value is recorded and the sweep continues.
    pub fn sweep(&mut self, cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepResult> {
        if values.is_empty() || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sweep values {values:?} must be non-empty and strictly increasing")));
        }
        let configs: Vec<RunConfig> = values
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                match axis {
                    SweepAxis::Rank => c.rank = v,
                    SweepAxis::Clusters => c.clusters = Some(v),
                }
                c.validate().map(|_| c)
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for (c, &v) in configs.iter().zip(values) {
            match self.run(c) {
                Ok(r) => records.push(r),
                Err(e) => failures.push((v, e.to_string())),
            }
        }
        let result = SweepResult {
            axis,
            values: values.to_vec(),
            records,
            failures,
        };
        if self.write_outputs {
            let dir = cfg.output_root().join(format!("sweep-{}-{}", axis.as_str(), cfg.run_id()));
            write_sweep_csv(&result, &dir.join("sweep.csv"))?;
        }
        Ok(result)
    }
}

pub fn run_continual(cfg: &RunConfig) -> Result<RunRecord> {
    Harness::new().run(cfg)
}

pub fn run_ftseq_baseline(cfg: &RunConfig) -> Result<RunRecord> {
    Harness::new().run(&RunConfig {
        method: Method::Ftseq,
        ..cfg.clone()
    })
}

pub fn run_joint_upper_bound(cfg: &RunConfig) -> Result<RunRecord> {
    Harness::new().run(&RunConfig {
        method: Method::Joint,
        ..cfg.clone()
    })
}

pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepResult> {
    Harness::new().sweep(cfg, axis, values)
}

fn union_classes(seq: &DatasetSequence) -> Vec<usize> {
    let mut classes: Vec<usize> = seq.updates.iter().flat_map(|u| u.label_map.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn count_hits(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn run_ftseq(cfg: &RunConfig, seq: &DatasetSequence, backbone: &ViTParams, repeat: usize) -> Result<RunState> {
    let train = cfg.train(repeat);
    let classes = union_classes(seq);
    let mut model = backbone.thawed_copy();
    let mut head = ClassifierHead::new(cfg.embed_dim, classes.clone(), train.seed)?;
    let mut matrix = AccuracyMatrix::new(seq.updates.iter().map(|u| u.test.len()).collect())?;
    let mut updates = Vec::new();
    for (t, u) in seq.updates.iter().enumerate() {
        let start = Instant::now();
        let mask: Option<Vec<bool>> = (seq.scenario != Scenario::Dil)
            .then(|| classes.iter().map(|c| u.label_map.contains(c)).collect());
        let step_cfg = TrainConfig {
            seed: mix_seed(&[train.seed, t as u64]),
            ..train.clone()
        };
        fit(Backbone::Trainable(&mut model), None, &mut head, &u.train, &step_cfg, mask.as_deref())
            .map_err(|e| e.in_update(t + 1, "train"))?;
        for (tau, past) in seq.updates[..=t].iter().enumerate() {
            let preds: Vec<usize> = predict_batch(&model, None, &head, &past.test.images)
                .map_err(|e| e.in_update(t + 1, "evaluate"))?
                .into_iter()
                .map(|p| p.class_id)
                .collect();
            matrix.record(t + 1, tau + 1, count_hits(&preds, &past.test.labels))?;
        }
        updates.push(UpdateMetrics {
            update_index: t + 1,
            avg_acc: average_accuracy(&matrix, t + 1)?,
            forgetting: (t >= 1).then(|| forgetting(&matrix, t + 1)).transpose()?,
            routing_acc: None,
            oracle_avg_acc: None,
            wall_ms: cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        });
    }
    model.freeze();
    Ok(RunState {
        config: cfg.clone(),
        repeat,
        backbone: model,
        experts: Vec::new(),
        router: None,
        shared_head: Some(head),
        record: RepeatRecord {
            repeat,
            init_seed: train.seed,
            kmeans_seed: cfg.kmeans_seed.wrapping_add(repeat as u64),
            matrix,
            oracle_matrix: None,
            updates,
        },
    })
}

/// Row-by-row evaluation of expert methods. Experts never change after
/// training, so predictions per (expert, test set) and routing features per
/// test set are computed once.
struct Evaluator<'a> {
    seq: &'a DatasetSequence,
    backbone: &'a ViTParams,
    predictions: HashMap<(usize, usize), Vec<usize>>,
    features: HashMap<usize, Tensor>,
    routed: AccuracyMatrix,
    oracle: AccuracyMatrix,
    routing_hits: Vec<usize>,
    has_router: bool,
}

impl<'a> Evaluator<'a> {
    fn new(seq: &'a DatasetSequence, backbone: &'a ViTParams, has_router: bool) -> Self {
        let sizes: Vec<usize> = seq.updates.iter().map(|u| u.test.len()).collect();
        Self {
            seq,
            backbone,
            predictions: HashMap::new(),
            features: HashMap::new(),
            routed: AccuracyMatrix::new(sizes.clone()).expect("generated test sets are non-empty"),
            oracle: AccuracyMatrix::new(sizes).expect("generated test sets are non-empty"),
            routing_hits: Vec::new(),
            has_router,
        }
    }

    fn predictions(&mut self, experts: &[Expert], e: usize, tau: usize) -> Result<&Vec<usize>> {
        if !self.predictions.contains_key(&(e, tau)) {
            let p = experts[e]
                .predict(self.backbone, &self.seq.updates[tau].test.images)?
                .into_iter()
                .map(|p| p.class_id)
                .collect();
            self.predictions.insert((e, tau), p);
        }
        Ok(&self.predictions[&(e, tau)])
    }

    /// Fills row `t + 1` using experts `0..=t` and, if given, the router's
    /// first `t + 1` prototype sets.
    fn row(&mut self, t: usize, experts: &[Expert], router: Option<&Router>) -> Result<()> {
        let mut routing_hits = 0;
        let partial = match router {
            Some(router) => {
                let mut partial = Router::new(router.extractor());
                for set in &router.sets()[..=t] {
                    partial.push(set.clone())?;
                }
                Some(partial)
            }
            None => None,
        };
        for tau in 0..=t {
            let labels = &self.seq.updates[tau].test.labels;
            let own = count_hits(self.predictions(experts, tau, tau)?, labels);
            self.oracle.record(t + 1, tau + 1, own)?;
            let Some(router) = partial.as_ref() else {
                self.routed.record(t + 1, tau + 1, own)?;
                continue;
            };
            if !self.features.contains_key(&tau) {
                let first = (router.extractor() == Extractor::FirstExpert).then(|| &experts[0]);
                let f = routing_features(self.backbone, router.extractor(), first, &self.seq.updates[tau].test.images)?;
                self.features.insert(tau, f);
            }
            let routes = router.identify_batch(&self.features[&tau])?;
            let mut hits = 0;
            for (i, &r) in routes.iter().enumerate() {
                let e = experts
                    .iter()
                    .position(|x| x.dataset_id == r)
                    .ok_or_else(|| Error::Contract(format!("no expert for dataset {r}")))?;
                if self.predictions(experts, e, tau)?[i] == labels[i] {
                    hits += 1;
                }
                if r == self.seq.updates[tau].dataset_id {
                    routing_hits += 1;
                }
            }
            self.routed.record(t + 1, tau + 1, hits)?;
        }
        self.routing_hits.push(routing_hits);
        Ok(())
    }

    fn metrics(&self, t: usize, wall_ms: Option<f64>) -> Result<UpdateMetrics> {
        let seen: usize = self.seq.updates[..t].iter().map(|u| u.test.len()).sum();
        let routed_any = self.has_router;
        Ok(UpdateMetrics {
            update_index: t,
            avg_acc: average_accuracy(&self.routed, t)?,
            forgetting: (t >= 2).then(|| forgetting(&self.routed, t)).transpose()?,
            routing_acc: routed_any.then(|| self.routing_hits[t - 1] as f64 / seen as f64),
            oracle_avg_acc: routed_any.then(|| average_accuracy(&self.oracle, t)).transpose()?,
            wall_ms,
        })
    }

    fn into_matrices(self) -> (AccuracyMatrix, Option<AccuracyMatrix>) {
        if self.has_router {
            (self.routed, Some(self.oracle))
        } else {
            (self.oracle, None)
        }
    }
}

/// Recomputes a finished repeat's metrics from its saved state. Only
/// expert-based methods are replayed row by row; the shared-model baselines
/// reproduce their final row.
pub fn replay(state: &RunState) -> Result<RepeatRecord> {
    let cfg = &state.config;
    let seq = generate_sequence(cfg)?;
    match cfg.method {
        Method::Color | Method::Colorpp | Method::Oracle => {
            let mut eval = Evaluator::new(&seq, &state.backbone, state.router.is_some());
            let mut updates = Vec::new();
            for t in 0..seq.updates.len() {
                eval.row(t, &state.experts[..=t], state.router.as_ref())?;
                updates.push(eval.metrics(t + 1, None)?);
            }
            let (matrix, oracle_matrix) = eval.into_matrices();
            Ok(RepeatRecord {
                repeat: state.repeat,
                init_seed: state.record.init_seed,
                kmeans_seed: state.record.kmeans_seed,
                matrix,
                oracle_matrix,
                updates,
            })
        }
        Method::Ftseq | Method::Joint => {
            let t = seq.updates.len();
            let mut matrix = state.record.matrix.clone();
            for (tau, u) in seq.updates.iter().enumerate() {
                let preds = match (&state.shared_head, state.experts.first()) {
                    (Some(h), _) => predict_batch(&state.backbone, None, h, &u.test.images)?,
                    (None, Some(e)) => e.predict(&state.backbone, &u.test.images)?,
                    (None, None) => return Err(Error::Data("state holds no model".into())),
                };
                let ids: Vec<usize> = preds.into_iter().map(|p| p.class_id).collect();
                matrix.record(t, tau + 1, count_hits(&ids, &u.test.labels))?;
            }
            let mut updates = state.record.updates.clone();
            if let Some(last) = updates.last_mut() {
                last.avg_acc = average_accuracy(&matrix, t)?;
                last.forgetting = match cfg.method {
                    Method::Ftseq if t >= 2 => Some(forgetting(&matrix, t)?),
                    _ => None,
                };
                last.wall_ms = None;
            }
            Ok(RepeatRecord {
                matrix,
                updates,
                ..state.record.clone()
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertMeta {
    dataset_id: usize,
    label_map: Vec<usize>,
    log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    model: crate::vit::ModelConfig,
    config: RunConfig,
    repeat: usize,
    experts: Vec<ExpertMeta>,
    router: Option<(Extractor, Vec<usize>)>,
    shared_head: Option<Vec<usize>>,
    record: RepeatRecord,
}

impl RunState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .backbone
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
            .collect();
        for (i, e) in self.experts.iter().enumerate() {
            for (n, t) in e.adapters.named_params() {
                tensors.push((format!("experts.{i}.adapters.{n}"), t.clone()));
            }
            tensors.push((format!("experts.{i}.head.w"), e.head.w.clone()));
            tensors.push((format!("experts.{i}.head.b"), e.head.b.clone()));
        }
        if let Some(r) = &self.router {
            for (i, s) in r.sets().iter().enumerate() {
                tensors.push((format!("router.{i}.centroids"), s.centroids.clone()));
            }
        }
        if let Some(h) = &self.shared_head {
            tensors.push(("head.w".into(), h.w.clone()));
            tensors.push(("head.b".into(), h.b.clone()));
        }
        let meta = StateMeta {
            kind: "run".into(),
            model: *self.backbone.config(),
            config: self.config.clone(),
            repeat: self.repeat,
            experts: self
                .experts
                .iter()
                .map(|e| ExpertMeta {
                    dataset_id: e.dataset_id,
                    label_map: e.head.label_map.clone(),
                    log: e.log.clone(),
                })
                .collect(),
            router: self
                .router
                .as_ref()
                .map(|r| (r.extractor(), r.sets().iter().map(|s| s.dataset_id).collect())),
            shared_head: self.shared_head.as_ref().map(|h| h.label_map.clone()),
            record: self.record.clone(),
        };
        Checkpoint {
            metadata: serde_json::to_value(meta).expect("state metadata serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Data(format!("not a run checkpoint: {e}")))?;
        let backbone = ViTParams::from_named(meta.model, ckpt.with_prefix("backbone."), true)?;
        let tensor = |name: String| {
            ckpt.tensor(&name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))
        };
        let mut experts = Vec::with_capacity(meta.experts.len());
        for (i, em) in meta.experts.into_iter().enumerate() {
            let adapters = AdapterSet::from_named(em.dataset_id, ckpt.with_prefix(&format!("experts.{i}.adapters.")))?;
            adapters.check_config(&meta.model)?;
            let head = ClassifierHead {
                w: tensor(format!("experts.{i}.head.w"))?,
                b: tensor(format!("experts.{i}.head.b"))?,
                label_map: em.label_map,
            };
            experts.push(Expert::from_parts(em.dataset_id, adapters, head, em.log)?);
        }
        let router = match meta.router {
            Some((extractor, ids)) => {
                let mut r = Router::new(extractor);
                for (i, id) in ids.into_iter().enumerate() {
                    r.push(PrototypeSet::new(id, tensor(format!("router.{i}.centroids"))?, extractor)?)?;
                }
                Some(r)
            }
            None => None,
        };
        let shared_head = match meta.shared_head {
            Some(label_map) => Some(ClassifierHead {
                w: tensor("head.w".into())?,
                b: tensor("head.b".into())?,
                label_map,
            }),
            None => None,
        };
        Ok(Self {
            config: meta.config,
            repeat: meta.repeat,
            backbone,
            experts,
            router,
            shared_head,
            record: meta.record,
        })
    }
}

pub fn run_dir(record: &RunRecord) -> PathBuf {
    record.config.output_root().join(&record.run_id)
}

fn write_run_outputs(record: &RunRecord, states: &[RunState], seq: &DatasetSequence) -> Result<()> {
    let dir = run_dir(record);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_results_csv(std::slice::from_ref(record), &dir.join("results.csv"))?;
    let json = serde_json::to_vec_pretty(record).map_err(|e| Error::Data(format!("record: {e}")))?;
    let path = dir.join("record.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for s in states {
        s.to_checkpoint().save(&dir.join(format!("repeat{}.ckpt", s.repeat)))?;
    }
    if record.config.export_data {
        super::export::export_sequence(seq, &dir.join("data"))?;
    }
    Ok(())
}
