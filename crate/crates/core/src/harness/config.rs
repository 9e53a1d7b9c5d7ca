use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::TrainConfig;
use crate::scenarios::{PretrainConfig, Scenario, SyntheticImageSpec};
use crate::vit::ModelConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "COLOR_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Experts routed by frozen-feature prototypes.
    Color,
    /// Experts routed by prototypes of first-expert features.
    Colorpp,
    /// Experts selected by the true dataset id.
    Oracle,
    /// One shared network fine-tuned sequentially with class masking.
    Ftseq,
    /// One model trained on the union of all updates.
    Joint,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Color, Method::Colorpp, Method::Oracle, Method::Ftseq, Method::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Color => "color",
            Method::Colorpp => "colorpp",
            Method::Oracle => "oracle",
            Method::Ftseq => "ftseq",
            Method::Joint => "joint",
        }
    }

    pub fn uses_experts(self) -> bool {
        matches!(self, Method::Color | Method::Colorpp | Method::Oracle)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Every setting of one experiment. All keys are flat so that a config
/// file and command-line flags can address them by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub method: Method,
    pub rank: usize,
    /// Prototypes per dataset; `None` picks 5 for DIL and twice the classes
    /// per update otherwise.
    pub clusters: Option<usize>,
    pub data_seed: u64,
    pub init_seed: u64,
    pub kmeans_seed: u64,
    pub repeats: usize,
    pub output_dir: Option<PathBuf>,

    pub num_classes: usize,
    pub num_updates: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub margin: f64,

    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub augment_flip: bool,
    pub augment_crop: bool,

    /// Pretrained backbone checkpoint; pretrained in-process when unset.
    pub backbone: Option<PathBuf>,
    pub pool_classes: usize,
    pub pool_train_per_class: usize,
    pub pool_test_per_class: usize,
    pub pool_seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,

    /// Joint baseline fine-tunes the whole network instead of one adapter set.
    pub joint_full_finetune: bool,
    /// Fill `wall_ms`; off by default so result files are reproducible.
    pub record_timing: bool,
    /// Write the generated datasets next to the results.
    pub export_data: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(Scenario::Dil)
    }
}

impl RunConfig {
    /// Desk-scale suite for a scenario: 10 classes over 6 domains for DIL,
    /// 40 classes in 10 updates of 4 otherwise.
    pub fn desk(scenario: Scenario) -> Self {
        let model = ModelConfig::desk();
        let train = TrainConfig::desk();
        let pretrain = PretrainConfig::default();
        let (num_classes, num_updates, train_per_class, test_per_class) = match scenario {
            Scenario::Dil => (10, 6, 100, 50),
            Scenario::Cil | Scenario::Til => (40, 10, 50, 25),
        };
        Self {
            scenario,
            method: Method::Color,
            rank: train.rank,
            clusters: None,
            data_seed: 1,
            init_seed: 0,
            kmeans_seed: 0,
            repeats: 3,
            output_dir: None,
            num_classes,
            num_updates,
            train_per_class,
            test_per_class,
            margin: 0.5,
            image_size: model.image_size,
            patch_size: model.patch_size,
            embed_dim: model.embed_dim,
            num_layers: model.num_layers,
            num_heads: model.num_heads,
            ffn_hidden: model.ffn_hidden,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            augment_flip: train.augment_flip,
            augment_crop: train.augment_crop,
            backbone: None,
            pool_classes: 40,
            pool_train_per_class: 60,
            pool_test_per_class: 20,
            pool_seed: pretrain.seed,
            pretrain_epochs: pretrain.epochs,
            pretrain_lr: pretrain.learning_rate,
            joint_full_finetune: false,
            record_timing: false,
            export_data: false,
        }
    }

    /// Builds a config from flat `key = value` pairs on top of the desk
    /// defaults of the pairs' scenario.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let scenario = match pairs.get("scenario") {
            Some(s) => s.parse()?,
            None => Scenario::Dil,
        };
        let mut cfg = Self::desk(scenario);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        fn opt_path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        match key {
            "scenario" => self.scenario = value.parse()?,
            "method" => self.method = value.parse()?,
            "rank" => self.rank = p(key, value)?,
            "clusters" => {
                self.clusters = match value.trim() {
                    "" | "auto" => None,
                    v => Some(p(key, v)?),
                }
            }
            "data_seed" => self.data_seed = p(key, value)?,
            "init_seed" => self.init_seed = p(key, value)?,
            "kmeans_seed" => self.kmeans_seed = p(key, value)?,
            "repeats" => self.repeats = p(key, value)?,
            "output_dir" => self.output_dir = opt_path(value),
            "num_classes" => self.num_classes = p(key, value)?,
            "num_updates" => self.num_updates = p(key, value)?,
            "train_per_class" => self.train_per_class = p(key, value)?,
            "test_per_class" => self.test_per_class = p(key, value)?,
            "margin" => self.margin = p(key, value)?,
            "image_size" => self.image_size = p(key, value)?,
            "patch_size" => self.patch_size = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "num_layers" => self.num_layers = p(key, value)?,
            "num_heads" => self.num_heads = p(key, value)?,
            "ffn_hidden" => self.ffn_hidden = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "augment_flip" => self.augment_flip = p(key, value)?,
            "augment_crop" => self.augment_crop = p(key, value)?,
            "backbone" => self.backbone = opt_path(value),
            "pool_classes" => self.pool_classes = p(key, value)?,
            "pool_train_per_class" => self.pool_train_per_class = p(key, value)?,
            "pool_test_per_class" => self.pool_test_per_class = p(key, value)?,
            "pool_seed" => self.pool_seed = p(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = p(key, value)?,
            "pretrain_lr" => self.pretrain_lr = p(key, value)?,
            "joint_full_finetune" => self.joint_full_finetune = p(key, value)?,
            "record_timing" => self.record_timing = p(key, value)?,
            "export_data" => self.export_data = p(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as a flat string pair, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("scenario", self.scenario.as_str().to_string()),
            ("method", self.method.as_str().to_string()),
            ("rank", self.rank.to_string()),
            ("clusters", self.clusters.map_or("auto".into(), |k| k.to_string())),
            ("data_seed", self.data_seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("kmeans_seed", self.kmeans_seed.to_string()),
            ("repeats", self.repeats.to_string()),
            ("output_dir", opt(&self.output_dir)),
            ("num_classes", self.num_classes.to_string()),
            ("num_updates", self.num_updates.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("margin", self.margin.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("augment_crop", self.augment_crop.to_string()),
            ("backbone", opt(&self.backbone)),
            ("pool_classes", self.pool_classes.to_string()),
            ("pool_train_per_class", self.pool_train_per_class.to_string()),
            ("pool_test_per_class", self.pool_test_per_class.to_string()),
            ("pool_seed", self.pool_seed.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("joint_full_finetune", self.joint_full_finetune.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("export_data", self.export_data.to_string()),
        ]
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: 3,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    /// Training settings for one repeat; the repeat shifts the init seed.
    pub fn train(&self, repeat: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            rank: self.rank,
            seed: self.init_seed.wrapping_add(repeat as u64),
            augment_flip: self.augment_flip,
            augment_crop: self.augment_crop,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            learning_rate: self.pretrain_lr,
            seed: self.pool_seed,
            ..PretrainConfig::default()
        }
    }

    pub fn data_spec(&self) -> SyntheticImageSpec {
        SyntheticImageSpec {
            num_classes: self.num_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            image_size: self.image_size,
            margin: self.margin,
            seed: self.data_seed,
        }
    }

    pub fn pool_spec(&self) -> SyntheticImageSpec {
        SyntheticImageSpec {
            num_classes: self.pool_classes,
            train_per_class: self.pool_train_per_class,
            test_per_class: self.pool_test_per_class,
            image_size: self.image_size,
            margin: 0.5,
            seed: self.pool_seed,
        }
    }

    pub fn classes_per_update(&self) -> usize {
        match self.scenario {
            Scenario::Dil => self.num_classes,
            Scenario::Cil | Scenario::Til => self.num_classes / self.num_updates.max(1),
        }
    }

    pub fn effective_clusters(&self) -> usize {
        self.clusters.unwrap_or(match self.scenario {
            Scenario::Dil => 5,
            Scenario::Cil | Scenario::Til => 2 * self.classes_per_update(),
        })
    }

    /// Output directory, falling back to the environment and then `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_root)
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-r{}-k{}-s{}",
            self.method.as_str(),
            self.scenario.as_str(),
            self.rank,
            self.effective_clusters(),
            self.init_seed
        )
    }

    /// Checks every sub-configuration before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train(0).validate()?;
        self.data_spec().validate()?;
        self.pool_spec().validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.num_updates == 0 {
            return Err(Error::Config("num_updates must be at least 1".into()));
        }
        if self.rank > self.embed_dim {
            return Err(Error::Config(format!("rank {} exceeds embed_dim {}", self.rank, self.embed_dim)));
        }
        if self.scenario != Scenario::Dil && self.num_classes % self.num_updates != 0 {
            return Err(Error::Config(format!(
                "{} classes do not split into {} updates",
                self.num_classes, self.num_updates
            )));
        }
        let k = self.effective_clusters();
        let per_update = self.classes_per_update() * self.train_per_class;
        if k == 0 || k > per_update {
            return Err(Error::Config(format!("clusters {k} must lie in 1..={per_update}")));
        }
        if self.pretrain_epochs == 0 || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("pretraining needs positive epochs and learning rate".into()));
        }
        Ok(())
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Reads a flat `key = value` file (TOML syntax, no tables).
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut out = BTreeMap::new();
    for (k, v) in table {
        let s = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(Error::Config(format!(
                    "key {k:?} must be a scalar, found {}",
                    other.type_str()
                )))
            }
        };
        out.insert(k, s);
    }
    Ok(out)
}
