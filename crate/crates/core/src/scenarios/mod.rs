//! Procedural datasets and the domain-, class- and task-incremental
//! protocols built from them.

mod generator;
mod pretrain;

pub use generator::{class_signature, domain_tint, ClassSignature, DomainTransform};
pub use pretrain::{pretrain_backbone, PretrainConfig, PRETRAIN_MIN_ACCURACY};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sample_standard_normal;
pub(crate) use generator::mix_seed;
use generator::{render, RenderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Dil,
    Cil,
    Til,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Dil => "dil",
            Scenario::Cil => "cil",
            Scenario::Til => "til",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dil" => Ok(Scenario::Dil),
            "cil" => Ok(Scenario::Cil),
            "til" => Ok(Scenario::Til),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Parameters of a procedural image family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImageSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Separability dial in `[0, 1]`: higher means less jitter and noise and
    /// stronger domain tints.
    pub margin: f64,
    pub seed: u64,
}

impl SyntheticImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(format!("empty synthetic dataset: {self:?}")));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, 1]", self.margin)));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}

/// Images in `[n, H, W, 3]` order with global labels and domain ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub image_len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.image_len);
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
            image_len: self.image_len,
        }
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.image_len = p.image_len;
            out.images.extend_from_slice(&p.images);
            out.labels.extend_from_slice(&p.labels);
            out.domains.extend_from_slice(&p.domains);
        }
        out
    }

    fn push(&mut self, image: Vec<f32>, label: usize, domain: usize) {
        self.image_len = image.len();
        self.images.extend(image);
        self.labels.push(label);
        self.domains.push(domain);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train = 1,
    Test = 2,
}

/// Renders `per_class` samples of each listed class under one domain.
fn render_split(
    spec: &SyntheticImageSpec,
    signature_seed: u64,
    classes: &[usize],
    domain: usize,
    transform: DomainTransform,
    split: Split,
) -> Dataset {
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let params = RenderParams {
        size: spec.image_size,
        margin: spec.margin,
        tint: domain_tint(domain, spec.margin),
        transform,
    };
    let mut out = Dataset::default();
    for &class in classes {
        let sig = class_signature(signature_seed, class);
        for i in 0..per_class {
            let seed = mix_seed(&[spec.seed, split as u64, domain as u64, class as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.push(render(&sig, &params, &mut rng), class, domain);
        }
    }
    out
}

/// One step of a continual sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub dataset_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub label_map: Vec<usize>,
    pub transform: DomainTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSequence {
    pub scenario: Scenario,
    pub updates: Vec<Update>,
    /// Set when the class layout matches the 100-class, 10×10 split.
    pub full_scale: bool,
}

impl DatasetSequence {
    /// Checks the label-map relations each protocol promises.
    pub fn validate(&self) -> Result<()> {
        if self.updates.is_empty() {
            return Err(Error::Data("sequence has no updates".into()));
        }
        for (i, u) in self.updates.iter().enumerate() {
            if u.dataset_id != i {
                return Err(Error::Data(format!("update {i} carries dataset id {}", u.dataset_id)));
            }
            let mut sorted = u.label_map.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != u.label_map.len() {
                return Err(Error::Data(format!("update {i} has duplicate labels")));
            }
            for d in [&u.train, &u.test] {
                if let Some(l) = d.labels.iter().find(|l| !u.label_map.contains(l)) {
                    return Err(Error::Data(format!("update {i} has label {l} outside its label map")));
                }
            }
        }
        match self.scenario {
            Scenario::Dil => {
                let first = &self.updates[0].label_map;
                if self.updates.iter().any(|u| &u.label_map != first) {
                    return Err(Error::Data("domain-incremental updates must share one label set".into()));
                }
            }
            Scenario::Cil | Scenario::Til => {
                let mut all: Vec<usize> = self.updates.iter().flat_map(|u| u.label_map.iter().copied()).collect();
                let n = all.len();
                all.sort_unstable();
                all.dedup();
                if all.len() != n {
                    return Err(Error::Data("class-incremental label sets must be disjoint".into()));
                }
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.updates
            .iter()
            .flat_map(|u| u.label_map.iter())
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Transform of domain `i` in a domain-incremental sequence.
pub fn default_domain_transform(i: usize) -> DomainTransform {
    match i % 6 {
        0 if i == 0 => DomainTransform::Identity,
        0 => DomainTransform::ColorShift([0.1 * (i / 6) as f64, -0.1, 0.05]),
        1 => DomainTransform::Rotate(90.0),
        2 => DomainTransform::ColorShift([0.2, -0.1, -0.2]),
        3 => DomainTransform::Noise(0.12),
        4 => DomainTransform::Blur,
        _ => DomainTransform::Rotate(180.0),
    }
}

/// Same classes in every update, each update under its own transform and
/// tint.
pub fn generate_dil_sequence(spec: &SyntheticImageSpec, num_domains: usize) -> Result<DatasetSequence> {
    spec.validate()?;
    if num_domains == 0 {
        return Err(Error::Config("a domain-incremental sequence needs at least one domain".into()));
    }
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let updates = (0..num_domains)
        .map(|d| {
            let transform = default_domain_transform(d);
            Update {
                dataset_id: d,
                train: render_split(spec, spec.seed, &classes, d, transform, Split::Train),
                test: render_split(spec, spec.seed, &classes, d, transform, Split::Test),
                label_map: classes.clone(),
                transform,
            }
        })
        .collect();
    let seq = DatasetSequence {
        scenario: Scenario::Dil,
        updates,
        full_scale: false,
    };
    seq.validate()?;
    Ok(seq)
}

/// Contiguous, disjoint class blocks, all in the untransformed domain.
pub fn generate_cil_sequence(
    spec: &SyntheticImageSpec,
    num_updates: usize,
    classes_per_update: usize,
) -> Result<DatasetSequence> {
    spec.validate()?;
    if num_updates == 0 || num_updates * classes_per_update != spec.num_classes {
        return Err(Error::Contract(format!(
            "{num_updates} updates × {classes_per_update} classes does not cover {} classes",
            spec.num_classes
        )));
    }
    let updates = (0..num_updates)
        .map(|u| {
            let classes: Vec<usize> = (u * classes_per_update..(u + 1) * classes_per_update).collect();
            let transform = DomainTransform::Identity;
            Update {
                dataset_id: u,
                train: render_split(spec, spec.seed, &classes, 0, transform, Split::Train),
                test: render_split(spec, spec.seed, &classes, 0, transform, Split::Test),
                label_map: classes,
                transform,
            }
        })
        .collect();
    let seq = DatasetSequence {
        scenario: Scenario::Cil,
        updates,
        full_scale: spec.num_classes == 100 && num_updates == 10,
    };
    seq.validate()?;
    Ok(seq)
}

/// Class-incremental data with task identity available at evaluation.
pub fn generate_til_sequence(
    spec: &SyntheticImageSpec,
    num_updates: usize,
    classes_per_update: usize,
) -> Result<DatasetSequence> {
    let mut seq = generate_cil_sequence(spec, num_updates, classes_per_update)?;
    seq.scenario = Scenario::Til;
    Ok(seq)
}

/// Pretraining data: its own class signatures (drawn from a seed stream no
/// sequence uses), no color cast, every quarter-turn orientation, and half
/// the images with additive noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPool {
    pub train: Dataset,
    pub test: Dataset,
    pub num_classes: usize,
}

const POOL_NOISE: f64 = 0.18;

pub fn generate_pool(spec: &SyntheticImageSpec) -> Result<PretrainPool> {
    spec.validate()?;
    let signature_seed = mix_seed(&[spec.seed, 0x9001]);
    let pool_domain = usize::MAX;
    let make = |split: Split, per_class: usize| {
        let mut out = Dataset::default();
        for class in 0..spec.num_classes {
            let sig = class_signature(signature_seed, class);
            for i in 0..per_class {
                let params = RenderParams {
                    size: spec.image_size,
                    margin: spec.margin,
                    tint: [0.0; 3],
                    transform: DomainTransform::Rotate(90.0 * (i % 4) as f64),
                };
                let seed = mix_seed(&[spec.seed, 0x9001, split as u64, class as u64, i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut img = render(&sig, &params, &mut rng);
                // every other block of four also carries sensor noise
                if (i / 4) % 2 == 1 {
                    for v in img.iter_mut() {
                        *v += (POOL_NOISE * sample_standard_normal(&mut rng)) as f32;
                    }
                }
                out.push(img, class, pool_domain);
            }
        }
        out
    };
    Ok(PretrainPool {
        train: make(Split::Train, spec.train_per_class),
        test: make(Split::Test, spec.test_per_class),
        num_classes: spec.num_classes,
    })
}
