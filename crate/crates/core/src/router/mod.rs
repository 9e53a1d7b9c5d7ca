//! Inference-time dataset identification from per-dataset k-means
//! prototypes over backbone features.

mod kmeans;

pub use kmeans::{inertia, kmeans, nearest, KMeans, DEFAULT_MAX_ITERS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::Expert;
use crate::scenarios::Dataset;
use crate::tensor::Tensor;
use crate::vit::ViTParams;

/// Which representation the prototypes live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Extractor {
    /// The frozen backbone without adapters.
    Frozen,
    /// The backbone with the first dataset's adapters.
    FirstExpert,
}

impl Extractor {
    pub fn as_str(self) -> &'static str {
        match self {
            Extractor::Frozen => "frozen",
            Extractor::FirstExpert => "first_expert",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub dataset_id: usize,
    /// `[k, D]`, rounded to `f32`.
    pub centroids: Tensor,
    pub extractor: Extractor,
}

impl PrototypeSet {
    pub fn new(dataset_id: usize, centroids: Tensor, extractor: Extractor) -> Result<Self> {
        if centroids.shape().len() != 2 || centroids.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "prototypes of dataset {dataset_id} must be a finite [k, D] matrix"
            )));
        }
        Ok(Self {
            dataset_id,
            centroids,
            extractor,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    extractor: Extractor,
    sets: Vec<PrototypeSet>,
}

impl Router {
    pub fn new(extractor: Extractor) -> Self {
        Self {
            extractor,
            sets: Vec::new(),
        }
    }

    pub fn extractor(&self) -> Extractor {
        self.extractor
    }

    pub fn sets(&self) -> &[PrototypeSet] {
        &self.sets
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn push(&mut self, set: PrototypeSet) -> Result<()> {
        if set.extractor != self.extractor {
            return Err(Error::Contract(format!(
                "router uses {} features, prototypes were built with {}",
                self.extractor.as_str(),
                set.extractor.as_str()
            )));
        }
        if self.sets.iter().any(|s| s.dataset_id == set.dataset_id) {
            return Err(Error::Contract(format!("dataset {} already has prototypes", set.dataset_id)));
        }
        if let Some(first) = self.sets.first() {
            if first.dim() != set.dim() {
                return Err(Error::shape("router", first.centroids.shape(), set.centroids.shape()));
            }
        }
        self.sets.push(set);
        Ok(())
    }

    /// Dataset owning the globally nearest centroid. Ties go to the
    /// earliest registered dataset.
    pub fn identify(&self, feature: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for set in &self.sets {
            if feature.len() != set.dim() {
                return Err(Error::shape("identify", &[feature.len()], set.centroids.shape()));
            }
            let (_, d) = nearest(feature, set.centroids.data(), set.dim());
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((set.dataset_id, d));
            }
        }
        best.map(|(id, _)| id)
            .ok_or_else(|| Error::Contract("cannot identify a dataset with an empty router".into()))
    }

    /// Identifies every row of a `[B, D]` feature matrix.
    pub fn identify_batch(&self, features: &Tensor) -> Result<Vec<usize>> {
        let dim = *features.shape().last().unwrap_or(&0);
        features.data().chunks(dim.max(1)).map(|f| self.identify(f)).collect()
    }
}

fn check_first_expert(extractor: Extractor, first_expert: Option<&Expert>) -> Result<Option<&Expert>> {
    match (extractor, first_expert) {
        (Extractor::Frozen, _) => Ok(None),
        (Extractor::FirstExpert, Some(e)) if e.dataset_id == 0 && e.is_trained() => Ok(Some(e)),
        (Extractor::FirstExpert, Some(e)) => Err(Error::Contract(format!(
            "first-expert features need the trained expert of dataset 0, got dataset {} (trained: {})",
            e.dataset_id,
            e.is_trained()
        ))),
        (Extractor::FirstExpert, None) => {
            Err(Error::Contract("first-expert features need the first expert".into()))
        }
    }
}

/// Features used for routing: `[B, D]`.
pub fn routing_features(
    backbone: &ViTParams,
    extractor: Extractor,
    first_expert: Option<&Expert>,
    images: &[f32],
) -> Result<Tensor> {
    let adapters = check_first_expert(extractor, first_expert)?.map(|e| &e.adapters);
    let image_len = backbone.config().image_len();
    let mut data = Vec::with_capacity(images.len() / image_len.max(1) * backbone.config().embed_dim);
    for chunk in images.chunks(256 * image_len) {
        data.extend(backbone.features(adapters, chunk)?.into_data());
    }
    let n = images.len() / image_len;
    Tensor::new(&[n, backbone.config().embed_dim], data)
}

/// k-means prototypes of a dataset's training features.
pub fn fit_prototypes(
    data: &Dataset,
    backbone: &ViTParams,
    extractor: Extractor,
    first_expert: Option<&Expert>,
    k: usize,
    seed: u64,
    dataset_id: usize,
) -> Result<PrototypeSet> {
    let features = routing_features(backbone, extractor, first_expert, &data.images)?;
    prototypes_from_features(&features, extractor, k, seed, dataset_id)
}

pub fn prototypes_from_features(
    features: &Tensor,
    extractor: Extractor,
    k: usize,
    seed: u64,
    dataset_id: usize,
) -> Result<PrototypeSet> {
    let mut centroids = kmeans(features, k, seed, DEFAULT_MAX_ITERS)?.centroids;
    centroids.round_to_f32();
    PrototypeSet::new(dataset_id, centroids, extractor)
}

pub fn identify_dataset(
    images: &[f32],
    router: &Router,
    backbone: &ViTParams,
    first_expert: Option<&Expert>,
) -> Result<Vec<usize>> {
    if router.is_empty() {
        return Err(Error::Contract("cannot identify a dataset with an empty router".into()));
    }
    let features = routing_features(backbone, router.extractor(), first_expert, images)?;
    router.identify_batch(&features)
}

/// `(class_id, dataset_id)` per image: identify the dataset, then ask its
/// expert.
pub fn route_and_predict(
    images: &[f32],
    router: &Router,
    experts: &[Expert],
    backbone: &ViTParams,
) -> Result<Vec<(usize, usize)>> {
    let expert_for = |id: usize| {
        experts
            .iter()
            .find(|e| e.dataset_id == id && e.is_trained())
            .ok_or_else(|| Error::Contract(format!("no trained expert for dataset {id}")))
    };
    for set in router.sets() {
        expert_for(set.dataset_id)?;
    }
    let first = match router.extractor() {
        Extractor::Frozen => None,
        Extractor::FirstExpert => Some(expert_for(0)?),
    };
    let routes = identify_dataset(images, router, backbone, first)?;
    predict_routed(images, &routes, experts, backbone)
}

/// Predictions when the dataset of each image is already decided, e.g. by
/// an oracle.
pub fn predict_routed(
    images: &[f32],
    routes: &[usize],
    experts: &[Expert],
    backbone: &ViTParams,
) -> Result<Vec<(usize, usize)>> {
    let image_len = backbone.config().image_len();
    if routes.len() * image_len != images.len() {
        return Err(Error::shape("predict_routed", &[routes.len(), image_len], &[images.len()]));
    }
    if let Some(&missing) = routes.iter().find(|&&r| !experts.iter().any(|e| e.dataset_id == r)) {
        return Err(Error::Contract(format!("no expert for dataset {missing}")));
    }
    let mut out = vec![(0, 0); routes.len()];
    for expert in experts {
        let idx: Vec<usize> = (0..routes.len()).filter(|&i| routes[i] == expert.dataset_id).collect();
        if idx.is_empty() {
            continue;
        }
        let mut batch = Vec::with_capacity(idx.len() * image_len);
        for &i in &idx {
            batch.extend_from_slice(&images[i * image_len..(i + 1) * image_len]);
        }
        for (&i, p) in idx.iter().zip(expert.predict(backbone, &batch)?) {
            out[i] = (p.class_id, expert.dataset_id);
        }
    }
    Ok(out)
}
