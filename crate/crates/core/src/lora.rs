//! Low-rank adapters on the query and value projections.
//!
//! An adapter for a `d×k` weight holds `B: d×r` and `A: r×k`; the update is
//! `ΔW = B·A` with no extra scaling. `A` starts as a small truncated normal
//! and `B` as zero, so a fresh adapter leaves the network unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::vit::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Value => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// 1-based block index.
    pub layer: usize,
    pub target: Target,
    /// `r×k`
    pub a: Tensor,
    /// `d×r`
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new(layer: usize, target: Target, a: Tensor, b: Tensor) -> Result<Self> {
        let (r, _k) = dims(&a)?;
        let (d, r2) = dims(&b)?;
        if r != r2 {
            return Err(Error::Adapter(format!(
                "A is {:?} but B is {:?}; ranks disagree",
                a.shape(),
                b.shape()
            )));
        }
        if r > d.min(a.shape()[1]) {
            return Err(Error::Adapter(format!("rank {r} exceeds min(d, k) for {:?}", b.shape())));
        }
        Ok(Self { layer, target, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `(d, k)` of the adapted matrix.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.shape()[0], self.a.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::Adapter(format!("adapter factors must be matrices, got {s:?}"))),
    }
}

/// `ΔW = B·A`
pub fn delta(adapter: &LoraAdapter) -> Tensor {
    adapter
        .b
        .matmul(&adapter.a)
        .expect("adapter factors validated at construction")
}

/// `base + B·A`
pub fn merge(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (d, k) = adapter.target_shape();
    if base.shape() != [d, k] {
        return Err(Error::shape("lora merge", base.shape(), &[d, k]));
    }
    base.add(&delta(adapter))
}

/// Adapters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub query: LoraAdapter,
    pub value: LoraAdapter,
}

/// One query and one value adapter for every block, all of the same rank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub dataset_id: usize,
    rank: usize,
    layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    pub fn new(config: &ModelConfig, rank: usize, seed: u64, dataset_id: usize) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        if rank == 0 || rank > d {
            return Err(Error::Contract(format!("rank {rank} must lie in 1..={d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (1..=config.num_layers)
            .map(|l| {
                let mut make = |target| {
                    let a = Tensor::trunc_normal(&[rank, d], INIT_STD, &mut rng);
                    LoraAdapter::new(l, target, a, Tensor::zeros(&[d, rank]))
                };
                Ok(LayerAdapters {
                    query: make(Target::Query)?,
                    value: make(Target::Value)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset_id,
            rank,
            layers,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layers(&self) -> &[LayerAdapters] {
        &self.layers
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().flat_map(|l| [&l.query, &l.value])
    }

    pub fn param_count(&self) -> usize {
        self.adapters().map(LoraAdapter::param_count).sum()
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(Error::Adapter(format!(
                "adapter set has {} layers, model has {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        let d = config.embed_dim;
        if let Some(bad) = self.adapters().find(|a| a.target_shape() != (d, d)) {
            return Err(Error::Adapter(format!(
                "layer {} {} adapter targets {:?}, model needs ({d}, {d})",
                bad.layer,
                bad.target.as_str(),
                bad.target_shape()
            )));
        }
        Ok(())
    }

    pub fn param_names(num_layers: usize) -> Vec<String> {
        (1..=num_layers)
            .flat_map(|l| {
                ["query.a", "query.b", "value.a", "value.b"]
                    .into_iter()
                    .map(move |s| format!("layers.{l}.{s}"))
            })
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let tensors = self
            .layers
            .iter()
            .flat_map(|l| [&l.query.a, &l.query.b, &l.value.a, &l.value.b]);
        Self::param_names(self.layers.len()).into_iter().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = Self::param_names(self.layers.len());
        let tensors = self.layers.iter_mut().flat_map(|l| {
            let LayerAdapters { query, value } = l;
            [&mut query.a, &mut query.b, &mut value.a, &mut value.b]
        });
        names.into_iter().zip(tensors).collect()
    }

    /// Rebuilds a set from tensors in [`Self::param_names`] order.
    pub fn from_named(dataset_id: usize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        if tensors.is_empty() || tensors.len() % 4 != 0 {
            return Err(Error::Data(format!("{} adapter tensors is not 4 per layer", tensors.len())));
        }
        let names = Self::param_names(tensors.len() / 4);
        if let Some(((got, _), want)) = tensors.iter().zip(&names).find(|((got, _), want)| got != *want) {
            return Err(Error::Data(format!("adapter tensor {got} where {want} was expected")));
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut layers = Vec::new();
        for l in 1..=names.len() / 4 {
            let mut next = || it.next().expect("length checked");
            let (qa, qb, va, vb) = (next(), next(), next(), next());
            layers.push(LayerAdapters {
                query: LoraAdapter::new(l, Target::Query, qa, qb)?,
                value: LoraAdapter::new(l, Target::Value, va, vb)?,
            });
        }
        let rank = layers[0].query.rank();
        if layers.iter().any(|l| l.query.rank() != rank || l.value.rank() != rank) {
            return Err(Error::Adapter("adapter ranks are not uniform".into()));
        }
        Ok(Self {
            dataset_id,
            rank,
            layers,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapterSet {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t, trainable))
            .collect();
        let layers = vars
            .chunks(4)
            .map(|c| BoundLayerAdapters {
                query: BoundAdapter { a: c[0], b: c[1] },
                value: BoundAdapter { a: c[2], b: c[3] },
            })
            .collect();
        BoundAdapterSet { layers, vars }
    }

    pub fn collect_grads(&mut self, bound: &BoundAdapterSet, grads: &mut Gradients) {
        for ((_, t), &v) in self.params_mut().into_iter().zip(&bound.vars) {
            t.grad = grads.take(v);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub a: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct BoundLayerAdapters {
    pub query: BoundAdapter,
    pub value: BoundAdapter,
}

#[derive(Debug, Clone)]
pub struct BoundAdapterSet {
    pub layers: Vec<BoundLayerAdapters>,
    vars: Vec<Var>,
}

impl BoundAdapterSet {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Scalars trained per dataset: `2·L·r·(d+k)` adapter entries plus the
/// `D·C + C` classifier head.
pub fn count_trainable_params(config: &ModelConfig, rank: usize, num_classes: usize) -> usize {
    let d = config.embed_dim;
    2 * config.num_layers * rank * (d + d) + d * num_classes + num_classes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn fresh_set_has_zero_delta_and_two_adapters_per_layer() {
        let set = AdapterSet::new(&toy(), 4, 9, 0).unwrap();
        assert_eq!(set.adapters().count(), 4);
        for a in set.adapters() {
            assert!(delta(a).data().iter().all(|&v| v == 0.0));
            assert_eq!(a.a.shape(), &[4, 32]);
            assert_eq!(a.b.shape(), &[32, 4]);
        }
        let mut seen: Vec<_> = set.adapters().map(|a| (a.layer, a.target)).collect();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn seeds_fix_the_random_factor() {
        let x = AdapterSet::new(&toy(), 8, 5, 0).unwrap();
        let y = AdapterSet::new(&toy(), 8, 5, 0).unwrap();
        let z = AdapterSet::new(&toy(), 8, 6, 0).unwrap();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        assert!(matches!(AdapterSet::new(&toy(), 0, 1, 0), Err(Error::Contract(_))));
        assert!(matches!(AdapterSet::new(&toy(), 33, 1, 0), Err(Error::Contract(_))));
        assert!(AdapterSet::new(&toy(), 32, 1, 0).is_ok());
    }

    #[test]
    fn hand_delta() {
        let b = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let a = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let adapter = LoraAdapter::new(1, Target::Query, a, b).unwrap();
        assert_eq!(delta(&adapter).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_with_zero_b_is_identity_and_subtracting_delta_recovers_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Tensor::trunc_normal(&[32, 32], 0.5, &mut rng);
        let mut set = AdapterSet::new(&toy(), 4, 3, 0).unwrap();
        let adapter = &set.layers()[0].query;
        assert!(merge(&base, adapter).unwrap().bitwise_eq(&base));

        for (name, t) in set.params_mut() {
            if name.ends_with(".b") {
                *t = Tensor::trunc_normal(&[32, 4], 0.3, &mut rng);
            }
        }
        let adapter = &set.layers()[1].value;
        let merged = merge(&base, adapter).unwrap();
        let back = merged.sub(&delta(adapter)).unwrap();
        assert!(back.max_abs_diff(&base) <= 1e-6);
        assert!(merge(&Tensor::zeros(&[16, 32]), adapter).is_err());
    }

    #[test]
    fn param_counts() {
        let vit_b = ModelConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_hidden: 3072,
        };
        assert_eq!(count_trainable_params(&vit_b, 1, 2), 38_402);
        assert_eq!(count_trainable_params(&toy(), 2, 10), 842);
        let head = count_trainable_params(&toy(), 0, 10);
        assert_eq!(count_trainable_params(&toy(), 6, 10) - head, 2 * (count_trainable_params(&toy(), 3, 10) - head));
    }

    #[test]
    fn counted_parameters_match_constructed_tensors() {
        let set = AdapterSet::new(&toy(), 2, 0, 0).unwrap();
        let head_params = 32 * 10 + 10;
        assert_eq!(set.param_count() + head_params, count_trainable_params(&toy(), 2, 10));
    }

    #[test]
    fn named_round_trip() {
        let set = AdapterSet::new(&toy(), 3, 11, 4).unwrap();
        let named = set.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(AdapterSet::from_named(4, named).unwrap(), set);
    }
}
