//! Pre-norm vision transformer backbone.
//!
//! Images are cut into `P×P` patches, linearly embedded, prefixed with a
//! class token and offset by learned position embeddings. Each block is
//! `x + MHSA(LN(x))` followed by `x + FFN(LN(x))`, where the feed-forward
//! path is `GeLU(W2 · GeLU(W1 · h + b1) + b2)`. The encoder output is the
//! final-normalized class token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, BoundAdapterSet, BoundLayerAdapters};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 16×16 images, 4×4 patches, `D = 32`: the smallest configuration that
    /// exercises every code path.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_hidden: 64,
        }
    }

    /// Configuration used by the benchmark suites: 8×8 patches with
    /// `D = 64`, wide enough for rank-64 adapters.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            ffn_hidden: 128,
            ..Self::toy()
        }
    }

    /// ViT-B/16 dimensions, used only for parameter accounting.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_hidden: 3072,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 12] = [
        "ln1.gamma", "ln1.beta", "w_q", "w_k", "w_v", "w_o", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1",
        "ffn.w2", "ffn.b2",
    ];

    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.ffn_hidden;
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_k: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_v: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_o: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::trunc_normal(&[d, h], INIT_STD, rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::trunc_normal(&[h, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 12] {
        let d = cfg.embed_dim;
        let h = cfg.ffn_hidden;
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }
}

/// Backbone weights. Once frozen, [`ViTParams::params_mut`] refuses access.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    config: ModelConfig,
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    frozen: bool,
}

impl ViTParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = Tensor::trunc_normal(&[config.patch_dim(), d], INIT_STD, &mut rng);
        let pos_embed = Tensor::trunc_normal(&[config.num_tokens(), d], INIT_STD, &mut rng);
        let cls_token = Tensor::trunc_normal(&[1, d], INIT_STD, &mut rng);
        let layers = (0..config.num_layers).map(|_| LayerParams::init(&config, &mut rng)).collect();
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            frozen: false,
        })
    }

    /// All parameters set to zero, including normalization gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for (_, t) in p.params_mut()? {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// An unfrozen copy, used by baselines that fine-tune the whole network.
    pub fn thawed_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.embed_dim;
        let mut out = vec![
            ("patch_embed".to_string(), vec![config.patch_dim(), d]),
            ("pos_embed".to_string(), vec![config.num_tokens(), d]),
            ("cls_token".to_string(), vec![1, d]),
        ];
        for l in 0..config.num_layers {
            for (name, shape) in LayerParams::NAMES.iter().zip(LayerParams::shapes(config)) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("norm.gamma".to_string(), vec![d]));
        out.push(("norm.beta".to_string(), vec![d]));
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let names = Self::param_names(&self.config);
        let mut tensors = vec![&self.patch_embed, &self.pos_embed, &self.cls_token];
        for layer in &self.layers {
            tensors.extend(layer.tensors());
        }
        tensors.push(&self.norm_gamma);
        tensors.push(&self.norm_beta);
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        if self.frozen {
            return Err(Error::Contract("backbone parameters are frozen".into()));
        }
        let names = Self::param_names(&self.config);
        let mut tensors = vec![&mut self.patch_embed, &mut self.pos_embed, &mut self.cls_token];
        for layer in &mut self.layers {
            tensors.extend(layer.tensors_mut());
        }
        tensors.push(&mut self.norm_gamma);
        tensors.push(&mut self.norm_beta);
        Ok(names.into_iter().map(|(n, _)| n).zip(tensors).collect())
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in [`Self::param_names`] order.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>, frozen: bool) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let expected = Self::param_names(&config);
        if tensors.len() != expected.len() {
            return Err(Error::Data(format!(
                "expected {} backbone tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot_name, slot), ((name, tensor), (_, shape))) in
            params.params_mut()?.into_iter().zip(tensors.into_iter().zip(expected))
        {
            if slot_name != name || tensor.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "backbone tensor {name} {:?} does not match {slot_name} {shape:?}",
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
        params.frozen = frozen;
        Ok(params)
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundViT {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t, trainable))
            .collect();
        BoundViT::from_vars(self.config, vars)
    }

    /// Copies gradients of a bound copy into each parameter's grad slot.
    pub fn collect_grads(&mut self, bound: &BoundViT, grads: &mut Gradients) -> Result<()> {
        for ((_, t), &v) in self.params_mut()?.into_iter().zip(&bound.vars) {
            t.grad = grads.take(v);
        }
        Ok(())
    }

    /// Backbone with each layer's query and value projections replaced by
    /// `W + B·A` from `adapters`.
    pub fn merged(&self, adapters: &AdapterSet) -> Result<ViTParams> {
        adapters.check_config(&self.config)?;
        let mut out = self.clone();
        for (layer, la) in out.layers.iter_mut().zip(adapters.layers()) {
            layer.w_q = crate::lora::merge(&layer.w_q, &la.query)?;
            layer.w_v = crate::lora::merge(&layer.w_v, &la.value)?;
        }
        Ok(out)
    }

    /// Encoder features for a batch of images, without gradients.
    pub fn features(&self, adapters: Option<&AdapterSet>, images: &[f32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bound_adapters = adapters.map(|a| a.bind(&mut tape, false));
        let batch = batch_len(&self.config, images)?;
        let patches = patchify(&mut tape, &self.config, images)?;
        let out = encode(&mut tape, &bound, bound_adapters.as_ref(), patches, batch)?;
        Ok(tape.to_tensor(out))
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct BoundViT {
    pub config: ModelConfig,
    pub patch_embed: Var,
    pub pos_embed: Var,
    pub cls_token: Var,
    pub layers: Vec<BoundLayer>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    vars: Vec<Var>,
}

impl BoundViT {
    fn from_vars(config: ModelConfig, vars: Vec<Var>) -> Self {
        let layers = vars[3..3 + 12 * config.num_layers]
            .chunks(12)
            .map(|c| BoundLayer {
                ln1_gamma: c[0],
                ln1_beta: c[1],
                w_q: c[2],
                w_k: c[3],
                w_v: c[4],
                w_o: c[5],
                ln2_gamma: c[6],
                ln2_beta: c[7],
                w1: c[8],
                b1: c[9],
                w2: c[10],
                b2: c[11],
            })
            .collect();
        let n = vars.len();
        Self {
            config,
            patch_embed: vars[0],
            pos_embed: vars[1],
            cls_token: vars[2],
            layers,
            norm_gamma: vars[n - 2],
            norm_beta: vars[n - 1],
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn batch_len(cfg: &ModelConfig, images: &[f32]) -> Result<usize> {
    let len = cfg.image_len();
    if images.is_empty() || images.len() % len != 0 {
        return Err(Error::shape(
            "image batch",
            &[images.len()],
            &[cfg.image_size, cfg.image_size, cfg.channels],
        ));
    }
    Ok(images.len() / len)
}

/// Cuts `[batch, H, W, C]` images into `[batch · patches, P·P·C]` rows.
/// Patches are taken row-major over the grid; each patch flattens as
/// `(row, col, channel)`.
pub fn patchify(tape: &mut Tape, cfg: &ModelConfig, images: &[f32]) -> Result<Var> {
    let batch = batch_len(cfg, images)?;
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = s / p;
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * cfg.image_len()..(b + 1) * cfg.image_len()];
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..p {
                    let row = (gy * p + y) * s + gx * p;
                    out.extend(img[row * c..(row + p) * c].iter().map(|&v| v as f64));
                }
            }
        }
    }
    tape.constant(&[batch * cfg.num_patches(), cfg.patch_dim()], out)
}

/// `X_0 = [cls; patches · E] + E_pos` as `[batch, N, D]`.
pub fn embed_patches(tape: &mut Tape, vit: &BoundViT, patches: Var, batch: usize) -> Result<Var> {
    let cfg = &vit.config;
    let tokens = tape.matmul(patches, vit.patch_embed)?;
    let tokens = tape.reshape(tokens, &[batch, cfg.num_patches(), cfg.embed_dim])?;
    let x = tape.prepend_token(tokens, vit.cls_token)?;
    tape.add_broadcast(x, vit.pos_embed)
}

pub struct AttentionOutput {
    /// `x + MHSA(LN(x))`
    pub out: Var,
    /// Attention probabilities, `[batch · heads, N, N]`.
    pub weights: Var,
}

/// Projection `h · W`, plus `(h · B) · A` when an adapter is present.
fn project(tape: &mut Tape, h: Var, w: Var, adapter: Option<(Var, Var)>) -> Result<Var> {
    let base = tape.matmul(h, w)?;
    match adapter {
        None => Ok(base),
        Some((b, a)) => {
            let down = tape.matmul(h, b).map_err(|e| Error::Adapter(e.to_string()))?;
            let up = tape.matmul(down, a).map_err(|e| Error::Adapter(e.to_string()))?;
            tape.add(base, up).map_err(|e| Error::Adapter(e.to_string()))
        }
    }
}

pub fn attention_block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layer: &BoundLayer,
    x: Var,
    adapters: Option<&BoundLayerAdapters>,
) -> Result<AttentionOutput> {
    let (batch, n, d) = match *tape.shape(x) {
        [b, n, d] if d == cfg.embed_dim => (b, n, d),
        ref s => return Err(Error::shape("attention_block", s, &[cfg.embed_dim])),
    };
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let h = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)?;
    let h = tape.reshape(h, &[batch * n, d])?;
    let q = project(tape, h, layer.w_q, adapters.map(|a| (a.query.b, a.query.a)))?;
    let k = project(tape, h, layer.w_k, None)?;
    let v = project(tape, h, layer.w_v, adapters.map(|a| (a.value.b, a.value.a)))?;

    let mut split = |t: Var| -> Result<Var> {
        let t = tape.reshape(t, &[batch, n, heads, dh])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[batch * heads, n, dh])
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);

    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(weights, v, false)?;
    let ctx = tape.reshape(ctx, &[batch, heads, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * n, d])?;
    let proj = tape.matmul(ctx, layer.w_o)?;
    let proj = tape.reshape(proj, &[batch, n, d])?;
    let out = tape.add(x, proj)?;
    Ok(AttentionOutput { out, weights })
}

/// `x + GeLU(W2 · GeLU(W1 · LN(x) + b1) + b2)`
pub fn ffn_block(tape: &mut Tape, cfg: &ModelConfig, layer: &BoundLayer, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_dim {
        return Err(Error::shape("ffn_block", &shape, &[cfg.embed_dim]));
    }
    let rows = shape[0] * shape[1];
    let h = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta)?;
    let h = tape.reshape(h, &[rows, cfg.embed_dim])?;
    let h = tape.matmul(h, layer.w1)?;
    let h = tape.add_broadcast(h, layer.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, layer.w2)?;
    let h = tape.add_broadcast(h, layer.b2)?;
    let h = tape.gelu(h);
    let h = tape.reshape(h, &shape)?;
    tape.add(x, h)
}

/// Runs all blocks and returns the normalized class token, `[batch, D]`.
pub fn encode(
    tape: &mut Tape,
    vit: &BoundViT,
    adapters: Option<&BoundAdapterSet>,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let cfg = vit.config;
    if let Some(a) = adapters {
        if a.layers.len() != cfg.num_layers {
            return Err(Error::Adapter(format!(
                "adapter set covers {} layers, backbone has {}",
                a.layers.len(),
                cfg.num_layers
            )));
        }
    }
    let mut x = embed_patches(tape, vit, patches, batch)?;
    for (l, layer) in vit.layers.iter().enumerate() {
        let la = adapters.map(|a| &a.layers[l]);
        x = attention_block(tape, &cfg, layer, x, la)?.out;
        x = ffn_block(tape, &cfg, layer, x)?;
    }
    let cls = tape.select_token(x, 0)?;
    tape.layer_norm(cls, vit.norm_gamma, vit.norm_beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_tokens(), 17);
        assert_eq!(cfg.patch_dim(), 48);
        assert!(ModelConfig { patch_size: 5, ..cfg }.validate().is_err());
        assert!(ModelConfig { num_heads: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn frozen_params_refuse_mutation() {
        let mut p = ViTParams::init(ModelConfig::default(), 1).unwrap();
        assert!(p.params_mut().is_ok());
        p.freeze();
        assert!(matches!(p.params_mut(), Err(Error::Contract(_))));
        assert!(p.thawed_copy().params_mut().is_ok());
    }

    #[test]
    fn named_params_round_trip() {
        let p = ViTParams::init(ModelConfig::default(), 3).unwrap();
        let named: Vec<(String, Tensor)> = p.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let q = ViTParams::from_named(*p.config(), named, false).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..ModelConfig::default()
        };
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut tape = Tape::new();
        let p = patchify(&mut tape, &cfg, &img).unwrap();
        assert_eq!(tape.shape(p), &[4, 4]);
        assert_eq!(
            tape.value(p),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
    }
}
