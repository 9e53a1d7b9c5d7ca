#![allow(dead_code)]

use color_core::harness::{Method, RunConfig};
use color_core::lora::AdapterSet;
use color_core::tensor::{Tape, Tensor, Var};
use color_core::vit::{encode, patchify, ModelConfig, ViTParams};
use color_core::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0f32..1.0)).collect()
}

/// Adapters with both factors random, so every path carries gradient.
pub fn random_adapters(cfg: &ModelConfig, rank: usize, seed: u64, std: f64) -> AdapterSet {
    let mut set = AdapterSet::new(cfg, rank, seed, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    for (name, t) in set.params_mut() {
        if name.ends_with(".b") {
            *t = Tensor::trunc_normal(t.shape(), std, &mut rng);
        }
    }
    set
}

/// Toy backbone, adapters and a linear head under a cross-entropy loss.
pub struct GradProblem {
    pub vit: ViTParams,
    pub adapters: AdapterSet,
    pub w: Tensor,
    pub b: Tensor,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradProblem {
    pub fn new(seed: u64, rank: usize) -> Self {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 10;
        // Unit-scale embeddings: at the 0.02 init scale the first LayerNorm
        // sees sigma ~ 0.02 and an eps = 1e-3 step is no longer small.
        let mut vit = ViTParams::init(cfg, seed).unwrap();
        vit.cls_token = Tensor::trunc_normal(vit.cls_token.shape(), 1.0, &mut rng);
        vit.pos_embed = Tensor::trunc_normal(vit.pos_embed.shape(), 1.0, &mut rng);
        Self {
            vit,
            adapters: random_adapters(&cfg, rank, seed, 0.05),
            w: Tensor::trunc_normal(&[cfg.embed_dim, classes], 0.5, &mut rng),
            b: Tensor::trunc_normal(&[classes], 0.1, &mut rng),
            images: random_images(&cfg, 2, seed),
            labels: vec![3, 7],
        }
    }

    fn forward(&self, tape: &mut Tape) -> (Var, Vec<Var>) {
        let cfg = *self.vit.config();
        let bv = self.vit.bind(tape, true);
        let ba = self.adapters.bind(tape, true);
        let w = tape.param(&self.w, true);
        let b = tape.param(&self.b, true);
        let patches = patchify(tape, &cfg, &self.images).unwrap();
        let f = encode(tape, &bv, Some(&ba), patches, self.labels.len()).unwrap();
        let z = tape.matmul(f, w).unwrap();
        let z = tape.add_broadcast(z, b).unwrap();
        let loss = tape.cross_entropy(z, &self.labels, None).unwrap();
        let mut vars = bv.vars().to_vec();
        vars.extend_from_slice(ba.vars());
        vars.push(w);
        vars.push(b);
        (loss, vars)
    }

    pub fn loss(&self) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.forward(&mut tape);
        tape.value(loss)[0]
    }

    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let (loss, vars) = self.forward(&mut tape);
        let grads = tape.backward(loss).unwrap();
        vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self.vit.params_mut().unwrap();
        out.extend(self.adapters.params_mut().into_iter().map(|(n, t)| (format!("lora.{n}"), t)));
        out.push(("head.w".into(), &mut self.w));
        out.push(("head.b".into(), &mut self.b));
        out
    }

    /// Central differences with step `eps` on `n` sampled coordinates.
    /// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
    pub fn finite_difference_check(&mut self, n: usize, eps: f64, seed: u64) -> FdReport {
        let analytic = self.analytic();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = self.params_mut().len();
        let mut report = FdReport { checked: 0, max_rel_err: 0.0, worst: String::new() };
        for _ in 0..n {
            let ti = rng.gen_range(0..count);
            let (name, len) = {
                let p = self.params_mut();
                (p[ti].0.clone(), p[ti].1.len())
            };
            let ei = rng.gen_range(0..len);
            let orig = self.params_mut()[ti].1.data()[ei];
            self.params_mut()[ti].1.data_mut()[ei] = orig + eps;
            let up = self.loss();
            self.params_mut()[ti].1.data_mut()[ei] = orig - eps;
            let down = self.loss();
            self.params_mut()[ti].1.data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{ei}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
        report
    }
}

/// Largest |logits through merged weights − logits through live adapters|
/// over `n` random inputs.
pub fn merge_gap(rank: usize, n: usize, seed: u64) -> f64 {
    let cfg = ModelConfig::toy();
    let mut vit = ViTParams::init(cfg, seed).unwrap();
    vit.freeze();
    let adapters = random_adapters(&cfg, rank, seed + 1, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let w = Tensor::trunc_normal(&[cfg.embed_dim, 10], 0.5, &mut rng);
    let merged = vit.merged(&adapters).unwrap();
    let images = random_images(&cfg, n, seed + 3);
    let live = vit.features(Some(&adapters), &images).unwrap().matmul(&w).unwrap();
    let fused = merged.features(None, &images).unwrap().matmul(&w).unwrap();
    live.max_abs_diff(&fused)
}

/// A small, fast run configuration for harness tests.
pub fn tiny(scenario: Scenario, method: Method) -> RunConfig {
    let (classes, updates) = match scenario {
        Scenario::Dil => (4, 3),
        _ => (6, 3),
    };
    RunConfig {
        method,
        repeats: 1,
        num_classes: classes,
        num_updates: updates,
        train_per_class: 12,
        test_per_class: 6,
        epochs: 2,
        rank: 2,
        clusters: Some(2),
        pool_classes: 6,
        pool_train_per_class: 30,
        pool_test_per_class: 10,
        ..RunConfig::desk(scenario)
    }
}

/// Frozen backbone pretrained on the tiny pool.
pub fn tiny_backbone() -> ViTParams {
    color_core::harness::Harness::new()
        .backbone(&tiny(Scenario::Dil, Method::Color))
        .unwrap()
}
