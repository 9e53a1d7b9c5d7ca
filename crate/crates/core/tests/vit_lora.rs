mod common;

use color_core::lora::AdapterSet;
use color_core::tensor::Tape;
use color_core::vit::{attention_block, ffn_block, patchify, ModelConfig, ViTParams};
use common::{merge_gap, random_images, GradProblem};

#[test]
fn full_model_gradients_match_central_differences() {
    let mut p = GradProblem::new(11, 4);
    let r = p.finite_difference_check(240, 1e-3, 5);
    assert!(r.max_rel_err <= 1e-3, "{} ({})", r.max_rel_err, r.worst);
}

#[test]
fn merged_and_live_adapters_agree() {
    for rank in [1, 4, 8] {
        let gap = merge_gap(rank, 20, rank as u64);
        assert!(gap <= 1e-5, "rank {rank}: {gap}");
    }
}

#[test]
fn fresh_adapters_leave_features_bitwise_unchanged() {
    let cfg = ModelConfig::toy();
    let vit = ViTParams::init(cfg, 3).unwrap();
    let adapters = AdapterSet::new(&cfg, 4, 9, 0).unwrap();
    let images = random_images(&cfg, 5, 1);
    let plain = vit.features(None, &images).unwrap();
    let adapted = vit.features(Some(&adapters), &images).unwrap();
    assert!(plain.bitwise_eq(&adapted));
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::toy();
    let vit = ViTParams::init(cfg, 4).unwrap();
    let images = random_images(&cfg, 3, 2);
    let mut tape = Tape::new();
    let bound = vit.bind(&mut tape, false);
    let patches = patchify(&mut tape, &cfg, &images).unwrap();
    let x = color_core::vit::embed_patches(&mut tape, &bound, patches, 3).unwrap();
    let att = attention_block(&mut tape, &cfg, &bound.layers[0], x, None).unwrap();
    let n = cfg.num_tokens();
    assert_eq!(tape.shape(att.weights), &[3 * cfg.num_heads, n, n]);
    for row in tape.value(att.weights).chunks(n) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

fn one_layer(d: usize, heads: usize) -> (ModelConfig, ViTParams) {
    let cfg = ModelConfig {
        image_size: 4,
        channels: 3,
        patch_size: 4,
        embed_dim: d,
        num_layers: 1,
        num_heads: heads,
        ffn_hidden: 2,
    };
    (cfg, ViTParams::init(cfg, 0).unwrap())
}

fn identity(d: usize) -> Vec<f64> {
    (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

/// Two tokens, one head, identity projections and LayerNorm replaced by
/// its closed form on 2-vectors: LN([a, b]) = [±1, ∓1] (gamma 1, beta 0).
#[test]
fn two_token_attention_matches_hand_computation() {
    let (cfg, mut vit) = one_layer(2, 1);
    for (name, t) in vit.params_mut().unwrap() {
        if name.ends_with("w_q") || name.ends_with("w_k") || name.ends_with("w_v") || name.ends_with("w_o") {
            t.data_mut().copy_from_slice(&identity(2));
        }
    }
    let mut tape = Tape::new();
    let bound = vit.bind(&mut tape, false);
    let x = tape.constant(&[1, 2, 2], vec![3.0, 1.0, 0.0, 2.0]).unwrap();
    let att = attention_block(&mut tape, &cfg, &bound.layers[0], x, None).unwrap();
    // LN rows: h0 = [1, -1], h1 = [-1, 1] (up to eps); scores = h·hᵀ/√2
    let ln = |a: f64, b: f64| {
        let m = (a + b) / 2.0;
        let v = ((a - m).powi(2) + (b - m).powi(2)) / 2.0;
        let s = (v + 1e-6).sqrt();
        [(a - m) / s, (b - m) / s]
    };
    let h = [ln(3.0, 1.0), ln(0.0, 2.0)];
    let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
    let mut expected = Vec::new();
    let mut weights = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| dot(h[i], h[j]) / 2f64.sqrt()).collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
        weights.extend_from_slice(&p);
        for c in 0..2 {
            expected.push(p[0] * h[0][c] + p[1] * h[1][c]);
        }
    }
    let x0 = [3.0, 1.0, 0.0, 2.0];
    let got = tape.value(att.out);
    for i in 0..4 {
        assert!((got[i] - (x0[i] + expected[i])).abs() < 1e-12, "{got:?}");
    }
    for (a, b) in tape.value(att.weights).iter().zip(&weights) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn feed_forward_matches_closed_form() {
    let (cfg, mut vit) = one_layer(2, 1);
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let w1 = [0.5, -1.0, 2.0, 0.25];
    let b1 = [0.1, -0.2];
    let w2 = [1.0, 0.0, -0.5, 1.5];
    let b2 = [0.0, 0.3];
    for (name, t) in vit.params_mut().unwrap() {
        match name.as_str() {
            "layers.0.ffn.w1" => t.data_mut().copy_from_slice(&w1),
            "layers.0.ffn.b1" => t.data_mut().copy_from_slice(&b1),
            "layers.0.ffn.w2" => t.data_mut().copy_from_slice(&w2),
            "layers.0.ffn.b2" => t.data_mut().copy_from_slice(&b2),
            _ => {}
        }
    }
    let mut tape = Tape::new();
    let bound = vit.bind(&mut tape, false);
    let x = tape.constant(&[1, 1, 2], vec![2.0, -2.0]).unwrap();
    let out = ffn_block(&mut tape, &cfg, &bound.layers[0], x).unwrap();
    let s = (4.0f64 + 1e-6).sqrt();
    let h = [2.0 / s, -2.0 / s];
    let a: Vec<f64> = (0..2).map(|j| gelu(h[0] * w1[j] + h[1] * w1[2 + j] + b1[j])).collect();
    let o: Vec<f64> = (0..2).map(|j| gelu(a[0] * w2[j] + a[1] * w2[2 + j] + b2[j])).collect();
    let got = tape.value(out);
    assert!((got[0] - (2.0 + o[0])).abs() < 1e-12 && (got[1] - (-2.0 + o[1])).abs() < 1e-12, "{got:?}");
}

#[test]
fn frozen_backbone_rejects_updates() {
    let mut vit = ViTParams::init(ModelConfig::toy(), 0).unwrap();
    vit.freeze();
    assert!(vit.params_mut().is_err());
    assert!(vit.thawed_copy().params_mut().is_ok());
}
