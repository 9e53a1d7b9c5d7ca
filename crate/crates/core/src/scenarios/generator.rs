use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::sample_standard_normal;

/// Label-preserving distortion applied to every image of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DomainTransform {
    Identity,
    /// Counter-clockwise rotation in degrees about the image center.
    Rotate(f64),
    /// Per-channel additive offset.
    ColorShift([f64; 3]),
    /// Extra Gaussian pixel noise with this standard deviation.
    Noise(f64),
    /// 3×3 box blur.
    Blur,
}

/// Procedural pattern shared by every sample of one class: a colored blob
/// at a class-specific location, striped at a class-specific angle and
/// frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub color: [f64; 3],
    /// Blob center as a fraction of the image side.
    pub center: (f64, f64),
    pub angle: f64,
    /// Stripe cycles across the image.
    pub frequency: f64,
}

const BLOB_CENTERS: [(f64, f64); 5] = [(0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7), (0.5, 0.5)];
const GOLDEN: f64 = 0.618_033_988_749_895;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Mixes several integers into one well-spread seed (splitmix64 rounds).
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn class_signature(seed: u64, class: usize) -> ClassSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x516, class as u64]));
    let hue = (class as f64 * GOLDEN + rng.gen_range(0.0..0.05)).rem_euclid(1.0);
    let value = if (class / 20) % 2 == 0 { 0.95 } else { 0.7 };
    let orientation = (class / BLOB_CENTERS.len()) % 4;
    ClassSignature {
        color: hsv(hue, 0.85, value),
        center: BLOB_CENTERS[class % BLOB_CENTERS.len()],
        angle: orientation as f64 * PI / 4.0,
        frequency: if rng.gen_bool(0.5) { 2.0 } else { 3.0 },
    }
}

/// Color cast that marks a domain; its strength grows with margin.
/// The first six domains push along distinct signed color axes.
pub fn domain_tint(domain: usize, margin: f64) -> [f64; 3] {
    let amplitude = 0.05 + 1.15 * margin * margin;
    let dir = match domain {
        0..=5 => {
            let mut d = [0.0; 3];
            d[domain % 3] = if domain < 3 { 0.5 } else { -0.5 };
            d
        }
        _ => {
            let h = hsv(domain as f64 * GOLDEN + 0.1, 1.0, 1.0);
            [h[0] - 0.5, h[1] - 0.5, h[2] - 0.5]
        }
    };
    [amplitude * dir[0], amplitude * dir[1], amplitude * dir[2]]
}

pub(crate) struct RenderParams {
    pub size: usize,
    pub margin: f64,
    pub tint: [f64; 3],
    pub transform: DomainTransform,
}

/// Renders one `[size, size, 3]` image in row-major HWC order.
pub(crate) fn render(sig: &ClassSignature, params: &RenderParams, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = params.size;
    let sf = s as f64;
    let slack = (1.0 - params.margin).clamp(0.0, 1.0);
    let jitter = 0.04 + 0.06 * slack;
    let noise = 0.04 + 0.08 * slack;
    let cx = (sig.center.0 + rng.gen_range(-jitter..jitter)) * sf;
    let cy = (sig.center.1 + rng.gen_range(-jitter..jitter)) * sf;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let brightness = 1.0 + rng.gen_range(-0.1..0.1) * (0.5 + slack);
    let radius = 0.22 * sf;
    let (sin_a, cos_a) = sig.angle.sin_cos();

    let mut img = vec![0.0f64; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let alpha = (-d2 / (2.0 * radius * radius)).exp();
            let t = (fx * cos_a + fy * sin_a) / sf;
            let stripe = 0.5 + 0.5 * (2.0 * PI * sig.frequency * t + phase).sin();
            for c in 0..3 {
                let fg = sig.color[c] * brightness * (0.35 + 0.65 * stripe);
                img[(y * s + x) * 3 + c] =
                    0.5 * (1.0 - alpha) + fg * alpha + params.tint[c] + noise * sample_standard_normal(rng);
            }
        }
    }
    apply_transform(&mut img, s, params.transform, rng);
    img.into_iter().map(|v| v as f32).collect()
}

fn apply_transform(img: &mut Vec<f64>, s: usize, t: DomainTransform, rng: &mut ChaCha8Rng) {
    match t {
        DomainTransform::Identity => {}
        DomainTransform::ColorShift(delta) => {
            for px in img.chunks_mut(3) {
                for c in 0..3 {
                    px[c] += delta[c];
                }
            }
        }
        DomainTransform::Noise(sigma) => {
            for v in img.iter_mut() {
                *v += sigma * sample_standard_normal(rng);
            }
        }
        DomainTransform::Blur => {
            let src = img.clone();
            let at = |x: isize, y: isize, c: usize| {
                let cx = x.clamp(0, s as isize - 1) as usize;
                let cy = y.clamp(0, s as isize - 1) as usize;
                src[(cy * s + cx) * 3 + c]
            };
            for y in 0..s as isize {
                for x in 0..s as isize {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                acc += at(x + dx, y + dy, c);
                            }
                        }
                        img[(y as usize * s + x as usize) * 3 + c] = acc / 9.0;
                    }
                }
            }
        }
        DomainTransform::Rotate(degrees) => {
            let src = img.clone();
            let (sin, cos) = degrees.to_radians().sin_cos();
            let center = (s as f64 - 1.0) / 2.0;
            let sample = |x: f64, y: f64, c: usize| {
                let xi = x.floor();
                let yi = y.floor();
                let (wx, wy) = (x - xi, y - yi);
                let px = |xx: f64, yy: f64| {
                    let cx = (xx as isize).clamp(0, s as isize - 1) as usize;
                    let cy = (yy as isize).clamp(0, s as isize - 1) as usize;
                    src[(cy * s + cx) * 3 + c]
                };
                px(xi, yi) * (1.0 - wx) * (1.0 - wy)
                    + px(xi + 1.0, yi) * wx * (1.0 - wy)
                    + px(xi, yi + 1.0) * (1.0 - wx) * wy
                    + px(xi + 1.0, yi + 1.0) * wx * wy
            };
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 - center, y as f64 - center);
                    // inverse map: where does this output pixel come from
                    let sx = cos * dx + sin * dy + center;
                    let sy = -sin * dx + cos * dy + center;
                    let (sx, sy) = (round_near(sx), round_near(sy));
                    for c in 0..3 {
                        img[(y * s + x) * 3 + c] = sample(sx, sy, c);
                    }
                }
            }
        }
    }
}

/// Snaps coordinates within 1e-9 of an integer, so right-angle rotations
/// are exact permutations.
fn round_near(v: f64) -> f64 {
    if (v - v.round()).abs() < 1e-9 {
        v.round()
    } else {
        v
    }
}
