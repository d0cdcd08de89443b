//! Procedural CIFAR-format corpora for offline runs.
//!
//! Every class is a style (a pattern, a foreground hue and a background tone); instances jitter
//! position, size, colour, phase and pixel noise. Different `namespace` values give disjoint
//! class families drawn from the same visual primitives, which is what surrogate pretraining uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, CIFAR_PIXELS, CIFAR_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    StripesH,
    StripesV,
    StripesDiag,
    Checker,
    Dots,
}

const PATTERNS: [Pattern; 10] = [
    Pattern::Disk,
    Pattern::Square,
    Pattern::Triangle,
    Pattern::Ring,
    Pattern::Cross,
    Pattern::StripesH,
    Pattern::StripesV,
    Pattern::StripesDiag,
    Pattern::Checker,
    Pattern::Dots,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub pattern: Pattern,
    pub hue: f32,
    pub background: f32,
    pub period: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Separates class families; pretraining uses a different namespace than the benchmark.
    pub namespace: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 10, train_per_class: 500, test_per_class: 100, seed: 0, namespace: 0 }
    }
}

/// Style of class `k` in `namespace`.
pub fn class_style(namespace: u32, k: usize) -> ClassStyle {
    let shift = namespace as usize * 3;
    let pattern = PATTERNS[(k + shift) % PATTERNS.len()];
    let round = (k / PATTERNS.len()) as f32;
    let golden = 0.618_034f32;
    let hue = (k as f32 * golden + namespace as f32 * 0.5 * golden + round * 0.25).fract();
    let background = 0.15 + 0.7 * ((k as f32 * 0.37 + namespace as f32 * 0.21).fract());
    let period = 4.0 + ((k + namespace as usize) % 3) as f32 * 2.0;
    ClassStyle { pattern, hue, background, period }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
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

fn inside(pattern: Pattern, dx: f32, dy: f32, radius: f32, period: f32, phase: f32) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match pattern {
        Pattern::Disk => r <= radius,
        Pattern::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
        Pattern::Triangle => dy <= radius * 0.8 && dy >= -radius && dx.abs() <= (dy + radius) * 0.6,
        Pattern::Ring => r <= radius && r >= radius * 0.55,
        Pattern::Cross => (dx.abs() <= radius * 0.3 || dy.abs() <= radius * 0.3) && dx.abs() <= radius && dy.abs() <= radius,
        Pattern::StripesH => ((dy + phase) / period).rem_euclid(2.0) < 1.0,
        Pattern::StripesV => ((dx + phase) / period).rem_euclid(2.0) < 1.0,
        Pattern::StripesDiag => ((dx + dy + phase) / period).rem_euclid(2.0) < 1.0,
        Pattern::Checker => {
            let a = ((dx + phase) / period).rem_euclid(2.0) < 1.0;
            let b = ((dy + phase) / period).rem_euclid(2.0) < 1.0;
            a ^ b
        }
        Pattern::Dots => {
            let gx = (dx + phase).rem_euclid(period * 1.5) - period * 0.75;
            let gy = (dy + phase).rem_euclid(period * 1.5) - period * 0.75;
            gx * gx + gy * gy <= (period * 0.45) * (period * 0.45)
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Renders one instance of a class as CHW bytes.
pub fn render<R: Rng>(rng: &mut R, style: &ClassStyle, out: &mut [u8]) {
    let side = CIFAR_SIDE as f32;
    let fg = hsv(style.hue + rng.gen_range(-0.03..0.03), rng.gen_range(0.6..1.0), rng.gen_range(0.65..1.0));
    let tone = (style.background + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0);
    let tint = hsv(rng.gen(), rng.gen_range(0.0..0.3), tone);
    let gradient = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let cx = side / 2.0 + rng.gen_range(-5.0..5.0);
    let cy = side / 2.0 + rng.gen_range(-5.0..5.0);
    let radius = rng.gen_range(7.0..12.0);
    let period = style.period * rng.gen_range(0.85..1.15);
    let phase = rng.gen_range(0.0..2.0 * period);
    let textured = matches!(
        style.pattern,
        Pattern::StripesH | Pattern::StripesV | Pattern::StripesDiag | Pattern::Checker | Pattern::Dots
    );
    // a distractor blob of an unrelated colour
    let blob = [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(2.0..5.0)];
    let blob_colour = hsv(rng.gen(), rng.gen_range(0.0..0.8), rng.gen_range(0.2..1.0));
    let noise = rng.gen_range(0.03..0.08);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for y in 0..CIFAR_SIDE {
        for x in 0..CIFAR_SIDE {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let shade = 1.0 + gradient[0] * dx / side + gradient[1] * dy / side;
            let mut px = tint.map(|v| v * shade);
            let region = !textured || (dx * dx + dy * dy).sqrt() <= radius * 1.3;
            if region && inside(style.pattern, dx, dy, radius, period, phase) {
                px = fg;
            }
            let (bx, by) = (x as f32 - blob[0], y as f32 - blob[1]);
            if bx * bx + by * by <= blob[2] * blob[2] {
                px = blob_colour;
            }
            for c in 0..3 {
                let v = px[c] + noise * normal(rng);
                out[c * plane + y * CIFAR_SIDE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
}

fn split(spec: &SynthSpec, per_class: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = spec.classes * per_class;
    let mut images = vec![0u8; n * CIFAR_PIXELS];
    let mut labels = Vec::with_capacity(n);
    let styles: Vec<ClassStyle> = (0..spec.classes).map(|k| class_style(spec.namespace, k)).collect();
    for i in 0..n {
        // interleave classes the way shuffled CIFAR batches are
        let k = i % spec.classes;
        render(&mut rng, &styles[k], &mut images[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
        labels.push(k as u32);
    }
    let class_names = styles
        .iter()
        .enumerate()
        .map(|(k, s)| format!("{k:02}-{:?}-h{:.2}", s.pattern, s.hue).to_lowercase())
        .collect();
    Dataset { images, labels, class_names }
}

/// Train and test splits for a spec.
pub fn generate(spec: &SynthSpec) -> (Dataset, Dataset) {
    (split(spec, spec.train_per_class, 1), split(spec, spec.test_per_class, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec { classes: 4, train_per_class: 3, test_per_class: 2, ..Default::default() };
        let (a, t) = generate(&spec);
        let (b, _) = generate(&spec);
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(t.len(), 8);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn namespaces_differ() {
        assert_ne!(class_style(0, 0), class_style(1, 0));
    }

    #[test]
    fn train_and_test_images_differ() {
        let spec = SynthSpec { classes: 2, train_per_class: 2, test_per_class: 2, ..Default::default() };
        let (a, t) = generate(&spec);
        assert_ne!(a.images, t.images);
    }
}
