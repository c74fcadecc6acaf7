//! Seeded synthetic tasks.
//!
//! Every generator returns samples in shuffled order, so a contiguous
//! split is a random split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Three interleaved 2-D spiral arms.
    Spirals,
    /// 8×8 two-channel seven-segment digits (strokes + their outline).
    Digits8,
    /// 16×16 oriented gratings and checkerboards.
    Textures16,
    /// 12×12 filled circles, squares, triangles and crosses.
    Shapes12,
}

impl Generator {
    pub fn sample_shape(self) -> Vec<usize> {
        match self {
            Generator::Spirals => vec![2],
            Generator::Digits8 => vec![2, 8, 8],
            Generator::Textures16 => vec![1, 16, 16],
            Generator::Shapes12 => vec![1, 12, 12],
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Generator::Spirals => 3,
            Generator::Digits8 => 10,
            Generator::Textures16 => 4,
            Generator::Shapes12 => 4,
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> LabeledDataset {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (self as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        let classes = self.num_classes();
        let len: usize = self.sample_shape().iter().product();
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * len);
        for &c in &labels {
            let start = data.len();
            data.resize(start + len, 0.0);
            let out = &mut data[start..];
            match self {
                Generator::Spirals => spiral(c, out, &mut rng),
                Generator::Digits8 => digit(c, out, &mut rng),
                Generator::Textures16 => texture(c, out, &mut rng),
                Generator::Shapes12 => shape(c, out, &mut rng),
            }
        }
        let mut shape = vec![n];
        shape.extend(self.sample_shape());
        LabeledDataset::new(
            Tensor::new(shape, data).expect("sized above"),
            labels,
            classes,
        )
        .expect("labels < classes")
    }
}

fn spiral(c: usize, out: &mut [f32], rng: &mut ChaCha8Rng) {
    let t: f32 = rng.random_range(0.05..1.0);
    let angle = t * 3.0 * std::f32::consts::PI + c as f32 * std::f32::consts::TAU / 3.0;
    let noise = Normal::new(0.0, 0.09).unwrap();
    out[0] = 2.0 * t * angle.cos() + noise.sample(rng);
    out[1] = 2.0 * t * angle.sin() + noise.sample(rng);
}

// Segments a..g on a 4×6 glyph: top, upper-right, lower-right, bottom,
// lower-left, upper-left, middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn digit(c: usize, out: &mut [f32], rng: &mut ChaCha8Rng) {
    let (ox, oy) = (rng.random_range(0..=3usize), rng.random_range(0..=1usize));
    let ink: f32 = rng.random_range(0.7..1.0);
    let (strokes, outline) = out.split_at_mut(64);
    let mut set = |x: usize, y: usize| strokes[(oy + y) * 8 + ox + x] = ink;
    let seg = SEGMENTS[c];
    for i in 0..4 {
        if seg[0] {
            set(i, 0);
        }
        if seg[6] {
            set(i, 3);
        }
        if seg[3] {
            set(i, 6);
        }
    }
    for j in 0..4 {
        if seg[5] {
            set(0, j);
        }
        if seg[1] {
            set(3, j);
        }
        if seg[4] {
            set(0, 3 + j);
        }
        if seg[2] {
            set(3, 3 + j);
        }
    }
    // Second channel: pixels adjacent to a stroke but not on one.
    for y in 0..8 {
        for x in 0..8 {
            if strokes[y * 8 + x] > 0.0 {
                continue;
            }
            let near = [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .any(|(dx, dy)| {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    (0..8).contains(&nx)
                        && (0..8).contains(&ny)
                        && strokes[ny as usize * 8 + nx as usize] > 0.0
                });
            if near {
                outline[y * 8 + x] = 0.5;
            }
        }
    }
    let noise = Normal::new(0.0, 0.3).unwrap();
    for v in out.iter_mut() {
        *v += noise.sample(rng);
    }
}

fn texture(c: usize, out: &mut [f32], rng: &mut ChaCha8Rng) {
    let freq: f32 = rng.random_range(0.6..1.3);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let amp: f32 = rng.random_range(0.6..1.0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let (xf, yf) = (x as f32, y as f32);
            let v = match c {
                0 => (freq * yf + phase).sin(),
                1 => (freq * xf + phase).sin(),
                2 => (freq * (xf + yf) / std::f32::consts::SQRT_2 + phase).sin(),
                _ => (freq * xf + phase).sin() * (freq * yf + phase).sin(),
            };
            out[y * 16 + x] = amp * v + noise.sample(rng);
        }
    }
}

fn shape(c: usize, out: &mut [f32], rng: &mut ChaCha8Rng) {
    let r: f32 = rng.random_range(2.5..4.5);
    let cx: f32 = rng.random_range(r..12.0 - r);
    let cy: f32 = rng.random_range(r..12.0 - r);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for y in 0..12 {
        for x in 0..12 {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = match c {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
                _ => {
                    (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r)
                }
            };
            out[y * 12 + x] = if inside { 1.0 } else { 0.0 } + noise.sample(rng);
        }
    }
}
