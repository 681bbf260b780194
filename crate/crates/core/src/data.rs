//! Procedural class-conditioned shapes.
//!
//! Each image is one anti-aliased shape on a flat dark background. The class
//! is `shape * 3 + colour` with shapes {circle, square, triangle} and colours
//! {red, green, blue}; position, size and background level are random.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::multires::downsample_avg;
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 3;
pub const NUM_COLOURS: usize = 3;
pub const NUM_CLASSES: usize = NUM_SHAPES * NUM_COLOURS;
pub const CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 4;
const CACHE_MAGIC: &[u8; 8] = b"NDSHAPE1";
const CACHE_VERSION: u32 = 1;

const PALETTE: [[f32; 3]; NUM_COLOURS] = [
    [0.9, -0.6, -0.7],
    [-0.6, 0.85, -0.5],
    [-0.5, -0.4, 0.95],
];

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub seed: u64,
    pub side: usize,
    pub classes: usize,
    /// `[n, 3, side, side]` in `[-1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ShapesDataset {
    pub fn generate(seed: u64, n: usize, side: usize) -> Result<Self> {
        if side < 8 {
            return Err(invalid!("side must be at least 8, got {side}"));
        }
        if n == 0 {
            return Err(invalid!("need at least one sample"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * CHANNELS * side * side);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..NUM_CLASSES);
            labels.push(label);
            data.extend(render(label, side, &mut rng));
        }
        Ok(Self {
            seed,
            side,
            classes: NUM_CLASSES,
            images: Tensor::new(&[n, CHANNELS, side, side], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images `[len(idx), 3, side, side]` and labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let item = self.images.item_len();
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
        }
        let t = Tensor::new(&[idx.len(), CHANNELS, self.side, self.side], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The same samples average-pooled to `side`.
    pub fn resized(&self, side: usize) -> Result<Self> {
        if side == self.side {
            return Ok(self.clone());
        }
        if side == 0 || side > self.side || !self.side.is_multiple_of(side) {
            return Err(invalid!("cannot resize side {} to {side}", self.side));
        }
        Ok(Self {
            images: downsample_avg(&self.images, self.side / side)?,
            side,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.images.len() * 4 + self.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        let item = self.images.item_len();
        for (i, &l) in self.labels.iter().enumerate() {
            out.push(l as u8);
            for &v in &self.images.data()[i * item..(i + 1) * item] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("dataset cache: {m}"));
        if b.len() < 36 || &b[..8] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        if u32_at(8) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        let seed = u64_at(12);
        let n = u64_at(20) as usize;
        let side = u32_at(28) as usize;
        let classes = u32_at(32) as usize;
        let item = CHANNELS * side * side;
        let expected = 36 + n * (1 + 4 * item);
        if b.len() != expected {
            return Err(bad("length does not match header"));
        }
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * item);
        let mut o = 36;
        for _ in 0..n {
            let l = b[o] as usize;
            if l >= classes {
                return Err(bad("label out of range"));
            }
            labels.push(l);
            o += 1;
            for c in b[o..o + 4 * item].chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            o += 4 * item;
        }
        Ok(Self {
            seed,
            side,
            classes,
            images: Tensor::new(&[n, CHANNELS, side, side], data)?,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Regenerate from the header and compare with the stored records.
    pub fn verify(&self) -> Result<()> {
        let fresh = Self::generate(self.seed, self.len(), self.side)?;
        if fresh != *self {
            return Err(Error::Consistency(
                "dataset cache differs from its regeneration".into(),
            ));
        }
        Ok(())
    }
}

/// Coverage of shape `kind` at point `(x, y)` in unit coordinates.
fn inside(kind: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            let h = r * 0.85;
            dx.abs() <= h && dy.abs() <= h
        }
        _ => {
            // Upward equilateral triangle inscribed in the circle of radius r.
            let top = cy - r;
            let bottom = cy + 0.5 * r;
            if y < top || y > bottom {
                return false;
            }
            let half_width = (y - top) / (1.5 * r) * (r * 3f32.sqrt() / 2.0);
            dx.abs() <= half_width
        }
    }
}

fn render(label: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let kind = label / NUM_COLOURS;
    let colour = PALETTE[label % NUM_COLOURS];
    let r: f32 = rng.random_range(0.18..0.34);
    let cx: f32 = rng.random_range(r..1.0 - r);
    let cy: f32 = rng.random_range(r..1.0 - r);
    let bg: f32 = rng.random_range(-1.0..-0.6);
    let n = side * side;
    let mut img = vec![0.0f32; CHANNELS * n];
    let inv = 1.0 / (side * SUPERSAMPLE) as f32;
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px * SUPERSAMPLE + sx) as f32 + 0.5) * inv;
                    let y = ((py * SUPERSAMPLE + sy) as f32 + 0.5) * inv;
                    hits += inside(kind, x, y, cx, cy, r) as usize;
                }
            }
            let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for c in 0..CHANNELS {
                img[c * n + py * side + px] = bg * (1.0 - a) + colour[c] * a;
            }
        }
    }
    img
}
