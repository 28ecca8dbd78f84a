//! Seeded synthetic image-classification data: coloured geometric shapes on noisy backgrounds.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{LitError, Result};
use crate::rng::{derived, seeded};
use crate::tensor::{Real, Tensor};

pub const NUM_CLASSES: usize = 10;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["disc", "ring", "square", "frame", "triangle", "plus", "cross", "hbar", "vbar", "diamond"];

/// Images `[N×R×R×3]` with values in roughly `[-1, 1]`, stored in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let t = (0.3 * r).max(1.5);
    match class {
        0 => dy * dy + dx * dx <= r * r,
        1 => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= r && d >= r - t
        }
        2 => ay <= r && ax <= r,
        3 => ay <= r && ax <= r && (ay >= r - t || ax >= r - t),
        // apex up, base at dy = r
        4 => dy <= r && dy >= -r && ax <= (dy + r) / 2.0,
        5 => (ay <= t / 1.5 && ax <= r) || (ax <= t / 1.5 && ay <= r),
        6 => ay <= r && ax <= r && ((dy - dx).abs() <= t || (dy + dx).abs() <= t),
        7 => ay <= t / 1.5 && ax <= r,
        8 => ax <= t / 1.5 && ay <= r,
        9 => ay + ax <= r,
        _ => false,
    }
}

impl Dataset {
    /// `n` images cycling through the classes; fully determined by `seed`.
    pub fn synthetic(n: usize, resolution: usize, seed: u64) -> Result<Self> {
        if resolution < 16 {
            return Err(LitError::config(format!("synthetic images need resolution ≥ 16, got {resolution}")));
        }
        let res = resolution as f64;
        let mut images = Vec::with_capacity(n * resolution * resolution * 3);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % NUM_CLASSES;
            let mut rng = derived(seed, i as u64);
            let r = rng.random_range(0.16 * res..0.28 * res);
            let cy = rng.random_range(r + 1.0..res - r - 1.0);
            let cx = rng.random_range(r + 1.0..res - r - 1.0);
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
            for y in 0..resolution {
                for x in 0..resolution {
                    let on = inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
                    for ch in 0..3 {
                        let v = if on { fg[ch] } else { bg[ch] } + rng.random_range(-0.05..0.05);
                        images.push(2.0 * v - 1.0);
                    }
                }
            }
            labels.push(class);
        }
        Ok(Dataset { resolution, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.resolution * self.resolution * 3
    }

    /// Gather the images at `indices` into `[B×R×R×3]`.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(LitError::shape("batch", format!("index {i} of {} images", self.len())));
            }
            data.extend(self.images[i * len..(i + 1) * len].iter().map(|&v| F::from_f64(v)));
            labels.push(self.labels[i]);
        }
        let r = self.resolution;
        Ok((Tensor::new(&[indices.len(), r, r, 3], data)?, labels))
    }

    pub fn all<F: Real>(&self) -> Result<(Tensor<F>, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Deterministic per-epoch shuffle.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derived(seed ^ 0x5eed_0f0e, epoch as u64));
        order
    }
}

/// Random images in `[-1, 1]` for smoke tests and inspection.
pub fn random_images<F: Real>(n: usize, resolution: usize, seed: u64) -> Tensor<F> {
    Tensor::uniform(&[n, resolution, resolution, 3], -1.0, 1.0, &mut seeded(seed))
}
