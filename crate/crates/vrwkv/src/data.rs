//! Deterministic synthetic classification task.
//!
//! Each class is a fixed stripe orientation plus a class-positioned blob.
//! Per-sample randomness (stripe phase, blob jitter, pixel noise) makes the
//! task non-trivial while leaving classes linearly well separated enough for
//! a tiny encoder. Pixels are in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::TokenGrid;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {need} samples to cover {need} classes, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("num_classes must be >= 1")]
    NoClasses,
    #[error("image_size must be >= 4")]
    TinyImage,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    /// Amplitude of the additive uniform pixel noise.
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n x S x S x 3` pixel tensor.
    pub images: TokenGrid<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a mini-batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> (TokenGrid<f64>, Vec<usize>) {
        let s = self.images.rows;
        let stride = s * s * 3;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        (
            TokenGrid::from_vec(indices.len(), s, s, 3, data),
            labels,
        )
    }
}

/// Generate `n` labeled images, classes balanced within one sample
/// (labels cycle `0, 1, ..., K-1, 0, ...`). Identical `(task, n)` gives
/// identical bytes.
pub fn make_dataset(task: &SyntheticTask, n: usize) -> Result<Dataset, DataError> {
    if task.num_classes == 0 {
        return Err(DataError::NoClasses);
    }
    if n < task.num_classes {
        return Err(DataError::TooFewSamples {
            need: task.num_classes,
            got: n,
        });
    }
    if task.image_size < 4 {
        return Err(DataError::TinyImage);
    }
    let s = task.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut images = TokenGrid::zeros(n, s, s, 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % task.num_classes;
        labels.push(class);
        render_sample(&mut images, i, class, task, &mut rng);
    }
    Ok(Dataset { images, labels })
}

fn render_sample(
    images: &mut TokenGrid<f64>,
    index: usize,
    class: usize,
    task: &SyntheticTask,
    rng: &mut ChaCha8Rng,
) {
    let s = task.image_size as f64;
    let k = task.num_classes as f64;
    // Class geometry: stripe angle in [0, pi), blob on a circle.
    let angle = std::f64::consts::PI * class as f64 / k;
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let freq = 3.0;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let blob_angle = std::f64::consts::TAU * class as f64 / k;
    let jitter = 0.05 * s;
    let bx = s / 2.0 + 0.3 * s * blob_angle.cos() + rng.random_range(-jitter..jitter);
    let by = s / 2.0 + 0.3 * s * blob_angle.sin() + rng.random_range(-jitter..jitter);
    let blob_r = 0.12 * s;
    let size = task.image_size;
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / s;
            let fy = y as f64 / s;
            let stripe =
                (std::f64::consts::TAU * freq * (fx * dir_x + fy * dir_y) + phase).sin();
            let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (blob_r * blob_r);
            let blob = (-d2).exp();
            let features = [stripe, 2.0 * blob - 1.0, 0.5 * stripe + blob - 0.5];
            for (c, f) in features.iter().enumerate() {
                let noise = rng.random_range(-task.noise..=task.noise);
                let v = 0.5 + 0.35 * f + noise;
                let idx = images.idx(index, y, x, c);
                images.data[idx] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Pixel-space nearest-centroid classifier; a floor any learned model must
/// beat comfortably.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset, num_classes: usize) -> f64 {
    let dim = train.images.rows * train.images.cols * 3;
    let mut centroids = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for i in 0..train.len() {
        let class = train.labels[i];
        counts[class] += 1;
        for (acc, &v) in centroids[class].iter_mut().zip(train.images.item(i)) {
            *acc += v;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let item = test.images.item(i);
        let mut best = (f64::INFINITY, 0usize);
        for (class, centroid) in centroids.iter().enumerate() {
            let d: f64 = item
                .iter()
                .zip(centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, class);
            }
        }
        if best.1 == test.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
