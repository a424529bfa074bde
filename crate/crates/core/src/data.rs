//! Synthetic desk-scale datasets: Gaussian blob classification, oriented-bar
//! patch images for convolutional models, and token-copy sequences for
//! attention models. All generators are deterministic in their seed.

use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

/// Labeled vector or image dataset. Inputs are [n, dim] for vector tasks and
/// [n, 1, 8, 8] for patch images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows (or images) at the given indices, preserving order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut shape = self.inputs.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
        }
        (Tensor::new(shape, data), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Token sequences where the target of each position is its own input token.
#[derive(Debug, Clone)]
pub struct SeqDataset {
    pub seqs: Vec<Vec<usize>>,
    pub vocab: usize,
}

/// Gaussian clusters around well-separated class means. Linearly separable
/// at spread 0; the margin shrinks as spread grows.
pub fn gen_blobs_cls(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Dataset {
    assert!(n >= classes * 10, "need at least 10 samples per class");
    assert!(dim >= 1 && classes >= 2);
    let mut rng = Xoshiro256::stream(seed, 0xb10b);
    // class means: random unit directions scaled to pairwise separation
    let mut means = vec![vec![0.0; dim]; classes];
    for mean in means.iter_mut() {
        loop {
            for v in mean.iter_mut() {
                *v = rng.next_gaussian();
            }
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for v in mean.iter_mut() {
                    *v *= 4.0 / norm;
                }
                break;
            }
        }
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        for d in 0..dim {
            data.push(means[y][d] + spread * rng.next_gaussian());
        }
    }
    Dataset { inputs: Tensor::new(vec![n, dim], data), labels, classes }
}

pub const PATCH_SIDE: usize = 8;

/// 8×8 single-channel images with class-dependent oriented-bar textures:
/// class 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal bars, at a
/// random offset, plus additive Gaussian pixel noise.
pub fn gen_patches_cls(n: usize, noise: f64, seed: u64) -> Dataset {
    let classes = 4;
    assert!(n >= classes * 10, "need at least 10 samples per class");
    let s = PATCH_SIDE;
    let mut rng = Xoshiro256::stream(seed, 0x9a7c);
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        let offset = rng.next_below(s as u64) as usize;
        let mut img = vec![0.0; s * s];
        for row in 0..s {
            for col in 0..s {
                let on = match y {
                    0 => (row + offset) % 4 < 2,            // horizontal stripes
                    1 => (col + offset) % 4 < 2,            // vertical stripes
                    2 => (row + col + offset) % 4 < 2,      // diagonal stripes
                    _ => (row + s - col + offset) % 4 < 2,  // anti-diagonal
                };
                img[row * s + col] = if on { 1.0 } else { -1.0 };
            }
        }
        for px in &mut img {
            *px += noise * rng.next_gaussian();
        }
        data.extend_from_slice(&img);
    }
    Dataset { inputs: Tensor::new(vec![n, 1, s, s], data), labels, classes }
}

/// n sequences of `len` tokens drawn uniformly from the vocabulary; the
/// training target at every position is the input token itself.
pub fn gen_seq_copy(n: usize, len: usize, vocab: usize, seed: u64) -> SeqDataset {
    assert!(vocab >= 2 && len >= 1 && n >= 1);
    let mut rng = Xoshiro256::stream(seed, 0x5ec0);
    let seqs = (0..n)
        .map(|_| (0..len).map(|_| rng.next_below(vocab as u64) as usize).collect())
        .collect();
    SeqDataset { seqs, vocab }
}

/// Nearest-class-mean accuracy, used as a separability oracle in tests.
pub fn nearest_mean_accuracy(train: &Dataset, eval: &Dataset) -> f64 {
    let dim: usize = train.inputs.shape()[1..].iter().product();
    let mut means = vec![vec![0.0; dim]; train.classes];
    let mut counts = vec![0usize; train.classes];
    for (i, &y) in train.labels.iter().enumerate() {
        counts[y] += 1;
        for d in 0..dim {
            means[y][d] += train.inputs.data()[i * dim + d];
        }
    }
    for (mean, &c) in means.iter_mut().zip(&counts) {
        for v in mean.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    let mut correct = 0;
    for (i, &y) in eval.labels.iter().enumerate() {
        let x = &eval.inputs.data()[i * dim..(i + 1) * dim];
        let mut best = (f64::INFINITY, 0);
        for (cls, mean) in means.iter().enumerate() {
            let d2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, cls);
            }
        }
        if best.1 == y {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}
