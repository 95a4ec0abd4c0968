//! Seeded random streams.
//!
//! Every stream is a ChaCha8 keystream: the 64-bit seed is expanded into the
//! 256-bit key and the stream id selects an independent counter space. The
//! output sequence depends only on `(seed, stream)`, never on the platform.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream sharing this generator's seed. The result does not
    /// depend on how many values have already been drawn from `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        Self::with_stream(self.seed, stream)
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `amount` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::lit(self.normal() * std)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Matrix with orthonormal rows (if `rows ≤ cols`) or orthonormal columns
    /// (otherwise), from Gram–Schmidt on a Gaussian draw.
    pub fn orthogonal<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let (n, m) = (rows.min(cols), rows.max(cols));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..m).map(|_| self.normal()).collect();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut data = vec![T::zero(); rows * cols];
        for (i, b) in basis.iter().enumerate() {
            for (j, &x) in b.iter().enumerate() {
                let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
                data[r * cols + c] = T::lit(x);
            }
        }
        Tensor::from_parts(vec![rows, cols], data)
    }

    /// Zero-mean Gaussian with variance `2 / fan_in`, `fan_in` being the last extent.
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in = *shape.last().expect("kaiming init needs a non-empty shape");
        self.gaussian(shape, (2.0 / fan_in as f64).sqrt())
    }
}
