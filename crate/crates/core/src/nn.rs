//! Dense layers and elementwise helpers used by the refinement head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epsilon added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Half-width of the uniform distribution used for fixture weights.
pub const FIXTURE_WEIGHT_SCALE: f64 = 0.1;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Fully connected layer `y = x W + b` with `W` stored row-major `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "linear {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: uniform_vec(rng, in_dim * out_dim, FIXTURE_WEIGHT_SCALE),
            bias: uniform_vec(rng, out_dim, FIXTURE_WEIGHT_SCALE),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects width {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (yo, w) in y.iter_mut().zip(row) {
                *yo += xi * w;
            }
        }
        Ok(y)
    }
}

/// Linear layers with ReLU between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStack {
    pub layers: Vec<Linear>,
}

impl LinearStack {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a linear stack needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::shape(format!(
                    "linear stack widths do not chain: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Layers with the given widths, e.g. `[in, hidden, out]`, seeded uniformly.
    pub fn seeded(widths: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::seeded(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            relu_in_place(&mut h);
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Normalizes one feature vector to zero mean and unit variance (no affine terms).
pub fn layer_norm(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for v in x {
        *v = (*v - mean) * inv;
    }
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward() {
        let l = Linear::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.5, 0.0, -0.5]).unwrap();
        assert_eq!(l.forward(&[1.0, -1.0]).unwrap(), vec![-2.5, -3.0, -3.5]);
        assert!(l.forward(&[1.0]).is_err());
    }

    #[test]
    fn stack_relu_between_layers() {
        let s = LinearStack::new(vec![Linear::identity(2), Linear::identity(2)]).unwrap();
        assert_eq!(s.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        let single = LinearStack::new(vec![Linear::identity(2)]).unwrap();
        assert_eq!(single.forward(&[-1.0, 2.0]).unwrap(), vec![-1.0, 2.0]);
        assert!(LinearStack::new(vec![Linear::zeros(2, 3), Linear::zeros(2, 2)]).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        layer_norm(&mut x);
        let mean: f64 = x.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let var: f64 = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1000.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn seeded_weights_in_range_and_reproducible() {
        let a = Linear::seeded(4, 4, &mut seeded_rng(3));
        let b = Linear::seeded(4, 4, &mut seeded_rng(3));
        assert_eq!(a, b);
        assert!(a.weight.iter().all(|w| w.abs() <= FIXTURE_WEIGHT_SCALE));
    }
}
