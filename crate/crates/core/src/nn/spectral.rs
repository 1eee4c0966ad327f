use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{matvec, matvec_t, normalize};
use crate::tensor::Tensor;

/// Persisted left/right singular-vector estimates for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Singular values below this are treated as zero.
const SIGMA_FLOOR: f64 = 1e-12;

impl PowerIteration {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut u);
        PowerIteration {
            u,
            v: vec![0.0; cols],
        }
    }

    pub fn step(&mut self, w: &[f64], rows: usize, cols: usize) {
        let mut v = matvec_t(w, rows, cols, &self.u);
        if normalize(&mut v) == 0.0 {
            return;
        }
        let mut u = matvec(w, rows, cols, &v);
        if normalize(&mut u) == 0.0 {
            return;
        }
        self.u = u;
        self.v = v;
    }

    /// `u^T W v`, the current singular value estimate.
    pub fn sigma(&self, w: &[f64], rows: usize, cols: usize) -> f64 {
        let wv = matvec(w, rows, cols, &self.v);
        self.u.iter().zip(&wv).map(|(a, b)| a * b).sum()
    }
}

/// Rows and columns of a weight viewed as a matrix: leading dimension by the rest.
pub(crate) fn matrix_dims(weight: &Tensor) -> (usize, usize) {
    let rows = weight.shape()[0];
    (rows, weight.len() / rows.max(1))
}

/// Divides `weight` by the power-iteration estimate of its largest singular value.
///
/// A zero matrix comes back unchanged.
pub fn spectral_normalize(
    weight: &Tensor,
    state: &PowerIteration,
    iterations: usize,
) -> Result<(Tensor, PowerIteration)> {
    if iterations == 0 {
        return Err(Error::invalid("spectral_normalize needs at least one iteration"));
    }
    if weight.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "spectral_normalize expects a matrix, got shape {:?}",
            weight.shape()
        )));
    }
    let (rows, cols) = matrix_dims(weight);
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::Shape(format!(
            "power-iteration state ({}, {}) does not fit a {rows}x{cols} matrix",
            state.u.len(),
            state.v.len()
        )));
    }
    let mut next = state.clone();
    for _ in 0..iterations {
        next.step(weight.data(), rows, cols);
    }
    let sigma = next.sigma(weight.data(), rows, cols);
    if sigma.abs() < SIGMA_FLOOR {
        return Ok((weight.clone(), next));
    }
    let scaled = Tensor::new(
        weight.shape().to_vec(),
        weight.data().iter().map(|w| w / sigma).collect(),
    )?;
    Ok((scaled, next))
}

/// Forward-side record of a spectrally normalized weight.
#[derive(Clone, Debug)]
pub(crate) struct SpectralCache {
    pub state: PowerIteration,
    pub sigma: f64,
    pub weight: Tensor,
}

/// Effective weight for a forward pass; runs one power step when `advance` is set.
pub(crate) fn effective_weight(
    weight: &Tensor,
    state: &PowerIteration,
    advance: bool,
) -> SpectralCache {
    let (rows, cols) = matrix_dims(weight);
    let mut next = state.clone();
    if advance {
        next.step(weight.data(), rows, cols);
    }
    let sigma = next.sigma(weight.data(), rows, cols);
    let scaled = if sigma.abs() < SIGMA_FLOOR {
        weight.clone()
    } else {
        let data = weight.data().iter().map(|w| w / sigma).collect();
        Tensor::new(weight.shape().to_vec(), data).expect("same shape")
    };
    SpectralCache {
        state: next,
        sigma,
        weight: scaled,
    }
}

/// Maps a gradient w.r.t. the normalized weight back to the raw weight,
/// holding the singular vectors fixed: `(G - <G, W/s> u v^T) / s`.
pub(crate) fn backprop_weight(grad_eff: &Tensor, cache: &SpectralCache) -> Tensor {
    let sigma = cache.sigma;
    if sigma.abs() < SIGMA_FLOOR {
        return grad_eff.clone();
    }
    let inner = grad_eff.dot(&cache.weight);
    let cols = cache.state.v.len();
    let mut out = grad_eff.clone();
    for (idx, g) in out.data_mut().iter_mut().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        *g = (*g - inner * cache.state.u[r] * cache.state.v[c]) / sigma;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_scales_to_unit_norm() {
        let w = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let state = PowerIteration::new(2, 2, 11);
        let (scaled, _) = spectral_normalize(&w, &state, 50).unwrap();
        let d = scaled.data();
        assert!((d[0] - 1.0).abs() < 1e-9);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn identity_unchanged() {
        let w = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let (scaled, _) = spectral_normalize(&w, &PowerIteration::new(3, 3, 2), 3).unwrap();
        for (a, b) in scaled.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_passes_through() {
        let w = Tensor::zeros(&[2, 3]);
        let (scaled, _) = spectral_normalize(&w, &PowerIteration::new(2, 3, 0), 1).unwrap();
        assert_eq!(scaled, w);
    }

    #[test]
    fn rejects_zero_iterations_and_vectors() {
        let w = Tensor::zeros(&[2, 2]);
        assert!(spectral_normalize(&w, &PowerIteration::new(2, 2, 0), 0).is_err());
        assert!(spectral_normalize(&Tensor::zeros(&[4]), &PowerIteration::new(4, 1, 0), 1).is_err());
    }
}
