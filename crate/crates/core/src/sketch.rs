//! Count sketch projection and multimodal compact bilinear (MCB) pooling.
//!
//! MCB approximates the flattened outer product `x ⊗ y` projected to `D`
//! dimensions: both inputs are count-sketched and the sketches are circularly
//! convolved in the frequency domain.

use serde::{Deserialize, Serialize};

use crate::error::{GmaError, Result};
use crate::fft;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Hash buckets and signs of a count sketch, derived entirely from
/// `(seed, input_dim, sketch_dim)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchSpec {
    input_dim: usize,
    sketch_dim: usize,
    seed: u64,
    buckets: Vec<usize>,
    signs: Vec<i8>,
}

/// Serialisable identity of a [`SketchSpec`]; the tables regenerate from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchKey {
    pub seed: u64,
    pub input_dim: usize,
    pub sketch_dim: usize,
}

impl SketchSpec {
    pub fn new(seed: u64, input_dim: usize, sketch_dim: usize) -> Result<Self> {
        if input_dim == 0 || sketch_dim == 0 {
            return Err(GmaError::contract(
                "SketchSpec::new",
                "input and sketch dimensions must be positive",
            ));
        }
        let mut rng = SplitMix64::new(seed);
        let mut buckets = Vec::with_capacity(input_dim);
        let mut signs = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            buckets.push(rng.below(sketch_dim as u64) as usize);
            signs.push(if rng.next_u64() >> 63 == 0 { 1 } else { -1 });
        }
        Ok(SketchSpec {
            input_dim,
            sketch_dim,
            seed,
            buckets,
            signs,
        })
    }

    /// Builds a spec from explicit tables (used for hand-checked cases).
    pub fn from_tables(buckets: Vec<usize>, signs: Vec<i8>, sketch_dim: usize) -> Result<Self> {
        if buckets.len() != signs.len() || buckets.is_empty() {
            return Err(GmaError::shape("SketchSpec::from_tables", &[buckets.len()], &[signs.len()]));
        }
        if buckets.iter().any(|&b| b >= sketch_dim) || signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(GmaError::contract(
                "SketchSpec::from_tables",
                "buckets must lie in [0, D) and signs in {-1, +1}",
            ));
        }
        Ok(SketchSpec {
            input_dim: buckets.len(),
            sketch_dim,
            seed: 0,
            buckets,
            signs,
        })
    }

    pub fn from_key(key: SketchKey) -> Result<Self> {
        SketchSpec::new(key.seed, key.input_dim, key.sketch_dim)
    }

    pub fn key(&self) -> SketchKey {
        SketchKey {
            seed: self.seed,
            input_dim: self.input_dim,
            sketch_dim: self.sketch_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// `out[h[i]] += s[i] * x[i]`
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(GmaError::shape("count_sketch", &[x.len()], &[self.input_dim]));
        }
        let mut out = vec![0.0; self.sketch_dim];
        for ((&v, &h), &s) in x.iter().zip(&self.buckets).zip(&self.signs) {
            out[h] += s as f64 * v;
        }
        Ok(out)
    }

    /// Adjoint of [`project`](Self::project): `x_grad[i] = s[i] * g[h[i]]`.
    pub fn project_adjoint(&self, g: &[f64]) -> Vec<f64> {
        self.buckets
            .iter()
            .zip(&self.signs)
            .map(|(&h, &s)| s as f64 * g[h])
            .collect()
    }
}

/// Count sketch of a vector.
pub fn count_sketch(x: &Tensor, spec: &SketchSpec) -> Result<Tensor> {
    Ok(Tensor::vector(spec.project(x.data())?))
}

/// Circular convolution of two equal-length vectors through the FFT.
pub fn circular_convolve_fft(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.len() != b.len() {
        return Err(GmaError::shape("circular_convolve_fft", a.dims(), b.dims()));
    }
    Ok(Tensor::vector(fft::circular_convolve(a.data(), b.data())?))
}

/// Compact bilinear pooling of `x` and `y` into the shared sketch dimension.
pub fn mcb_pool(x: &Tensor, y: &Tensor, specs: (&SketchSpec, &SketchSpec)) -> Result<Tensor> {
    let (sx, sy) = specs;
    if sx.sketch_dim != sy.sketch_dim {
        return Err(GmaError::shape(
            "mcb_pool",
            &[sx.sketch_dim],
            &[sy.sketch_dim],
        ));
    }
    circular_convolve_fft(&count_sketch(x, sx)?, &count_sketch(y, sy)?)
}
