//! Deterministic parameter registry: every tensor a model owns is created
//! here, named, gradient-enabled, and recorded in creation order.

use cadenza_tensor::{lit, Scalar, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Builds and registers parameters with seeded initialization.
pub struct ParamBuilder<T: Scalar> {
    rng: ChaCha12Rng,
    items: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha12Rng::seed_from_u64(seed),
            items: Vec::new(),
        }
    }

    /// Register an externally built tensor. Returns a shallow handle.
    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Tensor<T> {
        tensor.enable_grad();
        self.items.push((name.to_string(), tensor.clone()));
        tensor
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform_scaled(name, shape, s)
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn uniform_scaled(&mut self, name: &str, shape: &[usize], scale: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| lit(self.rng.random_range(-scale..scale)))
            .collect();
        let t = Tensor::from_vec(shape.to_vec(), data).expect("shape matches data");
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let t = Tensor::zeros(shape.to_vec());
        self.add(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor<T> {
        let t = Tensor::full(shape.to_vec(), T::one());
        self.add(name, t)
    }

    pub fn finish(self) -> Vec<(String, Tensor<T>)> {
        self.items
    }
}
