//! Low-rank adaptation of frozen linear maps.

use cadenza_tensor::{lit, Scalar, Tape, Tensor, Var};
use rand::RngExt;
use rand_chacha::ChaCha12Rng;

use crate::config::LoraConfig;
use crate::params::ParamBuilder;
use crate::{ModelError, Result};

/// A rank-`r` additive correction to a `[in, out]` weight: the effective
/// weight is `W + scale * A @ B` with `A` `[in, r]` randomly initialized and
/// `B` `[r, out]` starting at zero, so a fresh adapter changes nothing.
pub struct LoraAdapter<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    scale: f64,
    dropout: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(
        params: &mut ParamBuilder<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        config: &LoraConfig,
    ) -> Self {
        LoraAdapter {
            a: params.uniform(&format!("{prefix}.a"), &[in_dim, config.rank], in_dim),
            b: params.zeros(&format!("{prefix}.b"), &[config.rank, out_dim]),
            scale: config.scale,
            dropout: config.dropout,
        }
    }

    /// The additive output correction `dropout(x) @ A @ B * scale` for an
    /// input `[n, in]`. Dropout only applies while training.
    pub fn delta(
        &self,
        tape: &Tape<T>,
        x: Var,
        train: bool,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Var> {
        let mut inp = x;
        if train && self.dropout > 0.0 {
            let rng = rng.ok_or_else(|| {
                ModelError::Train("dropout during training needs a randomness source".into())
            })?;
            let shape = tape.shape_of(x)?.to_vec();
            let numel: usize = shape.iter().product();
            let keep = 1.0 - self.dropout;
            let inv = lit::<T>(1.0 / keep);
            let mask: Vec<T> = (0..numel)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < keep {
                        inv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let mask = Tensor::from_vec(shape, mask).expect("mask matches input shape");
            inp = tape.mul(x, tape.constant(&mask))?;
        }
        let low = tape.matmul(inp, tape.leaf(&self.a))?;
        let up = tape.matmul(low, tape.leaf(&self.b))?;
        Ok(tape.affine(up, self.scale, 0.0)?)
    }

    /// Host-side merged weight `W + scale * A @ B`.
    pub fn merged_weight(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let r = self.a.shape()[1];
        if self.a.shape()[0] != in_dim || self.b.shape()[1] != out_dim {
            return Err(ModelError::Config(format!(
                "adapter {:?}x{:?} does not fit weight {:?}",
                self.a.shape(),
                self.b.shape(),
                w.shape()
            )));
        }
        let (av, bv, wv) = (self.a.data(), self.b.data(), w.data());
        let mut out = wv.clone();
        let s = lit::<T>(self.scale);
        for i in 0..in_dim {
            for k in 0..r {
                let aik = av[i * r + k] * s;
                if aik == T::zero() {
                    continue;
                }
                for j in 0..out_dim {
                    out[i * out_dim + j] = out[i * out_dim + j] + aik * bv[k * out_dim + j];
                }
            }
        }
        Ok(Tensor::from_vec(w.shape().to_vec(), out)?)
    }
}
