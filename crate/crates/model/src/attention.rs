//! Grouped-query attention with per-attribute rotary position encoding and
//! packed-batch masking.

use cadenza_tensor::{lit, Scalar, Tape, Tensor, Var};

use rand_chacha::ChaCha12Rng;

use crate::config::{AttentionKind, ModelConfig, NUM_GROUPS};
use crate::lora::LoraAdapter;
use crate::params::ParamBuilder;
use crate::seq::POSITION_SLOTS;
use crate::{ModelError, Result};

/// Visibility for one packed row: a query may attend to itself and to any
/// earlier token of the same segment. Padding is visible to nothing (except
/// itself, which keeps its softmax well-defined without affecting anyone).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackingMask {
    segments: Vec<Option<u32>>,
}

impl PackingMask {
    pub fn new(segments: Vec<Option<u32>>) -> Self {
        PackingMask { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        if query == key {
            return true;
        }
        if key > query {
            return false;
        }
        match (self.segments[query], self.segments[key]) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Additive score mask: 0 where attention is allowed, -inf elsewhere.
    pub fn to_additive<T: Scalar>(&self) -> Tensor<T> {
        let n = self.len();
        let mut data = vec![T::neg_infinity(); n * n];
        for q in 0..n {
            for k in 0..=q {
                if self.allows(q, k) {
                    data[q * n + k] = T::zero();
                }
            }
        }
        Tensor::from_vec(vec![n, n], data).expect("mask shape matches data")
    }
}

/// Rotation frequency ladder for one head: `base^(-2j / head_dim)` for each
/// lane pair `j`.
pub fn pair_frequencies(base: f64, head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

/// Host-side cos/sin tables for rotating `[n, head_dim]` rows by
/// `angle[t][j] = value[t] * base^(-2j / head_dim)`.
pub fn rotation_tables<T: Scalar>(
    values: &[f64],
    base: f64,
    head_dim: usize,
) -> (Tensor<T>, Tensor<T>) {
    let freqs = pair_frequencies(base, head_dim);
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(values.len() * half);
    let mut sin = Vec::with_capacity(values.len() * half);
    for &v in values {
        for &f in &freqs {
            let a = v * f;
            cos.push(lit::<T>(a.cos()));
            sin.push(lit::<T>(a.sin()));
        }
    }
    let shape = vec![values.len(), half];
    (
        Tensor::from_vec(shape.clone(), cos).expect("table shape"),
        Tensor::from_vec(shape, sin).expect("table shape"),
    )
}

/// Tables whose angles sum the contributions of several (value, base)
/// ladders per token: `angle[t][j] = sum_i values_i[t] * base_i^(-2j/d)`.
pub fn composed_rotation_tables<T: Scalar>(
    parts: &[(Vec<f64>, f64)],
    n: usize,
    head_dim: usize,
) -> (Tensor<T>, Tensor<T>) {
    let half = head_dim / 2;
    let mut angles = vec![0.0f64; n * half];
    for (values, base) in parts {
        let freqs = pair_frequencies(*base, head_dim);
        for (t, &v) in values.iter().enumerate() {
            for (j, &f) in freqs.iter().enumerate() {
                angles[t * half + j] += v * f;
            }
        }
    }
    let cos: Vec<T> = angles.iter().map(|&a| lit(a.cos())).collect();
    let sin: Vec<T> = angles.iter().map(|&a| lit(a.sin())).collect();
    let shape = vec![n, half];
    (
        Tensor::from_vec(shape.clone(), cos).expect("table shape"),
        Tensor::from_vec(shape, sin).expect("table shape"),
    )
}

/// Rotate `[n, d]` rows, pairing adjacent lanes, by angles derived from one
/// scalar position per row and one frequency base. Exposed for tests and
/// for building custom attention variants.
pub fn rotate_rows<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    values: &[f64],
    base: f64,
    head_dim: usize,
) -> Result<Var> {
    let (cos, sin) = rotation_tables::<T>(values, base, head_dim);
    Ok(tape.rotate_pairs(x, tape.constant(&cos), tape.constant(&sin))?)
}

/// Captured attention internals for inspection: one `[n, n]` matrix per
/// query head per layer, in layer-major order.
#[derive(Debug, Default)]
pub struct AttnTrace<T: Scalar> {
    pub scores: Vec<Vec<Tensor<T>>>,
    pub probs: Vec<Vec<Tensor<T>>>,
}

/// Per-forward options threaded through the backbone.
pub struct ForwardOptions<'a, T: Scalar> {
    /// Enables dropout inside LoRA adapters.
    pub train: bool,
    /// Randomness source for dropout; required when training with a
    /// nonzero LoRA dropout.
    pub rng: Option<&'a mut ChaCha12Rng>,
    /// When set, attention scores and probabilities are recorded.
    pub trace: Option<&'a mut AttnTrace<T>>,
}

impl<T: Scalar> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        ForwardOptions { train: false, rng: None, trace: None }
    }
}

impl<T: Scalar> ForwardOptions<'_, T> {
    pub fn eval() -> Self {
        Self::default()
    }
}

/// Optional low-rank adapters for the four attention projections.
pub struct AttnLora<T: Scalar> {
    pub q: LoraAdapter<T>,
    pub k: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
    pub o: LoraAdapter<T>,
}

/// One grouped-query attention layer.
pub struct AttentionLayer<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub lora: Option<AttnLora<T>>,
    kind: AttentionKind,
    heads_q: usize,
    heads_kv: usize,
    head_dim: usize,
    group_bases: [f64; NUM_GROUPS],
    attr_bases: [(usize, f64); 5],
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn new(config: &ModelConfig, params: &mut ParamBuilder<T>, prefix: &str) -> Self {
        let h = config.hidden_size;
        let dq = config.heads_q * config.head_dim();
        let dkv = config.heads_kv * config.head_dim();
        AttentionLayer {
            wq: params.uniform(&format!("{prefix}.wq"), &[h, dq], h),
            wk: params.uniform(&format!("{prefix}.wk"), &[h, dkv], h),
            wv: params.uniform(&format!("{prefix}.wv"), &[h, dkv], h),
            wo: params.uniform(&format!("{prefix}.wo"), &[dq, h], dq),
            lora: None,
            kind: config.attention,
            heads_q: config.heads_q,
            heads_kv: config.heads_kv,
            head_dim: config.head_dim(),
            group_bases: config.bases.per_group(),
            attr_bases: config.bases.per_attribute(),
        }
    }

    /// Attach low-rank adapters to the q/k/v/o projections.
    pub fn add_lora(&mut self, config: &ModelConfig, params: &mut ParamBuilder<T>, prefix: &str) {
        let h = self.wq.shape()[0];
        let dq = self.wq.shape()[1];
        let dkv = self.wk.shape()[1];
        let l = &config.lora;
        self.lora = Some(AttnLora {
            q: LoraAdapter::new(params, &format!("{prefix}.q"), h, dq, l),
            k: LoraAdapter::new(params, &format!("{prefix}.k"), h, dkv, l),
            v: LoraAdapter::new(params, &format!("{prefix}.v"), h, dkv, l),
            o: LoraAdapter::new(params, &format!("{prefix}.o"), dq, h, l),
        });
    }

    fn project(
        &self,
        tape: &Tape<T>,
        x: Var,
        w: &Tensor<T>,
        lora: Option<&LoraAdapter<T>>,
        train: bool,
        rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<Var> {
        let mut y = tape.matmul(x, tape.leaf(w))?;
        if let Some(adapter) = lora {
            let delta = adapter.delta(tape, x, train, rng.as_deref_mut())?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// Which query heads belong to attribute group `g`.
    fn group_of_query_head(&self, head: usize) -> usize {
        head / (self.heads_q / NUM_GROUPS)
    }

    fn kv_head_of_query_head(&self, head: usize) -> usize {
        head / (self.heads_q / self.heads_kv)
    }

    fn group_of_kv_head(&self, kv: usize) -> usize {
        self.group_of_query_head(kv * (self.heads_q / self.heads_kv))
    }

    /// cos/sin tables per head group for these positions, or one shared
    /// table for the composed variant.
    fn tables(&self, positions: &[[f64; POSITION_SLOTS]]) -> Vec<(Tensor<T>, Tensor<T>)> {
        match self.kind {
            AttentionKind::MultiAxisRotary => (0..NUM_GROUPS)
                .map(|g| {
                    let values: Vec<f64> = positions.iter().map(|p| p[g]).collect();
                    rotation_tables::<T>(&values, self.group_bases[g], self.head_dim)
                })
                .collect(),
            AttentionKind::ComposedRotary => {
                let parts: Vec<(Vec<f64>, f64)> = self
                    .attr_bases
                    .iter()
                    .map(|&(slot, base)| {
                        (positions.iter().map(|p| p[slot]).collect(), base)
                    })
                    .collect();
                vec![composed_rotation_tables::<T>(&parts, positions.len(), self.head_dim)]
            }
            AttentionKind::Plain => Vec::new(),
        }
    }

    /// Table index for a head group under the current attention kind, or
    /// `None` when no rotation applies.
    fn table_for_group(&self, g: usize) -> Option<usize> {
        match self.kind {
            AttentionKind::MultiAxisRotary => Some(g),
            AttentionKind::ComposedRotary => Some(0),
            AttentionKind::Plain => None,
        }
    }

    /// Full attention over one row. `x` is `[n, hidden]`; `positions` holds
    /// one slot vector per token; `mask` is the additive visibility matrix.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        x: Var,
        positions: &[[f64; POSITION_SLOTS]],
        mask: Var,
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Var> {
        let n = tape.shape_of(x)?[0];
        if positions.len() != n {
            return Err(ModelError::Sequence(format!(
                "{} positions for {} tokens",
                positions.len(),
                n
            )));
        }
        let dh = self.head_dim;
        let mut rng = opts.rng.as_deref_mut();
        let lora = self.lora.as_ref();
        let q = self.project(tape, x, &self.wq, lora.map(|l| &l.q), opts.train, &mut rng)?;
        let k = self.project(tape, x, &self.wk, lora.map(|l| &l.k), opts.train, &mut rng)?;
        let v = self.project(tape, x, &self.wv, lora.map(|l| &l.v), opts.train, &mut rng)?;

        let tables = self.tables(positions);
        let table_vars: Vec<(Var, Var)> = tables
            .iter()
            .map(|(c, s)| (tape.constant(c), tape.constant(s)))
            .collect();

        // Rotate each key/value head once; query heads sharing it reuse it.
        let mut k_rot = Vec::with_capacity(self.heads_kv);
        let mut v_heads = Vec::with_capacity(self.heads_kv);
        for j in 0..self.heads_kv {
            let kj = tape.narrow(k, 1, j * dh, dh)?;
            let kj = match self.table_for_group(self.group_of_kv_head(j)) {
                Some(t) => tape.rotate_pairs(kj, table_vars[t].0, table_vars[t].1)?,
                None => kj,
            };
            k_rot.push(kj);
            v_heads.push(tape.narrow(v, 1, j * dh, dh)?);
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads_q);
        let mut trace_scores = Vec::new();
        let mut trace_probs = Vec::new();
        for h in 0..self.heads_q {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let qh = match self.table_for_group(self.group_of_query_head(h)) {
                Some(t) => tape.rotate_pairs(qh, table_vars[t].0, table_vars[t].1)?,
                None => qh,
            };
            let j = self.kv_head_of_query_head(h);
            let kt = tape.transpose(k_rot[j], 0, 1)?;
            let scores = tape.affine(tape.matmul(qh, kt)?, scale, 0.0)?;
            let masked = tape.add(scores, mask)?;
            let probs = tape.softmax(masked)?;
            if opts.trace.is_some() {
                trace_scores.push(Tensor::from_vec(
                    tape.shape_of(masked)?.to_vec(),
                    tape.value_vec(masked)?,
                )?);
                trace_probs.push(Tensor::from_vec(
                    tape.shape_of(probs)?.to_vec(),
                    tape.value_vec(probs)?,
                )?);
            }
            outs.push(tape.matmul(probs, v_heads[j])?);
        }
        if let Some(trace) = opts.trace.as_deref_mut() {
            trace.scores.push(trace_scores);
            trace.probs.push(trace_probs);
        }
        let merged = tape.concat(1, &outs)?;
        self.project(tape, merged, &self.wo, lora.map(|l| &l.o), opts.train, &mut rng)
    }
}
