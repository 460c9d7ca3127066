//! Attribute sub-decoders: expand one backbone state into the six tokens of
//! a compound event (or an end-of-sequence marker).

use cadenza_midi::TokenDictionary;
use cadenza_tensor::{Scalar, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::params::ParamBuilder;
use crate::seq::{DECODE_STEPS, STEP_ATTRIBUTES};
use crate::Result;

/// Additive vocabulary mask for one decode step: zero on the attribute's
/// slice of the flat dictionary, -inf everywhere else. The first step also
/// admits the end-of-sequence event token.
pub fn step_mask<T: Scalar>(dict: &TokenDictionary, step: usize) -> Tensor<T> {
    let mut data = vec![T::neg_infinity(); dict.flat_size()];
    for i in dict.slice(STEP_ATTRIBUTES[step]) {
        data[i] = T::zero();
    }
    if step == 0 {
        data[dict.eos_event()] = T::zero();
    }
    Tensor::from_vec(vec![dict.flat_size()], data).expect("mask shape")
}

fn all_step_masks<T: Scalar>(dict: &TokenDictionary) -> Vec<Tensor<T>> {
    (0..DECODE_STEPS).map(|k| step_mask(dict, k)).collect()
}

/// Teacher-forcing batch for a set of supervised positions.
#[derive(Debug, Clone, Default)]
pub struct DecodeBatch {
    /// Per position: the six input ids (start marker then the first five
    /// target sub-tokens).
    pub inputs: Vec<[usize; DECODE_STEPS]>,
    /// Per position: the six target ids.
    pub targets: Vec<[usize; DECODE_STEPS]>,
    /// Per position: which steps carry loss.
    pub active: Vec<[bool; DECODE_STEPS]>,
}

impl DecodeBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().flatten().filter(|&&a| a).count()
    }
}

struct GruLayer<T: Scalar> {
    wz: Tensor<T>,
    wr: Tensor<T>,
    wn: Tensor<T>,
    uz: Tensor<T>,
    ur: Tensor<T>,
    un: Tensor<T>,
    bz: Tensor<T>,
    br: Tensor<T>,
    bn: Tensor<T>,
}

impl<T: Scalar> GruLayer<T> {
    fn new(params: &mut ParamBuilder<T>, prefix: &str, in_dim: usize, h: usize) -> Self {
        GruLayer {
            wz: params.uniform(&format!("{prefix}.wz"), &[in_dim, h], in_dim),
            wr: params.uniform(&format!("{prefix}.wr"), &[in_dim, h], in_dim),
            wn: params.uniform(&format!("{prefix}.wn"), &[in_dim, h], in_dim),
            uz: params.uniform(&format!("{prefix}.uz"), &[h, h], h),
            ur: params.uniform(&format!("{prefix}.ur"), &[h, h], h),
            un: params.uniform(&format!("{prefix}.un"), &[h, h], h),
            bz: params.zeros(&format!("{prefix}.bz"), &[h]),
            br: params.zeros(&format!("{prefix}.br"), &[h]),
            bn: params.zeros(&format!("{prefix}.bn"), &[h]),
        }
    }

    /// One recurrence step: gated update of `[p, h]` state from `[p, in]`
    /// input.
    fn step(&self, tape: &Tape<T>, x: Var, h: Var) -> Result<Var> {
        let lin = |w: &Tensor<T>, u: &Tensor<T>, b: &Tensor<T>| -> Result<Var> {
            let xw = tape.matmul(x, tape.leaf(w))?;
            let hu = tape.matmul(h, tape.leaf(u))?;
            Ok(tape.add(tape.add(xw, hu)?, tape.leaf(b))?)
        };
        let z = tape.sigmoid(lin(&self.wz, &self.uz, &self.bz)?)?;
        let r = tape.sigmoid(lin(&self.wr, &self.ur, &self.br)?)?;
        let hu = tape.matmul(h, tape.leaf(&self.un))?;
        let xw = tape.matmul(x, tape.leaf(&self.wn))?;
        let pre = tape.add(tape.add(xw, tape.mul(r, hu)?)?, tape.leaf(&self.bn))?;
        let n = tape.tanh(pre)?;
        // h' = (1 - z) * n + z * h
        let one_minus_z = tape.affine(z, -1.0, 1.0)?;
        Ok(tape.add(tape.mul(one_minus_z, n)?, tape.mul(z, h)?)?)
    }
}

/// Recurrent sub-decoder: six steps, each conditioned on the sub-tokens
/// already emitted for the same event.
pub struct GruDecoder<T: Scalar> {
    in_embed: Tensor<T>,
    layers: Vec<GruLayer<T>>,
    init: Vec<(Tensor<T>, Tensor<T>)>,
    out_w: Tensor<T>,
    out_b: Tensor<T>,
    step_masks: Vec<Tensor<T>>,
}

impl<T: Scalar> GruDecoder<T> {
    pub fn new(config: &ModelConfig, dict: &TokenDictionary, params: &mut ParamBuilder<T>) -> Self {
        let h = config.gru_hidden_size;
        let flat = dict.flat_size();
        let in_embed = params.uniform("gru.in_embed.table", &[flat, h], h);
        let layers = (0..config.layers_gru)
            .map(|l| GruLayer::new(params, &format!("gru.layer{l}"), h, h))
            .collect();
        let init = (0..config.layers_gru)
            .map(|l| {
                (
                    params.uniform(&format!("gru.init{l}.w"), &[config.hidden_size, h], config.hidden_size),
                    params.zeros(&format!("gru.init{l}.b"), &[h]),
                )
            })
            .collect();
        let out_w = params.uniform("gru.out.w", &[h, flat], h);
        let out_b = params.zeros("gru.out.b", &[flat]);
        GruDecoder {
            in_embed,
            layers,
            init,
            out_w,
            out_b,
            step_masks: all_step_masks(dict),
        }
    }

    /// Initial per-layer hidden states from the backbone states `[p, hidden]`.
    fn init_states(&self, tape: &Tape<T>, states: Var) -> Result<Vec<Var>> {
        self.init
            .iter()
            .map(|(w, b)| {
                let proj = tape.matmul(states, tape.leaf(w))?;
                Ok(tape.add(proj, tape.leaf(b))?)
            })
            .collect()
    }

    fn logits(&self, tape: &Tape<T>, top: Var, step: usize) -> Result<Var> {
        let raw = tape.add(tape.matmul(top, tape.leaf(&self.out_w))?, tape.leaf(&self.out_b))?;
        Ok(tape.add(raw, tape.constant(&self.step_masks[step]))?)
    }

    /// Teacher-forced logits for all six steps: six `[p, flat]` tensors of
    /// masked logits.
    pub fn teacher_logits(
        &self,
        tape: &Tape<T>,
        states: Var,
        inputs: &[[usize; DECODE_STEPS]],
    ) -> Result<Vec<Var>> {
        let mut hidden = self.init_states(tape, states)?;
        let mut out = Vec::with_capacity(DECODE_STEPS);
        for step in 0..DECODE_STEPS {
            let ids: Vec<usize> = inputs.iter().map(|row| row[step]).collect();
            let mut x = tape.gather(tape.leaf(&self.in_embed), &ids)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let next = layer.step(tape, x, hidden[l])?;
                hidden[l] = next;
                x = next;
            }
            out.push(self.logits(tape, x, step)?);
        }
        Ok(out)
    }

    /// Start a one-position sampling pass from a `[1, hidden]` state.
    pub fn begin(&self, tape: &Tape<T>, state: Var) -> Result<Vec<Var>> {
        self.init_states(tape, state)
    }

    /// Advance one sampling step; returns masked logits `[1, flat]`.
    pub fn step_sample(
        &self,
        tape: &Tape<T>,
        hidden: &mut [Var],
        input_id: usize,
        step: usize,
    ) -> Result<Var> {
        let mut x = tape.gather(tape.leaf(&self.in_embed), &[input_id])?;
        for (l, layer) in self.layers.iter().enumerate() {
            let next = layer.step(tape, x, hidden[l])?;
            hidden[l] = next;
            x = next;
        }
        self.logits(tape, x, step)
    }
}

/// Feed-forward ablation of the sub-decoder: predicts every attribute
/// independently from the backbone state.
pub struct MlpDecoder<T: Scalar> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
    step_masks: Vec<Tensor<T>>,
}

impl<T: Scalar> MlpDecoder<T> {
    pub fn new(config: &ModelConfig, dict: &TokenDictionary, params: &mut ParamBuilder<T>) -> Self {
        let h = config.mlp_decoder_hidden;
        MlpDecoder {
            w1: params.uniform("mlp_dec.w1", &[config.hidden_size, h], config.hidden_size),
            b1: params.zeros("mlp_dec.b1", &[h]),
            w2: params.uniform("mlp_dec.w2", &[h, dict.flat_size()], h),
            b2: params.zeros("mlp_dec.b2", &[dict.flat_size()]),
            step_masks: all_step_masks(dict),
        }
    }

    fn base_logits(&self, tape: &Tape<T>, states: Var) -> Result<Var> {
        let inner = tape.add(tape.matmul(states, tape.leaf(&self.w1))?, tape.leaf(&self.b1))?;
        let act = tape.silu(inner)?;
        Ok(tape.add(tape.matmul(act, tape.leaf(&self.w2))?, tape.leaf(&self.b2))?)
    }

    pub fn teacher_logits(
        &self,
        tape: &Tape<T>,
        states: Var,
        _inputs: &[[usize; DECODE_STEPS]],
    ) -> Result<Vec<Var>> {
        let base = self.base_logits(tape, states)?;
        (0..DECODE_STEPS)
            .map(|k| Ok(tape.add(base, tape.constant(&self.step_masks[k]))?))
            .collect()
    }
}

/// Either sub-decoder behind one interface.
pub enum Decoder<T: Scalar> {
    Gru(GruDecoder<T>),
    Mlp(MlpDecoder<T>),
}

/// Sampling state for one position.
pub enum DecodeState {
    Gru(Vec<Var>),
    Mlp(Var),
}

impl<T: Scalar> Decoder<T> {
    /// Masked logits for all six teacher-forced steps.
    pub fn teacher_logits(
        &self,
        tape: &Tape<T>,
        states: Var,
        inputs: &[[usize; DECODE_STEPS]],
    ) -> Result<Vec<Var>> {
        match self {
            Decoder::Gru(d) => d.teacher_logits(tape, states, inputs),
            Decoder::Mlp(d) => d.teacher_logits(tape, states, inputs),
        }
    }

    /// Summed cross entropy over the active sub-token predictions of a
    /// batch, plus the number of active predictions.
    pub fn teacher_loss(
        &self,
        tape: &Tape<T>,
        states: Var,
        batch: &DecodeBatch,
    ) -> Result<(Var, usize)> {
        let logits = self.teacher_logits(tape, states, &batch.inputs)?;
        let mut pieces = Vec::with_capacity(DECODE_STEPS);
        let mut mask = Vec::with_capacity(batch.len() * DECODE_STEPS);
        for (step, step_logits) in logits.iter().enumerate() {
            let targets: Vec<usize> = batch.targets.iter().map(|row| row[step]).collect();
            pieces.push(tape.cross_entropy(*step_logits, &targets)?);
            mask.extend(
                batch
                    .active
                    .iter()
                    .map(|row| if row[step] { T::one() } else { T::zero() }),
            );
        }
        let all = tape.concat(0, &pieces)?;
        let mask_t = Tensor::from_vec(vec![mask.len()], mask)?;
        let masked = tape.mul(all, tape.constant(&mask_t))?;
        Ok((tape.sum(masked)?, batch.active_count()))
    }

    pub fn begin(&self, tape: &Tape<T>, state: Var) -> Result<DecodeState> {
        match self {
            Decoder::Gru(d) => Ok(DecodeState::Gru(d.begin(tape, state)?)),
            Decoder::Mlp(d) => Ok(DecodeState::Mlp(d.base_logits(tape, state)?)),
        }
    }

    /// Masked logits `[1, flat]` for one sampling step. The input id is the
    /// previously emitted sub-token (the start marker for step zero).
    pub fn step_sample(
        &self,
        tape: &Tape<T>,
        state: &mut DecodeState,
        input_id: usize,
        step: usize,
    ) -> Result<Var> {
        match (self, state) {
            (Decoder::Gru(d), DecodeState::Gru(hidden)) => {
                d.step_sample(tape, hidden, input_id, step)
            }
            (Decoder::Mlp(d), DecodeState::Mlp(base)) => {
                Ok(tape.add(*base, tape.constant(&d.step_masks[step]))?)
            }
            _ => unreachable!("decoder state matches decoder kind"),
        }
    }
}
