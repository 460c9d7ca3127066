//! The full model: embedder, pre-norm transformer backbone, attribute
//! sub-decoder, and the finetuning heads.

use std::collections::HashMap;
use std::path::Path;

use cadenza_midi::TokenDictionary;
use cadenza_tensor::{checkpoint, lit, Scalar, Tape, Tensor, Var};

use crate::attention::{AttentionLayer, ForwardOptions, PackingMask};
use crate::config::{DecoderKind, ModelConfig};
use crate::decoder::{DecodeBatch, Decoder};
use crate::embed::Embedder;
use crate::params::ParamBuilder;
use crate::seq::{
    loss_positions, positions_of, step_inputs, step_targets, Row, SeqToken,
};
use crate::{ModelError, Result};

/// Gated feed-forward block (no biases).
struct FeedForward<T: Scalar> {
    gate: Tensor<T>,
    up: Tensor<T>,
    down: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn new(config: &ModelConfig, params: &mut ParamBuilder<T>, prefix: &str) -> Self {
        let (h, m) = (config.hidden_size, config.intermediate_size);
        FeedForward {
            gate: params.uniform(&format!("{prefix}.gate"), &[h, m], h),
            up: params.uniform(&format!("{prefix}.up"), &[h, m], h),
            down: params.uniform(&format!("{prefix}.down"), &[m, h], m),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let g = tape.silu(tape.matmul(x, tape.leaf(&self.gate))?)?;
        let u = tape.matmul(x, tape.leaf(&self.up))?;
        Ok(tape.matmul(tape.mul(g, u)?, tape.leaf(&self.down))?)
    }
}

/// One pre-norm transformer block.
struct Block<T: Scalar> {
    attn_norm: Tensor<T>,
    attn: AttentionLayer<T>,
    ffn_norm: Tensor<T>,
    ffn: FeedForward<T>,
    eps: f64,
}

impl<T: Scalar> Block<T> {
    fn new(config: &ModelConfig, params: &mut ParamBuilder<T>, index: usize) -> Self {
        let prefix = format!("layer{index}");
        Block {
            attn_norm: params.ones(&format!("{prefix}.attn_norm.w"), &[config.hidden_size]),
            attn: AttentionLayer::new(config, params, &format!("{prefix}.attn")),
            ffn_norm: params.ones(&format!("{prefix}.ffn_norm.w"), &[config.hidden_size]),
            ffn: FeedForward::new(config, params, &format!("{prefix}.ffn")),
            eps: config.norm_eps,
        }
    }

    fn forward(
        &self,
        tape: &Tape<T>,
        x: Var,
        positions: &[[f64; crate::seq::POSITION_SLOTS]],
        mask: Var,
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Var> {
        let normed = tape.rms_norm(x, tape.leaf(&self.attn_norm), self.eps)?;
        let attn_out = self.attn.forward(tape, normed, positions, mask, opts)?;
        let x = tape.add(x, attn_out)?;
        let normed = tape.rms_norm(x, tape.leaf(&self.ffn_norm), self.eps)?;
        let ffn_out = self.ffn.forward(tape, normed)?;
        Ok(tape.add(x, ffn_out)?)
    }
}

/// Classification head over the readout state; starts at zero so an
/// untrained head is exactly indifferent.
pub struct ClassHead<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> ClassHead<T> {
    fn new(config: &ModelConfig, params: &mut ParamBuilder<T>) -> Self {
        ClassHead {
            w: params.zeros("head.class.w", &[config.hidden_size, config.num_classes]),
            b: params.zeros("head.class.b", &[config.num_classes]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, state: Var) -> Result<Var> {
        Ok(tape.add(tape.matmul(state, tape.leaf(&self.w))?, tape.leaf(&self.b))?)
    }
}

/// Metadata feature extractor for the sub-decoder: mean of the metadata
/// embeddings passed through a linear map.
pub struct MetaConditioner<T: Scalar> {
    table: Tensor<T>,
    w: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> MetaConditioner<T> {
    fn new(config: &ModelConfig, params: &mut ParamBuilder<T>) -> Self {
        let h = config.hidden_size;
        MetaConditioner {
            table: params.uniform_scaled("meta.gru.table", &[config.meta_vocab, h], 0.02),
            w: params.uniform("meta.gru.linear.w", &[h, h], h),
            b: params.zeros("meta.gru.linear.b", &[h]),
        }
    }

    /// `[1, hidden]` feature for one metadata id set.
    pub fn feature(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(ModelError::Sequence("metadata feature of an empty id set".into()));
        }
        let rows = tape.gather(tape.leaf(&self.table), ids)?;
        let weights =
            Tensor::from_vec(vec![1, ids.len()], vec![lit::<T>(1.0 / ids.len() as f64); ids.len()])?;
        let mean = tape.matmul(tape.constant(&weights), rows)?;
        Ok(tape.add(tape.matmul(mean, tape.leaf(&self.w))?, tape.leaf(&self.b))?)
    }
}

/// Aggregate statistics of one loss computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Supervised event/end positions.
    pub positions: usize,
    /// Supervised sub-token predictions (six per event, one per end).
    pub sub_tokens: usize,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub dict: TokenDictionary,
    pub embedder: Embedder<T>,
    blocks: Vec<Block<T>>,
    final_norm: Tensor<T>,
    pub decoder: Decoder<T>,
    pub class_head: Option<ClassHead<T>>,
    pub meta_cond: Option<MetaConditioner<T>>,
    params: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Model<T> {
    /// Build a model with seeded initialization. Set `with_lora` to attach
    /// low-rank adapters to every attention projection.
    pub fn new(config: ModelConfig, seed: u64, with_lora: bool) -> Result<Self> {
        config.validate()?;
        let dict = TokenDictionary::new(config.layout);
        let mut params = ParamBuilder::new(seed);
        let embedder = Embedder::new(&config, &mut params);
        let mut blocks: Vec<Block<T>> = (0..config.layers_attn)
            .map(|i| Block::new(&config, &mut params, i))
            .collect();
        let final_norm = params.ones("final_norm.w", &[config.hidden_size]);
        let decoder = match config.decoder {
            DecoderKind::Gru => Decoder::Gru(crate::decoder::GruDecoder::new(&config, &dict, &mut params)),
            DecoderKind::Mlp => Decoder::Mlp(crate::decoder::MlpDecoder::new(&config, &dict, &mut params)),
        };
        let class_head = (config.num_classes > 0).then(|| ClassHead::new(&config, &mut params));
        let meta_cond = (config.meta_vocab > 0).then(|| MetaConditioner::new(&config, &mut params));
        if with_lora {
            for (i, block) in blocks.iter_mut().enumerate() {
                block
                    .attn
                    .add_lora(&config, &mut params, &format!("lora.layer{i}"));
            }
        }
        let params = params.finish();
        let by_name = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(Model {
            config,
            dict,
            embedder,
            blocks,
            final_norm,
            decoder,
            class_head,
            meta_cond,
            params,
            by_name,
        })
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name).map(|&i| &self.params[i].1)
    }

    /// Total parameter count, optionally restricted to a name prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Enable gradients exactly where the predicate says; everything else
    /// becomes frozen (its gradient storage is dropped entirely).
    pub fn set_trainable(&self, keep: impl Fn(&str) -> bool) {
        for (name, t) in &self.params {
            if keep(name) {
                t.enable_grad();
            } else {
                t.disable_grad();
            }
        }
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .cloned()
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params).map_err(ModelError::Tensor)
    }

    /// Load values by name into this model's parameters. Every model
    /// parameter must be present with the right shape and dtype.
    pub fn load(&self, path: &Path) -> Result<()> {
        let ckpt = checkpoint::Checkpoint::load(path).map_err(ModelError::Tensor)?;
        for (name, t) in &self.params {
            let loaded: Tensor<T> = ckpt.tensor(name).map_err(|e| {
                ModelError::Checkpoint(format!("parameter {name}: {e}"))
            })?;
            if loaded.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&loaded.data());
        }
        Ok(())
    }

    /// Snapshot all parameter values (deep copy).
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<T>)]) -> Result<()> {
        for (name, values) in snapshot {
            let t = self.param(name).ok_or_else(|| {
                ModelError::Checkpoint(format!("snapshot names unknown parameter {name}"))
            })?;
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    /// Backbone states for one row: `[len, hidden]`, final norm applied.
    /// With zero transformer layers this is just the normalized embeddings.
    pub fn forward_states(
        &self,
        tape: &Tape<T>,
        row: &Row,
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Var> {
        if row.len() > self.config.context_length {
            return Err(ModelError::Sequence(format!(
                "row length {} exceeds context length {}",
                row.len(),
                self.config.context_length
            )));
        }
        let mut x = self.embedder.embed_tokens(tape, &row.tokens)?;
        let positions = positions_of(&row.tokens);
        let mask = PackingMask::new(row.segments.clone()).to_additive::<T>();
        let mask = tape.constant(&mask);
        for block in &self.blocks {
            x = block.forward(tape, x, &positions, mask, opts)?;
        }
        Ok(tape.rms_norm(x, tape.leaf(&self.final_norm), self.config.norm_eps)?)
    }

    /// Metadata ids per segment of a row (segments without metadata are
    /// absent).
    fn segment_metadata(row: &Row) -> HashMap<u32, Vec<usize>> {
        let mut out: HashMap<u32, Vec<usize>> = HashMap::new();
        for (tok, seg) in row.tokens.iter().zip(&row.segments) {
            if let (SeqToken::Meta(id), Some(s)) = (tok, seg) {
                out.entry(*s).or_default().push(*id as usize);
            }
        }
        out
    }

    /// Decoder seed states for the supervised positions of a row: backbone
    /// states gathered at those positions, plus the metadata feature of the
    /// position's segment when present.
    fn decoder_states(
        &self,
        tape: &Tape<T>,
        row: &Row,
        states: Var,
        positions: &[crate::seq::LossPosition],
    ) -> Result<Var> {
        let idx: Vec<usize> = positions.iter().map(|p| p.pos).collect();
        let gathered = tape.gather(states, &idx)?;
        let metas = Self::segment_metadata(row);
        if metas.is_empty() {
            return Ok(gathered);
        }
        let cond = self.meta_cond.as_ref().ok_or_else(|| {
            ModelError::Sequence("metadata in input but the model has no metadata module".into())
        })?;
        // One feature row per segment with metadata, a zero row for the rest.
        let mut seg_rows: Vec<Var> = Vec::new();
        let mut seg_index: HashMap<u32, usize> = HashMap::new();
        for (seg, ids) in {
            let mut entries: Vec<_> = metas.into_iter().collect();
            entries.sort_by_key(|(s, _)| *s);
            entries
        } {
            seg_index.insert(seg, seg_rows.len());
            seg_rows.push(cond.feature(tape, &ids)?);
        }
        let zero = Tensor::<T>::zeros(vec![1, self.config.hidden_size]);
        seg_rows.push(tape.constant(&zero));
        let zero_row = seg_rows.len() - 1;
        let stacked = tape.concat(0, &seg_rows)?;
        let feat_ids: Vec<usize> = positions
            .iter()
            .map(|p| {
                row.segments[p.pos]
                    .and_then(|s| seg_index.get(&s).copied())
                    .unwrap_or(zero_row)
            })
            .collect();
        let features = tape.gather(stacked, &feat_ids)?;
        Ok(tape.add(gathered, features)?)
    }

    /// Teacher-forcing batch for a row's supervised positions.
    pub fn decode_batch(&self, positions: &[crate::seq::LossPosition]) -> Result<DecodeBatch> {
        let mut batch = DecodeBatch::default();
        for p in positions {
            let (targets, active) = step_targets(&self.dict, &p.target)?;
            batch.inputs.push(step_inputs(&self.dict, &targets));
            batch.targets.push(targets);
            batch.active.push(active);
        }
        Ok(batch)
    }

    /// Summed cross entropy and active-prediction count for one row.
    pub fn row_loss(
        &self,
        tape: &Tape<T>,
        row: &Row,
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<(Var, LossStats)> {
        let positions = loss_positions(row)?;
        if positions.is_empty() {
            return Err(ModelError::Sequence(
                "row has no supervised positions (empty effective batch)".into(),
            ));
        }
        let states = self.forward_states(tape, row, opts)?;
        let seeds = self.decoder_states(tape, row, states, &positions)?;
        let batch = self.decode_batch(&positions)?;
        let (sum, active) = self.decoder.teacher_loss(tape, seeds, &batch)?;
        Ok((
            sum,
            LossStats { positions: positions.len(), sub_tokens: active },
        ))
    }

    /// Mean cross entropy per supervised sub-token over a batch of rows.
    pub fn lm_loss(
        &self,
        tape: &Tape<T>,
        rows: &[Row],
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<(Var, LossStats)> {
        if rows.is_empty() {
            return Err(ModelError::Sequence("loss over an empty batch of rows".into()));
        }
        let mut total: Option<Var> = None;
        let mut stats = LossStats { positions: 0, sub_tokens: 0 };
        for row in rows {
            let (sum, s) = self.row_loss(tape, row, opts)?;
            stats.positions += s.positions;
            stats.sub_tokens += s.sub_tokens;
            total = Some(match total {
                Some(t) => tape.add(t, sum)?,
                None => sum,
            });
        }
        if stats.sub_tokens == 0 {
            return Err(ModelError::Sequence(
                "batch has no supervised sub-tokens (empty effective batch)".into(),
            ));
        }
        let mean = tape.affine(
            total.expect("at least one row"),
            1.0 / stats.sub_tokens as f64,
            0.0,
        )?;
        Ok((mean, stats))
    }

    /// Check the classification wrapper shape: `<sos> ... <eos> <cls>` with
    /// no stray control tokens in between.
    fn check_class_input(tokens: &[SeqToken]) -> Result<()> {
        let bad = |what: String| Err(ModelError::Sequence(format!("classification input: {what}")));
        if tokens.len() < 3 {
            return bad("needs at least <sos> <eos> <cls>".into());
        }
        if tokens[0] != SeqToken::Sos {
            return bad(format!("must start with <sos>, got {:?}", tokens[0]));
        }
        if *tokens.last().unwrap() != SeqToken::Cls {
            return bad(format!("must end with <cls>, got {:?}", tokens.last().unwrap()));
        }
        if tokens[tokens.len() - 2] != SeqToken::Eos {
            return bad(format!(
                "needs <eos> before <cls>, got {:?}",
                tokens[tokens.len() - 2]
            ));
        }
        for (i, t) in tokens[1..tokens.len() - 2].iter().enumerate() {
            if !matches!(t, SeqToken::Event(_) | SeqToken::Pad) {
                return bad(format!("unexpected {t:?} at position {}", i + 1));
            }
        }
        Ok(())
    }

    /// Class logits `[1, classes]` for one wrapped window.
    pub fn classify_logits(
        &self,
        tape: &Tape<T>,
        tokens: &[SeqToken],
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Var> {
        let head = self.class_head.as_ref().ok_or_else(|| {
            ModelError::Config("model was built without a classification head".into())
        })?;
        Self::check_class_input(tokens)?;
        let segments = tokens
            .iter()
            .map(|t| (!matches!(t, SeqToken::Pad)).then_some(0))
            .collect();
        let row = Row::new(tokens.to_vec(), segments)?;
        let states = self.forward_states(tape, &row, opts)?;
        let last = tape.narrow(states, 0, row.len() - 1, 1)?;
        head.forward(tape, last)
    }

    /// Mean cross entropy over labelled windows.
    pub fn class_loss(
        &self,
        tape: &Tape<T>,
        batch: &[(Vec<SeqToken>, usize)],
        opts: &mut ForwardOptions<'_, T>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::Sequence("classification loss over an empty batch".into()));
        }
        let mut pieces = Vec::with_capacity(batch.len());
        for (tokens, label) in batch {
            let logits = self.classify_logits(tape, tokens, opts)?;
            pieces.push(tape.cross_entropy(logits, &[*label])?);
        }
        let all = tape.concat(0, &pieces)?;
        tape.mean(all).map_err(ModelError::Tensor)
    }
}
