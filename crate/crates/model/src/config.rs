//! Model hyperparameters, presets, and the key-value config file format.

use cadenza_midi::LayoutKind;

use crate::ModelError;

/// Number of attribute groups the attention heads are partitioned into.
/// One group per compound-token attribute slot: timeshift, duration,
/// octave, pitch class, instrument, velocity.
pub const NUM_GROUPS: usize = 6;

/// How compound tokens are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Continuous sinusoidal features passed through a trainable linear
    /// map, one per numeric attribute; instruments use a lookup table.
    Fourier,
    /// Plain lookup tables for every attribute except onset, which keeps
    /// the sinusoidal featurization so absolute time stays continuous.
    Lookup,
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Fourier => "fourier",
            EmbeddingKind::Lookup => "lookup",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, ModelError> {
        match s {
            "fourier" => Ok(EmbeddingKind::Fourier),
            "lookup" => Ok(EmbeddingKind::Lookup),
            _ => Err(ModelError::Config(format!(
                "unknown embedding kind {s:?} (expected fourier or lookup)"
            ))),
        }
    }
}

/// How positions enter the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Head groups each rotate by one attribute of the position vector.
    MultiAxisRotary,
    /// Every head composes the rotations of all five attributes.
    ComposedRotary,
    /// No rotations; position information comes only from the mask.
    Plain,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::MultiAxisRotary => "multi_axis",
            AttentionKind::ComposedRotary => "composed",
            AttentionKind::Plain => "plain",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, ModelError> {
        match s {
            "multi_axis" => Ok(AttentionKind::MultiAxisRotary),
            "composed" => Ok(AttentionKind::ComposedRotary),
            "plain" => Ok(AttentionKind::Plain),
            _ => Err(ModelError::Config(format!(
                "unknown attention kind {s:?} (expected multi_axis, composed or plain)"
            ))),
        }
    }
}

/// Which sub-decoder turns a backbone state into six attribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Recurrent decoder: each attribute is conditioned on the ones
    /// already emitted for the same event.
    Gru,
    /// Feed-forward decoder: all attributes are predicted independently
    /// from the backbone state.
    Mlp,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Gru => "gru",
            DecoderKind::Mlp => "mlp",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, ModelError> {
        match s {
            "gru" => Ok(DecoderKind::Gru),
            "mlp" => Ok(DecoderKind::Mlp),
            _ => Err(ModelError::Config(format!(
                "unknown decoder kind {s:?} (expected gru or mlp)"
            ))),
        }
    }
}

/// Per-attribute rotation frequency bases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotaryBases {
    pub onset: f64,
    pub duration: f64,
    pub octave: f64,
    pub pitch_class: f64,
    pub velocity: f64,
}

impl RotaryBases {
    pub fn standard() -> Self {
        RotaryBases {
            onset: 199_999.0,
            duration: 1031.0,
            octave: 19.0,
            pitch_class: 20.0,
            velocity: 131.0,
        }
    }

    /// Base per head group, in position-slot order: timeshift, duration,
    /// octave, pitch class, instrument (which tracks onset time), velocity.
    pub fn per_group(&self) -> [f64; NUM_GROUPS] {
        [
            self.onset,
            self.duration,
            self.octave,
            self.pitch_class,
            self.onset,
            self.velocity,
        ]
    }

    /// The five distinct attribute bases, paired with the position slot
    /// each one reads from.
    pub fn per_attribute(&self) -> [(usize, f64); 5] {
        [
            (0, self.onset),
            (1, self.duration),
            (2, self.octave),
            (3, self.pitch_class),
            (5, self.velocity),
        ]
    }
}

/// LoRA adapter settings for finetuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout: f64,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            dropout: 0.05,
            scale: 1.0,
        }
    }
}

/// Full hyperparameter set for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token dictionary layout (time-bin budget).
    pub layout: LayoutKind,
    /// Backbone width.
    pub hidden_size: usize,
    /// Feed-forward inner width.
    pub intermediate_size: usize,
    /// Query heads.
    pub heads_q: usize,
    /// Key/value heads.
    pub heads_kv: usize,
    /// Transformer layers.
    pub layers_attn: usize,
    /// Recurrent decoder layers.
    pub layers_gru: usize,
    /// Recurrent decoder state width.
    pub gru_hidden_size: usize,
    /// Maximum sequence length in tokens.
    pub context_length: usize,
    /// Rotation bases.
    pub bases: RotaryBases,
    pub embedding: EmbeddingKind,
    pub attention: AttentionKind,
    pub decoder: DecoderKind,
    /// Inner width of the feed-forward sub-decoder (only used when
    /// `decoder` is `Mlp`).
    pub mlp_decoder_hidden: usize,
    /// Number of metadata ids available for conditional generation.
    pub meta_vocab: usize,
    /// Number of classes for the classification head.
    pub num_classes: usize,
    pub lora: LoraConfig,
    /// Epsilon inside the RMS normalization.
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Small pretraining configuration.
    pub fn small() -> Self {
        ModelConfig {
            layout: LayoutKind::S,
            hidden_size: 1536,
            intermediate_size: 5376,
            heads_q: 12,
            heads_kv: 6,
            layers_attn: 9,
            layers_gru: 2,
            gru_hidden_size: 1024,
            context_length: 1024,
            bases: RotaryBases::standard(),
            embedding: EmbeddingKind::Fourier,
            attention: AttentionKind::MultiAxisRotary,
            decoder: DecoderKind::Gru,
            mlp_decoder_hidden: 1024,
            meta_vocab: 0,
            num_classes: 0,
            lora: LoraConfig::default(),
            norm_eps: 1e-5,
        }
    }

    /// Medium pretraining configuration.
    pub fn medium() -> Self {
        ModelConfig {
            layout: LayoutKind::M,
            hidden_size: 1920,
            intermediate_size: 6720,
            heads_q: 12,
            heads_kv: 6,
            layers_attn: 15,
            layers_gru: 4,
            gru_hidden_size: 1536,
            context_length: 1536,
            mlp_decoder_hidden: 1536,
            ..ModelConfig::small()
        }
    }

    /// Desk-scale configuration: the same shape constraints as the large
    /// models but small enough to train and test on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            layout: LayoutKind::S,
            hidden_size: 48,
            intermediate_size: 168,
            heads_q: 12,
            heads_kv: 6,
            layers_attn: 2,
            layers_gru: 2,
            gru_hidden_size: 32,
            context_length: 256,
            mlp_decoder_hidden: 64,
            ..ModelConfig::small()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "small" | "S" => Ok(ModelConfig::small()),
            "medium" | "M" => Ok(ModelConfig::medium()),
            "desk" => Ok(ModelConfig::desk()),
            _ => Err(ModelError::Config(format!(
                "unknown preset {name:?} (expected small, medium or desk)"
            ))),
        }
    }

    /// Head dimension.
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads_q
    }

    /// Query heads per key/value head.
    pub fn heads_per_kv(&self) -> usize {
        self.heads_q / self.heads_kv
    }

    /// Query heads per attribute group.
    pub fn heads_per_group(&self) -> usize {
        self.heads_q / NUM_GROUPS
    }

    /// Sinusoidal feature width per attribute in the embedder.
    pub fn fme_dim(&self) -> usize {
        self.hidden_size / NUM_GROUPS
    }

    /// Flat dictionary size implied by the layout.
    pub fn flat_size(&self) -> usize {
        cadenza_midi::TokenDictionary::new(self.layout).flat_size()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.hidden_size == 0 || self.context_length == 0 || self.intermediate_size == 0 {
            return bad("hidden_size, intermediate_size and context_length must be positive".into());
        }
        if self.heads_q == 0 || self.heads_kv == 0 {
            return bad("head counts must be positive".into());
        }
        if self.heads_q % NUM_GROUPS != 0 {
            return bad(format!(
                "heads_q = {} must be divisible by the {} attribute groups",
                self.heads_q, NUM_GROUPS
            ));
        }
        if self.heads_kv % NUM_GROUPS != 0 && NUM_GROUPS % self.heads_kv != 0 {
            return bad(format!(
                "heads_kv = {} must align with the {} attribute groups",
                self.heads_kv, NUM_GROUPS
            ));
        }
        if self.heads_q % self.heads_kv != 0 {
            return bad(format!(
                "heads_q = {} must be a multiple of heads_kv = {}",
                self.heads_q, self.heads_kv
            ));
        }
        // Each group must own a whole number of query heads, each head an
        // even lane count so lanes pair up for rotation: hidden divisible
        // by 6 * (heads_q / groups) * 2.
        let chunk = NUM_GROUPS * self.heads_per_group() * 2;
        if self.hidden_size % chunk != 0 {
            return bad(format!(
                "hidden_size = {} must be divisible by {} (groups x heads-per-group x 2)",
                self.hidden_size, chunk
            ));
        }
        if self.hidden_size % self.heads_q != 0 {
            return bad(format!(
                "hidden_size = {} must be divisible by heads_q = {}",
                self.hidden_size, self.heads_q
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even", self.head_dim()));
        }
        if self.hidden_size % NUM_GROUPS != 0 {
            return bad(format!(
                "hidden_size = {} must be divisible by {} for the per-attribute embedder",
                self.hidden_size, NUM_GROUPS
            ));
        }
        if self.layers_gru == 0 && self.decoder == DecoderKind::Gru {
            return bad("layers_gru must be positive for the recurrent decoder".into());
        }
        if self.gru_hidden_size == 0 {
            return bad("gru_hidden_size must be positive".into());
        }
        if self.context_length < 4 {
            return bad("context_length must be at least 4".into());
        }
        for (name, b) in [
            ("theta_onset", self.bases.onset),
            ("theta_duration", self.bases.duration),
            ("theta_octave", self.bases.octave),
            ("theta_pitch_class", self.bases.pitch_class),
            ("theta_velocity", self.bases.velocity),
        ] {
            if !(b.is_finite() && b > 1.0) {
                return bad(format!("{name} = {b} must be a finite base greater than 1"));
            }
        }
        if self.lora.rank == 0 {
            return bad("lora rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return bad(format!("lora dropout {} must be in [0, 1)", self.lora.dropout));
        }
        Ok(())
    }

    /// Render as the key-value config file format.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("layout", self.layout.name().to_string());
        kv("hidden_size", self.hidden_size.to_string());
        kv("intermediate_size", self.intermediate_size.to_string());
        kv("heads_q", self.heads_q.to_string());
        kv("heads_kv", self.heads_kv.to_string());
        kv("layers_attn", self.layers_attn.to_string());
        kv("layers_gru", self.layers_gru.to_string());
        kv("gru_hidden_size", self.gru_hidden_size.to_string());
        kv("context_length", self.context_length.to_string());
        kv("theta_onset", self.bases.onset.to_string());
        kv("theta_duration", self.bases.duration.to_string());
        kv("theta_octave", self.bases.octave.to_string());
        kv("theta_pitch_class", self.bases.pitch_class.to_string());
        kv("theta_velocity", self.bases.velocity.to_string());
        kv("embedding", self.embedding.name().to_string());
        kv("attention", self.attention.name().to_string());
        kv("decoder", self.decoder.name().to_string());
        kv("mlp_decoder_hidden", self.mlp_decoder_hidden.to_string());
        kv("meta_vocab", self.meta_vocab.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("lora_rank", self.lora.rank.to_string());
        kv("lora_dropout", self.lora.dropout.to_string());
        kv("lora_scale", self.lora.scale.to_string());
        kv("norm_eps", self.norm_eps.to_string());
        s
    }

    /// Apply one `key = value` override. Unknown keys are an error.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ModelError> {
            value.parse().map_err(|_| {
                ModelError::Config(format!("invalid value {value:?} for config key {key:?}"))
            })
        }
        match key {
            "layout" => {
                self.layout = LayoutKind::from_name(value).map_err(|_| {
                    ModelError::Config(format!("unknown layout {value:?} (expected S or M)"))
                })?
            }
            "hidden_size" => self.hidden_size = num(key, value)?,
            "intermediate_size" => self.intermediate_size = num(key, value)?,
            "heads_q" => self.heads_q = num(key, value)?,
            "heads_kv" => self.heads_kv = num(key, value)?,
            "layers_attn" => self.layers_attn = num(key, value)?,
            "layers_gru" => self.layers_gru = num(key, value)?,
            "gru_hidden_size" => self.gru_hidden_size = num(key, value)?,
            "context_length" => self.context_length = num(key, value)?,
            "theta_onset" => self.bases.onset = num(key, value)?,
            "theta_duration" => self.bases.duration = num(key, value)?,
            "theta_octave" => self.bases.octave = num(key, value)?,
            "theta_pitch_class" => self.bases.pitch_class = num(key, value)?,
            "theta_velocity" => self.bases.velocity = num(key, value)?,
            "embedding" => self.embedding = EmbeddingKind::from_name(value)?,
            "attention" => self.attention = AttentionKind::from_name(value)?,
            "decoder" => self.decoder = DecoderKind::from_name(value)?,
            "mlp_decoder_hidden" => self.mlp_decoder_hidden = num(key, value)?,
            "meta_vocab" => self.meta_vocab = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "lora_rank" => self.lora.rank = num(key, value)?,
            "lora_dropout" => self.lora.dropout = num(key, value)?,
            "lora_scale" => self.lora.scale = num(key, value)?,
            "norm_eps" => self.norm_eps = num(key, value)?,
            _ => {
                return Err(ModelError::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a config file: `key = value` lines, `#` comments, blank lines
    /// ignored. An optional `preset = name` line (which must come first)
    /// selects the baseline; otherwise the desk preset is assumed.
    pub fn from_kv_text(text: &str) -> Result<Self, ModelError> {
        let mut config: Option<ModelConfig> = None;
        let mut seen_any = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ModelError::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if seen_any {
                    return Err(ModelError::Config(format!(
                        "config line {}: preset must come before other keys",
                        lineno + 1
                    )));
                }
                config = Some(ModelConfig::preset(value)?);
                seen_any = true;
                continue;
            }
            seen_any = true;
            config
                .get_or_insert_with(ModelConfig::desk)
                .apply_kv(key, value)?;
        }
        let config = config.unwrap_or_else(ModelConfig::desk);
        config.validate()?;
        Ok(config)
    }
}
