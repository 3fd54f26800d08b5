//! The two host architectures, assembled end to end.
//!
//! * **S2s**: conv subsampler → absolute-position encoder stack → causal
//!   decoder stack over shifted-right targets → vocabulary logits. Trained
//!   with label-smoothed cross-entropy.
//! * **Tt** (transducer): conv subsampler → relative-position (optionally
//!   streaming-masked) encoder stack; blank-prefixed label path of
//!   embedding → unidirectional LSTM stack → optional switch-MoE
//!   projection; additive joint network producing per-(t, u) logits over
//!   vocab + blank. Trained with the transducer forward-algorithm loss.
//!
//! Batches hold whole utterances. Forward passes concatenate utterances
//! along time and isolate them with block-diagonal attention masks, so each
//! mixture-of-experts layer routes one batch of tokens per step (its
//! capacity is computed over the full batch), while attention never crosses
//! utterance boundaries.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_has_moe, conv_subsample, decoder_block, encoder_block, sinusoidal_pe, AttentionMask,
    BlockConfig, ConvSubsampleParams, DecoderBlockParams, EncoderBlockParams, FfnKind,
    LayerNormParams, PositionKind,
};
use crate::error::{Error, Result};
use crate::moe::{moe_forward, LoadStats, MoeLayerParams, RouterConfig};
use crate::tensor::ops::{self, argmax, LstmCellParams};
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    S2s,
    Tt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamingWindow {
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageIdConfig {
    pub num_languages: usize,
}

/// Label path of the transducer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDecoderConfig {
    pub embed_dim: usize,
    pub lstm_layers: usize,
    pub hidden: usize,
    /// `Some` replaces the post-LSTM projection with a switch-MoE FFN
    /// (pre-layer-norm, residual).
    #[serde(default)]
    pub moe_projection: Option<RouterConfig>,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_subsample_channels() -> usize {
    8
}

/// Complete architecture description; serializes field-for-field as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    /// S2s only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_layers: Option<usize>,
    /// Tt only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_decoder: Option<LabelDecoderConfig>,
    pub d_ff: usize,
    /// Real tokens. S2s adds BOS/EOS internally; Tt adds the blank class.
    pub vocab_size: usize,
    /// Tt only; must be a class id in 0..vocab_size+1.
    #[serde(default)]
    pub blank_id: usize,
    /// Every k-th block (1-based) carries a MoE FFN; 0 keeps all dense.
    #[serde(default)]
    pub moe_every: usize,
    pub router: RouterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streaming: Option<StreamingWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_id: Option<LanguageIdConfig>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    pub d_feat: usize,
    #[serde(default = "default_subsample_channels")]
    pub subsample_channels: usize,
    /// Tt only: the joint network width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_joint: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return cfg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.encoder_layers == 0 {
            return cfg("encoder_layers must be at least 1".into());
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.d_feat == 0 {
            return cfg("d_ff, vocab_size and d_feat must all be at least 1".into());
        }
        if self.subsample_channels == 0 {
            return cfg("subsample_channels must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return cfg(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        self.router.validate()?;
        if let Some(l) = &self.language_id {
            if l.num_languages == 0 {
                return cfg("language_id.num_languages must be at least 1".into());
            }
        }
        match self.family {
            Family::S2s => {
                match self.decoder_layers {
                    Some(n) if n >= 1 => {}
                    _ => return cfg("s2s requires decoder_layers ≥ 1".into()),
                }
                if self.label_decoder.is_some() {
                    return cfg("label_decoder is a transducer field".into());
                }
                if self.d_joint.is_some() {
                    return cfg("d_joint is a transducer field".into());
                }
                if self.streaming.is_some() {
                    return cfg("streaming attention is only supported for the transducer".into());
                }
            }
            Family::Tt => {
                let ld = match &self.label_decoder {
                    Some(ld) => ld,
                    None => return cfg("transducer requires label_decoder".into()),
                };
                if ld.embed_dim == 0 || ld.lstm_layers == 0 || ld.hidden == 0 {
                    return cfg("label_decoder dims must all be at least 1".into());
                }
                if let Some(r) = &ld.moe_projection {
                    r.validate()?;
                }
                if self.blank_id >= self.vocab_size + 1 {
                    return cfg(format!(
                        "blank_id {} out of range for {} classes",
                        self.blank_id,
                        self.vocab_size + 1
                    ));
                }
                match self.d_joint {
                    Some(j) if j >= 1 => {}
                    _ => return cfg("transducer requires d_joint ≥ 1".into()),
                }
                if self.decoder_layers.is_some() {
                    return cfg("decoder_layers is an s2s field; transducers use label_decoder".into());
                }
            }
        }
        Ok(())
    }

    /// Feature dimension entering the subsampler (language one-hot included).
    pub fn feature_dim_in(&self) -> usize {
        self.d_feat + self.language_id.map_or(0, |l| l.num_languages)
    }

    /// Output classes: vocab plus BOS/EOS (s2s) or vocab plus blank (tt).
    pub fn num_classes(&self) -> usize {
        match self.family {
            Family::S2s => self.vocab_size + 2,
            Family::Tt => self.vocab_size + 1,
        }
    }

    pub fn bos_id(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size + 1
    }

    fn encoder_block_cfg(&self, index_1based: usize) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout_p: self.dropout_p,
            ffn_kind: if block_has_moe(index_1based, self.moe_every) {
                FfnKind::Moe(self.router.clone())
            } else {
                FfnKind::Dense
            },
            position_kind: match self.family {
                Family::S2s => PositionKind::Absolute,
                Family::Tt => PositionKind::Relative,
            },
            rel_window: self.streaming.map(|w| (w.left, w.right)),
        }
    }

    fn decoder_block_cfg(&self, index_1based: usize) -> BlockConfig {
        let mut cfg = self.encoder_block_cfg(index_1based);
        cfg.position_kind = PositionKind::Absolute;
        cfg.rel_window = None;
        cfg
    }

    /// Full-scale attention configuration, for reference; far too large
    /// to train here.
    pub fn s2s_full() -> Self {
        ModelConfig {
            family: Family::S2s,
            d_model: 512,
            n_heads: 8,
            encoder_layers: 18,
            decoder_layers: Some(6),
            label_decoder: None,
            d_ff: 2048,
            vocab_size: 10014,
            blank_id: 0,
            moe_every: 2,
            router: RouterConfig::new(24),
            streaming: None,
            language_id: Some(LanguageIdConfig { num_languages: 12 }),
            dropout_p: 0.1,
            d_feat: 80,
            subsample_channels: 32,
            d_joint: None,
        }
    }

    /// Full-scale streaming-transducer configuration, for reference.
    pub fn tt_full() -> Self {
        ModelConfig {
            family: Family::Tt,
            d_model: 512,
            n_heads: 8,
            encoder_layers: 18,
            decoder_layers: None,
            label_decoder: Some(LabelDecoderConfig {
                embed_dim: 320,
                lstm_layers: 2,
                hidden: 1024,
                moe_projection: None,
            }),
            d_ff: 2048,
            vocab_size: 10014,
            blank_id: 0,
            moe_every: 2,
            router: RouterConfig::new(24),
            streaming: Some(StreamingWindow { left: 18, right: 4 }),
            language_id: Some(LanguageIdConfig { num_languages: 12 }),
            dropout_p: 0.1,
            d_feat: 80,
            subsample_channels: 32,
            d_joint: Some(512),
        }
    }

    /// Small S2s that trains in seconds on synthetic tasks.
    pub fn s2s_desk(vocab_size: usize, d_feat: usize) -> Self {
        ModelConfig {
            family: Family::S2s,
            d_model: 32,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: Some(1),
            label_decoder: None,
            d_ff: 64,
            vocab_size,
            blank_id: 0,
            moe_every: 2,
            router: RouterConfig::new(4),
            streaming: None,
            language_id: None,
            dropout_p: 0.0,
            d_feat,
            subsample_channels: 4,
            d_joint: None,
        }
    }

    /// Small transducer that trains in seconds on synthetic tasks.
    pub fn tt_desk(vocab_size: usize, d_feat: usize) -> Self {
        ModelConfig {
            family: Family::Tt,
            d_model: 32,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: None,
            label_decoder: Some(LabelDecoderConfig {
                embed_dim: 16,
                lstm_layers: 1,
                hidden: 32,
                moe_projection: None,
            }),
            d_ff: 64,
            vocab_size,
            blank_id: 0,
            moe_every: 2,
            router: RouterConfig::new(4),
            streaming: Some(StreamingWindow { left: 4, right: 2 }),
            language_id: None,
            dropout_p: 0.0,
            d_feat,
            subsample_channels: 4,
            d_joint: Some(32),
        }
    }
}

// ---------------------------------------------------------------------------
// batches

/// One utterance: acoustic feature frames, the token transcript, and the
/// utterance's language.
#[derive(Debug, Clone)]
pub struct Utterance {
    /// `[T × d_feat]`, a constant (inputs carry no gradient).
    pub features: Tensor,
    pub targets: Vec<usize>,
    pub language: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub utterances: Vec<Utterance>,
}

impl Batch {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.shape()[0]).sum()
    }

    pub fn total_targets(&self) -> usize {
        self.utterances.iter().map(|u| u.targets.len()).sum()
    }
}

/// Appends a language one-hot to every frame: `[T×F] -> [T×(F+num)]`.
pub fn inject_language_id(
    features: &Tensor,
    language: usize,
    num_languages: usize,
) -> Result<Tensor> {
    if language >= num_languages {
        return Err(Error::Parameter(format!(
            "language id {language} out of range for {num_languages} languages"
        )));
    }
    let t_len = match features.shape() {
        [t, _] => *t,
        s => {
            return Err(Error::Dimension {
                op: "inject_language_id",
                msg: format!("expected [T × d_feat], got {s:?}"),
            })
        }
    };
    let mut onehot = vec![0.0; t_len * num_languages];
    for t in 0..t_len {
        onehot[t * num_languages + language] = 1.0;
    }
    let onehot = Tensor::from_vec(&[t_len, num_languages], onehot)?;
    ops::concat_last(&[features.clone(), onehot])
}

fn prepare_features(cfg: &ModelConfig, utt: &Utterance) -> Result<Tensor> {
    match cfg.language_id {
        Some(l) => inject_language_id(&utt.features, utt.language, l.num_languages),
        None => Ok(utt.features.clone()),
    }
}

// ---------------------------------------------------------------------------
// parameter registry

/// Ordered view of every trainable tensor in a model, keyed by a stable
/// path string. Entries share storage with the live model (tensors are
/// handles), so optimizers and checkpointing operate through it directly.
#[derive(Debug, Clone)]
pub struct ParamRegistry {
    entries: Vec<(String, Tensor)>,
}

impl ParamRegistry {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamRegistry { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// encoder (shared by both families)

struct EncodedBatch {
    /// All utterances' encoder outputs, concatenated along time.
    out: Tensor,
    lengths: Vec<usize>,
    stats: Vec<LoadStats>,
}

fn encode_batch(
    cfg: &ModelConfig,
    subsample: &ConvSubsampleParams,
    encoder: &[EncoderBlockParams],
    batch: &Batch,
    rng: &mut RngStream,
    training: bool,
) -> Result<EncodedBatch> {
    let mut parts = Vec::with_capacity(batch.utterances.len());
    let mut lengths = Vec::with_capacity(batch.utterances.len());
    for utt in &batch.utterances {
        let feats = prepare_features(cfg, utt)?;
        let mut sub = conv_subsample(&feats, subsample)?;
        if cfg.family == Family::S2s {
            sub = sub.add(&sinusoidal_pe(sub.shape()[0], cfg.d_model))?;
        }
        lengths.push(sub.shape()[0]);
        parts.push(sub);
    }
    let mut x = ops::concat_rows(&parts)?;
    let total: usize = lengths.iter().sum();
    let mut mask = AttentionMask::block_diagonal(&lengths);
    if let Some(w) = cfg.streaming {
        mask = mask.intersect(&AttentionMask::streaming(total, w.left, w.right))?;
    }
    let mut stats = Vec::new();
    for block in encoder {
        let (y, s) = encoder_block(&x, block, &mask, rng, training)?;
        x = y;
        if let Some(s) = s {
            stats.push(s);
        }
    }
    Ok(EncodedBatch {
        out: x,
        lengths,
        stats,
    })
}

// ---------------------------------------------------------------------------
// sequence-to-sequence model

#[derive(Debug, Clone)]
pub struct S2sModel {
    pub cfg: ModelConfig,
    pub subsample: ConvSubsampleParams,
    pub encoder: Vec<EncoderBlockParams>,
    /// `[(vocab+2) × d_model]`; rows BOS and EOS sit at the end.
    pub dec_embed: Tensor,
    pub decoder: Vec<DecoderBlockParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl S2sModel {
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        if cfg.family != Family::S2s {
            return Err(Error::Config("S2sModel requires family = s2s".into()));
        }
        let subsample =
            ConvSubsampleParams::init(cfg.feature_dim_in(), cfg.subsample_channels, cfg.d_model, rng)?;
        let encoder = (1..=cfg.encoder_layers)
            .map(|i| EncoderBlockParams::init(&cfg.encoder_block_cfg(i), rng))
            .collect::<Result<Vec<_>>>()?;
        let classes = cfg.num_classes();
        let dec_embed = Tensor::init_uniform(&[classes, cfg.d_model], cfg.d_model, rng);
        let decoder = (1..=cfg.decoder_layers.unwrap())
            .map(|i| DecoderBlockParams::init(&cfg.decoder_block_cfg(i), rng))
            .collect::<Result<Vec<_>>>()?;
        let out_w = Tensor::init_uniform(&[cfg.d_model, classes], cfg.d_model, rng);
        let out_b = Tensor::init_uniform(&[classes], cfg.d_model, rng);
        Ok(S2sModel {
            cfg,
            subsample,
            encoder,
            dec_embed,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn params(&self) -> ParamRegistry {
        let mut out = Vec::new();
        self.subsample.collect("subsample", &mut out);
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect(&format!("encoder.{i}"), &mut out);
        }
        out.push(("dec_embed".into(), self.dec_embed.clone()));
        for (i, b) in self.decoder.iter().enumerate() {
            b.collect(&format!("decoder.{i}"), &mut out);
        }
        out.push(("out_proj.w".into(), self.out_w.clone()));
        out.push(("out_proj.b".into(), self.out_b.clone()));
        ParamRegistry::new(out)
    }
}

pub struct S2sOutput {
    /// `[Σ_b (U_b+1) × (vocab+2)]`: one row per decoder position.
    pub logits: Tensor,
    /// Per-position training targets: each utterance's tokens plus EOS.
    pub targets_with_eos: Vec<usize>,
    /// Decoder rows per utterance (U_b + 1 each).
    pub dec_lengths: Vec<usize>,
    pub moe_stats: Vec<LoadStats>,
}

/// Teacher-forced forward pass of the attention model over a batch.
pub fn s2s_forward(
    batch: &Batch,
    model: &S2sModel,
    rng: &mut RngStream,
    training: bool,
) -> Result<S2sOutput> {
    let cfg = &model.cfg;
    for utt in &batch.utterances {
        if let Some(&bad) = utt.targets.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Parameter(format!(
                "target id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
    }
    let enc = encode_batch(cfg, &model.subsample, &model.encoder, batch, rng, training)?;

    // Decoder inputs: BOS-prefixed targets, embedded, with positions local
    // to each utterance.
    let mut dec_parts = Vec::with_capacity(batch.utterances.len());
    let mut dec_lengths = Vec::with_capacity(batch.utterances.len());
    let mut targets_with_eos = Vec::new();
    for utt in &batch.utterances {
        let mut ids = Vec::with_capacity(utt.targets.len() + 1);
        ids.push(cfg.bos_id());
        ids.extend_from_slice(&utt.targets);
        let embedded = ops::select_rows(&model.dec_embed, &ids)?;
        dec_parts.push(embedded.add(&sinusoidal_pe(ids.len(), cfg.d_model))?);
        dec_lengths.push(ids.len());
        targets_with_eos.extend_from_slice(&utt.targets);
        targets_with_eos.push(cfg.eos_id());
    }
    let mut x = ops::concat_rows(&dec_parts)?;
    let total: usize = dec_lengths.iter().sum();
    let self_mask = AttentionMask::block_diagonal(&dec_lengths)
        .intersect(&AttentionMask::causal(total))?;
    let cross_mask = AttentionMask::cross_block_diagonal(&dec_lengths, &enc.lengths)?;

    let mut stats = enc.stats;
    for block in &model.decoder {
        let (y, s) = decoder_block(&x, &enc.out, block, &self_mask, &cross_mask, rng, training)?;
        x = y;
        if let Some(s) = s {
            stats.push(s);
        }
    }
    let logits = ops::add_bias(&ops::matmul(&x, &model.out_w)?, &model.out_b)?;
    Ok(S2sOutput {
        logits,
        targets_with_eos,
        dec_lengths,
        moe_stats: stats,
    })
}

/// Autoregressive argmax decoding from BOS until EOS or `max_len` tokens.
pub fn greedy_decode_s2s(
    model: &S2sModel,
    features: &Tensor,
    language: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let cfg = &model.cfg;
    let mut rng = RngStream::new(0, 0); // evaluation mode: never consulted
    let single = Batch {
        utterances: vec![Utterance {
            features: features.clone(),
            targets: vec![],
            language,
        }],
    };
    let enc = encode_batch(cfg, &model.subsample, &model.encoder, &single, &mut rng, false)?;

    let mut tokens: Vec<usize> = Vec::new();
    while tokens.len() < max_len {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(cfg.bos_id());
        ids.extend_from_slice(&tokens);
        let x0 = ops::select_rows(&model.dec_embed, &ids)?
            .add(&sinusoidal_pe(ids.len(), cfg.d_model))?;
        let self_mask = AttentionMask::causal(ids.len());
        let cross_mask = AttentionMask::full(ids.len(), enc.lengths[0]);
        let mut x = x0;
        for block in &model.decoder {
            let (y, _) =
                decoder_block(&x, &enc.out, block, &self_mask, &cross_mask, &mut rng, false)?;
            x = y;
        }
        let logits = ops::add_bias(&ops::matmul(&x, &model.out_w)?, &model.out_b)?;
        let data = logits.data();
        let classes = cfg.num_classes();
        let last = &data[(ids.len() - 1) * classes..ids.len() * classes];
        let next = argmax(last);
        if next == cfg.eos_id() {
            break;
        }
        // BOS in generated output would never terminate sensibly; emit it
        // literally and let accuracy metrics punish it.
        drop(data);
        tokens.push(next);
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// transducer model

#[derive(Debug, Clone)]
pub struct TtModel {
    pub cfg: ModelConfig,
    pub subsample: ConvSubsampleParams,
    pub encoder: Vec<EncoderBlockParams>,
    /// `[(vocab+1) × embed_dim]`; the blank row doubles as the sequence
    /// start symbol.
    pub label_embed: Tensor,
    pub lstm: Vec<LstmCellParams>,
    /// Optional switch-MoE projection after the LSTM stack
    /// (pre-layer-norm, residual).
    pub label_moe: Option<(LayerNormParams, MoeLayerParams)>,
    pub joint_audio_w: Tensor,
    pub joint_audio_b: Tensor,
    pub joint_label_w: Tensor,
    pub joint_label_b: Tensor,
    pub joint_out_w: Tensor,
    pub joint_out_b: Tensor,
}

impl TtModel {
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        if cfg.family != Family::Tt {
            return Err(Error::Config("TtModel requires family = tt".into()));
        }
        let ld = cfg.label_decoder.clone().unwrap();
        let d_joint = cfg.d_joint.unwrap();
        let classes = cfg.num_classes();
        let subsample =
            ConvSubsampleParams::init(cfg.feature_dim_in(), cfg.subsample_channels, cfg.d_model, rng)?;
        let encoder = (1..=cfg.encoder_layers)
            .map(|i| EncoderBlockParams::init(&cfg.encoder_block_cfg(i), rng))
            .collect::<Result<Vec<_>>>()?;
        let label_embed = Tensor::init_uniform(&[classes, ld.embed_dim], ld.embed_dim, rng);
        let mut lstm = Vec::with_capacity(ld.lstm_layers);
        for layer in 0..ld.lstm_layers {
            let d_in = if layer == 0 { ld.embed_dim } else { ld.hidden };
            lstm.push(LstmCellParams {
                wx: Tensor::init_uniform(&[d_in, 4 * ld.hidden], d_in, rng),
                wh: Tensor::init_uniform(&[ld.hidden, 4 * ld.hidden], ld.hidden, rng),
                b: Tensor::init_uniform(&[4 * ld.hidden], ld.hidden, rng),
            });
        }
        let label_moe = match &ld.moe_projection {
            Some(router) => Some((
                LayerNormParams::init(ld.hidden),
                MoeLayerParams::init(ld.hidden, ld.hidden, router.clone(), rng)?,
            )),
            None => None,
        };
        Ok(TtModel {
            subsample,
            encoder,
            label_embed,
            lstm,
            label_moe,
            joint_audio_w: Tensor::init_uniform(&[cfg.d_model, d_joint], cfg.d_model, rng),
            joint_audio_b: Tensor::init_uniform(&[d_joint], cfg.d_model, rng),
            joint_label_w: Tensor::init_uniform(&[ld.hidden, d_joint], ld.hidden, rng),
            joint_label_b: Tensor::init_uniform(&[d_joint], ld.hidden, rng),
            joint_out_w: Tensor::init_uniform(&[d_joint, classes], d_joint, rng),
            joint_out_b: Tensor::init_uniform(&[classes], d_joint, rng),
            cfg,
        })
    }

    /// Inference-mode encoder output `[T'×d_model]` for one utterance —
    /// the audio path in isolation, e.g. for latency or receptive-field
    /// inspection of a streaming configuration.
    pub fn encode_utterance(&self, features: &Tensor, language: usize) -> Result<Tensor> {
        let batch = Batch {
            utterances: vec![Utterance {
                features: features.clone(),
                targets: Vec::new(),
                language,
            }],
        };
        let mut rng = RngStream::new(0, 0); // inert: inference disables dropout
        Ok(encode_batch(
            &self.cfg,
            &self.subsample,
            &self.encoder,
            &batch,
            &mut rng,
            false,
        )?
        .out)
    }

    pub fn params(&self) -> ParamRegistry {
        let mut out = Vec::new();
        self.subsample.collect("subsample", &mut out);
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect(&format!("encoder.{i}"), &mut out);
        }
        out.push(("label_embed".into(), self.label_embed.clone()));
        for (i, cell) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{i}.wx"), cell.wx.clone()));
            out.push((format!("lstm.{i}.wh"), cell.wh.clone()));
            out.push((format!("lstm.{i}.b"), cell.b.clone()));
        }
        if let Some((ln, moe)) = &self.label_moe {
            ln.collect("label_moe.ln", &mut out);
            moe.collect("label_moe.moe", &mut out);
        }
        for (name, t) in [
            ("joint.audio_w", &self.joint_audio_w),
            ("joint.audio_b", &self.joint_audio_b),
            ("joint.label_w", &self.joint_label_w),
            ("joint.label_b", &self.joint_label_b),
            ("joint.out_w", &self.joint_out_w),
            ("joint.out_b", &self.joint_out_b),
        ] {
            out.push((name.to_string(), t.clone()));
        }
        ParamRegistry::new(out)
    }

    /// Runs the blank-prefixed label ids through embedding and the LSTM
    /// stack: `[U+1 × hidden]` activations for one utterance.
    fn label_states(&self, targets: &[usize]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(targets.len() + 1);
        ids.push(self.cfg.blank_id);
        ids.extend_from_slice(targets);
        let mut x = ops::select_rows(&self.label_embed, &ids)?;
        let hidden = self.cfg.label_decoder.as_ref().unwrap().hidden;
        for cell in &self.lstm {
            let rows = x.shape()[0];
            let mut h = Tensor::zeros(&[1, hidden]);
            let mut c = Tensor::zeros(&[1, hidden]);
            let mut outs = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = ops::select_rows(&x, &[r])?;
                let (hn, cn) = ops::lstm_cell(&xr, &h, &c, cell)?;
                h = hn.clone();
                c = cn;
                outs.push(hn);
            }
            x = ops::concat_rows(&outs)?;
        }
        Ok(x)
    }

    /// Optional MoE projection over concatenated label activations:
    /// `h + dropout(moe(LN(h)))`.
    fn project_labels(
        &self,
        h: &Tensor,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(Tensor, Option<LoadStats>)> {
        match &self.label_moe {
            None => Ok((h.clone(), None)),
            Some((ln, moe)) => {
                let normed = ln.apply(h)?;
                let (y, stats, _) = moe_forward(&normed, moe, self.cfg.dropout_p, rng, training)?;
                let projected = h.add(&ops::dropout(&y, self.cfg.dropout_p, rng, training)?)?;
                Ok((projected, Some(stats)))
            }
        }
    }

    /// Additive joint over one utterance: audio `[T'×d_model]` and label
    /// `[U+1×hidden]` become logits `[T' × U+1 × vocab+1]`.
    fn joint(&self, audio: &Tensor, label: &Tensor) -> Result<Tensor> {
        let t_len = audio.shape()[0];
        let u1 = label.shape()[0];
        let pa = ops::add_bias(&ops::matmul(audio, &self.joint_audio_w)?, &self.joint_audio_b)?;
        let pl = ops::add_bias(&ops::matmul(label, &self.joint_label_w)?, &self.joint_label_b)?;
        let sum = ops::repeat_rows(&pa, u1)?.add(&ops::tile_rows(&pl, t_len)?)?;
        let logits = ops::add_bias(&ops::matmul(&sum.relu(), &self.joint_out_w)?, &self.joint_out_b)?;
        ops::reshape(&logits, &[t_len, u1, self.cfg.num_classes()])
    }
}

pub struct TtOutput {
    /// Per-utterance joint logits `[T'_b × U_b+1 × vocab+1]`
    /// (not yet log-softmax-normalized).
    pub joints: Vec<Tensor>,
    pub moe_stats: Vec<LoadStats>,
}

/// Forward pass of the transducer over a batch.
pub fn tt_forward(
    batch: &Batch,
    model: &TtModel,
    rng: &mut RngStream,
    training: bool,
) -> Result<TtOutput> {
    let cfg = &model.cfg;
    for utt in &batch.utterances {
        if let Some(&bad) = utt
            .targets
            .iter()
            .find(|&&t| t >= cfg.num_classes() || t == cfg.blank_id)
        {
            return Err(Error::Parameter(format!(
                "target id {bad} invalid for vocab {} with blank {}",
                cfg.vocab_size, cfg.blank_id
            )));
        }
    }
    let enc = encode_batch(cfg, &model.subsample, &model.encoder, batch, rng, training)?;

    // Label paths run per utterance (the LSTM state must reset), but the
    // optional MoE projection routes all label tokens as one batch.
    let mut label_parts = Vec::with_capacity(batch.utterances.len());
    let mut label_lengths = Vec::with_capacity(batch.utterances.len());
    for utt in &batch.utterances {
        let h = model.label_states(&utt.targets)?;
        label_lengths.push(h.shape()[0]);
        label_parts.push(h);
    }
    let all_labels = ops::concat_rows(&label_parts)?;
    let (projected, label_stats) = model.project_labels(&all_labels, rng, training)?;

    let mut stats = enc.stats;
    if let Some(s) = label_stats {
        stats.push(s);
    }

    let mut joints = Vec::with_capacity(batch.utterances.len());
    let (mut a0, mut l0) = (0, 0);
    for (b, _) in batch.utterances.iter().enumerate() {
        let audio_rows: Vec<usize> = (a0..a0 + enc.lengths[b]).collect();
        let label_rows: Vec<usize> = (l0..l0 + label_lengths[b]).collect();
        let audio = ops::select_rows(&enc.out, &audio_rows)?;
        let label = ops::select_rows(&projected, &label_rows)?;
        joints.push(model.joint(&audio, &label)?);
        a0 += enc.lengths[b];
        l0 += label_lengths[b];
    }
    Ok(TtOutput {
        joints,
        moe_stats: stats,
    })
}

/// Frame-synchronous greedy transducer decoding: at each frame, emit
/// argmax non-blank symbols (advancing the label state) until the blank
/// wins or the per-frame cap is hit, then move to the next frame.
pub fn greedy_decode_tt(
    model: &TtModel,
    features: &Tensor,
    language: usize,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    if max_symbols_per_frame == 0 {
        return Err(Error::Parameter(
            "max_symbols_per_frame must be at least 1".into(),
        ));
    }
    let cfg = &model.cfg;
    let mut rng = RngStream::new(0, 0); // evaluation mode: never consulted
    let single = Batch {
        utterances: vec![Utterance {
            features: features.clone(),
            targets: vec![],
            language,
        }],
    };
    let enc = encode_batch(cfg, &model.subsample, &model.encoder, &single, &mut rng, false)?;
    let hidden = cfg.label_decoder.as_ref().unwrap().hidden;

    // Incremental label state: per-layer (h, c), plus the projected
    // representation of everything emitted so far.
    let mut states: Vec<(Tensor, Tensor)> = model
        .lstm
        .iter()
        .map(|_| (Tensor::zeros(&[1, hidden]), Tensor::zeros(&[1, hidden])))
        .collect();
    let feed = |token: usize, states: &mut Vec<(Tensor, Tensor)>| -> Result<Tensor> {
        let mut x = ops::select_rows(&model.label_embed, &[token])?;
        for (cell, (h, c)) in model.lstm.iter().zip(states.iter_mut()) {
            let (hn, cn) = ops::lstm_cell(&x, h, c, cell)?;
            *h = hn.clone();
            *c = cn;
            x = hn;
        }
        let (projected, _) = model.project_labels(&x, &mut RngStream::new(0, 0), false)?;
        Ok(projected)
    };

    let mut label_repr = feed(cfg.blank_id, &mut states)?;
    let mut tokens = Vec::new();
    for t in 0..enc.out.shape()[0] {
        let audio = ops::select_rows(&enc.out, &[t])?;
        for _ in 0..max_symbols_per_frame {
            let logits = model.joint(&audio, &label_repr)?;
            let next = argmax(&logits.data());
            if next == cfg.blank_id {
                break;
            }
            tokens.push(next);
            label_repr = feed(next, &mut states)?;
        }
    }
    Ok(tokens)
}

/// Family-erased model handle for the harness and checkpoint loader.
#[derive(Debug, Clone)]
pub enum Model {
    S2s(S2sModel),
    Tt(TtModel),
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(match cfg.family {
            Family::S2s => Model::S2s(S2sModel::init(cfg, rng)?),
            Family::Tt => Model::Tt(TtModel::init(cfg, rng)?),
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Model::S2s(m) => &m.cfg,
            Model::Tt(m) => &m.cfg,
        }
    }

    pub fn params(&self) -> ParamRegistry {
        match self {
            Model::S2s(m) => m.params(),
            Model::Tt(m) => m.params(),
        }
    }
}
