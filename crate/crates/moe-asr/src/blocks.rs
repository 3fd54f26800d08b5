//! Attention and block-level machinery.
//!
//! Multi-headed attention with absolute or relative (clipped-distance,
//! learned per-head score bias) positions, boolean attention masks
//! (full / causal / streaming / block-diagonal), pre-layer-norm residual
//! encoder and decoder blocks with dense-FFN or mixture-of-experts
//! sub-layers, and the two-layer strided convolutional subsampler that
//! front-ends acoustic features.

use crate::error::{Error, Result};
use crate::moe::{self, FfnParams, LoadStats, MoeLayerParams, RouterConfig};
use crate::tensor::ops;
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

/// Epsilon for every layer norm in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Additive score for masked attention positions. Large enough that the
/// post-softmax weight underflows to exactly zero whenever the row has at
/// least one allowed position.
const MASKED_SCORE: f64 = -1e30;

// ---------------------------------------------------------------------------
// masks

/// A boolean query×key attendability matrix (true = may attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t_q: usize,
    t_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(t_q: usize, t_k: usize) -> Self {
        AttentionMask {
            t_q,
            t_k,
            allowed: vec![true; t_q * t_k],
        }
    }

    /// Causal self-attention: position t sees keys s ≤ t.
    pub fn causal(t_len: usize) -> Self {
        let mut allowed = vec![false; t_len * t_len];
        for t in 0..t_len {
            for s in 0..=t {
                allowed[t * t_len + s] = true;
            }
        }
        AttentionMask {
            t_q: t_len,
            t_k: t_len,
            allowed,
        }
    }

    /// Streaming window: position t sees keys s with t−left ≤ s ≤ t+right.
    pub fn streaming(t_len: usize, left: usize, right: usize) -> Self {
        let mut allowed = vec![false; t_len * t_len];
        for t in 0..t_len {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(t_len.saturating_sub(1));
            for s in lo..=hi {
                allowed[t * t_len + s] = true;
            }
        }
        AttentionMask {
            t_q: t_len,
            t_k: t_len,
            allowed,
        }
    }

    /// Square block-diagonal mask for several sequences concatenated along
    /// time: positions attend only within their own sequence.
    pub fn block_diagonal(lengths: &[usize]) -> Self {
        let total: usize = lengths.iter().sum();
        let mut allowed = vec![false; total * total];
        let mut start = 0;
        for &len in lengths {
            for t in start..start + len {
                for s in start..start + len {
                    allowed[t * total + s] = true;
                }
            }
            start += len;
        }
        AttentionMask {
            t_q: total,
            t_k: total,
            allowed,
        }
    }

    /// Block-diagonal mask between two differently-chunked concatenations
    /// (e.g. decoder positions attending their own utterance's encoder
    /// frames). `q_lengths` and `k_lengths` must have the same number of
    /// blocks.
    pub fn cross_block_diagonal(q_lengths: &[usize], k_lengths: &[usize]) -> Result<Self> {
        if q_lengths.len() != k_lengths.len() {
            return Err(Error::Dimension {
                op: "cross_block_diagonal",
                msg: format!(
                    "{} query blocks vs {} key blocks",
                    q_lengths.len(),
                    k_lengths.len()
                ),
            });
        }
        let t_q: usize = q_lengths.iter().sum();
        let t_k: usize = k_lengths.iter().sum();
        let mut allowed = vec![false; t_q * t_k];
        let (mut q0, mut k0) = (0, 0);
        for (&ql, &kl) in q_lengths.iter().zip(k_lengths) {
            for t in q0..q0 + ql {
                for s in k0..k0 + kl {
                    allowed[t * t_k + s] = true;
                }
            }
            q0 += ql;
            k0 += kl;
        }
        Ok(AttentionMask { t_q, t_k, allowed })
    }

    /// Positions attendable in both masks.
    pub fn intersect(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.t_q != other.t_q || self.t_k != other.t_k {
            return Err(Error::Dimension {
                op: "intersect",
                msg: format!(
                    "mask dims {}×{} vs {}×{}",
                    self.t_q, self.t_k, other.t_q, other.t_k
                ),
            });
        }
        Ok(AttentionMask {
            t_q: self.t_q,
            t_k: self.t_k,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn t_q(&self) -> usize {
        self.t_q
    }

    pub fn t_k(&self) -> usize {
        self.t_k
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        self.allowed[t * self.t_k + s]
    }

    pub fn flags(&self) -> &[bool] {
        &self.allowed
    }

    /// Key columns attendable from query row t.
    pub fn row_columns(&self, t: usize) -> Vec<usize> {
        (0..self.t_k).filter(|&s| self.allows(t, s)).collect()
    }

    /// True for rows with no attendable key at all.
    pub fn fully_masked_rows(&self) -> Vec<bool> {
        (0..self.t_q)
            .map(|t| !self.allowed[t * self.t_k..(t + 1) * self.t_k].iter().any(|&a| a))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// layer norm parameters

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::param_from_vec(&[d], vec![1.0; d]).expect("ln gain"),
            bias: Tensor::param_from_vec(&[d], vec![0.0; d]).expect("ln bias"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------
// multi-headed attention

/// Learned relative-position score biases: one row per head, one column per
/// clipped distance in −left ..= right (key index minus query index).
#[derive(Debug, Clone)]
pub struct RelPosParams {
    pub bias: Tensor,
    pub left: usize,
    pub right: usize,
}

impl RelPosParams {
    pub fn init(n_heads: usize, left: usize, right: usize) -> Self {
        let span = left + right + 1;
        RelPosParams {
            bias: Tensor::param_from_vec(&[n_heads, span], vec![0.0; n_heads * span])
                .expect("rel bias"),
            left,
            right,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub n_heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    /// `Some` = relative-position variant.
    pub rel: Option<RelPosParams>,
}

impl MhaParams {
    pub fn init(
        d_model: usize,
        n_heads: usize,
        rel_window: Option<(usize, usize)>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        Ok(MhaParams {
            n_heads,
            wq: Tensor::init_uniform(&[d_model, d_model], d_model, rng),
            bq: Tensor::init_uniform(&[d_model], d_model, rng),
            wk: Tensor::init_uniform(&[d_model, d_model], d_model, rng),
            bk: Tensor::init_uniform(&[d_model], d_model, rng),
            wv: Tensor::init_uniform(&[d_model, d_model], d_model, rng),
            bv: Tensor::init_uniform(&[d_model], d_model, rng),
            wo: Tensor::init_uniform(&[d_model, d_model], d_model, rng),
            bo: Tensor::init_uniform(&[d_model], d_model, rng),
            rel: rel_window.map(|(l, r)| RelPosParams::init(n_heads, l, r)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
        if let Some(rel) = &self.rel {
            out.push((format!("{prefix}.rel_bias"), rel.bias.clone()));
        }
    }
}

/// Scaled dot-product multi-headed attention.
///
/// Masked positions receive a score of −1e30 before the softmax, which
/// zeroes their weight exactly. A query row with no attendable key yields a
/// zero output row. With `params.rel` set, a learned per-head bias indexed
/// by the clipped key−query distance is added to every score.
pub fn mha(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    mask: &AttentionMask,
    params: &MhaParams,
) -> Result<Tensor> {
    let d = params.d_model();
    let t_q = match q_in.shape() {
        [t, dm] if *dm == d => *t,
        s => {
            return Err(Error::Dimension {
                op: "mha",
                msg: format!("queries must be [T×{d}], got {s:?}"),
            })
        }
    };
    let t_k = match k_in.shape() {
        [t, dm] if *dm == d => *t,
        s => {
            return Err(Error::Dimension {
                op: "mha",
                msg: format!("keys must be [T×{d}], got {s:?}"),
            })
        }
    };
    if v_in.shape() != [t_k, d] {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: k_in.shape().to_vec(),
            rhs: v_in.shape().to_vec(),
        });
    }
    if mask.t_q() != t_q || mask.t_k() != t_k {
        return Err(Error::Dimension {
            op: "mha",
            msg: format!(
                "mask is {}×{} but attention is {t_q}×{t_k}",
                mask.t_q(),
                mask.t_k()
            ),
        });
    }

    let q = ops::add_bias(&ops::matmul(q_in, &params.wq)?, &params.bq)?;
    let k = ops::add_bias(&ops::matmul(k_in, &params.wk)?, &params.bk)?;
    let v = ops::add_bias(&ops::matmul(v_in, &params.wv)?, &params.bv)?;

    let d_head = d / params.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let qh = ops::slice_last(&q, h * d_head, d_head)?;
        let kh = ops::slice_last(&k, h * d_head, d_head)?;
        let vh = ops::slice_last(&v, h * d_head, d_head)?;
        let mut scores = ops::matmul(&qh, &transposed(&kh)?)?.scale(scale);
        if let Some(rel) = &params.rel {
            let span = rel.left + rel.right + 1;
            let mut flat = Vec::with_capacity(t_q * t_k);
            for t in 0..t_q {
                for s in 0..t_k {
                    let dist = (s as isize - t as isize)
                        .clamp(-(rel.left as isize), rel.right as isize);
                    flat.push(h * span + (dist + rel.left as isize) as usize);
                }
            }
            let bias = ops::reshape(&ops::gather(&rel.bias, &flat)?, &[t_q, t_k])?;
            scores = scores.add(&bias)?;
        }
        let masked = ops::masked_fill(&scores, mask.flags(), MASKED_SCORE)?;
        let weights = ops::softmax(&masked, 1)?;
        heads.push(ops::matmul(&weights, &vh)?);
    }
    let merged = ops::concat_last(&heads)?;
    let out = ops::add_bias(&ops::matmul(&merged, &params.wo)?, &params.bo)?;

    // Rows with no attendable key are defined to be zero.
    let dead = mask.fully_masked_rows();
    if dead.iter().any(|&d| d) {
        let keep: Vec<f64> = dead.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(&[t_q], keep)?;
        return ops::scale_rows(&out, &keep);
    }
    Ok(out)
}

fn transposed(x: &Tensor) -> Result<Tensor> {
    ops::transpose2d(x)
}

// ---------------------------------------------------------------------------
// blocks

#[derive(Debug, Clone)]
pub enum FfnKind {
    Dense,
    Moe(RouterConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    /// No attention-score position terms (any absolute encoding is added to
    /// the block inputs by the caller).
    Absolute,
    /// Learned clipped-distance score biases.
    Relative,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub ffn_kind: FfnKind,
    pub position_kind: PositionKind,
    /// Clip extents for relative positions; also the streaming window when
    /// one is in force. `None` with `Relative` falls back to (32, 32).
    pub rel_window: Option<(usize, usize)>,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if let FfnKind::Moe(cfg) = &self.ffn_kind {
            cfg.validate()?;
        }
        Ok(())
    }

    fn rel_extents(&self) -> Option<(usize, usize)> {
        match self.position_kind {
            PositionKind::Absolute => None,
            PositionKind::Relative => Some(self.rel_window.unwrap_or((32, 32))),
        }
    }
}

/// The feed-forward half of a block: dense or switch-routed experts.
#[derive(Debug, Clone)]
pub enum FfnSublayer {
    Dense(FfnParams),
    Moe(MoeLayerParams),
}

impl FfnSublayer {
    fn init(cfg: &BlockConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(match &cfg.ffn_kind {
            FfnKind::Dense => FfnSublayer::Dense(FfnParams::init(cfg.d_model, cfg.d_ff, rng)),
            FfnKind::Moe(router) => FfnSublayer::Moe(MoeLayerParams::init(
                cfg.d_model,
                cfg.d_ff,
                router.clone(),
                rng,
            )?),
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        dropout_p: f64,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(Tensor, Option<LoadStats>)> {
        match self {
            FfnSublayer::Dense(p) => {
                Ok((moe::ffn_forward(x, p, dropout_p, rng, training)?, None))
            }
            FfnSublayer::Moe(p) => {
                let (y, stats, _) = moe::moe_forward(x, p, dropout_p, rng, training)?;
                Ok((y, Some(stats)))
            }
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            FfnSublayer::Dense(p) => p.collect(prefix, out),
            FfnSublayer::Moe(p) => p.collect(prefix, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlockParams {
    pub dropout_p: f64,
    pub ln1: LayerNormParams,
    pub attn: MhaParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnSublayer,
}

impl EncoderBlockParams {
    pub fn init(cfg: &BlockConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        Ok(EncoderBlockParams {
            dropout_p: cfg.dropout_p,
            ln1: LayerNormParams::init(cfg.d_model),
            attn: MhaParams::init(cfg.d_model, cfg.n_heads, cfg.rel_extents(), rng)?,
            ln2: LayerNormParams::init(cfg.d_model),
            ffn: FfnSublayer::init(cfg, rng)?,
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

/// Pre-layer-norm residual encoder block:
/// `y1 = x + dropout(MHA(LN(x)))`, `y = y1 + dropout(FFN_or_MoE(LN(y1)))`.
pub fn encoder_block(
    x: &Tensor,
    params: &EncoderBlockParams,
    mask: &AttentionMask,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Tensor, Option<LoadStats>)> {
    let normed = params.ln1.apply(x)?;
    let attn = mha(&normed, &normed, &normed, mask, &params.attn)?;
    let y1 = x.add(&ops::dropout(&attn, params.dropout_p, rng, training)?)?;

    let normed2 = params.ln2.apply(&y1)?;
    let (ffn_out, stats) = params.ffn.forward(&normed2, params.dropout_p, rng, training)?;
    let y = y1.add(&ops::dropout(&ffn_out, params.dropout_p, rng, training)?)?;
    Ok((y, stats))
}

#[derive(Debug, Clone)]
pub struct DecoderBlockParams {
    pub dropout_p: f64,
    pub ln1: LayerNormParams,
    pub self_attn: MhaParams,
    pub ln2: LayerNormParams,
    pub cross_attn: MhaParams,
    pub ln3: LayerNormParams,
    pub ffn: FfnSublayer,
}

impl DecoderBlockParams {
    pub fn init(cfg: &BlockConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        Ok(DecoderBlockParams {
            dropout_p: cfg.dropout_p,
            ln1: LayerNormParams::init(cfg.d_model),
            self_attn: MhaParams::init(cfg.d_model, cfg.n_heads, cfg.rel_extents(), rng)?,
            ln2: LayerNormParams::init(cfg.d_model),
            cross_attn: MhaParams::init(cfg.d_model, cfg.n_heads, None, rng)?,
            ln3: LayerNormParams::init(cfg.d_model),
            ffn: FfnSublayer::init(cfg, rng)?,
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect(&format!("{prefix}.ln3"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

/// Pre-layer-norm decoder block: causal self-attention, cross-attention
/// over the encoder output, then the FFN/MoE sub-layer.
pub fn decoder_block(
    x: &Tensor,
    encoder_out: &Tensor,
    params: &DecoderBlockParams,
    self_mask: &AttentionMask,
    cross_mask: &AttentionMask,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Tensor, Option<LoadStats>)> {
    let normed = params.ln1.apply(x)?;
    let attn = mha(&normed, &normed, &normed, self_mask, &params.self_attn)?;
    let y1 = x.add(&ops::dropout(&attn, params.dropout_p, rng, training)?)?;

    let normed2 = params.ln2.apply(&y1)?;
    let cross = mha(&normed2, encoder_out, encoder_out, cross_mask, &params.cross_attn)?;
    let y2 = y1.add(&ops::dropout(&cross, params.dropout_p, rng, training)?)?;

    let normed3 = params.ln3.apply(&y2)?;
    let (ffn_out, stats) = params.ffn.forward(&normed3, params.dropout_p, rng, training)?;
    let y = y2.add(&ops::dropout(&ffn_out, params.dropout_p, rng, training)?)?;
    Ok((y, stats))
}

/// Placement rule for mixtures inside a stack: with `moe_every = k > 0`,
/// the 1-based block index i carries a MoE FFN iff `i % k == 0` (so
/// "every two layers" puts mixtures at blocks 2, 4, 6, …). `moe_every = 0`
/// keeps the whole stack dense.
pub fn block_has_moe(index_1based: usize, moe_every: usize) -> bool {
    moe_every > 0 && index_1based % moe_every == 0
}

// ---------------------------------------------------------------------------
// positional encoding

/// Fixed sinusoidal absolute positional encodings, `[t_len × d_model]`:
/// `pe[t, 2i] = sin(t·ω_i)`, `pe[t, 2i+1] = cos(t·ω_i)` with
/// `ω_i = 10000^{−2i/d_model}`. A constant — no gradient flows into it.
pub fn sinusoidal_pe(t_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        for i in 0..d_model / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = (t as f64 * omega).sin();
            data[t * d_model + 2 * i + 1] = (t as f64 * omega).cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = (t as f64 * omega).sin();
        }
    }
    Tensor::from_vec(&[t_len, d_model], data).expect("pe shape")
}

// ---------------------------------------------------------------------------
// convolutional subsampler

/// Two stride-2, pad-1, 3×3 ReLU convolutions (1 → channels → channels)
/// followed by a linear layer to `d_model`. Each conv maps a spatial extent
/// E to `floor((E−1)/2) + 1`, so T frames become `ceil(T/4)` and the
/// feature axis shrinks the same way.
#[derive(Debug, Clone)]
pub struct ConvSubsampleParams {
    pub d_feat: usize,
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// One application of a stride-2 pad-1 kernel-3 conv to extent `e`.
pub fn conv_out_extent(e: usize) -> usize {
    (e - 1) / 2 + 1
}

impl ConvSubsampleParams {
    pub fn init(d_feat: usize, channels: usize, d_model: usize, rng: &mut RngStream) -> Result<Self> {
        if d_feat == 0 || channels == 0 {
            return Err(Error::Config(
                "subsampler needs d_feat ≥ 1 and channels ≥ 1".into(),
            ));
        }
        let f_out = conv_out_extent(conv_out_extent(d_feat));
        let proj_in = channels * f_out;
        Ok(ConvSubsampleParams {
            d_feat,
            k1: Tensor::init_uniform(&[channels, 1, 3, 3], 9, rng),
            b1: Tensor::init_uniform(&[channels], 9, rng),
            k2: Tensor::init_uniform(&[channels, channels, 3, 3], 9 * channels, rng),
            b2: Tensor::init_uniform(&[channels], 9 * channels, rng),
            proj_w: Tensor::init_uniform(&[proj_in, d_model], proj_in, rng),
            proj_b: Tensor::init_uniform(&[d_model], proj_in, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("k1", &self.k1),
            ("b1", &self.b1),
            ("k2", &self.k2),
            ("b2", &self.b2),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

/// Subsamples `[T × d_feat]` features to `[ceil(T/4) × d_model]`.
pub fn conv_subsample(features: &Tensor, params: &ConvSubsampleParams) -> Result<Tensor> {
    let (t_len, f) = match features.shape() {
        [t, f] => (*t, *f),
        s => {
            return Err(Error::Dimension {
                op: "conv_subsample",
                msg: format!("expected [T × d_feat], got {s:?}"),
            })
        }
    };
    if t_len == 0 {
        return Err(Error::Dimension {
            op: "conv_subsample",
            msg: "input has zero frames".into(),
        });
    }
    if f != params.d_feat {
        return Err(Error::Dimension {
            op: "conv_subsample",
            msg: format!("expected {} features per frame, got {f}", params.d_feat),
        });
    }
    let img = ops::reshape(features, &[1, t_len, f])?;
    let h1 = ops::conv2d(&img, &params.k1, Some(&params.b1), 2)?.relu();
    let h2 = ops::conv2d(&h1, &params.k2, Some(&params.b2), 2)?.relu();
    let flat = ops::merge_channels(&h2)?;
    ops::add_bias(&ops::matmul(&flat, &params.proj_w)?, &params.proj_b)
}
