//! Switch-routed mixture of experts.
//!
//! Each token is dispatched to exactly one expert feed-forward network — the
//! one with the highest router probability — subject to a per-expert
//! capacity. Tokens that overflow their expert's capacity are dropped by the
//! module (their output row is zero) and survive only through the caller's
//! residual connection. A load-balancing auxiliary loss pushes the router
//! toward uniform expert utilization.
//!
//! The module output for an assigned token is `G(x)_i · E_i(x)` with the raw
//! (unrenormalized) top-1 gate probability, which keeps gradients flowing
//! into the router. The dispatch fractions `f` are hard counts and are
//! treated as constants in differentiation; gradients reach the router only
//! through the mean gate probabilities `P` and through the per-token gate
//! values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, argmax};
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

fn default_capacity_factor() -> f64 {
    1.5
}
fn default_alpha() -> f64 {
    0.01
}
fn default_jitter_eps() -> f64 {
    0.01
}
fn default_top_k() -> usize {
    1
}

/// Routing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    /// Scales the per-expert token budget: capacity =
    /// ceil(tokens/num_experts · capacity_factor).
    #[serde(default = "default_capacity_factor")]
    pub capacity_factor: f64,
    /// Weight of the load-balance auxiliary loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Multiplicative jitter half-width on the gate input, train-time only.
    #[serde(default = "default_jitter_eps")]
    pub jitter_eps: f64,
    /// Routing is switch-style: exactly one expert per token. The field
    /// exists so configs state this explicitly; values other than 1 are
    /// rejected.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl RouterConfig {
    pub fn new(num_experts: usize) -> Self {
        RouterConfig {
            num_experts,
            capacity_factor: default_capacity_factor(),
            alpha: default_alpha(),
            jitter_eps: default_jitter_eps(),
            top_k: default_top_k(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return Err(Error::Config(format!(
                "capacity_factor must be positive and finite, got {}",
                self.capacity_factor
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be a finite non-negative weight, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.jitter_eps) {
            return Err(Error::Config(format!(
                "jitter_eps must lie in [0, 1), got {}",
                self.jitter_eps
            )));
        }
        if self.top_k != 1 {
            return Err(Error::Config(
                "only top-1 (switch) routing is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Per-expert token budget for one batch:
/// `ceil(tokens/num_experts · capacity_factor)`, never below 1.
pub fn expert_capacity(tokens: usize, num_experts: usize, capacity_factor: f64) -> Result<usize> {
    if num_experts == 0 {
        return Err(Error::Parameter("expert_capacity with zero experts".into()));
    }
    if tokens == 0 {
        return Err(Error::Parameter("expert_capacity with zero tokens".into()));
    }
    if !(capacity_factor > 0.0 && capacity_factor.is_finite()) {
        return Err(Error::Parameter(format!(
            "capacity factor must be positive, got {capacity_factor}"
        )));
    }
    let cap = (tokens as f64 / num_experts as f64 * capacity_factor).ceil() as usize;
    Ok(cap.max(1))
}

/// Multiplies every element by an independent draw from
/// `uniform(1−eps, 1+eps)` during training; identity otherwise. Applied to
/// the router's input only — experts always see the clean activations.
pub fn apply_jitter(x: &Tensor, eps: f64, rng: &mut RngStream, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter(format!(
            "jitter eps must lie in [0, 1), got {eps}"
        )));
    }
    if !training || eps == 0.0 {
        return Ok(x.clone());
    }
    let noise: Vec<f64> = (0..x.numel())
        .map(|_| rng.range(1.0 - eps, 1.0 + eps))
        .collect();
    let noise = Tensor::from_vec(x.shape(), noise)?;
    x.mul(&noise)
}

/// Router probabilities: row-wise softmax of `x · gate_weights`,
/// `[T×d] · [d×N] -> [T×N]`.
pub fn gate(x: &Tensor, gate_weights: &Tensor) -> Result<Tensor> {
    ops::softmax(&ops::matmul(x, gate_weights)?, 1)
}

/// The outcome of routing one batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    /// Argmax expert per token, before capacity is enforced.
    pub preferred: Vec<usize>,
    /// Expert each token was actually sent to; `None` = dropped.
    pub assignment: Vec<Option<usize>>,
    /// Position within the expert's buffer; `None` = dropped.
    pub slot: Vec<Option<usize>>,
    /// Router probability of the preferred expert, per token.
    pub gate_value: Vec<f64>,
    /// Tokens-per-expert bound this plan was built under.
    pub capacity: usize,
}

impl DispatchPlan {
    pub fn tokens(&self) -> usize {
        self.assignment.len()
    }

    pub fn assigned_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    pub fn dropped_count(&self) -> usize {
        self.tokens() - self.assigned_count()
    }

    /// Token indices assigned to `expert`, in slot (= arrival) order.
    pub fn rows_for_expert(&self, expert: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Some(expert))
            .map(|(t, _)| t)
            .collect()
    }

    /// Post-capacity token count per expert.
    pub fn expert_counts(&self, num_experts: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_experts];
        for a in self.assignment.iter().flatten() {
            counts[*a] += 1;
        }
        counts
    }
}

/// Assigns every token to its argmax expert (ties break toward the lowest
/// index), filling expert buffers in batch arrival order. A token whose
/// expert is already full is dropped — it is not re-routed.
pub fn plan_dispatch(gate_probs: &Tensor, capacity: usize) -> Result<DispatchPlan> {
    if capacity == 0 {
        return Err(Error::Parameter("dispatch capacity must be at least 1".into()));
    }
    let (t_len, n) = match gate_probs.shape() {
        [t, n] if *n > 0 => (*t, *n),
        s => {
            return Err(Error::Dimension {
                op: "plan_dispatch",
                msg: format!("gate probabilities must be [T×N], got {s:?}"),
            })
        }
    };
    let probs = gate_probs.data();
    let mut plan = DispatchPlan {
        preferred: Vec::with_capacity(t_len),
        assignment: Vec::with_capacity(t_len),
        slot: Vec::with_capacity(t_len),
        gate_value: Vec::with_capacity(t_len),
        capacity,
    };
    let mut fill = vec![0usize; n];
    for t in 0..t_len {
        let row = &probs[t * n..(t + 1) * n];
        let e = argmax(row);
        plan.preferred.push(e);
        plan.gate_value.push(row[e]);
        if fill[e] < capacity {
            plan.assignment.push(Some(e));
            plan.slot.push(Some(fill[e]));
            fill[e] += 1;
        } else {
            plan.assignment.push(None);
            plan.slot.push(None);
        }
    }
    Ok(plan)
}

/// Load-balance statistics for one routed batch, taken over the full gate
/// matrix (before capacity drops anything).
#[derive(Debug, Clone)]
pub struct LoadStats {
    /// Fraction of tokens whose argmax is expert i. Hard counts — constant
    /// under differentiation.
    pub f: Vec<f64>,
    /// Mean router probability per expert; gradients flow through here.
    pub p: Tensor,
    /// Tokens in the batch.
    pub tokens: usize,
    /// Tokens dropped by capacity overflow.
    pub dropped: usize,
}

impl LoadStats {
    /// Shannon entropy of the dispatch fractions, in nats. Uniform routing
    /// over N experts gives ln N; total collapse gives 0.
    pub fn dispatch_entropy(&self) -> f64 {
        -self
            .f
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    }
}

/// The load-balance auxiliary loss `α · N · Σ_i f_i · P_i`.
///
/// Uniform routing (`f_i = P_i = 1/N`) gives exactly `α`; total collapse
/// onto one expert gives `α · N`.
pub fn aux_loss(stats: &LoadStats, alpha: f64) -> Result<Tensor> {
    let n = stats.f.len();
    if stats.p.shape() != [n] {
        return Err(Error::Dimension {
            op: "aux_loss",
            msg: format!(
                "f has {n} experts but P has shape {:?}",
                stats.p.shape()
            ),
        });
    }
    let f = Tensor::from_vec(&[n], stats.f.clone())?;
    Ok(ops::sum_all(&f.mul(&stats.p)?).scale(alpha * n as f64))
}

/// One expert: a two-layer feed-forward network
/// `linear(d→d_ff) → ReLU → dropout → linear(d_ff→d)`.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        FfnParams {
            w1: Tensor::init_uniform(&[d_model, d_ff], d_model, rng),
            b1: Tensor::init_uniform(&[d_ff], d_model, rng),
            w2: Tensor::init_uniform(&[d_ff, d_model], d_ff, rng),
            b2: Tensor::init_uniform(&[d_model], d_ff, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Applies one expert FFN to a batch of rows.
pub fn ffn_forward(
    x: &Tensor,
    params: &FfnParams,
    dropout_p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Tensor> {
    let h = ops::add_bias(&ops::matmul(x, &params.w1)?, &params.b1)?.relu();
    let h = ops::dropout(&h, dropout_p, rng, training)?;
    ops::add_bias(&ops::matmul(&h, &params.w2)?, &params.b2)
}

/// A complete mixture-of-experts layer: router weights plus N experts.
#[derive(Debug, Clone)]
pub struct MoeLayerParams {
    /// Router weight matrix `[d_model × num_experts]`.
    pub gate: Tensor,
    pub experts: Vec<FfnParams>,
    pub cfg: RouterConfig,
}

impl MoeLayerParams {
    pub fn init(d_model: usize, d_ff: usize, cfg: RouterConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let gate = Tensor::init_uniform(&[d_model, cfg.num_experts], d_model, rng);
        let experts = (0..cfg.num_experts)
            .map(|_| FfnParams::init(d_model, d_ff, rng))
            .collect();
        Ok(MoeLayerParams { gate, experts, cfg })
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.experts.len() != self.cfg.num_experts {
            return Err(Error::Parameter(format!(
                "router configured for {} experts but {} are present",
                self.cfg.num_experts,
                self.experts.len()
            )));
        }
        let d = match self.gate.shape() {
            [d, n] if *n == self.cfg.num_experts => *d,
            s => {
                return Err(Error::Parameter(format!(
                    "gate weights must be [d_model × num_experts], got {s:?}"
                )))
            }
        };
        for (i, e) in self.experts.iter().enumerate() {
            if e.d_model() != d || e.w2.shape() != [e.d_ff(), d] {
                return Err(Error::Parameter(format!(
                    "expert {i} does not map d_model {d} to itself: w1 {:?}, w2 {:?}",
                    e.w1.shape(),
                    e.w2.shape()
                )));
            }
        }
        Ok(())
    }

    /// Total parameter count, router gate included.
    pub fn param_count(&self) -> usize {
        self.gate.numel() + self.experts.iter().map(FfnParams::param_count).sum::<usize>()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gate"), self.gate.clone()));
        for (i, e) in self.experts.iter().enumerate() {
            e.collect(&format!("{prefix}.expert{i}"), out);
        }
    }
}

/// Routes a batch of tokens through the mixture.
///
/// Returns the layer output (zero rows for dropped tokens — the caller's
/// residual connection carries them through), the load statistics for the
/// auxiliary loss, and the dispatch plan for inspection.
pub fn moe_forward(
    x: &Tensor,
    params: &MoeLayerParams,
    dropout_p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Tensor, LoadStats, DispatchPlan)> {
    params.validate()?;
    let (t_len, _d) = match x.shape() {
        [t, d] => (*t, *d),
        s => {
            return Err(Error::Dimension {
                op: "moe_forward",
                msg: format!("expected [T×d_model] tokens, got {s:?}"),
            })
        }
    };
    let n = params.cfg.num_experts;

    // The router sees a jittered copy of the input; the experts see x.
    let gate_in = apply_jitter(x, params.cfg.jitter_eps, rng, training)?;
    let probs = gate(&gate_in, &params.gate)?;
    let capacity = expert_capacity(t_len, n, params.cfg.capacity_factor)?;
    let plan = plan_dispatch(&probs, capacity)?;

    let mut f = vec![0.0; n];
    for &e in &plan.preferred {
        f[e] += 1.0;
    }
    for v in f.iter_mut() {
        *v /= t_len as f64;
    }

    // Run each expert on its tokens, scale by the (tracked) gate
    // probability of the chosen expert, and scatter back into place.
    let mut routed_rows: Vec<usize> = Vec::new();
    let mut routed_outputs: Vec<Tensor> = Vec::new();
    for (e, expert) in params.experts.iter().enumerate() {
        let rows = plan.rows_for_expert(e);
        if rows.is_empty() {
            continue;
        }
        let xe = ops::select_rows(x, &rows)?;
        let he = ffn_forward(&xe, expert, dropout_p, rng, training)?;
        let flat: Vec<usize> = rows.iter().map(|&t| t * n + e).collect();
        let gates = ops::gather(&probs, &flat)?;
        routed_outputs.push(ops::scale_rows(&he, &gates)?);
        routed_rows.extend(rows);
    }
    let y = if routed_rows.is_empty() {
        Tensor::zeros(x.shape())
    } else {
        ops::scatter_rows(&ops::concat_rows(&routed_outputs)?, &routed_rows, t_len)?
    };

    let stats = LoadStats {
        f,
        p: ops::mean_axis0(&probs)?,
        tokens: t_len,
        dropped: plan.dropped_count(),
    };
    Ok((y, stats, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::{mac_count, reset_mac_count};
    use proptest::prelude::*;

    fn eval_rng() -> RngStream {
        RngStream::new(0, 0)
    }

    #[test]
    fn capacity_matches_frozen_examples() {
        assert_eq!(expert_capacity(64, 8, 1.5).unwrap(), 12);
        assert_eq!(expert_capacity(4, 4, 1.0).unwrap(), 1);
        assert_eq!(expert_capacity(10, 4, 1.5).unwrap(), 4);
        // Tiny batches still get one slot per expert.
        assert_eq!(expert_capacity(1, 64, 0.5).unwrap(), 1);
        assert!(expert_capacity(10, 0, 1.5).is_err());
    }

    #[test]
    fn jitter_is_identity_when_disabled() {
        let x = Tensor::param_from_vec(&[2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let mut rng = eval_rng();
        // Evaluation mode: identity regardless of eps.
        let y = apply_jitter(&x, 0.5, &mut rng, false).unwrap();
        assert_eq!(y.id(), x.id());
        // eps = 0: identity even in training.
        let y = apply_jitter(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y.id(), x.id());
    }

    #[test]
    fn jitter_stays_within_multiplicative_bounds() {
        let x = Tensor::param_from_vec(&[10, 10], (0..100).map(|i| i as f64 - 50.0).collect())
            .unwrap();
        let mut rng = RngStream::new(3, 1);
        let y = apply_jitter(&x, 0.01, &mut rng, true).unwrap();
        for (&xi, &yi) in x.data().iter().zip(y.data().iter()) {
            let lo = (xi * 0.99).min(xi * 1.01);
            let hi = (xi * 0.99).max(xi * 1.01);
            assert!(yi >= lo && yi <= hi, "{yi} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn gate_is_uniform_under_zero_weights() {
        let x = Tensor::param_from_vec(&[3, 5], (0..15).map(|v| v as f64 * 0.3).collect()).unwrap();
        let w = Tensor::zeros(&[5, 4]);
        let p = gate(&x, &w).unwrap();
        assert_eq!(p.to_vec(), vec![0.25; 12]);
    }

    #[test]
    fn gate_matches_independent_softmax_evaluation() {
        // Logits [10, 0, 0, 0]: the winning probability is 1/(1 + 3e^{-10}).
        let x = Tensor::from_vec(&[1, 1], vec![10.0]).unwrap();
        let w = Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = gate(&x, &w).unwrap().to_vec();
        let expect0 = 1.0 / (1.0 + 3.0 * (-10.0f64).exp());
        assert!((p[0] - expect0).abs() < 1e-12, "{} vs {expect0}", p[0]);
        let expect_rest = (-10.0f64).exp() / (1.0 + 3.0 * (-10.0f64).exp());
        for &v in &p[1..] {
            assert!((v - expect_rest).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let mut rng = RngStream::new(11, 2);
        let x = Tensor::init_uniform(&[17, 6], 1, &mut rng);
        let w = Tensor::init_uniform(&[6, 5], 6, &mut rng);
        let p = gate(&x, &w).unwrap();
        for row in p.to_vec().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dispatch_drops_overflow_in_arrival_order() {
        // Five tokens all prefer expert 0; capacity 3.
        let probs = Tensor::from_vec(&[5, 2], vec![0.9, 0.1].repeat(5)).unwrap();
        let plan = plan_dispatch(&probs, 3).unwrap();
        assert_eq!(plan.assignment[..3], [Some(0), Some(0), Some(0)]);
        assert_eq!(plan.assignment[3..], [None, None]);
        assert_eq!(plan.slot[..3], [Some(0), Some(1), Some(2)]);
        assert_eq!(plan.dropped_count(), 2);
        assert_eq!(plan.gate_value, vec![0.9; 5]);
    }

    #[test]
    fn dispatch_is_drop_free_when_balanced() {
        let mut data = Vec::new();
        for t in 0..12 {
            let mut row = vec![0.1; 4];
            row[t % 4] = 0.7;
            data.extend(row);
        }
        let probs = Tensor::from_vec(&[12, 4], data).unwrap();
        let plan = plan_dispatch(&probs, 3).unwrap();
        assert_eq!(plan.dropped_count(), 0);
        assert_eq!(plan.expert_counts(4), vec![3, 3, 3, 3]);
    }

    #[test]
    fn dispatch_single_expert_has_unit_gate() {
        let probs = Tensor::from_vec(&[4, 1], vec![1.0; 4]).unwrap();
        let plan = plan_dispatch(&probs, 4).unwrap();
        assert!(plan.assignment.iter().all(|a| *a == Some(0)));
        assert_eq!(plan.gate_value, vec![1.0; 4]);
    }

    #[test]
    fn dispatch_breaks_ties_toward_lowest_index() {
        let probs = Tensor::from_vec(&[1, 4], vec![0.25; 4]).unwrap();
        let plan = plan_dispatch(&probs, 1).unwrap();
        assert_eq!(plan.assignment, vec![Some(0)]);
    }

    #[test]
    fn single_expert_mixture_equals_its_ffn_exactly() {
        let d = 6;
        let dff = 11;
        let mut rng = RngStream::new(42, 0);
        let layer = MoeLayerParams::init(d, dff, RouterConfig::new(1), &mut rng).unwrap();
        for trial in 0..20 {
            let x = Tensor::init_uniform(&[7, d], 1, &mut RngStream::new(100 + trial, 1));
            let mut r1 = eval_rng();
            let (y, stats, plan) = moe_forward(&x, &layer, 0.0, &mut r1, false).unwrap();
            let mut r2 = eval_rng();
            let dense = ffn_forward(&x, &layer.experts[0], 0.0, &mut r2, false).unwrap();
            // Single-expert softmax is exactly 1, so the outputs are
            // bitwise identical.
            assert_eq!(y.to_vec(), dense.to_vec());
            assert_eq!(stats.f, vec![1.0]);
            assert_eq!(plan.dropped_count(), 0);
        }
    }

    #[test]
    fn overflowed_tokens_produce_zero_rows() {
        let d = 4;
        let mut rng = RngStream::new(7, 0);
        let mut cfg = RouterConfig::new(4);
        // 10 tokens, 4 experts, factor 0.4 → capacity ceil(10/4·0.4) = 1.
        cfg.capacity_factor = 0.4;
        let layer = MoeLayerParams::init(d, 8, cfg, &mut rng).unwrap();
        // Ten identical tokens: all share one argmax expert.
        let x = Tensor::from_vec(&[10, d], [0.3, -0.2, 0.9, 0.4].repeat(10)).unwrap();
        let (y, stats, plan) = moe_forward(&x, &layer, 0.0, &mut eval_rng(), false).unwrap();
        assert_eq!(plan.capacity, 1);
        assert_eq!(plan.assigned_count(), 1);
        assert_eq!(stats.dropped, 9);
        let yd = y.to_vec();
        assert!(yd[..d].iter().any(|&v| v != 0.0), "first token is routed");
        assert!(yd[d..].iter().all(|&v| v == 0.0), "dropped rows are zero");
    }

    #[test]
    fn per_token_expert_work_does_not_depend_on_expert_count() {
        let d = 8;
        let dff = 16;
        let t = 32;
        let x = Tensor::init_uniform(&[t, d], 1, &mut RngStream::new(5, 5));
        let mut per_token = Vec::new();
        for n in [4usize, 8, 32] {
            let mut cfg = RouterConfig::new(n);
            // Capacity factor = N makes capacity = T: nothing can drop.
            cfg.capacity_factor = n as f64;
            let layer =
                MoeLayerParams::init(d, dff, cfg, &mut RngStream::new(9, n as u64)).unwrap();
            reset_mac_count();
            let (_, stats, _) = moe_forward(&x, &layer, 0.0, &mut eval_rng(), false).unwrap();
            assert_eq!(stats.dropped, 0);
            let gate_macs = (t * d * n) as u64;
            let expert_macs = mac_count() - gate_macs;
            per_token.push(expert_macs / t as u64);
        }
        assert_eq!(per_token[0], per_token[1]);
        assert_eq!(per_token[1], per_token[2]);
        assert_eq!(per_token[0], (2 * d * dff) as u64);
    }

    #[test]
    fn aux_loss_anchors() {
        for n in [2usize, 4, 7] {
            let stats = LoadStats {
                f: vec![1.0 / n as f64; n],
                p: Tensor::from_vec(&[n], vec![1.0 / n as f64; n]).unwrap(),
                tokens: n,
                dropped: 0,
            };
            let loss = aux_loss(&stats, 0.01).unwrap().item();
            assert!((loss - 0.01).abs() < 1e-12, "uniform N={n}: {loss}");
        }
        let mut f = vec![0.0; 4];
        f[0] = 1.0;
        let mut p = vec![0.0; 4];
        p[0] = 1.0;
        let collapsed = LoadStats {
            f,
            p: Tensor::from_vec(&[4], p).unwrap(),
            tokens: 4,
            dropped: 0,
        };
        let loss = aux_loss(&collapsed, 0.01).unwrap().item();
        assert!((loss - 0.04).abs() < 1e-15, "collapse: {loss}");
    }

    #[test]
    fn aux_loss_gradient_matches_finite_differences_with_f_fixed() {
        // Margins are wide enough that the 1e-5 perturbation never flips an
        // argmax, so f is constant across the finite-difference probes.
        let x = Tensor::from_vec(
            &[6, 3],
            vec![
                2.0, 0.1, -0.4, //
                -1.5, 1.8, 0.2, //
                0.3, -0.9, 2.2, //
                1.7, 0.4, -1.0, //
                -0.6, 2.5, 0.8, //
                0.9, -1.2, 1.6,
            ],
        )
        .unwrap();
        let w = Tensor::init_uniform(&[3, 3], 3, &mut RngStream::new(21, 4));
        let report = gradcheck::check(
            || {
                let probs = gate(&x, &w).unwrap();
                let plan = plan_dispatch(&probs, 6).unwrap();
                let mut f = vec![0.0; 3];
                for &e in &plan.preferred {
                    f[e] += 1.0 / 6.0;
                }
                let stats = LoadStats {
                    f,
                    p: ops::mean_axis0(&probs).unwrap(),
                    tokens: 6,
                    dropped: 0,
                };
                aux_loss(&stats, 0.01).unwrap()
            },
            &[&w],
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn moe_forward_gradients_match_finite_differences() {
        let d = 4;
        let mut rng = RngStream::new(33, 0);
        let mut cfg = RouterConfig::new(3);
        cfg.capacity_factor = 3.0; // capacity = T: piecewise region is stable
        let layer = MoeLayerParams::init(d, 6, cfg, &mut rng).unwrap();
        let x = Tensor::init_uniform(&[5, d], 1, &mut rng);
        let report = gradcheck::check(
            || {
                let (y, stats, _) =
                    moe_forward(&x, &layer, 0.0, &mut eval_rng(), false).unwrap();
                let task = ops::mean_all(&y.mul(&y).unwrap());
                task.add(&aux_loss(&stats, 0.01).unwrap()).unwrap()
            },
            &[&x, &layer.gate, &layer.experts[0].w1, &layer.experts[1].w2, &layer.experts[2].b1],
            1e-5,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn dispatch_entropy_reads_balance() {
        let uniform = LoadStats {
            f: vec![0.25; 4],
            p: Tensor::from_vec(&[4], vec![0.25; 4]).unwrap(),
            tokens: 4,
            dropped: 0,
        };
        assert!((uniform.dispatch_entropy() - 4.0f64.ln()).abs() < 1e-12);
        let collapsed = LoadStats {
            f: vec![1.0, 0.0, 0.0, 0.0],
            p: Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            tokens: 4,
            dropped: 0,
        };
        assert_eq!(collapsed.dispatch_entropy(), 0.0);
    }

    #[test]
    fn router_config_validation() {
        assert!(RouterConfig::new(4).validate().is_ok());
        assert!(RouterConfig::new(0).validate().is_err());
        let mut c = RouterConfig::new(2);
        c.top_k = 2;
        assert!(c.validate().is_err());
        let mut c = RouterConfig::new(2);
        c.capacity_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = RouterConfig::new(2);
        c.jitter_eps = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn router_config_deserializes_with_defaults() {
        let c: RouterConfig = serde_json::from_str(r#"{"num_experts": 8}"#).unwrap();
        assert_eq!(c.num_experts, 8);
        assert_eq!(c.capacity_factor, 1.5);
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.jitter_eps, 0.01);
        assert_eq!(c.top_k, 1);
    }

    proptest! {
        #[test]
        fn dispatch_conserves_tokens_and_respects_capacity(
            t in 1usize..64,
            n in 1usize..9,
            cf_idx in 0usize..3,
            seed in 0u64..1000,
        ) {
            let cf = [0.5, 1.0, 1.5][cf_idx];
            let mut rng = RngStream::new(seed, 77);
            let logits = Tensor::init_uniform(&[t, n], 1, &mut rng).scale(10.0);
            let probs = ops::softmax(&logits, 1).unwrap();
            let capacity = expert_capacity(t, n, cf).unwrap();
            let plan = plan_dispatch(&probs, capacity).unwrap();

            prop_assert_eq!(plan.assigned_count() + plan.dropped_count(), t);
            let counts = plan.expert_counts(n);
            for &c in &counts {
                prop_assert!(c <= capacity);
            }
            // Slots within one expert are distinct and contiguous from 0.
            for e in 0..n {
                let mut slots: Vec<usize> = plan
                    .slot
                    .iter()
                    .zip(&plan.assignment)
                    .filter(|(_, a)| **a == Some(e))
                    .map(|(s, _)| s.unwrap())
                    .collect();
                slots.sort_unstable();
                prop_assert_eq!(slots, (0..counts[e]).collect::<Vec<_>>());
            }
            // Drop-free guarantee: if every expert's argmax load fits, no drops.
            let mut pref_counts = vec![0usize; n];
            for &e in &plan.preferred {
                pref_counts[e] += 1;
            }
            if pref_counts.iter().all(|&c| c <= capacity) {
                prop_assert_eq!(plan.dropped_count(), 0);
            }
        }

        #[test]
        fn dispatch_is_deterministic_and_scale_invariant(
            t in 1usize..32,
            n in 2usize..8,
            seed in 0u64..1000,
            scaled_token in 0usize..32,
            scale in 1u32..50,
        ) {
            let mut rng = RngStream::new(seed, 78);
            let logits = Tensor::init_uniform(&[t, n], 1, &mut rng).scale(8.0);
            let probs = ops::softmax(&logits, 1).unwrap();
            let cap = expert_capacity(t, n, 1.5).unwrap();
            let a = plan_dispatch(&probs, cap).unwrap();
            let b = plan_dispatch(&probs, cap).unwrap();
            prop_assert_eq!(&a, &b);

            // Scaling one token's logits by a positive constant leaves every
            // assignment unchanged (softmax is order-preserving).
            let tok = scaled_token % t;
            let mut scaled = logits.to_vec();
            for j in 0..n {
                scaled[tok * n + j] *= scale as f64 / 10.0;
            }
            let probs2 = ops::softmax(&Tensor::from_vec(&[t, n], scaled).unwrap(), 1).unwrap();
            let c = plan_dispatch(&probs2, cap).unwrap();
            prop_assert_eq!(&a.assignment, &c.assignment);
        }

        #[test]
        fn load_stats_fractions_are_distributions(
            t in 1usize..40,
            n in 1usize..7,
            seed in 0u64..500,
        ) {
            let mut rng = RngStream::new(seed, 79);
            let x = Tensor::init_uniform(&[t, 4], 1, &mut rng);
            let layer = MoeLayerParams::init(4, 6, RouterConfig::new(n), &mut rng).unwrap();
            let (_, stats, _) =
                moe_forward(&x, &layer, 0.0, &mut RngStream::new(0, 0), false).unwrap();
            prop_assert!((stats.f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((stats.p.to_vec().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
