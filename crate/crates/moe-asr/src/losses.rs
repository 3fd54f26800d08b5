//! Training objectives.
//!
//! Label-smoothed cross-entropy for the attention-based model, the
//! transducer loss computed with the forward algorithm in log space, an
//! exhaustive path-enumeration oracle for small transducer instances, and
//! [`combine`], which folds per-layer load-balance penalties into the total
//! objective.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

/// Mean over rows of `−Σ_k q(k)·log softmax(logits)_k`, where `q` mixes the
/// one-hot target with the uniform distribution:
/// `q = (1−s)·onehot + s/V`.
///
/// Rows are positions; callers concatenate utterances, so every row is a
/// real (non-padded) position.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], label_smoothing: f64) -> Result<Tensor> {
    let (rows, classes) = match logits.shape() {
        [r, v] if *v > 0 => (*r, *v),
        s => {
            return Err(Error::Dimension {
                op: "cross_entropy",
                msg: format!("logits must be [positions × classes], got {s:?}"),
            })
        }
    };
    if targets.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy",
            msg: format!("{rows} logit rows but {} targets", targets.len()),
        });
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::Parameter(format!(
            "label smoothing must be in [0, 1), got {label_smoothing}"
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Parameter(format!(
            "target id {bad} out of range for {classes} classes"
        )));
    }
    let mut q = vec![label_smoothing / classes as f64; rows * classes];
    for (r, &t) in targets.iter().enumerate() {
        q[r * classes + t] += 1.0 - label_smoothing;
    }
    let q = Tensor::from_vec(&[rows, classes], q)?;
    let logp = ops::log_softmax(logits, 1)?;
    Ok(ops::sum_all(&q.mul(&logp)?).scale(-1.0 / rows as f64))
}

fn check_rnnt_inputs(
    joint_log_probs: &Tensor,
    target: &[usize],
    blank_id: usize,
) -> Result<(usize, usize, usize)> {
    let (t_len, u1, classes) = match joint_log_probs.shape() {
        [t, u1, c] => (*t, *u1, *c),
        s => {
            return Err(Error::Dimension {
                op: "rnnt_loss",
                msg: format!("joint log-probs must be [T × U+1 × V+1], got {s:?}"),
            })
        }
    };
    if t_len == 0 {
        return Err(Error::Dimension {
            op: "rnnt_loss",
            msg: "transducer loss needs at least one frame".into(),
        });
    }
    if u1 != target.len() + 1 {
        return Err(Error::Dimension {
            op: "rnnt_loss",
            msg: format!(
                "label axis is {u1} but target has {} ids (need U+1)",
                target.len()
            ),
        });
    }
    if blank_id >= classes {
        return Err(Error::Parameter(format!(
            "blank id {blank_id} out of range for {classes} classes"
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= classes) {
        return Err(Error::Parameter(format!(
            "target id {bad} out of range for {classes} classes"
        )));
    }
    if target.iter().any(|&t| t == blank_id) {
        return Err(Error::Parameter(
            "target contains the blank id; labels must be real tokens".into(),
        ));
    }
    Ok((t_len, target.len(), classes))
}

/// Transducer loss via the forward algorithm, differentiable through the
/// joint log-probabilities.
///
/// `joint_log_probs` is `[T × (U+1) × (V+1)]`, log-softmax-normalized over
/// the last axis. Every alignment consumes the U labels in order, emits one
/// blank per frame to advance time, and ends with the mandatory blank from
/// the last frame:
///
/// `α(t,u) = logaddexp(α(t−1,u) + blank(t−1,u), α(t,u−1) + label(t,u−1))`,
/// `loss = −(α(T−1,U) + blank(T−1,U))`.
pub fn rnnt_loss_forward(
    joint_log_probs: &Tensor,
    target: &[usize],
    blank_id: usize,
) -> Result<Tensor> {
    let (t_len, u_len, classes) = check_rnnt_inputs(joint_log_probs, target, blank_id)?;
    let flat = |t: usize, u: usize, k: usize| (t * (u_len + 1) + u) * classes + k;
    let blank = |t: usize, u: usize| -> Result<Tensor> {
        ops::gather(joint_log_probs, &[flat(t, u, blank_id)])
    };
    let label = |t: usize, u: usize| -> Result<Tensor> {
        ops::gather(joint_log_probs, &[flat(t, u, target[u])])
    };

    // α over the (t, u) lattice, as scalar tensors so gradients flow.
    let mut alpha: Vec<Vec<Tensor>> = vec![Vec::with_capacity(u_len + 1); t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            let cell = match (t, u) {
                (0, 0) => Tensor::scalar(0.0),
                (0, _) => alpha[0][u - 1].add(&label(0, u - 1)?)?,
                (_, 0) => alpha[t - 1][0].add(&blank(t - 1, 0)?)?,
                _ => {
                    let from_below = alpha[t - 1][u].add(&blank(t - 1, u)?)?;
                    let from_left = alpha[t][u - 1].add(&label(t, u - 1)?)?;
                    ops::logaddexp(&from_below, &from_left)?
                }
            };
            alpha[t].push(cell);
        }
    }
    Ok(alpha[t_len - 1][u_len]
        .add(&blank(t_len - 1, u_len)?)?
        .neg())
}

/// Number of distinct alignments for a `(T, U)` transducer instance:
/// interleavings of T−1 free blanks with U labels, times the mandatory
/// final blank — `C(T−1+U, U)`.
pub fn alignment_count(t_len: usize, u_len: usize) -> u64 {
    let (t_len, u_len) = (t_len as u64, u_len as u64);
    let mut c: u64 = 1;
    for i in 0..u_len {
        c = c * (t_len - 1 + u_len - i) / (i + 1);
    }
    c
}

/// Exhaustive-path oracle for [`rnnt_loss_forward`]: enumerates every
/// alignment, sums their probabilities in linear space, and returns the
/// negative log. Only valid for small instances (`T + U ≤ 12`).
pub fn rnnt_loss_bruteforce(
    joint_log_probs: &Tensor,
    target: &[usize],
    blank_id: usize,
) -> Result<f64> {
    let (t_len, u_len, classes) = check_rnnt_inputs(joint_log_probs, target, blank_id)?;
    if t_len + u_len > 12 {
        return Err(Error::Parameter(format!(
            "brute-force enumeration bounded at T+U ≤ 12, got {}",
            t_len + u_len
        )));
    }
    let lp = joint_log_probs.data();
    let flat = |t: usize, u: usize, k: usize| (t * (u_len + 1) + u) * classes + k;

    // Depth-first walk of the lattice: blank advances t, label advances u;
    // a path is complete when the final blank moves t past the last frame
    // with every label consumed.
    fn walk(
        t: usize,
        u: usize,
        p: f64,
        t_len: usize,
        u_len: usize,
        lp: &[f64],
        target: &[usize],
        blank_id: usize,
        flat: &dyn Fn(usize, usize, usize) -> usize,
        total: &mut f64,
        paths: &mut u64,
    ) {
        if t == t_len {
            if u == u_len {
                *total += p;
                *paths += 1;
            }
            return;
        }
        walk(
            t + 1,
            u,
            p * lp[flat(t, u, blank_id)].exp(),
            t_len,
            u_len,
            lp,
            target,
            blank_id,
            flat,
            total,
            paths,
        );
        if u < u_len {
            walk(
                t,
                u + 1,
                p * lp[flat(t, u, target[u])].exp(),
                t_len,
                u_len,
                lp,
                target,
                blank_id,
                flat,
                total,
                paths,
            );
        }
    }

    let mut total = 0.0;
    let mut paths = 0;
    walk(
        0, 0, 1.0, t_len, u_len, &lp, target, blank_id, &flat, &mut total, &mut paths,
    );
    debug_assert_eq!(paths, alignment_count(t_len, u_len));
    Ok(-total.ln())
}

/// One training step's losses, with the total already assembled.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub task: Tensor,
    pub aux: Vec<Tensor>,
    pub total: Tensor,
    pub dropped_tokens: usize,
    pub tokens: usize,
}

/// Folds per-layer auxiliary losses into the objective:
/// `total = task + Σ aux` (auxiliary losses are summed across layers, not
/// averaged).
pub fn combine(
    task: Tensor,
    aux: Vec<Tensor>,
    dropped_tokens: usize,
    tokens: usize,
) -> Result<LossBreakdown> {
    let mut total = task.clone();
    for a in &aux {
        total = total.add(a)?;
    }
    Ok(LossBreakdown {
        task,
        aux,
        total,
        dropped_tokens,
        tokens,
    })
}
