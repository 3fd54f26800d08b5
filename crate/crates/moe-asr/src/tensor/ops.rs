//! Differentiable operations.
//!
//! Conventions shared by every op:
//!
//! * Inputs are borrowed; results are fresh tensors (no in-place aliasing).
//! * Shape errors are reported before any compute happens.
//! * Backward closures first materialize each contribution into a local
//!   buffer and only then call `accumulate_grad`, so `RefCell` borrows of
//!   data and grad never overlap.
//! * Gradients flow only into inputs with `requires_grad`; constants are
//!   skipped entirely.

use std::rc::Rc;

use super::rng::RngStream;
use super::{record_macs, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// small shape helpers

fn as_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            msg: format!("expected a 2-D tensor, got shape {s:?}"),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Decomposes `shape` around `axis` into (outer, len, inner): the tensor is
/// `outer` blocks of `len` strided lanes of length `inner` each. Iterating
/// `(o, i)` and stepping by `inner` walks one lane along `axis`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Index of the first maximum (ties break toward the lowest index — the
/// crate-wide argmax convention, relied on by routing and decoding).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// elementwise

fn unary_op(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("unary backward without grad");
            let contrib: Vec<f64> = {
                let xd = xc.data();
                let yd = o.data();
                g.iter()
                    .zip(xd.iter())
                    .zip(yd.iter())
                    .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                    .collect()
            };
            xc.accumulate_grad(&contrib);
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |o| {
                let g = o.grad().expect("add backward without grad");
                if ac.requires_grad() {
                    ac.accumulate_grad(&g);
                }
                if bc.requires_grad() {
                    bc.accumulate_grad(&g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |o| {
                let g = o.grad().expect("sub backward without grad");
                if ac.requires_grad() {
                    ac.accumulate_grad(&g);
                }
                if bc.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    bc.accumulate_grad(&neg);
                }
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |o| {
                let g = o.grad().expect("mul backward without grad");
                if ac.requires_grad() {
                    let contrib: Vec<f64> = {
                        let bd = bc.data();
                        g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect()
                    };
                    ac.accumulate_grad(&contrib);
                }
                if bc.requires_grad() {
                    let contrib: Vec<f64> = {
                        let ad = ac.data();
                        g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect()
                    };
                    bc.accumulate_grad(&contrib);
                }
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary_op(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_op(self, move |v| v + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary_op(
            self,
            |v| if v > 0.0 { v } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary_op(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_op(
            self,
            |v| {
                // Branch on sign for stability at large |v|.
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary_op(self, f64::exp, |_, y| y)
    }
}

/// Elementwise `ln(exp(a) + exp(b))`, computed stably. The workhorse of the
/// transducer forward algorithm.
pub fn logaddexp(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("logaddexp", a, b)?;
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let m = x.max(y);
            if m == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                m + ((x - m).exp() + (y - m).exp()).ln()
            }
        })
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("logaddexp backward without grad");
            // d/da = exp(a - out), d/db = exp(b - out): the softmax weights.
            if ac.requires_grad() {
                let contrib: Vec<f64> = {
                    let ad = ac.data();
                    let yd = o.data();
                    g.iter()
                        .zip(ad.iter())
                        .zip(yd.iter())
                        .map(|((&gi, &ai), &yi)| gi * (ai - yi).exp())
                        .collect()
                };
                ac.accumulate_grad(&contrib);
            }
            if bc.requires_grad() {
                let contrib: Vec<f64> = {
                    let bd = bc.data();
                    let yd = o.data();
                    g.iter()
                        .zip(bd.iter())
                        .zip(yd.iter())
                        .map(|((&gi, &bi), &yi)| gi * (bi - yi).exp())
                        .collect()
                };
                bc.accumulate_grad(&contrib);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_all(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let xc = x.clone();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("sum_all backward without grad")[0];
            let contrib = vec![g; xc.numel()];
            xc.accumulate_grad(&contrib);
        }),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel().max(1) as f64;
    sum_all(x).scale(1.0 / n)
}

/// Column means of a 2-D tensor: `[r×c] -> [c]`.
pub fn mean_axis0(x: &Tensor) -> Result<Tensor> {
    let (r, c) = as_2d(x, "mean_axis0")?;
    if r == 0 {
        return Err(Error::Dimension {
            op: "mean_axis0",
            msg: "cannot average zero rows".into(),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            out[j] += xd[i * c + j];
        }
    }
    for v in out.iter_mut() {
        *v /= r as f64;
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![c],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("mean_axis0 backward without grad");
            let inv = 1.0 / r as f64;
            let mut contrib = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    contrib[i * c + j] = g[j] * inv;
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

// ---------------------------------------------------------------------------
// linear algebra

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    record_macs((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// `g · Bᵀ` where g is m×n and B is k×n; yields m×k.
fn mm_g_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    record_macs((m * k * n) as u64);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, slot) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += g_row[j] * b_row[j];
            }
            *slot = acc;
        }
    }
    out
}

/// `Aᵀ · g` where A is m×k and g is m×n; yields k×n.
fn mm_at_g(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    record_macs((m * k * n) as u64);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += av * g_row[j];
            }
        }
    }
    out
}

/// Matrix product of two 2-D tensors: `[m×k] · [k×n] -> [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_2d(a, "matmul")?;
    let (k2, n) = as_2d(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = mm(&a.data(), &b.data(), m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("matmul backward without grad");
            if ac.requires_grad() {
                let contrib = {
                    let bd = bc.data();
                    mm_g_bt(&g, &bd, m, n, k)
                };
                ac.accumulate_grad(&contrib);
            }
            if bc.requires_grad() {
                let contrib = {
                    let ad = ac.data();
                    mm_at_g(&ad, &g, m, k, n)
                };
                bc.accumulate_grad(&contrib);
            }
        }),
    ))
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    let (r, c) = as_2d(x, "transpose2d")?;
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![c, r],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("transpose2d backward without grad");
            let mut contrib = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    contrib[i * c + j] = g[j * r + i];
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Broadcast-adds a vector over the last axis: `[.., c] + [c]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = match x.shape().last() {
        Some(&c) if c > 0 => c,
        _ => {
            return Err(Error::Dimension {
                op: "add_bias",
                msg: format!("input shape {:?} has no last axis", x.shape()),
            })
        }
    };
    if b.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let bd = b.to_vec();
    let out: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % c])
        .collect();
    let (xc, bc) = (x.clone(), b.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("add_bias backward without grad");
            if xc.requires_grad() {
                xc.accumulate_grad(&g);
            }
            if bc.requires_grad() {
                let mut contrib = vec![0.0; c];
                for (i, &gi) in g.iter().enumerate() {
                    contrib[i % c] += gi;
                }
                bc.accumulate_grad(&contrib);
            }
        }),
    ))
}

/// Scales row i of a 2-D tensor by `s[i]`.
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (r, c) = as_2d(x, "scale_rows")?;
    if s.shape() != [r] {
        return Err(Error::ShapeMismatch {
            op: "scale_rows",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let out: Vec<f64> = {
        let xd = x.data();
        let sd = s.data();
        (0..r * c).map(|i| xd[i] * sd[i / c]).collect()
    };
    let (xc, sc) = (x.clone(), s.clone());
    Ok(Tensor::from_op(
        vec![r, c],
        out,
        vec![x.clone(), s.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("scale_rows backward without grad");
            if xc.requires_grad() {
                let contrib: Vec<f64> = {
                    let sd = sc.data();
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * sd[i / c])
                        .collect()
                };
                xc.accumulate_grad(&contrib);
            }
            if sc.requires_grad() {
                let contrib: Vec<f64> = {
                    let xd = xc.data();
                    let mut acc = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            acc[i] += g[i * c + j] * xd[i * c + j];
                        }
                    }
                    acc
                };
                sc.accumulate_grad(&contrib);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// shape surgery

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::Dimension {
            op: "reshape",
            msg: format!("cannot view {:?} as {shape:?}", x.shape()),
        });
    }
    let xc = x.clone();
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("reshape backward without grad");
            xc.accumulate_grad(&g);
        }),
    ))
}

/// Slices `len` entries starting at `start` along the last axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    if len == 0 || start + len > c {
        return Err(Error::Dimension {
            op: "slice_last",
            msg: format!(
                "range {start}..{} out of bounds for last axis {c}",
                start + len
            ),
        });
    }
    let lanes = x.numel() / c;
    let xd = x.data();
    let mut out = Vec::with_capacity(lanes * len);
    for l in 0..lanes {
        out.extend_from_slice(&xd[l * c + start..l * c + start + len]);
    }
    drop(xd);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let xc = x.clone();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("slice_last backward without grad");
            let mut contrib = vec![0.0; xc.numel()];
            for l in 0..lanes {
                contrib[l * c + start..l * c + start + len]
                    .copy_from_slice(&g[l * len..(l + 1) * len]);
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Concatenates along the last axis; all parts must agree on leading dims.
pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Parameter("concat_last of zero tensors".into()));
    }
    let lead = &parts[0].shape()[..parts[0].ndim() - 1];
    for p in parts {
        if p.ndim() != lead.len() + 1 || &p.shape()[..lead.len()] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let lanes: usize = lead.iter().product();
    let mut out = Vec::with_capacity(lanes * total);
    for l in 0..lanes {
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            out.extend_from_slice(&pd[l * w..(l + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let clones: Vec<Tensor> = parts.to_vec();
    Ok(Tensor::from_op(
        shape,
        out,
        parts.to_vec(),
        Box::new(move |o| {
            let g = o.grad().expect("concat_last backward without grad");
            let mut offset = 0;
            for (p, &w) in clones.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut contrib = vec![0.0; lanes * w];
                    for l in 0..lanes {
                        contrib[l * w..(l + 1) * w]
                            .copy_from_slice(&g[l * total + offset..l * total + offset + w]);
                    }
                    p.accumulate_grad(&contrib);
                }
                offset += w;
            }
        }),
    ))
}

/// Stacks 2-D tensors vertically; all parts must share the column count.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Parameter("concat_rows of zero tensors".into()));
    }
    let (_, c) = as_2d(&parts[0], "concat_rows")?;
    let mut rows = 0;
    for p in parts {
        let (r, pc) = as_2d(p, "concat_rows")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let clones: Vec<Tensor> = parts.to_vec();
    Ok(Tensor::from_op(
        vec![rows, c],
        out,
        parts.to_vec(),
        Box::new(move |o| {
            let g = o.grad().expect("concat_rows backward without grad");
            let mut offset = 0;
            for p in &clones {
                let n = p.numel();
                if p.requires_grad() {
                    p.accumulate_grad(&g[offset..offset + n]);
                }
                offset += n;
            }
        }),
    ))
}

/// Repeats each row k times consecutively: `[r×c] -> [r·k × c]`.
pub fn repeat_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let (r, c) = as_2d(x, "repeat_rows")?;
    if k == 0 {
        return Err(Error::Parameter("repeat_rows with k = 0".into()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(r * k * c);
    for i in 0..r {
        for _ in 0..k {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![r * k, c],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("repeat_rows backward without grad");
            let mut contrib = vec![0.0; r * c];
            for i in 0..r {
                for rep in 0..k {
                    let row = &g[(i * k + rep) * c..(i * k + rep + 1) * c];
                    for j in 0..c {
                        contrib[i * c + j] += row[j];
                    }
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Tiles the whole block k times: `[r×c] -> [k·r × c]`.
pub fn tile_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let (r, c) = as_2d(x, "tile_rows")?;
    if k == 0 {
        return Err(Error::Parameter("tile_rows with k = 0".into()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(r * k * c);
    for _ in 0..k {
        out.extend_from_slice(&xd);
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![k * r, c],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("tile_rows backward without grad");
            let mut contrib = vec![0.0; r * c];
            for rep in 0..k {
                let block = &g[rep * r * c..(rep + 1) * r * c];
                for (slot, &gv) in contrib.iter_mut().zip(block) {
                    *slot += gv;
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Gathers rows by index (duplicates allowed): also serves as embedding
/// lookup, where `x` is the embedding table.
pub fn select_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (r, c) = as_2d(x, "select_rows")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
        return Err(Error::Dimension {
            op: "select_rows",
            msg: format!("row index {bad} out of bounds for {r} rows"),
        });
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        out.extend_from_slice(&xd[i * c..(i + 1) * c]);
    }
    drop(xd);
    let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![indices.len(), c],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("select_rows backward without grad");
            let mut contrib = vec![0.0; xc.numel()];
            for (j, &i) in idx.iter().enumerate() {
                for p in 0..c {
                    contrib[i * c + p] += g[j * c + p];
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Scatter-adds rows of `x` into a zero matrix with `rows` rows:
/// `out[indices[j]] += x[j]`. The inverse of [`select_rows`].
pub fn scatter_rows(x: &Tensor, indices: &[usize], rows: usize) -> Result<Tensor> {
    let (m, c) = as_2d(x, "scatter_rows")?;
    if indices.len() != m {
        return Err(Error::Dimension {
            op: "scatter_rows",
            msg: format!("{m} rows but {} indices", indices.len()),
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(Error::Dimension {
            op: "scatter_rows",
            msg: format!("target row {bad} out of bounds for {rows} rows"),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; rows * c];
    for (j, &i) in indices.iter().enumerate() {
        for p in 0..c {
            out[i * c + p] += xd[j * c + p];
        }
    }
    drop(xd);
    let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![rows, c],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("scatter_rows backward without grad");
            let mut contrib = vec![0.0; xc.numel()];
            for (j, &i) in idx.iter().enumerate() {
                contrib[j * c..(j + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Gathers scalar elements by flat row-major index into a vector.
pub fn gather(x: &Tensor, flat_indices: &[usize]) -> Result<Tensor> {
    let n = x.numel();
    if let Some(&bad) = flat_indices.iter().find(|&&i| i >= n) {
        return Err(Error::Dimension {
            op: "gather",
            msg: format!("flat index {bad} out of bounds for {n} elements"),
        });
    }
    let xd = x.data();
    let out: Vec<f64> = flat_indices.iter().map(|&i| xd[i]).collect();
    drop(xd);
    let idx: Rc<Vec<usize>> = Rc::new(flat_indices.to_vec());
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![flat_indices.len()],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("gather backward without grad");
            let mut contrib = vec![0.0; xc.numel()];
            for (j, &i) in idx.iter().enumerate() {
                contrib[i] += g[j];
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Keeps elements where `allowed` is true and replaces the rest with
/// `fill`. Gradient flows only through kept positions.
pub fn masked_fill(x: &Tensor, allowed: &[bool], fill: f64) -> Result<Tensor> {
    if allowed.len() != x.numel() {
        return Err(Error::Dimension {
            op: "masked_fill",
            msg: format!(
                "mask has {} flags for {} elements",
                allowed.len(),
                x.numel()
            ),
        });
    }
    let out: Vec<f64> = x
        .data()
        .iter()
        .zip(allowed.iter())
        .map(|(&v, &keep)| if keep { v } else { fill })
        .collect();
    let mask: Rc<Vec<bool>> = Rc::new(allowed.to_vec());
    let xc = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("masked_fill backward without grad");
            let contrib: Vec<f64> = g
                .iter()
                .zip(mask.iter())
                .map(|(&gi, &keep)| if keep { gi } else { 0.0 })
                .collect();
            xc.accumulate_grad(&contrib);
        }),
    ))
}

// ---------------------------------------------------------------------------
// normalizers

fn check_axis(x: &Tensor, axis: usize, op: &'static str) -> Result<()> {
    if axis >= x.ndim() {
        return Err(Error::Dimension {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    Ok(())
}

/// Softmax along `axis`, stabilized by max subtraction. Entries at
/// `-1e30` or below (the mask fill value) come out exactly zero.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis, "softmax")?;
    let (outer, len, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for s in 0..len {
                m = m.max(xd[base + s * inner]);
            }
            let mut z = 0.0;
            for s in 0..len {
                let e = (xd[base + s * inner] - m).exp();
                out[base + s * inner] = e;
                z += e;
            }
            for s in 0..len {
                out[base + s * inner] /= z;
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("softmax backward without grad");
            let contrib: Vec<f64> = {
                let yd = o.data();
                let mut dx = vec![0.0; yd.len()];
                for ob in 0..outer {
                    for i in 0..inner {
                        let base = ob * len * inner + i;
                        let mut dot = 0.0;
                        for s in 0..len {
                            let k = base + s * inner;
                            dot += g[k] * yd[k];
                        }
                        for s in 0..len {
                            let k = base + s * inner;
                            dx[k] = yd[k] * (g[k] - dot);
                        }
                    }
                }
                dx
            };
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Log-softmax along `axis` (numerically stable).
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis, "log_softmax")?;
    let (outer, len, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for s in 0..len {
                m = m.max(xd[base + s * inner]);
            }
            let mut z = 0.0;
            for s in 0..len {
                z += (xd[base + s * inner] - m).exp();
            }
            let lz = m + z.ln();
            for s in 0..len {
                out[base + s * inner] = xd[base + s * inner] - lz;
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("log_softmax backward without grad");
            let contrib: Vec<f64> = {
                let yd = o.data();
                let mut dx = vec![0.0; yd.len()];
                for ob in 0..outer {
                    for i in 0..inner {
                        let base = ob * len * inner + i;
                        let mut gsum = 0.0;
                        for s in 0..len {
                            gsum += g[base + s * inner];
                        }
                        for s in 0..len {
                            let k = base + s * inner;
                            dx[k] = g[k] - yd[k].exp() * gsum;
                        }
                    }
                }
                dx
            };
            xc.accumulate_grad(&contrib);
        }),
    ))
}

/// Layer normalization over the last axis with learned gain and bias:
/// `y = gain ⊙ (x − μ)/sqrt(σ² + eps) + bias`, per position.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::Dimension {
            op: "layer_norm",
            msg: format!("input shape {:?} has no last axis", x.shape()),
        });
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let lanes = x.numel() / d;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0; x.numel()];
    // Per-lane inverse stddev and mean, saved for backward.
    let mut inv_std = vec![0.0; lanes];
    let mut means = vec![0.0; lanes];
    for l in 0..lanes {
        let row = &xd[l * d..(l + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        means[l] = mu;
        inv_std[l] = inv;
        for j in 0..d {
            out[l * d + j] = gd[j] * (row[j] - mu) * inv + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("layer_norm backward without grad");
            let (dx, dgain, dbias) = {
                let xd = xc.data();
                let gd = gc.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for l in 0..lanes {
                    let mu = means[l];
                    let inv = inv_std[l];
                    let row = &xd[l * d..(l + 1) * d];
                    let grow = &g[l * d..(l + 1) * d];
                    // t = dL/dx̂, plus its mean and its x̂-weighted mean.
                    let mut t_mean = 0.0;
                    let mut tx_mean = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let t = grow[j] * gd[j];
                        t_mean += t;
                        tx_mean += t * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    t_mean /= d as f64;
                    tx_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let t = grow[j] * gd[j];
                        dx[l * d + j] = inv * (t - t_mean - xhat * tx_mean);
                    }
                }
                (dx, dgain, dbias)
            };
            if xc.requires_grad() {
                xc.accumulate_grad(&dx);
            }
            if gc.requires_grad() {
                gc.accumulate_grad(&dgain);
            }
            if bc.requires_grad() {
                bc.accumulate_grad(&dbias);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// convolution

/// 2-D convolution with symmetric zero padding of 1 on each spatial side.
///
/// `x` is `[c_in × h × w]`, `kernels` is `[c_out × c_in × kh × kw]`, and the
/// optional bias is `[c_out]`. Output is `[c_out × h' × w']` with
/// `e' = floor((e + 2 − k)/stride) + 1` per spatial extent.
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be at least 1".into()));
    }
    let (c_in, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("expected [c_in, h, w] input, got {s:?}"),
            })
        }
    };
    let (c_out, kc, kh, kw) = match kernels.shape() {
        [o, i, kh, kw] => (*o, *i, *kh, *kw),
        s => {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("expected [c_out, c_in, kh, kw] kernels, got {s:?}"),
            })
        }
    };
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    if h + 2 < kh || w + 2 < kw {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("padded input {}×{} is smaller than kernel {kh}×{kw}", h + 2, w + 2),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let ho = (h + 2 - kh) / stride + 1;
    let wo = (w + 2 - kw) / stride + 1;
    record_macs((c_out * ho * wo * c_in * kh * kw) as u64);

    let xd = x.data();
    let kd = kernels.data();
    let bd: Vec<f64> = bias.map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; c_out]);
    let mut out = vec![0.0; c_out * ho * wo];
    for oc in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bd[oc];
                for ic in 0..c_in {
                    for ky in 0..kh {
                        // Padding of 1: input coordinate −1 .. extent.
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[(ic * h + iy as usize) * w + ix as usize]
                                * kd[((oc * c_in + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    drop(xd);
    drop(kd);

    let xc = x.clone();
    let kcl = kernels.clone();
    let bcl = bias.cloned();
    let mut parents = vec![x.clone(), kernels.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![c_out, ho, wo],
        out,
        parents,
        Box::new(move |o| {
            let g = o.grad().expect("conv2d backward without grad");
            let (dx, dk, db) = {
                let xd = xc.data();
                let kd = kcl.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut db = vec![0.0; c_out];
                for oc in 0..c_out {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[(oc * ho + oy) * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            db[oc] += go;
                            for ic in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ic * h + iy as usize) * w + ix as usize;
                                        let ki = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                        dx[xi] += go * kd[ki];
                                        dk[ki] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                (dx, dk, db)
            };
            if xc.requires_grad() {
                xc.accumulate_grad(&dx);
            }
            if kcl.requires_grad() {
                kcl.accumulate_grad(&dk);
            }
            if let Some(b) = &bcl {
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            }
        }),
    ))
}

/// Rearranges a `[c × h × w]` feature map into per-row feature vectors
/// `[h × c·w]` (`out[y, c·w] = x[c, y, w]`) — the flatten step between a
/// conv stack and a linear projection.
pub fn merge_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension {
                op: "merge_channels",
                msg: format!("expected [c, h, w], got {s:?}"),
            })
        }
    };
    let xd = x.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for z in 0..w {
                out[y * (c * w) + ch * w + z] = xd[(ch * h + y) * w + z];
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(Tensor::from_op(
        vec![h, c * w],
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("merge_channels backward without grad");
            let mut contrib = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        contrib[(ch * h + y) * w + z] = g[y * (c * w) + ch * w + z];
                    }
                }
            }
            xc.accumulate_grad(&contrib);
        }),
    ))
}

// ---------------------------------------------------------------------------
// regularizers

/// Inverted dropout: keeps each element with probability `1 − p` and scales
/// survivors by `1/(1 − p)`, so the expectation is unchanged. Identity when
/// not training. `p ≥ 1` is rejected — it would zero the whole signal.
pub fn dropout(x: &Tensor, p: f64, rng: &mut RngStream, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
        .collect();
    let out: Vec<f64> = x.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
    let mask = Rc::new(mask);
    let xc = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |o| {
            let g = o.grad().expect("dropout backward without grad");
            let contrib: Vec<f64> = g.iter().zip(mask.iter()).map(|(&gi, &m)| gi * m).collect();
            xc.accumulate_grad(&contrib);
        }),
    ))
}

// ---------------------------------------------------------------------------
// recurrence

/// Weights of one LSTM cell. Gate order in the fused matrices is
/// `[input, forget, cell, output]`, each a block of `hidden` columns.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    /// `[d_in × 4·hidden]`
    pub wx: Tensor,
    /// `[hidden × 4·hidden]`
    pub wh: Tensor,
    /// `[4·hidden]`
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn hidden(&self) -> usize {
        self.wh.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in4_rows, four_h) = (self.wx.shape(), self.wh.shape());
        if d_in4_rows.len() != 2 || four_h.len() != 2 {
            return Err(Error::Parameter("lstm weights must be 2-D".into()));
        }
        let h = self.wh.shape()[0];
        if self.wx.shape()[1] != 4 * h || self.wh.shape()[1] != 4 * h || self.b.shape() != [4 * h] {
            return Err(Error::Parameter(format!(
                "inconsistent lstm shapes: wx {:?}, wh {:?}, b {:?}",
                self.wx.shape(),
                self.wh.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

/// One LSTM step over a batch of rows: `x` is `[r × d_in]`, `h_prev` and
/// `c_prev` are `[r × hidden]`. Returns the new `(h, c)`.
///
/// Built from primitive ops, so the backward pass needs no hand-derived
/// recurrence gradient.
pub fn lstm_cell(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: &LstmCellParams,
) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let hidden = params.hidden();
    let (_, d_in) = as_2d(x, "lstm_cell")?;
    if d_in != params.wx.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            lhs: x.shape().to_vec(),
            rhs: params.wx.shape().to_vec(),
        });
    }
    same_shape("lstm_cell", h_prev, c_prev)?;
    let z = add_bias(
        &matmul(x, &params.wx)?.add(&matmul(h_prev, &params.wh)?)?,
        &params.b,
    )?;
    let i = slice_last(&z, 0, hidden)?.sigmoid();
    let f = slice_last(&z, hidden, hidden)?.sigmoid();
    let g = slice_last(&z, 2 * hidden, hidden)?.tanh();
    let o = slice_last(&z, 3 * hidden, hidden)?.sigmoid();
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}
