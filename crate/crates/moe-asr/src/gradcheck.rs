//! Finite-difference gradient verification.
//!
//! [`check`] compares reverse-mode gradients against central differences
//! for every element of every watched tensor. It is used throughout the
//! test suite as the independent oracle for backward passes, and is public
//! so downstream experiments can validate their own composite losses.

use crate::tensor::Tensor;

/// Result of one gradient check. `worst` pinpoints the element with the
/// largest relative error: `(wrt index, element index, analytic, numeric)`.
#[derive(Debug, Clone)]
pub struct Report {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with an absolute floor: differences far below the finite
/// difference noise floor never dominate, while errors on gradients of
/// ordinary magnitude are measured relatively.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks the gradient of the scalar `f()` with respect to every tensor in
/// `wrt`, using central differences with the given `step`.
///
/// `f` must rebuild its graph from the current contents of the watched
/// tensors on every call — perturbations are written directly into those
/// leaves. `f` must also be deterministic: any sampling inside it has to
/// be driven by a stream reset on each call.
pub fn check(f: impl Fn() -> Tensor, wrt: &[&Tensor], step: f64) -> Report {
    assert!(step > 0.0, "finite difference step must be positive");

    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in wrt {
        t.zero_grad();
    }

    let mut report = Report {
        max_rel_err: 0.0,
        worst: None,
    };
    for (ti, t) in wrt.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + step;
            let up = f().item();
            t.data_mut()[j] = orig - step;
            let down = f().item();
            t.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic[ti][j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, j, analytic[ti][j], numeric));
            }
        }
    }
    report
}
