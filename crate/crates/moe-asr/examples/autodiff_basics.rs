//! Tour of the reverse-mode autodiff core: building graphs, reading
//! gradients, verifying them against finite differences, and watching the
//! multiply-accumulate counter that the compute-matching tests rely on.

use moe_asr::error::Result;
use moe_asr::gradcheck;
use moe_asr::tensor::ops::{matmul, softmax, sum_all};
use moe_asr::tensor::{mac_count, reset_mac_count, Tensor};

fn main() -> Result<()> {
    // A scalar chain: z = sum(softmax(W·x) ⊙ softmax(W·x)). Leaves created
    // with `param_from_vec` track gradients; everything downstream does too.
    let w = Tensor::param_from_vec(&[2, 3], vec![0.4, -0.2, 0.1, 0.7, 0.3, -0.5])?;
    let x = Tensor::param_from_vec(&[3, 1], vec![1.0, -1.0, 0.5])?;

    let y = matmul(&w, &x)?;
    let p = softmax(&y, 0)?;
    let z = sum_all(&p.mul(&p)?);
    println!("z = {:.6}", z.item());

    z.backward();
    println!("dz/dW = {:?}", w.grad().unwrap());
    println!("dz/dx = {:?}", x.grad().unwrap());

    // The same gradients, checked against central finite differences. The
    // closure rebuilds the graph from the leaves' current contents because
    // the checker perturbs them in place. Stale gradients must be cleared
    // first — backward always accumulates.
    w.zero_grad();
    x.zero_grad();
    let report = gradcheck::check(
        || {
            let y = matmul(&w, &x).unwrap();
            let p = softmax(&y, 0).unwrap();
            sum_all(&p.mul(&p).unwrap())
        },
        &[&w, &x],
        1e-5,
    );
    println!("max relative error vs finite differences: {:.2e}", report.max_rel_err);
    assert!(report.max_rel_err < 1e-6);

    // Gradients accumulate across backward passes until cleared.
    w.zero_grad();
    x.zero_grad();
    let z1 = sum_all(&matmul(&w, &x)?);
    z1.backward();
    let once = x.grad().unwrap();
    let z2 = sum_all(&matmul(&w, &x)?);
    z2.backward();
    let twice = x.grad().unwrap();
    assert_eq!(twice[0], 2.0 * once[0]);
    println!("gradient accumulation: {:.3} doubles to {:.3}", once[0], twice[0]);

    // Matrix-multiply kernels bump a thread-local multiply-accumulate
    // counter: [2×3]·[3×1] is 6 MACs. This is how the suite asserts that
    // top-1 routing keeps per-token compute constant as experts are added.
    reset_mac_count();
    let _ = matmul(&w, &x)?;
    println!("MACs for [2×3]·[3×1]: {}", mac_count());
    assert_eq!(mac_count(), 6);

    Ok(())
}
