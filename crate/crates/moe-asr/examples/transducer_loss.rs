//! The transducer (RNN-T) loss from both ends: the dynamic-programming
//! forward algorithm used in training, and an exhaustive enumeration over
//! every alignment that serves as its oracle. Also checks the gradient and
//! shows the hand-verifiable T=1 case.

use moe_asr::error::Result;
use moe_asr::gradcheck;
use moe_asr::losses::{alignment_count, rnnt_loss_bruteforce, rnnt_loss_forward};
use moe_asr::tensor::ops::log_softmax;
use moe_asr::tensor::rng::RngStream;
use moe_asr::tensor::Tensor;

fn main() -> Result<()> {
    // T=1, U=1: exactly one alignment (emit the label, then the final
    // blank), so the loss is −log p(label at (0,0)) − log p(blank at (0,1)).
    let logits = Tensor::param_from_vec(
        &[1 * 2 * 3, 1],
        vec![0.2, 1.1, -0.4, 0.9, -0.2, 0.3],
    )?;
    let reshaped = moe_asr::tensor::ops::reshape(&logits, &[1, 2, 3])?;
    let log_probs = log_softmax(&reshaped, 2)?;
    let loss = rnnt_loss_forward(&log_probs, &[1], 2)?;
    let lp = log_probs.data().clone();
    let by_hand = -(lp[1] + lp[3 + 2]); // label 1 at u=0, blank at u=1
    println!("T=1 U=1: forward {:.10}, by hand {:.10}", loss.item(), by_hand);
    assert!((loss.item() - by_hand).abs() < 1e-12);

    // A bigger lattice: the DP must agree with brute-force enumeration of
    // all C(T−1+U, U) alignments to near machine precision.
    let (t_len, u_len, vocab) = (4usize, 3usize, 3usize);
    let classes = vocab + 1;
    let blank = vocab;
    let mut rng = RngStream::new(42, 0);
    let raw = Tensor::from_vec(
        &[t_len, u_len + 1, classes],
        (0..t_len * (u_len + 1) * classes).map(|_| rng.normal()).collect(),
    )?;
    let log_probs = log_softmax(&raw, 2)?;
    let target = [0usize, 2, 1];
    let dp = rnnt_loss_forward(&log_probs, &target, blank)?.item();
    let brute = rnnt_loss_bruteforce(&log_probs, &target, blank)?;
    println!(
        "T={t_len} U={u_len}: {} alignments, forward {:.12}, brute force {:.12}",
        alignment_count(t_len, u_len),
        dp,
        brute
    );
    assert!((dp - brute).abs() < 1e-10);

    // The loss is differentiable through the log-probabilities all the way
    // back to the raw joint logits.
    let raw_leaf = Tensor::param_from_vec(&[t_len, u_len + 1, classes], raw.to_vec())?;
    let report = gradcheck::check(
        || {
            let lp = log_softmax(&raw_leaf, 2).unwrap();
            rnnt_loss_forward(&lp, &target, blank).unwrap()
        },
        &[&raw_leaf],
        1e-5,
    );
    println!("gradient vs finite differences: max rel err {:.2e}", report.max_rel_err);
    assert!(report.max_rel_err < 1e-6);

    // More frames than labels → more room to place blanks → the number of
    // alignments (and the loss surface) grows combinatorially.
    for t in 1..=6 {
        println!("T={t}: {:>3} alignments for U=3", alignment_count(t, 3));
    }
    Ok(())
}
