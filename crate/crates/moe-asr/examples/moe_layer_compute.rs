//! The full sparse layer in action: routed forward pass, the load-balance
//! auxiliary loss and its two analytic anchor points, and the headline
//! property of switch routing — per-token compute stays flat while
//! parameters grow with the expert count.

use moe_asr::error::Result;
use moe_asr::moe::{aux_loss, moe_forward, LoadStats, MoeLayerParams, RouterConfig};
use moe_asr::tensor::ops::sum_all;
use moe_asr::tensor::rng::RngStream;
use moe_asr::tensor::{mac_count, reset_mac_count, Tensor};

fn main() -> Result<()> {
    let mut rng = RngStream::new(11, 0);
    let d_model = 16;
    let d_ff = 32;
    let tokens = 24;
    let x = Tensor::from_vec(
        &[tokens, d_model],
        (0..tokens * d_model).map(|_| rng.normal()).collect(),
    )?;

    // Forward through a 4-expert layer. Inference mode: no jitter, no
    // dropout, so the result is a pure function of x and the parameters.
    let params = MoeLayerParams::init(d_model, d_ff, RouterConfig::new(4), &mut rng)?;
    let (y, stats, plan) = moe_forward(&x, &params, 0.0, &mut rng, false)?;
    println!(
        "routed {} tokens: per-expert fractions {:?}, {} dropped",
        stats.tokens,
        stats.f.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>(),
        plan.dropped_count()
    );
    println!("output shape {:?}, dispatch entropy {:.3}", y.shape(), stats.dispatch_entropy());

    // The auxiliary loss α·N·Σ fᵢ·Pᵢ has two exact anchors. Perfectly
    // uniform routing: f = P = 1/N, so the loss is α for every N.
    let n = 4;
    let uniform = LoadStats {
        f: vec![1.0 / n as f64; n],
        p: Tensor::from_vec(&[n], vec![1.0 / n as f64; n])?,
        tokens,
        dropped: 0,
    };
    let balanced = aux_loss(&uniform, 0.01)?.item();
    println!("aux loss, uniform routing over {n} experts: {balanced}");
    assert_eq!(balanced, 0.01);

    // Total collapse onto one expert: f = P = one-hot, loss = α·N.
    let mut f = vec![0.0; n];
    f[2] = 1.0;
    let mut p = vec![0.0; n];
    p[2] = 1.0;
    let collapsed = LoadStats {
        f,
        p: Tensor::from_vec(&[n], p)?,
        tokens,
        dropped: 0,
    };
    let collapse = aux_loss(&collapsed, 0.01)?.item();
    println!("aux loss, total collapse onto one of {n} experts: {collapse}");
    assert_eq!(collapse, 0.04);

    // The gradient of the auxiliary loss flows through P (mean router
    // probability) only; f counts argmax outcomes and is a constant.
    let (_, stats, _) = moe_forward(&x, &params, 0.0, &mut rng, false)?;
    let loss = aux_loss(&stats, 0.01)?;
    loss.backward();
    assert!(params.gate.grad().is_some());

    // Compute matching: the same tokens through 1, 4, 8, 32 experts with
    // capacity ≥ all tokens (nothing dropped). Every token still visits
    // exactly one expert of the same size, so multiply-accumulate counts
    // are identical — while the parameter count scales with N.
    println!();
    let mut macs_seen = Vec::new();
    for n in [1usize, 4, 8, 32] {
        let mut init_rng = RngStream::new(7, n as u64);
        let mut cfg = RouterConfig::new(n);
        cfg.capacity_factor = n as f64; // capacity = tokens: no drops
        let params = MoeLayerParams::init(d_model, d_ff, cfg, &mut init_rng)?;
        reset_mac_count();
        let (y, stats, _) = moe_forward(&x, &params, 0.0, &mut init_rng, false)?;
        let _ = sum_all(&y); // keep y alive through the count read
        let expert_macs = mac_count() - (tokens * d_model * n) as u64; // subtract the router matmul
        println!(
            "N = {n:>2}: expert MACs {expert_macs:>6}, parameters {:>6}, dropped {}",
            params.param_count(),
            stats.dropped
        );
        macs_seen.push(expert_macs);
    }
    assert!(macs_seen.windows(2).all(|w| w[0] == w[1]));
    println!("\nper-token expert compute is invariant in the expert count");

    Ok(())
}
