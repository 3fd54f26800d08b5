//! Shows how attention masks shape what the encoder can see: full,
//! causal, streaming-windowed, and block-diagonal masks, then the payoff —
//! a streaming encoder's output at frame t is bit-identical when frames
//! beyond its receptive field change, which is what makes incremental
//! (low-latency) encoding possible.

use moe_asr::blocks::{
    encoder_block, AttentionMask, BlockConfig, EncoderBlockParams, FfnKind, PositionKind,
};
use moe_asr::error::Result;
use moe_asr::tensor::rng::RngStream;
use moe_asr::tensor::Tensor;

fn render(mask: &AttentionMask, label: &str) {
    println!("{label}");
    for t in 0..mask.t_q() {
        let row: String = (0..mask.t_k())
            .map(|s| if mask.allows(t, s) { '#' } else { '·' })
            .collect();
        println!("  {row}");
    }
}

fn main() -> Result<()> {
    render(&AttentionMask::causal(6), "causal (each row sees its prefix):");
    render(
        &AttentionMask::streaming(6, 2, 1),
        "\nstreaming window, 2 back / 1 ahead:",
    );
    render(
        &AttentionMask::block_diagonal(&[3, 2, 1]),
        "\nblock-diagonal: three utterances batched without cross-talk:",
    );
    render(
        &AttentionMask::streaming(6, 2, 1)
            .intersect(&AttentionMask::block_diagonal(&[4, 2]))?,
        "\nintersection: streaming window confined to each utterance:",
    );

    // Receptive field. A stack of n windowed layers lets frame t see at
    // most t + n·right frames ahead. Everything later is invisible:
    // replacing those frames leaves the output at frame t bit-identical.
    let (left, right, layers, t_len) = (2usize, 1usize, 2usize, 12usize);
    let cfg = BlockConfig {
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        dropout_p: 0.0,
        ffn_kind: FfnKind::Dense,
        position_kind: PositionKind::Relative,
        rel_window: Some((left, right)),
    };
    let mut rng = RngStream::new(3, 0);
    let blocks: Vec<EncoderBlockParams> = (0..layers)
        .map(|_| EncoderBlockParams::init(&cfg, &mut rng))
        .collect::<Result<_>>()?;

    let run = |frames: &Tensor| -> Result<Tensor> {
        let mask = AttentionMask::streaming(t_len, left, right);
        let mut h = frames.clone();
        let mut rng = RngStream::new(0, 0); // inert: dropout is off
        for b in &blocks {
            h = encoder_block(&h, b, &mask, &mut rng, false)?.0;
        }
        Ok(h)
    };

    let mut data_rng = RngStream::new(9, 0);
    let base: Vec<f64> = (0..t_len * 16).map(|_| data_rng.normal()).collect();
    let frame = 4;
    let horizon = frame + layers * right; // last visible frame index
    let mut edited = base.clone();
    for v in edited[(horizon + 1) * 16..].iter_mut() {
        *v = 99.0;
    }
    let out_base = run(&Tensor::from_vec(&[t_len, 16], base)?)?;
    let out_edit = run(&Tensor::from_vec(&[t_len, 16], edited)?)?;
    let row = |t: &Tensor, i: usize| t.data()[i * 16..(i + 1) * 16].to_vec();

    assert_eq!(
        row(&out_base, frame),
        row(&out_edit, frame),
        "frame {frame} must not see past frame {horizon}"
    );
    let next_differs = row(&out_base, horizon) != row(&out_edit, horizon);
    println!(
        "\nframe {frame} output identical after rewriting frames {}.. ({} layers × lookahead {right});",
        horizon + 1,
        layers
    );
    println!(
        "frame {horizon} (inside the horizon of the edit) changed: {next_differs}"
    );
    Ok(())
}
