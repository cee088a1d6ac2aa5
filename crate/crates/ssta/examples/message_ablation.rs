//! Quick single-seed look at the message-type ablation: emerged vs zero
//! vs random payloads under otherwise identical training. (The full
//! paired-seed suite with assertions runs via `ssta ablate`.)
//!
//! ```bash
//! cargo run --release --example message_ablation
//! ```

use ssta::experiments::{default_spec, run_arm};
use ssta::protocol::MsgMode;

fn main() -> anyhow::Result<()> {
    let mut spec = default_spec("messages", vec![5]);
    spec.steps = 100;
    spec.train.epochs = 12;
    println!(
        "training {} nodes for {} epochs per arm on one seed ...",
        spec.nodes, spec.train.epochs
    );
    for (label, mode) in [
        ("emerged", MsgMode::Emerged),
        ("zero", MsgMode::Zero),
        ("random", MsgMode::Random),
    ] {
        let mut cfg = spec.train.clone();
        cfg.msg_mode = mode;
        let arm = run_arm(&spec, label, &cfg)?;
        println!(
            "  {label:<8} validation mse {:.6e}  psnr {:.3}  ssim {:.4}",
            arm.mean_mse, arm.mean_psnr, arm.mean_ssim
        );
    }
    println!("\n(single seed: orderings are only asserted over ≥3 paired seeds)");
    Ok(())
}
