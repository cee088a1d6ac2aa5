//! The evaluation metrics on rendered frames: MSE, PSNR, and 11×11
//! Gaussian-window SSIM.
//!
//! ```bash
//! cargo run --example quality_metrics
//! ```

use ssta::metrics::{mse, psnr, ssim};
use ssta::world::{preset, render, step_world, WorldState};

fn main() -> anyhow::Result<()> {
    let cfg = preset(4, 11)?;
    let (mut state, mut rng) = WorldState::from_config(&cfg)?;
    let before = render(&state, &cfg.views[0]);
    step_world(&mut state, &mut rng)?;
    let after = render(&state, &cfg.views[0]);
    step_world(&mut state, &mut rng)?;
    step_world(&mut state, &mut rng)?;
    let later = render(&state, &cfg.views[0]);

    println!("identical frames:");
    println!("  mse  {:.6}", mse(&before.grid, &before.grid)?);
    println!("  psnr {} dB", psnr(&before.grid, &before.grid, 1.0)?);
    println!("  ssim {:.6}", ssim(&before.grid, &before.grid)?);

    println!("one world step apart:");
    println!("  mse  {:.6}", mse(&before.grid, &after.grid)?);
    println!("  psnr {:.3} dB", psnr(&before.grid, &after.grid, 1.0)?);
    println!("  ssim {:.6}", ssim(&before.grid, &after.grid)?);

    println!("three world steps apart:");
    println!("  mse  {:.6}", mse(&before.grid, &later.grid)?);
    println!("  psnr {:.3} dB", psnr(&before.grid, &later.grid, 1.0)?);
    println!("  ssim {:.6}", ssim(&before.grid, &later.grid)?);

    println!("\npsnr falls and ssim drops as frames drift apart;");
    println!("a vanished squared error reports psnr = +inf by convention.");
    Ok(())
}
