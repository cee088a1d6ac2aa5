//! Full co-training on the 2-view world: message-pathway pretraining,
//! lockstep rounds with gradient exchange, then streaming evaluation on
//! a held-out tail.
//!
//! ```bash
//! cargo run --example co_training
//! ```

use ssta::protocol::{evaluate, train, MsgMode, TrainConfig};
use ssta::world::{preset, Dataset};

fn main() -> anyhow::Result<()> {
    let world = preset(2, 3)?;
    let dataset = Dataset::generate_in_memory(&world, 100)?;
    let train_data = dataset.slice(0, 80);
    let val_data = dataset.slice(80, 100);

    let mut cfg = TrainConfig::new(1);
    cfg.horizon = 4;
    cfg.epochs = 10;
    cfg.pretrain_epochs = 10;
    cfg.seed = 3;

    println!("co-training 2 advisors for {} epochs ...", cfg.epochs);
    let outcome = train(&train_data, &cfg)?;
    for epoch in [0, cfg.epochs / 2, cfg.epochs - 1] {
        let rows: Vec<_> = outcome.rows.iter().filter(|r| r.epoch == epoch).collect();
        let loss: f64 = rows.iter().map(|r| r.loss).sum();
        let mse: f64 = rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64;
        println!("  epoch {epoch}: total loss {loss:.3}, mean training mse {mse:.5}");
    }

    let mut workers = outcome.workers;
    let report = evaluate(&mut workers, &val_data, cfg.horizon, MsgMode::Emerged, 3)?;
    println!("\nheld-out evaluation:\n{}", report.table());
    Ok(())
}
