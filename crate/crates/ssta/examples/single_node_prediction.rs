//! One isolated advisor predicting its own view: recursive rollout,
//! then streaming deployment where each advance keeps only the
//! first-step hidden state of the previous rollout.
//!
//! ```bash
//! cargo run --example single_node_prediction
//! ```

use std::collections::{BTreeMap, BTreeSet};

use ssta::metrics::mse;
use ssta::node::{init_params, MessageSet, ModelConfig, NodeCell, NodeRuntime};
use ssta::protocol::{derive_rng, serial_round, FinishAction, MsgMode, NodeWorker, RoundOpts};
use ssta::world::{build_topology, preset, Dataset};

fn main() -> anyhow::Result<()> {
    let world = preset(2, 7)?;
    let dataset = Dataset::generate_in_memory(&world, 60)?;
    let view = world.views[0];
    let cfg = ModelConfig::new(view.size.1, view.size.0);

    // Train one node on its own frames (no neighbors, so Eq-style
    // exchange degenerates to plain local descent).
    let topology = build_topology(&world.views, 0)?;
    let cell = NodeCell::new(view.id, topology.listen_set(view.id).clone(), cfg.clone());
    let params = init_params(&cfg, &mut derive_rng(7, &[1]));
    let mut workers = BTreeMap::from([(view.id, NodeWorker::new(cell.clone(), params, 1e-3))]);
    let horizon = 4;
    for epoch in 0..6 {
        workers.get_mut(&view.id).unwrap().reset_hidden();
        let mut loss = 0.0;
        for t in 0..dataset.steps - horizon {
            let frames: BTreeMap<usize, Vec<_>> = BTreeMap::from([(
                view.id,
                (t..=t + horizon).map(|tt| dataset.frame(view.id, tt).clone()).collect(),
            )]);
            let opts = RoundOpts {
                t,
                round_tag: (epoch * 100 + t) as u64,
                horizon,
                mode: MsgMode::Emerged,
                seed: 7,
                action: FinishAction::Apply,
                lifelong: false,
            };
            let report = serial_round(&mut workers, &topology, &frames, &opts)?;
            loss += report.per_node[&view.id].loss;
        }
        println!("epoch {epoch}: summed loss {loss:.3}");
    }

    // Streaming deployment with the trained weights.
    let trained = workers.remove(&view.id).unwrap();
    let mut runtime = NodeRuntime::new(
        NodeCell::new(view.id, BTreeSet::new(), cfg.clone()),
        trained.params.clone(),
    );
    println!("\nstreaming receding-horizon deployment:");
    for t in 0..6 {
        let msgs = MessageSet::new(view.id, t);
        let roll = if t == 0 {
            runtime.rollout(dataset.frame(view.id, t), &msgs, horizon)?
        } else {
            runtime.receding_advance(dataset.frame(view.id, t), &msgs, horizon)?
        };
        let one_step = mse(
            &roll.predictions[0].reshaped(vec![cfg.height, cfg.width])?,
            dataset.frame(view.id, t + 1),
        )?;
        let far = mse(
            &roll.predictions[horizon - 1].reshaped(vec![cfg.height, cfg.width])?,
            dataset.frame(view.id, t + horizon),
        )?;
        println!(
            "  t={t}: one-step mse {one_step:.5}, {horizon}-step mse {far:.5} (carry-over state t={})",
            runtime.hidden().t
        );
    }
    Ok(())
}
