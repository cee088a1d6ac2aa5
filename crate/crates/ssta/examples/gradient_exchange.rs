//! The co-learning round against the whole-graph oracle: three nodes on
//! a line exchange messages forward and loss gradients backward; the
//! distributed per-node assembly must equal centralized backpropagation
//! through the joint graph.
//!
//! ```bash
//! cargo run --example gradient_exchange
//! ```

use std::collections::BTreeMap;

use ssta::node::{init_params, HiddenState, ModelConfig, NodeCell};
use ssta::protocol::{
    centralized_oracle, derive_rng, serial_round, FinishAction, MsgMode, NodeWorker, RoundOpts,
};
use ssta::tensor::Tensor;
use ssta::world::{build_topology, ViewSpec};

fn main() -> anyhow::Result<()> {
    let views: Vec<ViewSpec> = (0..3)
        .map(|i| ViewSpec { id: i + 1, origin: (i * 10, 0), size: (8, 8) })
        .collect();
    let topology = build_topology(&views, 1)?;
    let mut cfg = ModelConfig::new(8, 8);
    cfg.hidden_channels = 4;
    cfg.msg_dim = 6;

    let mut rng = derive_rng(99, &[]);
    let mut workers = BTreeMap::new();
    let mut frames = BTreeMap::new();
    let horizon = 3;
    for view in &views {
        let cell = NodeCell::new(view.id, topology.listen_set(view.id).clone(), cfg.clone());
        println!("node {} listens to {:?}", view.id, cell.neighbors);
        let mut worker = NodeWorker::new(cell, init_params(&cfg, &mut rng), 1e-3);
        worker.set_hidden(HiddenState {
            node: view.id,
            t: 0,
            grid: Tensor::uniform(vec![4, 8, 8], 0.5, &mut rng),
        });
        workers.insert(view.id, worker);
        frames.insert(
            view.id,
            (0..=horizon).map(|_| Tensor::uniform(vec![8, 8], 0.5, &mut rng)).collect::<Vec<_>>(),
        );
    }

    let oracle = centralized_oracle(&workers, &frames, horizon)?;
    let opts = RoundOpts {
        t: 0,
        round_tag: 0,
        horizon,
        mode: MsgMode::Emerged,
        seed: 0,
        action: FinishAction::Collect,
        lifelong: false,
    };
    let report = serial_round(&mut workers, &topology, &frames, &opts)?;
    let distributed = report.grads.expect("collect action returns gradients");

    println!("\nper-node round losses: {:?}", report.per_node.values().map(|r| r.loss).collect::<Vec<_>>());
    println!("oracle total loss:     {:.6}", oracle.total_loss);

    let mut worst: f64 = 0.0;
    for (id, slices) in &distributed {
        for (name, tensor) in slices {
            let reference = &oracle.grads[id][name];
            let scale = reference
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max((*v as f64).abs()))
                .max(1e-12);
            for (a, b) in tensor.data().iter().zip(reference.data()) {
                worst = worst.max(((a - b) as f64).abs() / scale);
            }
        }
    }
    println!("max relative discrepancy, distributed vs centralized: {worst:.3e}");
    assert!(worst < 1e-9);
    println!("the one-hop exchange assembles the exact network gradient");
    Ok(())
}
