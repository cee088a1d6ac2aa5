//! Centralized verification oracle for the distributed gradient assembly.
//!
//! Builds one joint tape over every node's round computation — emissions
//! first, then rollouts consuming the emitted message values directly —
//! and differentiates the summed network loss. Because an emission
//! depends only on the node's carried state (a constant) and its own
//! parameters, no multi-hop cross-node gradient path exists, and the
//! joint gradient decomposes into exactly the local term plus the one-hop
//! packet corrections the distributed protocol assembles.
//!
//! Intended for small test instances and the acceptance suite.

use std::collections::BTreeMap;

use super::{NodeWorker, Result};
use crate::node::{message_mean_on_tape, rollout_on_tape, ParamIds};
use crate::tensor::{Scalar, Tape, Tensor, ValueId};

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub total_loss: f64,
    pub per_node_loss: BTreeMap<usize, f64>,
    /// node id → slice name → gradient of the summed network loss.
    pub grads: BTreeMap<usize, BTreeMap<String, Tensor>>,
}

/// Whole-graph gradients of Σ_i L_t^i for an emerged-message round, from
/// each node's current parameters and carried hidden state. `frames[i]`
/// holds the horizon+1 true frames of node i's window.
pub fn centralized_oracle(
    workers: &BTreeMap<usize, NodeWorker>,
    frames: &BTreeMap<usize, Vec<Tensor>>,
    horizon: usize,
) -> Result<OracleResult> {
    let mut tape = Tape::new();

    // Phase equivalent of broadcast: every node's emission, recorded
    // live so receiver losses differentiate back into sender heads.
    let mut param_ids: BTreeMap<usize, ParamIds> = BTreeMap::new();
    let mut emissions: BTreeMap<usize, ValueId> = BTreeMap::new();
    for (&id, worker) in workers {
        let ids = ParamIds::resolve(&tape.params(&worker.params, &format!("n{id}."))?)?;
        let h = tape.constant(&worker.hidden().grid);
        let pooled = tape.global_avg_pool(h)?;
        let msg = tape.dense(ids.msg_head_weight, pooled, ids.msg_head_bias)?;
        param_ids.insert(id, ids);
        emissions.insert(id, msg);
    }

    // Rollouts and per-node losses, in id order to mirror the serial
    // scheduler's arithmetic.
    let mut per_node_loss = BTreeMap::new();
    let mut total_id: Option<ValueId> = None;
    for (&id, worker) in workers {
        let cfg = &worker.cell.cfg;
        let window = &frames[&id];
        let input = tape.constant(&window[0].reshaped(vec![1, cfg.height, cfg.width])?);
        let h = tape.constant(&worker.hidden().grid);
        let payload_ids: Vec<ValueId> = worker
            .cell
            .expected_senders()
            .iter()
            .map(|sender| emissions[sender])
            .collect();
        let mean = message_mean_on_tape(&mut tape, &payload_ids)?;
        let roll = rollout_on_tape(&mut tape, &param_ids[&id], input, h, mean, cfg, horizon)?;
        let pixels = (cfg.height * cfg.width) as Scalar;
        let mut loss_id: Option<ValueId> = None;
        for (step, &pred) in roll.predictions.iter().enumerate() {
            let target =
                tape.constant(&window[step + 1].reshaped(vec![1, cfg.height, cfg.width])?);
            let m = tape.mse_loss(pred, target)?;
            let frob = tape.scalar_mul(m, pixels)?;
            loss_id = Some(match loss_id {
                None => frob,
                Some(acc) => tape.add(acc, frob)?,
            });
        }
        let loss_id = loss_id.expect("horizon ≥ 1");
        per_node_loss.insert(id, tape.value(loss_id).item() as f64);
        total_id = Some(match total_id {
            None => loss_id,
            Some(acc) => tape.add(acc, loss_id)?,
        });
    }

    let total_id = total_id.expect("at least one node");
    let total_loss = tape.value(total_id).item() as f64;
    let all = tape.backward(total_id)?;

    let mut grads: BTreeMap<usize, BTreeMap<String, Tensor>> =
        workers.keys().map(|&id| (id, BTreeMap::new())).collect();
    for (name, tensor) in all.into_map() {
        let Some(rest) = name.strip_prefix('n') else { continue };
        let Some((id, slice)) = rest.split_once('.') else { continue };
        let Ok(id) = id.parse::<usize>() else { continue };
        grads.get_mut(&id).expect("prefix ids come from workers").insert(slice.to_string(), tensor);
    }
    Ok(OracleResult { total_loss, per_node_loss, grads })
}
