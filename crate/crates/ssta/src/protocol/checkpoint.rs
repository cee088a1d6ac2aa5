//! Per-node checkpoint files: a JSON manifest line followed by named
//! tensor records (parameter slices, optimizer moments, carried hidden
//! state) in the tensor wire format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MsgMode, NodeWorker, ProtocolError, Result};
use crate::node::{HiddenState, ModelConfig, NodeCell};
use crate::optim::Adam;
use crate::tensor::{read_tensor, write_tensor, ParameterSet, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub node_id: usize,
    pub neighbors: Vec<usize>,
    pub cfg: ModelConfig,
    pub version: u64,
    pub adam_step: u64,
    pub lr: Scalar,
    pub msg_mode: MsgMode,
    pub frozen: Vec<String>,
    pub hidden_t: usize,
}

pub fn save_checkpoint(path: &Path, worker: &NodeWorker, msg_mode: MsgMode) -> Result<()> {
    let meta = CheckpointMeta {
        node_id: worker.cell.id,
        neighbors: worker.cell.neighbors.iter().copied().collect(),
        cfg: worker.cell.cfg.clone(),
        version: worker.params.version(),
        adam_step: worker.adam.step_count(),
        lr: worker.adam.lr,
        msg_mode,
        frozen: worker.frozen.iter().cloned().collect(),
        hidden_t: worker.hidden().t,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &meta)
        .map_err(|e| ProtocolError::Checkpoint(format!("manifest encode: {e}")))?;
    std::io::Write::write_all(&mut out, b"\n")?;
    for (name, tensor) in worker.params.iter() {
        write_tensor(&mut out, name, tensor)?;
    }
    for (name, tensor) in worker.adam.state_tensors(&worker.params) {
        write_tensor(&mut out, &name, &tensor)?;
    }
    write_tensor(&mut out, "hidden", &worker.hidden().grid)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NodeWorker, CheckpointMeta)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    std::io::BufRead::read_line(&mut reader, &mut line)?;
    let meta: CheckpointMeta = serde_json::from_str(line.trim_end())
        .map_err(|e| ProtocolError::Checkpoint(format!("manifest decode: {e}")))?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while let Some((name, tensor)) = read_tensor(&mut reader)? {
        tensors.insert(name, tensor);
    }
    let mut slices = Vec::new();
    for name in crate::node::slices::ALL {
        let tensor = tensors
            .remove(name)
            .ok_or_else(|| ProtocolError::Checkpoint(format!("missing slice {name:?}")))?;
        slices.push((name.to_string(), tensor));
    }
    let mut params = ParameterSet::new(slices).map_err(ProtocolError::Tensor)?;
    params.restore_version(meta.version);

    let hidden_grid = tensors
        .remove("hidden")
        .ok_or_else(|| ProtocolError::Checkpoint("missing hidden state".into()))?;
    let moments: BTreeMap<String, Tensor> = tensors
        .into_iter()
        .filter(|(name, _)| name.starts_with("adam_m.") || name.starts_with("adam_v."))
        .collect();

    let cell = NodeCell::new(meta.node_id, meta.neighbors.iter().copied().collect(), meta.cfg.clone());
    let mut worker = NodeWorker::new(cell, params, meta.lr);
    let mut adam = Adam::new(meta.lr);
    adam.restore(meta.adam_step, moments);
    worker.adam = adam;
    worker.frozen = meta.frozen.iter().cloned().collect();
    worker.set_hidden(HiddenState { node: meta.node_id, t: meta.hidden_t, grid: hidden_grid });
    Ok((worker, meta))
}
