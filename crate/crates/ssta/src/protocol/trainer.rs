//! Training driver: epoch loops (or a single continual pass), per-epoch
//! metric logging, checkpointing, and streaming evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    default_eviction, load_checkpoint, save_checkpoint, serial_round, FinishAction,
    LifelongState, LifelongStrategy, MsgMode, NodeWorker, ParallelSession, ProtocolError, Result,
    RoundOpts, RoundReport,
};
use crate::lifelong::ReplayBuffer;
use crate::metrics::{MetricReport, MetricRow};
use crate::node::{
    apply_pretrained, init_params, pretrain_message_ae, ModelConfig, NodeCell, RolloutMsgs,
};
use crate::protocol::derive_rng;
use crate::tensor::{Scalar, Tensor};
use crate::world::{build_topology, Dataset, Topology};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Listen-set size for the k-nearest topology.
    pub k: usize,
    /// Prediction horizon T.
    pub horizon: usize,
    pub epochs: usize,
    pub lr: Scalar,
    /// Rounds folded into one optimizer step.
    pub batch: usize,
    pub msg_mode: MsgMode,
    pub parallel: bool,
    pub seed: u64,
    /// Continual training: strategy plus buffer capacity D. When set the
    /// run is a single streaming pass and `epochs` is ignored.
    pub lifelong: Option<(LifelongStrategy, usize)>,
    /// Replay mini-batch size for lifelong runs.
    pub replay_batch: usize,
    pub rollout_msgs: RolloutMsgs,
    pub self_message: bool,
    pub freeze_msg_head: bool,
    /// Autoencoder pretraining of the message pathway; 0 disables.
    pub pretrain_epochs: usize,
    pub pretrain_lr: Scalar,
    pub hidden_channels: usize,
    pub msg_dim: usize,
    pub kernel: usize,
}

impl TrainConfig {
    /// Desk-scale defaults; the reference full-scale settings are 128
    /// hidden channels, 5×5 kernels, 100 epochs.
    pub fn new(k: usize) -> Self {
        TrainConfig {
            k,
            horizon: 5,
            epochs: 40,
            lr: 1e-3,
            batch: 10,
            msg_mode: MsgMode::Emerged,
            parallel: false,
            seed: 0,
            lifelong: None,
            replay_batch: 10,
            rollout_msgs: RolloutMsgs::Hold,
            self_message: false,
            freeze_msg_head: false,
            pretrain_epochs: 20,
            pretrain_lr: 1e-2,
            hidden_channels: 8,
            msg_dim: 16,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub node: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub workers: BTreeMap<usize, NodeWorker>,
    pub topology: Topology,
}

fn model_config(dataset: &Dataset, cfg: &TrainConfig) -> ModelConfig {
    let (w, h) = dataset.config.views[0].size;
    let mut mc = ModelConfig::new(h, w);
    mc.hidden_channels = cfg.hidden_channels;
    mc.msg_dim = cfg.msg_dim;
    mc.kernel = cfg.kernel;
    mc.rollout_msgs = cfg.rollout_msgs;
    mc.self_message = cfg.self_message;
    mc
}

/// Builds fresh workers: seeded initialization, optional message-pathway
/// pretraining on each node's own early frames, lifelong buffers.
pub fn build_workers(dataset: &Dataset, cfg: &TrainConfig) -> Result<(BTreeMap<usize, NodeWorker>, Topology)> {
    let topology = build_topology(&dataset.config.views, cfg.k)
        .map_err(|e| ProtocolError::Checkpoint(e.to_string()))?;
    let mc = model_config(dataset, cfg);
    let mut workers = BTreeMap::new();
    for view in &dataset.config.views {
        let id = view.id;
        let mut rng = derive_rng(cfg.seed, &[0x696e, id as u64]);
        let mut params = init_params(&mc, &mut rng);
        if cfg.pretrain_epochs > 0 {
            let take = dataset.steps.min(200);
            if take >= crate::node::MIN_PRETRAIN_FRAMES {
                let frames: Vec<Tensor> =
                    (0..take).map(|t| dataset.frame(id, t).clone()).collect();
                let mut pre_rng = derive_rng(cfg.seed, &[0x7072, id as u64]);
                let pre = pretrain_message_ae(
                    &mc,
                    &frames,
                    cfg.pretrain_epochs,
                    cfg.pretrain_lr,
                    &mut pre_rng,
                )?;
                apply_pretrained(&mut params, &pre)?;
            }
        }
        let cell = NodeCell::new(id, topology.listen_set(id).clone(), mc.clone());
        let mut worker = NodeWorker::new(cell, params, cfg.lr);
        if cfg.freeze_msg_head {
            worker.frozen.insert(crate::node::slices::MSG_HEAD_WEIGHT.to_string());
            worker.frozen.insert(crate::node::slices::MSG_HEAD_BIAS.to_string());
        }
        if let Some((strategy, capacity)) = cfg.lifelong {
            worker.lifelong = Some(LifelongState {
                strategy,
                buffer: ReplayBuffer::new(capacity, default_eviction(strategy)),
                batch: cfg.replay_batch,
            });
        }
        workers.insert(id, worker);
    }
    Ok((workers, topology))
}

fn frames_window(dataset: &Dataset, t: usize, horizon: usize) -> BTreeMap<usize, Vec<Tensor>> {
    dataset
        .view_ids()
        .map(|id| {
            let window = (t..=t + horizon).map(|tt| dataset.frame(id, tt).clone()).collect();
            (id, window)
        })
        .collect()
}

fn epoch_rows(epoch: usize, reports: &[RoundReport]) -> Vec<EpochRow> {
    let mut acc: BTreeMap<usize, (f64, f64, f64, f64, usize)> = BTreeMap::new();
    for report in reports {
        for (&id, round) in &report.per_node {
            let entry = acc.entry(id).or_insert((0.0, 0.0, 0.0, 0.0, 0));
            entry.0 += round.mse;
            entry.1 += round.psnr;
            entry.2 += round.ssim;
            entry.3 += round.loss;
            entry.4 += 1;
        }
    }
    acc.into_iter()
        .map(|(node, (mse, psnr, ssim, loss, n))| {
            let n = n as f64;
            EpochRow { epoch, node, mse: mse / n, psnr: psnr / n, ssim: ssim / n, loss: loss / n }
        })
        .collect()
}

/// Number of training rounds per pass over `steps` frames at horizon T.
pub fn rounds_per_pass(steps: usize, horizon: usize) -> usize {
    steps.saturating_sub(horizon)
}

/// Trains fresh workers on a dataset and returns the per-epoch metric
/// rows plus the trained workers. Fully deterministic for a fixed seed
/// under the serial scheduler.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (mut workers, topology) = build_workers(dataset, cfg)?;
    let rows = train_existing(&mut workers, &topology, dataset, cfg, 0..effective_epochs(cfg))?;
    Ok(TrainOutcome { rows, workers, topology })
}

fn effective_epochs(cfg: &TrainConfig) -> usize {
    if cfg.lifelong.is_some() {
        1
    } else {
        cfg.epochs
    }
}

/// Runs the given epoch range over existing workers (resume path).
pub fn train_existing(
    workers: &mut BTreeMap<usize, NodeWorker>,
    topology: &Topology,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epochs: std::ops::Range<usize>,
) -> Result<Vec<EpochRow>> {
    let rounds = rounds_per_pass(dataset.steps, cfg.horizon);
    if rounds == 0 {
        return Err(ProtocolError::BadWindow { want: cfg.horizon + 1, got: dataset.steps });
    }
    let lifelong = cfg.lifelong.is_some();
    let mut rows = Vec::new();
    for epoch in epochs {
        let mut reports = Vec::with_capacity(rounds);
        if cfg.parallel {
            let moved = std::mem::take(workers);
            let mut session = ParallelSession::spawn(moved, topology.clone());
            session.reset_hidden()?;
            for r in 0..rounds {
                let opts = round_opts(cfg, epoch, r, rounds, lifelong);
                let frames = frames_window(dataset, r, cfg.horizon);
                reports.push(session.round(&frames, &opts)?);
            }
            *workers = session.shutdown()?;
        } else {
            for worker in workers.values_mut() {
                worker.reset_hidden();
            }
            for r in 0..rounds {
                let opts = round_opts(cfg, epoch, r, rounds, lifelong);
                let frames = frames_window(dataset, r, cfg.horizon);
                reports.push(serial_round(workers, topology, &frames, &opts)?);
            }
        }
        rows.extend(epoch_rows(epoch, &reports));
    }
    Ok(rows)
}

fn round_opts(cfg: &TrainConfig, epoch: usize, r: usize, rounds: usize, lifelong: bool) -> RoundOpts {
    let apply_now = (r + 1) % cfg.batch == 0 || r + 1 == rounds;
    RoundOpts {
        t: r,
        round_tag: (epoch * rounds + r) as u64,
        horizon: cfg.horizon,
        mode: cfg.msg_mode,
        seed: cfg.seed,
        action: if apply_now { FinishAction::Apply } else { FinishAction::Accumulate },
        lifelong,
    }
}

/// Renders the spec'd metric log: `epoch,node,mse,psnr,ssim,loss`.
pub fn write_metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,node,mse,psnr,ssim,loss\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.node, row.mse, row.psnr, row.ssim, row.loss
        ));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    completed_epochs: usize,
    rounds_seen: usize,
}

/// Disk-level driver: loads the dataset, trains (resuming from the last
/// checkpoint when asked), and writes `metrics.csv` plus per-node
/// checkpoints under `out_dir`.
pub fn run_training(dataset_dir: &Path, out_dir: &Path, cfg: &TrainConfig, resume: bool) -> Result<()> {
    let dataset = Dataset::load(dataset_dir).map_err(|e| ProtocolError::Checkpoint(e.to_string()))?;
    fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let state_path = out_dir.join("state.json");
    let metrics_path = out_dir.join("metrics.csv");

    let total_epochs = effective_epochs(cfg);
    let (mut workers, topology, start_epoch) = if resume && state_path.exists() {
        let state: TrainState =
            serde_json::from_str(&fs::read_to_string(&state_path)?)
                .map_err(|e| ProtocolError::Checkpoint(format!("state decode: {e}")))?;
        let topology = build_topology(&dataset.config.views, cfg.k)
            .map_err(|e| ProtocolError::Checkpoint(e.to_string()))?;
        let mut workers = BTreeMap::new();
        for view in &dataset.config.views {
            let path = ckpt_dir.join(format!("node_{}.ckpt", view.id));
            let (mut worker, _) = load_checkpoint(&path)?;
            if let Some((strategy, capacity)) = cfg.lifelong {
                worker.lifelong = Some(LifelongState {
                    strategy,
                    buffer: ReplayBuffer::new(capacity, default_eviction(strategy)),
                    batch: cfg.replay_batch,
                });
            }
            workers.insert(view.id, worker);
        }
        (workers, topology, state.completed_epochs)
    } else {
        let (workers, topology) = build_workers(&dataset, cfg)?;
        if !metrics_path.exists() {
            fs::write(&metrics_path, "epoch,node,mse,psnr,ssim,loss\n")?;
        }
        (workers, topology, 0)
    };

    if start_epoch == 0 && !resume {
        fs::write(&metrics_path, "epoch,node,mse,psnr,ssim,loss\n")?;
        // Checkpoints of the initialization, so epochs == 0 runs still
        // leave a loadable model equal to it.
        for (id, worker) in &workers {
            save_checkpoint(&ckpt_dir.join(format!("node_{id}.ckpt")), worker, cfg.msg_mode)?;
        }
    }

    for epoch in start_epoch..total_epochs {
        let rows =
            train_existing(&mut workers, &topology, &dataset, cfg, epoch..epoch + 1)?;
        let mut csv = String::new();
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.epoch, row.node, row.mse, row.psnr, row.ssim, row.loss
            ));
        }
        let mut existing = fs::read_to_string(&metrics_path)?;
        existing.push_str(&csv);
        fs::write(&metrics_path, existing)?;
        for (id, worker) in &workers {
            save_checkpoint(&ckpt_dir.join(format!("node_{id}.ckpt")), worker, cfg.msg_mode)?;
        }
        let state = TrainState {
            completed_epochs: epoch + 1,
            rounds_seen: (epoch + 1) * rounds_per_pass(dataset.steps, cfg.horizon),
        };
        fs::write(
            &state_path,
            serde_json::to_string_pretty(&state)
                .map_err(|e| ProtocolError::Checkpoint(format!("state encode: {e}")))?,
        )?;
    }
    Ok(())
}

/// Streaming receding-horizon evaluation over a dataset segment:
/// messages flow per `mode`, no training. Returns per-view metric means
/// over all rounds and prediction steps.
pub fn evaluate(
    workers: &mut BTreeMap<usize, NodeWorker>,
    dataset: &Dataset,
    horizon: usize,
    mode: MsgMode,
    seed: u64,
) -> Result<MetricReport> {
    let rounds = rounds_per_pass(dataset.steps, horizon);
    if rounds == 0 {
        return Err(ProtocolError::BadWindow { want: horizon + 1, got: dataset.steps });
    }
    for worker in workers.values_mut() {
        worker.reset_hidden();
    }
    let mut acc: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in 0..rounds {
        let mut outgoing = BTreeMap::new();
        for (&id, worker) in workers.iter() {
            outgoing.insert(id, worker.eval_broadcast(r, mode, seed, r as u64)?);
        }
        let frames = frames_window(dataset, r, horizon);
        for (&id, worker) in workers.iter_mut() {
            let mut set = crate::node::MessageSet::new(id, r);
            for sender in worker.cell.expected_senders() {
                set.insert(outgoing[&sender].clone()).map_err(ProtocolError::Node)?;
            }
            let round = worker.eval_round(r, &frames[&id], &set, horizon)?;
            let entry = acc.entry(id).or_insert((0.0, 0.0, 0.0, 0));
            entry.0 += round.mse;
            entry.1 += round.psnr;
            entry.2 += round.ssim;
            entry.3 += 1;
        }
    }
    let rows: Vec<MetricRow> = acc
        .into_iter()
        .map(|(view, (mse, psnr, ssim, n))| {
            let n = n as f64;
            MetricRow { view, mse: mse / n, psnr: psnr / n, ssim: ssim / n, lpips: None }
        })
        .collect();
    Ok(MetricReport::from_rows(rows))
}
