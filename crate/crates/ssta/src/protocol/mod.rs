//! Networked co-learning rounds.
//!
//! A round at time t advances through five phases in strict order:
//!
//! 1. **broadcast** — every node emits its message for time t, computed
//!    from its carried hidden state under its *current* parameters, and
//!    the scheduler delivers it to every node that listens to it.
//! 2. **rollout** — every node rolls its predictor T steps from the true
//!    frame at t, holding the received message set, and scores the
//!    squared Frobenius loss against the next T true frames.
//! 3. **backprop** — every node differentiates its own loss, yielding
//!    parameter gradients and one gradient packet per received message.
//! 4. **exchange** — packets return to the original senders.
//! 5. **step** — every sender folds the returned packets through its own
//!    message Jacobian and applies one optimizer update.
//!
//! Because a node's outgoing message depends only on its carried state
//! and parameters — never on the payloads it receives in the same round —
//! the one-hop packet exchange assembles the exact gradient of the
//! network loss for every node, which the centralized oracle verifies.

mod checkpoint;
mod oracle;
mod scheduler;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use oracle::{centralized_oracle, OracleResult};
pub use scheduler::{serial_round, ParallelSession, RoundOpts, RoundReport};
pub use trainer::{
    build_workers, evaluate, rounds_per_pass, run_training, train, train_existing,
    write_metrics_csv, EpochRow, TrainConfig, TrainOutcome,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifelong::{DrawError, EvictionPolicy, ReplayBuffer};
use crate::metrics;
use crate::node::{
    message_mean_on_tape, rollout_on_tape, HiddenState, Message, MessageSet, NodeCell,
    NodeError, ParamIds,
};
use crate::optim::{Adam, GradAccum};
use crate::tensor::{Gradients, ParameterSet, Scalar, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("node {node}: phase order violated: expected {expected:?}, got {got:?}")]
    PhaseOrder { node: usize, expected: Phase, got: Phase },
    #[error("round {t}: missing gradient packet on edge {producer} -> {consumer}")]
    MissingPacket { producer: usize, consumer: usize, t: usize },
    #[error("round {t}: unexpected gradient packet on edge {producer} -> {consumer}")]
    UnexpectedPacket { producer: usize, consumer: usize, t: usize },
    #[error("round {t}: gradient packet stamped t={got} delivered to node {node}")]
    StalePacket { node: usize, t: usize, got: usize },
    #[error("round {t}: message set stamped t={got} consumed by node {node}")]
    StaleMessage { node: usize, t: usize, got: usize },
    #[error("node {node}: non-finite gradient, round aborted: {detail}")]
    NonFiniteGrad { node: usize, detail: String },
    #[error("round needs {want} frames (input plus horizon), got {got}")]
    BadWindow { want: usize, got: usize },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("replay draw failed: {0}")]
    Replay(#[from] DrawError),
    #[error("scheduler worker panicked or disconnected: {0}")]
    WorkerLost(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Reverse-direction payload: the gradient of the producer's round loss
/// with respect to the consumer's broadcast message.
#[derive(Clone, Debug)]
pub struct GradPacket {
    pub producer: usize,
    pub consumer: usize,
    pub t: usize,
    pub payload: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsgMode {
    /// Learned payloads from the message head.
    Emerged,
    /// All-zero payloads; gradient exchange is suppressed.
    Zero,
    /// Seeded standard-normal payloads per round; exchange suppressed.
    Random,
}

impl std::str::FromStr for MsgMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "emerged" => Ok(MsgMode::Emerged),
            "zero" => Ok(MsgMode::Zero),
            "random" => Ok(MsgMode::Random),
            other => Err(format!("unknown message mode {other:?} (emerged|zero|random)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Broadcast,
    Rollout,
    Backprop,
    Exchange,
    Step,
}

/// What to do with the assembled gradient at the end of a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinishAction {
    /// Fold into the running batch and apply the optimizer now.
    Apply,
    /// Fold into the running batch only.
    Accumulate,
    /// Return the assembled gradient untouched (verification runs).
    Collect,
}

/// Mixes a master seed with context tags into a substream seed, so every
/// (purpose, round, node) combination draws an independent, reproducible
/// stream regardless of scheduler interleaving.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6A09E667F3BCC909;
    let mut mix = |value: u64| {
        state ^= value;
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        state = z ^ (z >> 31);
    };
    for &tag in tags {
        mix(tag);
    }
    state
}

pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Per-round per-node numbers reported by the schedulers.
#[derive(Clone, Debug)]
pub struct NodeRound {
    pub node: usize,
    pub loss: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

struct EmissionScratch {
    tape: Tape,
    msg_id: ValueId,
}

struct RoundScratch {
    t: usize,
    tape: Tape,
    loss_id: ValueId,
    loss: f64,
    first_hidden: Tensor,
    grads: Option<Gradients>,
    packet_sum: Option<Tensor>,
    sample: Option<ReplaySample>,
}

/// Continual-learning attachment: a bounded replay store plus strategy.
#[derive(Clone, Debug)]
pub struct LifelongState {
    pub strategy: LifelongStrategy,
    pub buffer: ReplayBuffer<ReplaySample>,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifelongStrategy {
    SlidingWindow,
    InterestingData,
}

impl std::str::FromStr for LifelongStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sw" => Ok(LifelongStrategy::SlidingWindow),
            "id" => Ok(LifelongStrategy::InterestingData),
            other => Err(format!("unknown lifelong strategy {other:?} (sw|id)")),
        }
    }
}

/// One stored training sample: the frame window of a round plus the
/// message payloads that were live at its first step.
#[derive(Clone, Debug)]
pub struct ReplaySample {
    pub t: usize,
    pub frames: Vec<Tensor>,
    pub msgs: Vec<(usize, Tensor)>,
}

/// One node's training-time state: model, optimizer, carried hidden
/// state, and per-round scratch. All phase methods enforce call order.
pub struct NodeWorker {
    pub cell: NodeCell,
    pub params: ParameterSet,
    pub adam: Adam,
    pub frozen: BTreeSet<String>,
    pub lifelong: Option<LifelongState>,
    hidden: HiddenState,
    phase: Phase,
    emission: Option<EmissionScratch>,
    scratch: Option<RoundScratch>,
    accum: GradAccum,
}

impl NodeWorker {
    pub fn new(cell: NodeCell, params: ParameterSet, lr: Scalar) -> Self {
        let hidden = HiddenState::zeros(&cell.cfg, cell.id);
        NodeWorker {
            cell,
            params,
            adam: Adam::new(lr),
            frozen: BTreeSet::new(),
            lifelong: None,
            hidden,
            phase: Phase::Broadcast,
            emission: None,
            scratch: None,
            accum: GradAccum::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.cell.id
    }

    pub fn hidden(&self) -> &HiddenState {
        &self.hidden
    }

    pub fn set_hidden(&mut self, hidden: HiddenState) {
        self.hidden = hidden;
    }

    /// Zeroes the carried state (epoch boundaries).
    pub fn reset_hidden(&mut self) {
        self.hidden = HiddenState::zeros(&self.cell.cfg, self.cell.id);
    }

    fn expect_phase(&self, want: Phase) -> Result<()> {
        if self.phase != want {
            return Err(ProtocolError::PhaseOrder {
                node: self.cell.id,
                expected: self.phase,
                got: want,
            });
        }
        Ok(())
    }

    /// The message payload this node would emit right now, before any
    /// mode substitution.
    pub fn emitted_payload(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = ParamIds::resolve(&tape.params(&self.params, "")?)?;
        let h = tape.constant(&self.hidden.grid);
        let pooled = tape.global_avg_pool(h)?;
        let msg = tape.dense(ids.msg_head_weight, pooled, ids.msg_head_bias)?;
        Ok(tape.value(msg))
    }

    /// Broadcast phase: emit this round's message. In emerged mode the
    /// emission graph is retained so returned packets can be folded
    /// through the message Jacobian at the step phase.
    pub fn broadcast(&mut self, t: usize, mode: MsgMode, master_seed: u64, round_tag: u64) -> Result<Message> {
        self.expect_phase(Phase::Broadcast)?;
        let payload = match mode {
            MsgMode::Emerged => {
                let mut tape = Tape::new();
                let ids = ParamIds::resolve(&tape.params(&self.params, "")?)?;
                let h = tape.constant(&self.hidden.grid);
                let pooled = tape.global_avg_pool(h)?;
                let msg_id = tape.dense(ids.msg_head_weight, pooled, ids.msg_head_bias)?;
                let payload = tape.value(msg_id);
                self.emission = Some(EmissionScratch { tape, msg_id });
                payload
            }
            MsgMode::Zero => Tensor::zeros(vec![self.cell.cfg.msg_dim]),
            MsgMode::Random => {
                let mut rng =
                    derive_rng(master_seed, &[0x6d73, round_tag, self.cell.id as u64]);
                let data: Vec<Scalar> = (0..self.cell.cfg.msg_dim)
                    .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
                    .collect();
                Tensor::new(vec![self.cell.cfg.msg_dim], data)?
            }
        };
        self.phase = Phase::Rollout;
        Ok(Message { sender: self.cell.id, t, payload })
    }

    /// Broadcast payload for an inference round under `mode`, with no
    /// gradient bookkeeping or phase tracking.
    pub fn eval_broadcast(
        &self,
        t: usize,
        mode: MsgMode,
        master_seed: u64,
        round_tag: u64,
    ) -> Result<Message> {
        let payload = match mode {
            MsgMode::Emerged => self.emitted_payload()?,
            MsgMode::Zero => Tensor::zeros(vec![self.cell.cfg.msg_dim]),
            MsgMode::Random => {
                let mut rng = derive_rng(master_seed, &[0x6d73, round_tag, self.cell.id as u64]);
                let data: Vec<Scalar> = (0..self.cell.cfg.msg_dim)
                    .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
                    .collect();
                Tensor::new(vec![self.cell.cfg.msg_dim], data)?
            }
        };
        Ok(Message { sender: self.cell.id, t, payload })
    }

    /// Rollout phase: T recursive steps from the true frame, loss
    /// Σ_τ ‖x_τ − x̂_τ‖²_F over the prediction window, plus round metrics.
    pub fn rollout(
        &mut self,
        t: usize,
        frames: &[Tensor],
        msgs: &MessageSet,
        horizon: usize,
    ) -> Result<NodeRound> {
        self.expect_phase(Phase::Rollout)?;
        if frames.len() != horizon + 1 {
            return Err(ProtocolError::BadWindow { want: horizon + 1, got: frames.len() });
        }
        self.cell.validate_msgs(msgs)?;
        if msgs.t != t {
            return Err(ProtocolError::StaleMessage { node: self.cell.id, t, got: msgs.t });
        }
        let cfg = &self.cell.cfg;
        let mut tape = Tape::new();
        let param_ids = ParamIds::resolve(&tape.params(&self.params, "")?)?;
        let input = tape.constant(&frames[0].reshaped(vec![1, cfg.height, cfg.width])?);
        let h = tape.constant(&self.hidden.grid);
        let payload_ids: Vec<ValueId> = msgs
            .payloads_sorted()
            .map(|(sender, payload)| tape.input(&format!("msg:{sender}"), payload))
            .collect::<crate::tensor::Result<_>>()?;
        let mean = message_mean_on_tape(&mut tape, &payload_ids)?;
        let roll = rollout_on_tape(&mut tape, &param_ids, input, h, mean, cfg, horizon)?;

        let pixels = (cfg.height * cfg.width) as Scalar;
        let mut loss_id: Option<ValueId> = None;
        for (step, &pred) in roll.predictions.iter().enumerate() {
            let target = tape.constant(&frames[step + 1].reshaped(vec![1, cfg.height, cfg.width])?);
            let m = tape.mse_loss(pred, target)?;
            let frob = tape.scalar_mul(m, pixels)?;
            loss_id = Some(match loss_id {
                None => frob,
                Some(acc) => tape.add(acc, frob)?,
            });
        }
        let loss_id = loss_id.expect("horizon ≥ 1");
        let loss = tape.value(loss_id).item() as f64;

        let mut mse_sum = 0.0;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (step, &pred) in roll.predictions.iter().enumerate() {
            let pred_frame = tape.value(pred).reshaped(vec![cfg.height, cfg.width])?;
            let truth = &frames[step + 1];
            mse_sum += metrics::mse(&pred_frame, truth).expect("shapes match");
            psnr_sum += metrics::psnr(&pred_frame, truth, 1.0).expect("shapes match");
            ssim_sum += if cfg.height >= metrics::SSIM_WINDOW && cfg.width >= metrics::SSIM_WINDOW {
                metrics::ssim(&pred_frame, truth).expect("shapes match")
            } else {
                f64::NAN
            };
        }
        let steps = roll.predictions.len() as f64;
        let first_hidden = tape.value(roll.hiddens[0]);
        let round = NodeRound {
            node: self.cell.id,
            loss,
            mse: mse_sum / steps,
            psnr: psnr_sum / steps,
            ssim: ssim_sum / steps,
        };
        let sample = self.lifelong.is_some().then(|| ReplaySample {
            t,
            frames: frames.to_vec(),
            msgs: msgs.payloads_sorted().map(|(s, p)| (s, p.clone())).collect(),
        });
        self.scratch = Some(RoundScratch {
            t,
            tape,
            loss_id,
            loss,
            first_hidden,
            grads: None,
            packet_sum: None,
            sample,
        });
        self.phase = Phase::Backprop;
        Ok(round)
    }

    /// Backprop phase: differentiate the round loss. Returns one packet
    /// per received message in emerged mode; zero and random payloads
    /// carry no trainable sender path, so their exchange is suppressed.
    pub fn backprop(&mut self, mode: MsgMode) -> Result<Vec<GradPacket>> {
        self.expect_phase(Phase::Backprop)?;
        let scratch = self.scratch.as_mut().expect("rollout stored scratch");
        let grads = scratch.tape.backward(scratch.loss_id).map_err(|e| match e {
            TensorError::NonFinite { op } => ProtocolError::NonFiniteGrad {
                node: self.cell.id,
                detail: op,
            },
            other => ProtocolError::Tensor(other),
        })?;
        let mut packets = Vec::new();
        if mode == MsgMode::Emerged {
            for sender in self.cell.expected_senders() {
                let payload = grads
                    .get(&format!("msg:{sender}"))
                    .expect("every registered payload has an adjoint")
                    .clone();
                packets.push(GradPacket {
                    producer: self.cell.id,
                    consumer: sender,
                    t: scratch.t,
                    payload,
                });
            }
        }
        scratch.grads = Some(grads);
        self.phase = Phase::Exchange;
        Ok(packets)
    }

    /// Exchange phase: accept the packets produced in response to this
    /// node's broadcast. `expected` names the producers that must appear
    /// (the nodes that listen to this one, in emerged mode).
    pub fn receive_packets(
        &mut self,
        packets: Vec<GradPacket>,
        expected: &BTreeSet<usize>,
    ) -> Result<()> {
        self.expect_phase(Phase::Exchange)?;
        let scratch = self.scratch.as_mut().expect("rollout stored scratch");
        let mut seen = BTreeSet::new();
        let mut sum: Option<Tensor> = None;
        for packet in packets {
            if packet.consumer != self.cell.id || !expected.contains(&packet.producer) {
                return Err(ProtocolError::UnexpectedPacket {
                    producer: packet.producer,
                    consumer: packet.consumer,
                    t: scratch.t,
                });
            }
            if packet.t != scratch.t {
                return Err(ProtocolError::StalePacket {
                    node: self.cell.id,
                    t: scratch.t,
                    got: packet.t,
                });
            }
            if !seen.insert(packet.producer) {
                return Err(ProtocolError::UnexpectedPacket {
                    producer: packet.producer,
                    consumer: packet.consumer,
                    t: scratch.t,
                });
            }
            sum = Some(match sum {
                None => packet.payload,
                Some(mut acc) => {
                    for (a, p) in acc.data_mut().iter_mut().zip(packet.payload.data()) {
                        *a += p;
                    }
                    acc
                }
            });
        }
        if let Some(&missing) = expected.difference(&seen).next() {
            return Err(ProtocolError::MissingPacket {
                producer: missing,
                consumer: self.cell.id,
                t: scratch.t,
            });
        }
        scratch.packet_sum = sum;
        self.phase = Phase::Step;
        Ok(())
    }

    /// Folds the summed returned packets through the emission graph:
    /// ⟨sum, y⟩ recorded as a 1-row dense product, whose backward seeds
    /// the message adjoint with the packet sum and yields (∂y/∂θ)ᵀ·sum.
    fn emission_correction(
        &self,
        mut em: EmissionScratch,
        sum: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>> {
        let weight = em.tape.constant(&sum.reshaped(vec![1, sum.numel()])?);
        let zero_bias = em.tape.constant(&Tensor::zeros(vec![1]));
        let corr = em.tape.dense(weight, em.msg_id, zero_bias)?;
        let correction = em.tape.backward(corr).map_err(|e| match e {
            TensorError::NonFinite { op } => ProtocolError::NonFiniteGrad {
                node: self.cell.id,
                detail: op,
            },
            other => ProtocolError::Tensor(other),
        })?;
        Ok(correction.into_map())
    }

    fn add_into(acc: &mut BTreeMap<String, Tensor>, name: &str, tensor: &Tensor, keep: &BTreeSet<String>) {
        if !keep.contains(name) {
            return;
        }
        match acc.get_mut(name) {
            Some(sum) => {
                for (a, c) in sum.data_mut().iter_mut().zip(tensor.data()) {
                    *a += c;
                }
            }
            None => {
                acc.insert(name.to_string(), tensor.clone());
            }
        }
    }

    /// Step phase: assemble the full gradient — the local rollout
    /// gradient plus the returned packets folded through the message
    /// Jacobian — then apply, accumulate, or return it.
    pub fn finish_round(&mut self, action: FinishAction) -> Result<Option<BTreeMap<String, Tensor>>> {
        self.expect_phase(Phase::Step)?;
        let scratch = self.scratch.take().expect("rollout stored scratch");
        let emission = self.emission.take();
        let local = scratch.grads.expect("backprop stored gradients");

        let keep: BTreeSet<String> = self.params.names().map(String::from).collect();
        let mut assembled: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in local.iter() {
            Self::add_into(&mut assembled, name, tensor, &keep);
        }
        let head_trainable = !self.frozen.contains(crate::node::slices::MSG_HEAD_WEIGHT);
        if let (Some(sum), Some(em), true) = (scratch.packet_sum, emission, head_trainable) {
            let correction = self.emission_correction(em, &sum)?;
            for (name, tensor) in &correction {
                Self::add_into(&mut assembled, name, tensor, &keep);
            }
        }

        self.hidden = HiddenState {
            node: self.cell.id,
            t: scratch.t + 1,
            grid: scratch.first_hidden,
        };
        self.phase = Phase::Broadcast;

        match action {
            FinishAction::Collect => Ok(Some(assembled)),
            FinishAction::Accumulate | FinishAction::Apply => {
                let grads = Gradients::from_map(assembled);
                self.accum.add_filtered(&grads, &keep)?;
                if action == FinishAction::Apply {
                    let mean = self.accum.mean();
                    self.adam.step(&mut self.params, &mean, &self.frozen)?;
                    self.accum = GradAccum::new();
                }
                Ok(None)
            }
        }
    }

    /// Step phase for continual training: offer the live sample to the
    /// replay buffer under the configured strategy, draw a batch, average
    /// the local replay gradients, fold in the live exchange correction,
    /// and apply one optimizer step.
    pub fn finish_round_lifelong(
        &mut self,
        master_seed: u64,
        round_tag: u64,
        horizon: usize,
    ) -> Result<()> {
        self.expect_phase(Phase::Step)?;
        let norm = self.local_grad_norm();
        let scratch = self.scratch.take().expect("rollout stored scratch");
        let emission = self.emission.take();
        let sample = scratch.sample.expect("lifelong rollout stored the sample");
        let keep: BTreeSet<String> = self.params.names().map(String::from).collect();

        let (strategy, batch) = {
            let state = self.lifelong.as_ref().expect("lifelong state configured");
            (state.strategy, state.batch)
        };
        {
            let state = self.lifelong.as_mut().expect("lifelong state configured");
            match strategy {
                LifelongStrategy::SlidingWindow => state.buffer.sw_offer(sample),
                LifelongStrategy::InterestingData => {
                    state.buffer.id_offer(sample, norm).map_err(|e| {
                        ProtocolError::NonFiniteGrad { node: self.cell.id, detail: e.to_string() }
                    })?;
                }
            }
        }

        let mut accum = GradAccum::new();
        {
            let state = self.lifelong.as_ref().expect("lifelong state configured");
            if state.buffer.is_empty() {
                // Nothing stored yet (a zero-norm opening sample): fall
                // back to the live local gradient.
                let local = scratch.grads.as_ref().expect("backprop stored gradients");
                accum.add_filtered(local, &keep)?;
            } else {
                let mut rng =
                    derive_rng(master_seed, &[0x7265, round_tag, self.cell.id as u64]);
                let drawn: Vec<ReplaySample> = state
                    .buffer
                    .draw_batch(batch, &mut rng)?
                    .into_iter()
                    .cloned()
                    .collect();
                for replay in &drawn {
                    let grads = self.replay_gradient(replay, horizon)?;
                    accum.add_filtered(&Gradients::from_map(grads), &keep)?;
                }
            }
        }
        let mut mean = accum.mean();
        let head_trainable = !self.frozen.contains(crate::node::slices::MSG_HEAD_WEIGHT);
        if let (Some(sum), Some(em), true) = (scratch.packet_sum, emission, head_trainable) {
            let correction = self.emission_correction(em, &sum)?;
            for (name, tensor) in &correction {
                Self::add_into(&mut mean, name, tensor, &keep);
            }
        }
        self.adam.step(&mut self.params, &mean, &self.frozen)?;

        self.hidden = HiddenState {
            node: self.cell.id,
            t: scratch.t + 1,
            grid: scratch.first_hidden,
        };
        self.phase = Phase::Broadcast;
        Ok(())
    }

    /// Local gradient 2-norm of the current round (drives the
    /// interesting-data storage rule). Valid after backprop.
    pub fn local_grad_norm(&self) -> f64 {
        let scratch = self.scratch.as_ref().expect("called after backprop");
        let grads = scratch.grads.as_ref().expect("called after backprop");
        grads.l2_norm_of(self.params.names()) as f64
    }

    /// The loss value of the current round. Valid after rollout.
    pub fn round_loss(&self) -> f64 {
        self.scratch.as_ref().expect("called after rollout").loss
    }

    /// Local-only gradient of one replayed sample: fresh zero hidden
    /// state, stored payloads as constants, no exchange.
    pub fn replay_gradient(&self, sample: &ReplaySample, horizon: usize) -> Result<BTreeMap<String, Tensor>> {
        let cfg = &self.cell.cfg;
        let mut tape = Tape::new();
        let param_ids = ParamIds::resolve(&tape.params(&self.params, "")?)?;
        let input = tape.constant(&sample.frames[0].reshaped(vec![1, cfg.height, cfg.width])?);
        let h = tape.constant(&HiddenState::zeros(cfg, self.cell.id).grid);
        let payload_ids: Vec<ValueId> =
            sample.msgs.iter().map(|(_, payload)| tape.constant(payload)).collect();
        let mean = message_mean_on_tape(&mut tape, &payload_ids)?;
        let roll = rollout_on_tape(&mut tape, &param_ids, input, h, mean, cfg, horizon)?;
        let pixels = (cfg.height * cfg.width) as Scalar;
        let mut loss_id: Option<ValueId> = None;
        for (step, &pred) in roll.predictions.iter().enumerate() {
            let target =
                tape.constant(&sample.frames[step + 1].reshaped(vec![1, cfg.height, cfg.width])?);
            let m = tape.mse_loss(pred, target)?;
            let frob = tape.scalar_mul(m, pixels)?;
            loss_id = Some(match loss_id {
                None => frob,
                Some(acc) => tape.add(acc, frob)?,
            });
        }
        let grads = tape.backward(loss_id.expect("horizon ≥ 1"))?;
        let keep: BTreeSet<String> = self.params.names().map(String::from).collect();
        Ok(grads
            .into_map()
            .into_iter()
            .filter(|(name, _)| keep.contains(name))
            .collect())
    }

    /// Inference-only round: rollout, metric collection, and hidden-state
    /// retention, with no tape kept.
    pub fn eval_round(
        &mut self,
        t: usize,
        frames: &[Tensor],
        msgs: &MessageSet,
        horizon: usize,
    ) -> Result<NodeRound> {
        if frames.len() != horizon + 1 {
            return Err(ProtocolError::BadWindow { want: horizon + 1, got: frames.len() });
        }
        self.cell.validate_msgs(msgs)?;
        if msgs.t != t {
            return Err(ProtocolError::StaleMessage { node: self.cell.id, t, got: msgs.t });
        }
        let roll = self.cell.rollout(&self.params, &frames[0], &self.hidden, msgs, horizon)?;
        let cfg = &self.cell.cfg;
        let pixels = (cfg.height * cfg.width) as f64;
        let mut loss = 0.0;
        let mut mse_sum = 0.0;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (step, pred) in roll.predictions.iter().enumerate() {
            let pred_frame = pred.reshaped(vec![cfg.height, cfg.width])?;
            let truth = &frames[step + 1];
            let m = metrics::mse(&pred_frame, truth).expect("shapes match");
            loss += m * pixels;
            mse_sum += m;
            psnr_sum += metrics::psnr(&pred_frame, truth, 1.0).expect("shapes match");
            ssim_sum += if cfg.height >= metrics::SSIM_WINDOW && cfg.width >= metrics::SSIM_WINDOW {
                metrics::ssim(&pred_frame, truth).expect("shapes match")
            } else {
                f64::NAN
            };
        }
        self.hidden = roll.hiddens[0].clone();
        let steps = horizon as f64;
        Ok(NodeRound {
            node: self.cell.id,
            loss,
            mse: mse_sum / steps,
            psnr: psnr_sum / steps,
            ssim: ssim_sum / steps,
        })
    }
}

/// Builds the expected packet producers for each node: in emerged mode,
/// node i awaits one packet from every node that listens to it.
pub fn expected_packet_producers(
    topology: &crate::world::Topology,
    node: usize,
    mode: MsgMode,
    self_message: bool,
) -> BTreeSet<usize> {
    if mode != MsgMode::Emerged {
        return BTreeSet::new();
    }
    let mut set = topology.receivers_of(node);
    if self_message {
        set.insert(node);
    }
    set
}

/// Default eviction for interesting-data buffers.
pub fn default_eviction(strategy: LifelongStrategy) -> EvictionPolicy {
    match strategy {
        LifelongStrategy::SlidingWindow => EvictionPolicy::Fifo,
        LifelongStrategy::InterestingData => EvictionPolicy::SmallestNorm,
    }
}
