//! One advisor's predictor and message generator.
//!
//! A node keeps a recurrent feature grid `h` and steps it with three
//! inputs: the current frame (or its own previous prediction), the
//! previous hidden state, and the mean of the message payloads received
//! this round. Each step emits the next frame prediction, the next hidden
//! state, and an outgoing message pooled from the hidden state:
//!
//! ```text
//! h'   = tanh(conv(x, enc) + conv(h, rec) + broadcast(dense(m̄, msg_in)))
//! x̂    = sigmoid(conv(h', out))
//! y'   = dense(global_avg_pool(h'), msg_head)
//! ```
//!
//! When a node has no senders the message pathway is skipped entirely, so
//! its output is independent of the `msg_in` slices and their gradients
//! are exactly zero.

mod pretrain;

pub use pretrain::{apply_pretrained, pretrain_message_ae, PretrainResult, MIN_PRETRAIN_FRAMES};

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParameterSet, Result as TensorResult, Scalar, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("node {node}: message set mismatch: missing senders {missing:?}, unexpected senders {extra:?}")]
    ProtocolViolation {
        node: usize,
        missing: Vec<usize>,
        extra: Vec<usize>,
    },
    #[error("message from {sender} has {got} entries, the network message dimension is {want}")]
    BadMessageDim { sender: usize, got: usize, want: usize },
    #[error("message from {sender} is stamped t={got}, expected t={want}")]
    BadMessageTime { sender: usize, got: usize, want: usize },
    #[error("duplicate message from sender {0}")]
    DuplicateSender(usize),
    #[error("rollout horizon must be ≥ 1")]
    ZeroHorizon,
    #[error("receding advance called before any rollout")]
    NotStarted,
    #[error("pretraining needs at least {min} frames, got {got}")]
    SampleTooSmall { got: usize, min: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// What replaces the received message set at rollout steps beyond the
/// first, where real future messages do not exist yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutMsgs {
    /// Repeat the last received set (default).
    Hold,
    /// Feed zero payloads.
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden feature channels. Desk-scale default 8 (the reference
    /// full-scale setting uses 128).
    pub hidden_channels: usize,
    /// Message dimension, fixed a priori across the network. Default 16.
    pub msg_dim: usize,
    /// Convolution kernel extent, odd. Desk-scale default 3 (full-scale
    /// reference setting: 5).
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub rollout_msgs: RolloutMsgs,
    /// Feed the node's own broadcast back to itself as an extra sender.
    pub self_message: bool,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize) -> Self {
        ModelConfig {
            hidden_channels: 8,
            msg_dim: 16,
            kernel: 3,
            height,
            width,
            rollout_msgs: RolloutMsgs::Hold,
            self_message: false,
        }
    }
}

pub mod slices {
    pub const ENC_KERNEL: &str = "enc_kernel";
    pub const ENC_BIAS: &str = "enc_bias";
    pub const REC_KERNEL: &str = "rec_kernel";
    pub const REC_BIAS: &str = "rec_bias";
    pub const MSG_IN_WEIGHT: &str = "msg_in_weight";
    pub const MSG_IN_BIAS: &str = "msg_in_bias";
    pub const OUT_KERNEL: &str = "out_kernel";
    pub const OUT_BIAS: &str = "out_bias";
    pub const MSG_HEAD_WEIGHT: &str = "msg_head_weight";
    pub const MSG_HEAD_BIAS: &str = "msg_head_bias";

    pub const ALL: [&str; 10] = [
        ENC_KERNEL,
        ENC_BIAS,
        REC_KERNEL,
        REC_BIAS,
        MSG_IN_WEIGHT,
        MSG_IN_BIAS,
        OUT_KERNEL,
        OUT_BIAS,
        MSG_HEAD_WEIGHT,
        MSG_HEAD_BIAS,
    ];
}

fn slice_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let c = cfg.hidden_channels;
    let d = cfg.msg_dim;
    let k = cfg.kernel;
    vec![
        (slices::ENC_KERNEL, vec![c, 1, k, k]),
        (slices::ENC_BIAS, vec![c]),
        (slices::REC_KERNEL, vec![c, c, k, k]),
        (slices::REC_BIAS, vec![c]),
        (slices::MSG_IN_WEIGHT, vec![c, d]),
        (slices::MSG_IN_BIAS, vec![c]),
        (slices::OUT_KERNEL, vec![1, c, k, k]),
        (slices::OUT_BIAS, vec![1]),
        (slices::MSG_HEAD_WEIGHT, vec![d, c]),
        (slices::MSG_HEAD_BIAS, vec![d]),
    ]
}

/// Fresh parameters: weights uniform in ±1/√fan_in, biases zero.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParameterSet {
    let mut entries = Vec::new();
    for (name, shape) in slice_shapes(cfg) {
        let tensor = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as Scalar).sqrt();
            Tensor::uniform(shape, bound, rng)
        };
        entries.push((name.to_string(), tensor));
    }
    ParameterSet::new(entries).expect("slice names are unique")
}

/// All-zero parameters (useful as the degenerate reference: every
/// prediction is exactly 0.5 and every message zero).
pub fn zero_params(cfg: &ModelConfig) -> ParameterSet {
    ParameterSet::new(
        slice_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| (name.to_string(), Tensor::zeros(shape))),
    )
    .expect("slice names are unique")
}

/// Recurrent feature grid `[C_h, H, W]`, zero-initialized at t = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub node: usize,
    pub t: usize,
    pub grid: Tensor,
}

impl HiddenState {
    pub fn zeros(cfg: &ModelConfig, node: usize) -> Self {
        HiddenState {
            node,
            t: 0,
            grid: Tensor::zeros(vec![cfg.hidden_channels, cfg.height, cfg.width]),
        }
    }
}

/// One broadcast payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub t: usize,
    pub payload: Tensor,
}

/// The messages one node received for a round, keyed by sender.
#[derive(Clone, Debug)]
pub struct MessageSet {
    pub receiver: usize,
    pub t: usize,
    msgs: BTreeMap<usize, Message>,
}

impl MessageSet {
    pub fn new(receiver: usize, t: usize) -> Self {
        MessageSet { receiver, t, msgs: BTreeMap::new() }
    }

    pub fn insert(&mut self, msg: Message) -> Result<()> {
        if msg.t != self.t {
            return Err(NodeError::BadMessageTime { sender: msg.sender, got: msg.t, want: self.t });
        }
        let sender = msg.sender;
        if self.msgs.insert(sender, msg).is_some() {
            return Err(NodeError::DuplicateSender(sender));
        }
        Ok(())
    }

    pub fn senders(&self) -> BTreeSet<usize> {
        self.msgs.keys().copied().collect()
    }

    /// (sender, payload) in ascending sender order — the canonical order
    /// for aggregation, which keeps outputs identical under any arrival
    /// permutation.
    pub fn payloads_sorted(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.msgs.iter().map(|(&s, m)| (s, &m.payload))
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }
}

/// Resolved tape ids for every parameter slice.
#[derive(Clone, Copy, Debug)]
pub struct ParamIds {
    pub enc_kernel: ValueId,
    pub enc_bias: ValueId,
    pub rec_kernel: ValueId,
    pub rec_bias: ValueId,
    pub msg_in_weight: ValueId,
    pub msg_in_bias: ValueId,
    pub out_kernel: ValueId,
    pub out_bias: ValueId,
    pub msg_head_weight: ValueId,
    pub msg_head_bias: ValueId,
}

impl ParamIds {
    pub fn resolve(map: &BTreeMap<String, ValueId>) -> TensorResult<Self> {
        let get = |name: &str| -> TensorResult<ValueId> {
            map.get(name).copied().ok_or_else(|| TensorError::MissingSlice(name.into()))
        };
        Ok(ParamIds {
            enc_kernel: get(slices::ENC_KERNEL)?,
            enc_bias: get(slices::ENC_BIAS)?,
            rec_kernel: get(slices::REC_KERNEL)?,
            rec_bias: get(slices::REC_BIAS)?,
            msg_in_weight: get(slices::MSG_IN_WEIGHT)?,
            msg_in_bias: get(slices::MSG_IN_BIAS)?,
            out_kernel: get(slices::OUT_KERNEL)?,
            out_bias: get(slices::OUT_BIAS)?,
            msg_head_weight: get(slices::MSG_HEAD_WEIGHT)?,
            msg_head_bias: get(slices::MSG_HEAD_BIAS)?,
        })
    }
}

/// Ids produced by one recorded step.
#[derive(Clone, Copy, Debug)]
pub struct StepIds {
    pub prediction: ValueId,
    pub hidden: ValueId,
    pub message: ValueId,
}

/// Mean of already-registered payload ids (ascending sender order);
/// `None` for an empty set.
pub fn message_mean_on_tape(tape: &mut Tape, payloads: &[ValueId]) -> TensorResult<Option<ValueId>> {
    let Some((&first, rest)) = payloads.split_first() else {
        return Ok(None);
    };
    let mut sum = first;
    for &p in rest {
        sum = tape.add(sum, p)?;
    }
    Ok(Some(tape.scalar_mul(sum, 1.0 / payloads.len() as Scalar)?))
}

/// Records one model step on the caller's tape. All outputs are
/// differentiable w.r.t. the parameters, the input, and (through
/// `msg_mean`) every incoming payload.
pub fn step_on_tape(
    tape: &mut Tape,
    p: &ParamIds,
    input: ValueId,
    hidden: ValueId,
    msg_mean: Option<ValueId>,
    cfg: &ModelConfig,
) -> TensorResult<StepIds> {
    let enc = tape.conv2d(input, p.enc_kernel, p.enc_bias)?;
    let rec = tape.conv2d(hidden, p.rec_kernel, p.rec_bias)?;
    let mut pre = tape.add(enc, rec)?;
    if let Some(mean) = msg_mean {
        let proj = tape.dense(p.msg_in_weight, mean, p.msg_in_bias)?;
        let grid = tape.broadcast_grid(proj, cfg.height, cfg.width)?;
        pre = tape.add(pre, grid)?;
    }
    let hidden_next = tape.tanh(pre)?;
    let out = tape.conv2d(hidden_next, p.out_kernel, p.out_bias)?;
    let prediction = tape.sigmoid(out)?;
    let pooled = tape.global_avg_pool(hidden_next)?;
    let message = tape.dense(p.msg_head_weight, pooled, p.msg_head_bias)?;
    Ok(StepIds { prediction, hidden: hidden_next, message })
}

/// Ids of a `T`-step recursive rollout: the first step consumes the true
/// frame, later steps consume the previous prediction, and the message
/// input follows `cfg.rollout_msgs`.
#[derive(Clone, Debug)]
pub struct RolloutIds {
    pub predictions: Vec<ValueId>,
    pub hiddens: Vec<ValueId>,
    pub messages: Vec<ValueId>,
}

pub fn rollout_on_tape(
    tape: &mut Tape,
    p: &ParamIds,
    frame: ValueId,
    hidden: ValueId,
    msg_mean: Option<ValueId>,
    cfg: &ModelConfig,
    horizon: usize,
) -> Result<RolloutIds> {
    if horizon == 0 {
        return Err(NodeError::ZeroHorizon);
    }
    let later_mean = match (cfg.rollout_msgs, msg_mean) {
        (RolloutMsgs::Hold, m) => m,
        (RolloutMsgs::Zero, Some(_)) => {
            Some(tape.constant(&Tensor::zeros(vec![cfg.msg_dim])))
        }
        (RolloutMsgs::Zero, None) => None,
    };
    let mut out = RolloutIds {
        predictions: Vec::with_capacity(horizon),
        hiddens: Vec::with_capacity(horizon),
        messages: Vec::with_capacity(horizon),
    };
    let mut input = frame;
    let mut h = hidden;
    for step in 0..horizon {
        let mean = if step == 0 { msg_mean } else { later_mean };
        let ids = step_on_tape(tape, p, input, h, mean, cfg)?;
        input = ids.prediction;
        h = ids.hidden;
        out.predictions.push(ids.prediction);
        out.hiddens.push(ids.hidden);
        out.messages.push(ids.message);
    }
    Ok(out)
}

/// One advisor's identity: id, listen set, and model hyperparameters.
#[derive(Clone, Debug)]
pub struct NodeCell {
    pub id: usize,
    pub neighbors: BTreeSet<usize>,
    pub cfg: ModelConfig,
}

/// Concrete outputs of an inference step or rollout.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub prediction: Tensor,
    pub hidden: HiddenState,
    pub message: Message,
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub predictions: Vec<Tensor>,
    pub hiddens: Vec<HiddenState>,
    pub messages: Vec<Message>,
}

impl NodeCell {
    pub fn new(id: usize, neighbors: BTreeSet<usize>, cfg: ModelConfig) -> Self {
        NodeCell { id, neighbors, cfg }
    }

    /// Senders this node must hear from each round.
    pub fn expected_senders(&self) -> BTreeSet<usize> {
        let mut set = self.neighbors.clone();
        if self.cfg.self_message {
            set.insert(self.id);
        }
        set
    }

    /// Rejects a message set whose sender key set differs from the listen
    /// set, naming the missing and unexpected senders.
    pub fn validate_msgs(&self, msgs: &MessageSet) -> Result<()> {
        let expected = self.expected_senders();
        let got = msgs.senders();
        if expected != got {
            return Err(NodeError::ProtocolViolation {
                node: self.id,
                missing: expected.difference(&got).copied().collect(),
                extra: got.difference(&expected).copied().collect(),
            });
        }
        for (sender, payload) in msgs.payloads_sorted() {
            if payload.numel() != self.cfg.msg_dim {
                return Err(NodeError::BadMessageDim {
                    sender,
                    got: payload.numel(),
                    want: self.cfg.msg_dim,
                });
            }
        }
        Ok(())
    }

    fn frame_as_input(&self, frame: &Tensor) -> Result<Tensor> {
        Ok(frame.reshaped(vec![1, self.cfg.height, self.cfg.width])?)
    }

    fn register_msgs(&self, tape: &mut Tape, msgs: &MessageSet) -> Result<Option<ValueId>> {
        let ids: Vec<ValueId> = msgs
            .payloads_sorted()
            .map(|(_, payload)| tape.constant(payload))
            .collect();
        Ok(message_mean_on_tape(tape, &ids)?)
    }

    /// Single inference step on a private tape.
    pub fn step(
        &self,
        params: &ParameterSet,
        frame: &Tensor,
        hidden: &HiddenState,
        msgs: &MessageSet,
    ) -> Result<StepOutput> {
        self.validate_msgs(msgs)?;
        let mut tape = Tape::new();
        let param_ids = ParamIds::resolve(&tape.params(params, "")?)?;
        let input = tape.constant(&self.frame_as_input(frame)?);
        let h = tape.constant(&hidden.grid);
        let mean = self.register_msgs(&mut tape, msgs)?;
        let ids = step_on_tape(&mut tape, &param_ids, input, h, mean, &self.cfg)?;
        Ok(StepOutput {
            prediction: tape.value(ids.prediction),
            hidden: HiddenState { node: self.id, t: hidden.t + 1, grid: tape.value(ids.hidden) },
            message: Message { sender: self.id, t: hidden.t + 1, payload: tape.value(ids.message) },
        })
    }

    /// Recursive inference rollout on a private tape.
    pub fn rollout(
        &self,
        params: &ParameterSet,
        frame: &Tensor,
        hidden: &HiddenState,
        msgs: &MessageSet,
        horizon: usize,
    ) -> Result<RolloutOutput> {
        self.validate_msgs(msgs)?;
        let mut tape = Tape::new();
        let param_ids = ParamIds::resolve(&tape.params(params, "")?)?;
        let input = tape.constant(&self.frame_as_input(frame)?);
        let h = tape.constant(&hidden.grid);
        let mean = self.register_msgs(&mut tape, msgs)?;
        let ids = rollout_on_tape(&mut tape, &param_ids, input, h, mean, &self.cfg, horizon)?;
        Ok(RolloutOutput {
            predictions: ids.predictions.iter().map(|&id| tape.value(id)).collect(),
            hiddens: ids
                .hiddens
                .iter()
                .enumerate()
                .map(|(i, &id)| HiddenState {
                    node: self.id,
                    t: hidden.t + 1 + i,
                    grid: tape.value(id),
                })
                .collect(),
            messages: ids
                .messages
                .iter()
                .enumerate()
                .map(|(i, &id)| Message {
                    sender: self.id,
                    t: hidden.t + 1 + i,
                    payload: tape.value(id),
                })
                .collect(),
        })
    }
}

/// Streaming deployment state: at each new timestep the node re-predicts
/// a full horizon, keeping only the first-step hidden state of the
/// previous rollout as its carry-over.
#[derive(Clone, Debug)]
pub struct NodeRuntime {
    pub cell: NodeCell,
    pub params: ParameterSet,
    hidden: HiddenState,
    started: bool,
}

impl NodeRuntime {
    pub fn new(cell: NodeCell, params: ParameterSet) -> Self {
        let hidden = HiddenState::zeros(&cell.cfg, cell.id);
        NodeRuntime { cell, params, hidden, started: false }
    }

    pub fn hidden(&self) -> &HiddenState {
        &self.hidden
    }

    /// Overrides the carried state (checkpoint restore).
    pub fn set_hidden(&mut self, hidden: HiddenState) {
        self.hidden = hidden;
    }

    /// Rolls out from the current carry-over state and retains exactly
    /// the first-step hidden state for the next advance.
    pub fn rollout(
        &mut self,
        frame: &Tensor,
        msgs: &MessageSet,
        horizon: usize,
    ) -> Result<RolloutOutput> {
        let out = self.cell.rollout(&self.params, frame, &self.hidden, msgs, horizon)?;
        self.hidden = out.hiddens[0].clone();
        self.started = true;
        Ok(out)
    }

    /// The receding-horizon advance; rejected before the first rollout.
    pub fn receding_advance(
        &mut self,
        frame: &Tensor,
        msgs: &MessageSet,
        horizon: usize,
    ) -> Result<RolloutOutput> {
        if !self.started {
            return Err(NodeError::NotStarted);
        }
        self.rollout(frame, msgs, horizon)
    }
}
