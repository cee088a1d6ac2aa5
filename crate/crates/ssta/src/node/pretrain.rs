//! Message-pathway pretraining.
//!
//! A small autoencoder — the node's frame encoder plus message head as
//! the encoder, a linear decoder back to the full frame — is trained by
//! MSE reconstruction on a sample of frames. Its encoder weights then
//! initialize the message pathway before end-to-end co-training.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{slices, ModelConfig, NodeError, Result};
use crate::optim::Adam;
use crate::tensor::{ParameterSet, Scalar, Tape, Tensor};

pub const MIN_PRETRAIN_FRAMES: usize = 100;
const BATCH: usize = 10;

/// Encoder weights learned by reconstruction, plus the sample
/// reconstruction error before and after training.
#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub enc_kernel: Tensor,
    pub enc_bias: Tensor,
    pub msg_head_weight: Tensor,
    pub msg_head_bias: Tensor,
    pub initial_mse: f64,
    pub final_mse: f64,
}

fn ae_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParameterSet {
    let c = cfg.hidden_channels;
    let d = cfg.msg_dim;
    let k = cfg.kernel;
    let pixels = cfg.height * cfg.width;
    let conv_bound = 1.0 / ((k * k) as Scalar).sqrt();
    let head_bound = 1.0 / (c as Scalar).sqrt();
    let dec_bound = 1.0 / (d as Scalar).sqrt();
    ParameterSet::new(vec![
        (slices::ENC_KERNEL.to_string(), Tensor::uniform(vec![c, 1, k, k], conv_bound, rng)),
        (slices::ENC_BIAS.to_string(), Tensor::zeros(vec![c])),
        (slices::MSG_HEAD_WEIGHT.to_string(), Tensor::uniform(vec![d, c], head_bound, rng)),
        (slices::MSG_HEAD_BIAS.to_string(), Tensor::zeros(vec![d])),
        ("dec_weight".to_string(), Tensor::uniform(vec![pixels, d], dec_bound, rng)),
        ("dec_bias".to_string(), Tensor::zeros(vec![pixels])),
    ])
    .expect("slice names are unique")
}

/// Mean reconstruction MSE of the autoencoder over `frames`.
fn reconstruction_mse(cfg: &ModelConfig, params: &ParameterSet, frames: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for frame in frames {
        let mut tape = Tape::new();
        let ids = tape.params(params, "")?;
        let loss = ae_frame_loss(&mut tape, &ids, cfg, frame)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / frames.len() as f64)
}

fn ae_frame_loss(
    tape: &mut Tape,
    ids: &BTreeMap<String, crate::tensor::ValueId>,
    cfg: &ModelConfig,
    frame: &Tensor,
) -> Result<crate::tensor::ValueId> {
    let pixels = cfg.height * cfg.width;
    let input = tape.constant(&frame.reshaped(vec![1, cfg.height, cfg.width])?);
    let conv = tape.conv2d(input, ids[slices::ENC_KERNEL], ids[slices::ENC_BIAS])?;
    let act = tape.tanh(conv)?;
    let pooled = tape.global_avg_pool(act)?;
    let code = tape.dense(ids[slices::MSG_HEAD_WEIGHT], pooled, ids[slices::MSG_HEAD_BIAS])?;
    let recon = tape.dense(ids["dec_weight"], code, ids["dec_bias"])?;
    let target = tape.constant(&frame.reshaped(vec![pixels])?);
    Ok(tape.mse_loss(recon, target)?)
}

/// Trains the autoencoder for `epochs` passes over `frames` (mini-batches
/// of 10, fixed order) and returns the encoder initialization for the
/// message pathway. Requires at least [`MIN_PRETRAIN_FRAMES`] frames.
pub fn pretrain_message_ae<R: Rng>(
    cfg: &ModelConfig,
    frames: &[Tensor],
    epochs: usize,
    lr: Scalar,
    rng: &mut R,
) -> Result<PretrainResult> {
    if frames.len() < MIN_PRETRAIN_FRAMES {
        return Err(NodeError::SampleTooSmall { got: frames.len(), min: MIN_PRETRAIN_FRAMES });
    }
    let mut params = ae_params(cfg, rng);
    let initial_mse = reconstruction_mse(cfg, &params, frames)?;
    let mut adam = Adam::new(lr);
    for _ in 0..epochs {
        for batch in frames.chunks(BATCH) {
            let mut tape = Tape::new();
            let ids = tape.params(&params, "")?;
            let mut loss: Option<crate::tensor::ValueId> = None;
            for frame in batch {
                let l = ae_frame_loss(&mut tape, &ids, cfg, frame)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = loss.expect("batches are non-empty");
            let mean = tape.scalar_mul(total, 1.0 / batch.len() as Scalar)?;
            let grads = tape.backward(mean)?;
            adam.step(&mut params, &grads.into_map(), &BTreeSet::new())?;
        }
    }
    let final_mse = reconstruction_mse(cfg, &params, frames)?;
    Ok(PretrainResult {
        enc_kernel: params.get(slices::ENC_KERNEL)?.clone(),
        enc_bias: params.get(slices::ENC_BIAS)?.clone(),
        msg_head_weight: params.get(slices::MSG_HEAD_WEIGHT)?.clone(),
        msg_head_bias: params.get(slices::MSG_HEAD_BIAS)?.clone(),
        initial_mse,
        final_mse,
    })
}

/// Copies the pretrained encoder into a node's message pathway.
pub fn apply_pretrained(params: &mut ParameterSet, pre: &PretrainResult) -> Result<()> {
    params.set(slices::ENC_KERNEL, pre.enc_kernel.clone())?;
    params.set(slices::ENC_BIAS, pre.enc_bias.clone())?;
    params.set(slices::MSG_HEAD_WEIGHT, pre.msg_head_weight.clone())?;
    params.set(slices::MSG_HEAD_BIAS, pre.msg_head_bias.clone())?;
    Ok(())
}
