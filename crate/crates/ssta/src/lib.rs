//! Networked self-supervised traffic advisors.
//!
//! A traffic advisor is a statically mounted camera node that predicts its
//! own future frames with a small recurrent-convolutional cell and learns
//! what to tell its neighbors: each round it broadcasts a fixed-dimension
//! latent message, receives messages from nearby nodes, and returns the
//! gradient of its own prediction loss with respect to each received
//! message so senders can improve what they say. Every node trains its own
//! parameters; nothing is averaged or shared beyond messages and their
//! loss gradients.
//!
//! The crate is organized around that loop:
//!
//! - [`tensor`] — dense arrays with reverse-mode differentiation over the
//!   fixed op set the predictor needs, plus the wire format used by
//!   checkpoints and gradient packets.
//! - [`world`] — a seeded synthetic multi-view traffic generator: vehicles
//!   on a grid road network, rendered per camera view, with a
//!   Manhattan-distance k-nearest topology builder.
//! - [`node`] — one advisor's predictor and message head: recursive
//!   rollout with hidden state, receding-horizon streaming, and the
//!   autoencoder pretrainer for the message pathway.
//! - [`protocol`] — lockstep co-training rounds (broadcast, rollout,
//!   backprop, exchange, step), the centralized gradient oracle used to
//!   verify the distributed assembly, serial and parallel schedulers, and
//!   the training driver with checkpointing.
//! - [`lifelong`] — bounded replay buffers for online training: sliding
//!   window and gradient-norm-gated storage.
//! - [`metrics`] — MSE, PSNR and single-scale SSIM.
//! - [`experiments`] — paired-seed ablation suites (message type,
//!   connectivity, lifelong strategy) and frame dumps.
//!
//! See the crate examples for runnable entry points into each capability,
//! and the `ssta` binary for the `gen-world` / `train` / `eval` / `ablate`
//! subcommands.

pub mod tensor;
pub mod experiments;
pub mod lifelong;
pub mod metrics;
pub mod node;
pub mod optim;
pub mod protocol;
pub mod world;
