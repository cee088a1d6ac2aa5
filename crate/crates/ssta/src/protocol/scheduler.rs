//! Round schedulers.
//!
//! The serial scheduler drives every phase over the nodes in id order on
//! one thread; the parallel scheduler runs one worker thread per node
//! behind a coordinator that enforces the same five-phase barrier. Both
//! implement the identical phase contract, and the parallel coordinator
//! moves messages, packets, and frames between threads only as serialized
//! byte copies over bounded queues.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;

use super::{
    expected_packet_producers, FinishAction, GradPacket, MsgMode, NodeRound, NodeWorker,
    ProtocolError, Result,
};
use crate::node::{Message, MessageSet};
use crate::tensor::{from_bytes, to_bytes, Tensor};
use crate::world::Topology;

#[derive(Clone, Debug)]
pub struct RoundOpts {
    /// Dataset time of the round (frames window starts here).
    pub t: usize,
    /// Global round counter across epochs, used for seed derivation.
    pub round_tag: u64,
    pub horizon: usize,
    pub mode: MsgMode,
    pub seed: u64,
    pub action: FinishAction,
    /// Run the continual-learning step phase instead of the standard one.
    pub lifelong: bool,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub per_node: BTreeMap<usize, NodeRound>,
    /// Assembled per-node gradients when the action was `Collect`.
    pub grads: Option<BTreeMap<usize, BTreeMap<String, Tensor>>>,
}

/// Routes one broadcast set into per-receiver message sets.
fn build_inboxes(
    workers: &BTreeMap<usize, NodeWorker>,
    outgoing: &BTreeMap<usize, Message>,
    t: usize,
) -> Result<BTreeMap<usize, MessageSet>> {
    let mut inboxes = BTreeMap::new();
    for (&id, worker) in workers {
        let mut set = MessageSet::new(id, t);
        for sender in worker.cell.expected_senders() {
            let msg = outgoing.get(&sender).ok_or(ProtocolError::MissingPacket {
                producer: sender,
                consumer: id,
                t,
            })?;
            set.insert(msg.clone()).map_err(ProtocolError::Node)?;
        }
        inboxes.insert(id, set);
    }
    Ok(inboxes)
}

/// One full lockstep round on the current thread, nodes visited in id
/// order within each phase.
pub fn serial_round(
    workers: &mut BTreeMap<usize, NodeWorker>,
    topology: &Topology,
    frames: &BTreeMap<usize, Vec<Tensor>>,
    opts: &RoundOpts,
) -> Result<RoundReport> {
    // Phase 1: broadcast.
    let mut outgoing = BTreeMap::new();
    for (&id, worker) in workers.iter_mut() {
        outgoing.insert(id, worker.broadcast(opts.t, opts.mode, opts.seed, opts.round_tag)?);
    }
    let inboxes = build_inboxes(workers, &outgoing, opts.t)?;

    // Phase 2: rollout.
    let mut per_node = BTreeMap::new();
    for (&id, worker) in workers.iter_mut() {
        let window = frames
            .get(&id)
            .ok_or(ProtocolError::BadWindow { want: opts.horizon + 1, got: 0 })?;
        let round = worker.rollout(opts.t, window, &inboxes[&id], opts.horizon)?;
        per_node.insert(id, round);
    }

    // Phase 3: backprop.
    let mut packets: Vec<GradPacket> = Vec::new();
    for worker in workers.values_mut() {
        packets.extend(worker.backprop(opts.mode)?);
    }

    // Phase 4: exchange.
    let mut routed: BTreeMap<usize, Vec<GradPacket>> =
        workers.keys().map(|&id| (id, Vec::new())).collect();
    for packet in packets {
        routed
            .get_mut(&packet.consumer)
            .ok_or(ProtocolError::UnexpectedPacket {
                producer: packet.producer,
                consumer: packet.consumer,
                t: opts.t,
            })?
            .push(packet);
    }
    for (&id, worker) in workers.iter_mut() {
        let expected = expected_packet_producers(
            topology,
            id,
            opts.mode,
            worker.cell.cfg.self_message,
        );
        worker.receive_packets(routed.remove(&id).unwrap_or_default(), &expected)?;
    }

    // Phase 5: step.
    let mut grads = None;
    for (&id, worker) in workers.iter_mut() {
        if opts.lifelong {
            worker.finish_round_lifelong(opts.seed, opts.round_tag, opts.horizon)?;
        } else if let Some(assembled) = worker.finish_round(opts.action)? {
            grads.get_or_insert_with(BTreeMap::new).insert(id, assembled);
        }
    }
    Ok(RoundReport { per_node, grads })
}

// ── Parallel lockstep ───────────────────────────────────────────────

fn encode_message(msg: &Message) -> Vec<u8> {
    to_bytes(&format!("msg|{}|{}", msg.sender, msg.t), &msg.payload)
}

fn decode_message(bytes: &[u8]) -> Result<Message> {
    let (name, payload) = from_bytes(bytes)?;
    let mut parts = name.split('|');
    let (Some("msg"), Some(sender), Some(t)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(ProtocolError::WorkerLost(format!("bad message framing {name:?}")));
    };
    Ok(Message {
        sender: sender.parse().map_err(|_| ProtocolError::WorkerLost(name.clone()))?,
        t: t.parse().map_err(|_| ProtocolError::WorkerLost(name.clone()))?,
        payload,
    })
}

fn encode_packet(packet: &GradPacket) -> Vec<u8> {
    to_bytes(
        &format!("pkt|{}|{}|{}", packet.producer, packet.consumer, packet.t),
        &packet.payload,
    )
}

fn decode_packet(bytes: &[u8]) -> Result<GradPacket> {
    let (name, payload) = from_bytes(bytes)?;
    let mut parts = name.split('|');
    let (Some("pkt"), Some(producer), Some(consumer), Some(t)) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(ProtocolError::WorkerLost(format!("bad packet framing {name:?}")));
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ProtocolError::WorkerLost(name.clone()));
    Ok(GradPacket {
        producer: parse(producer)?,
        consumer: parse(consumer)?,
        t: parse(t)?,
        payload,
    })
}

enum Cmd {
    Broadcast { t: usize, round_tag: u64, mode: MsgMode, seed: u64 },
    Rollout { t: usize, horizon: usize, frames: Vec<Vec<u8>>, msgs: Vec<Vec<u8>> },
    Backprop { mode: MsgMode },
    Finish {
        expected: BTreeSet<usize>,
        packets: Vec<Vec<u8>>,
        apply_now: bool,
        lifelong: Option<(u64, u64, usize)>,
    },
    ResetHidden,
    TakeWorker,
}

enum Reply {
    Message(Vec<u8>),
    Rollout(NodeRound),
    Packets(Vec<Vec<u8>>),
    Finished,
    Worker(Box<NodeWorker>),
    Failed(String),
}

fn worker_loop(mut worker: NodeWorker, cmds: Receiver<Cmd>, replies: SyncSender<Reply>) {
    while let Ok(cmd) = cmds.recv() {
        let reply = match cmd {
            Cmd::Broadcast { t, round_tag, mode, seed } => worker
                .broadcast(t, mode, seed, round_tag)
                .map(|msg| Reply::Message(encode_message(&msg))),
            Cmd::Rollout { t, horizon, frames, msgs } => (|| {
                let mut window = Vec::with_capacity(frames.len());
                for bytes in &frames {
                    window.push(from_bytes(bytes)?.1);
                }
                let mut set = MessageSet::new(worker.id(), t);
                for bytes in &msgs {
                    set.insert(decode_message(bytes)?).map_err(ProtocolError::Node)?;
                }
                worker.rollout(t, &window, &set, horizon).map(Reply::Rollout)
            })(),
            Cmd::Backprop { mode } => worker
                .backprop(mode)
                .map(|packets| Reply::Packets(packets.iter().map(encode_packet).collect())),
            Cmd::Finish { expected, packets, apply_now, lifelong } => (|| {
                let mut decoded = Vec::with_capacity(packets.len());
                for bytes in &packets {
                    decoded.push(decode_packet(bytes)?);
                }
                worker.receive_packets(decoded, &expected)?;
                match lifelong {
                    Some((seed, round_tag, horizon)) => {
                        worker.finish_round_lifelong(seed, round_tag, horizon)?;
                    }
                    None => {
                        let action =
                            if apply_now { FinishAction::Apply } else { FinishAction::Accumulate };
                        worker.finish_round(action)?;
                    }
                }
                Ok(Reply::Finished)
            })(),
            Cmd::ResetHidden => {
                worker.reset_hidden();
                Ok(Reply::Finished)
            }
            Cmd::TakeWorker => {
                let _ = replies.send(Reply::Worker(Box::new(worker)));
                return;
            }
        };
        let out = match reply {
            Ok(r) => r,
            Err(e) => Reply::Failed(e.to_string()),
        };
        if replies.send(out).is_err() {
            return;
        }
    }
}

/// One worker thread per node plus this coordinator, exchanging
/// serialized payloads over bounded queues under a five-phase barrier.
pub struct ParallelSession {
    topology: Topology,
    channels: BTreeMap<usize, (SyncSender<Cmd>, Receiver<Reply>)>,
    listen_sets: BTreeMap<usize, BTreeSet<usize>>,
    self_message: BTreeMap<usize, bool>,
    handles: Vec<JoinHandle<()>>,
}

impl ParallelSession {
    pub fn spawn(workers: BTreeMap<usize, NodeWorker>, topology: Topology) -> Self {
        let mut channels = BTreeMap::new();
        let mut handles = Vec::new();
        let mut listen_sets = BTreeMap::new();
        let mut self_message = BTreeMap::new();
        for (id, worker) in workers {
            listen_sets.insert(id, worker.cell.expected_senders());
            self_message.insert(id, worker.cell.cfg.self_message);
            let (cmd_tx, cmd_rx) = sync_channel::<Cmd>(4);
            let (reply_tx, reply_rx) = sync_channel::<Reply>(4);
            let handle = std::thread::Builder::new()
                .name(format!("ssta-node-{id}"))
                .spawn(move || worker_loop(worker, cmd_rx, reply_tx))
                .expect("spawning a worker thread");
            channels.insert(id, (cmd_tx, reply_rx));
            handles.push(handle);
        }
        ParallelSession { topology, channels, listen_sets, self_message, handles }
    }

    fn send(&self, id: usize, cmd: Cmd) -> Result<()> {
        self.channels[&id]
            .0
            .send(cmd)
            .map_err(|_| ProtocolError::WorkerLost(format!("node {id} command channel closed")))
    }

    fn recv(&self, id: usize) -> Result<Reply> {
        match self.channels[&id].1.recv() {
            Ok(Reply::Failed(msg)) => Err(ProtocolError::WorkerLost(format!("node {id}: {msg}"))),
            Ok(reply) => Ok(reply),
            Err(_) => Err(ProtocolError::WorkerLost(format!("node {id} reply channel closed"))),
        }
    }

    pub fn node_ids(&self) -> Vec<usize> {
        self.channels.keys().copied().collect()
    }

    /// Zeroes every worker's carried hidden state (epoch boundary).
    pub fn reset_hidden(&mut self) -> Result<()> {
        for &id in &self.node_ids() {
            self.send(id, Cmd::ResetHidden)?;
        }
        for &id in &self.node_ids() {
            match self.recv(id)? {
                Reply::Finished => {}
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad reset reply"))),
            }
        }
        Ok(())
    }

    /// One lockstep round across all workers. `Collect` is not supported
    /// here — assembled gradients stay inside the worker threads.
    pub fn round(
        &mut self,
        frames: &BTreeMap<usize, Vec<Tensor>>,
        opts: &RoundOpts,
    ) -> Result<RoundReport> {
        assert!(
            opts.action != FinishAction::Collect,
            "parallel rounds do not export gradients"
        );
        let ids = self.node_ids();

        // Phase 1: broadcast, then route serialized copies.
        for &id in &ids {
            self.send(id, Cmd::Broadcast {
                t: opts.t,
                round_tag: opts.round_tag,
                mode: opts.mode,
                seed: opts.seed,
            })?;
        }
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        for &id in &ids {
            match self.recv(id)? {
                Reply::Message(bytes) => {
                    outgoing.insert(id, bytes);
                }
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad broadcast reply"))),
            }
        }

        // Phase 2: rollout with routed inboxes and serialized frames.
        for &id in &ids {
            let msgs: Vec<Vec<u8>> = self.listen_sets[&id]
                .iter()
                .map(|sender| outgoing[sender].clone())
                .collect();
            let window = frames
                .get(&id)
                .ok_or(ProtocolError::BadWindow { want: opts.horizon + 1, got: 0 })?;
            let frame_bytes: Vec<Vec<u8>> =
                window.iter().map(|f| to_bytes("frame", f)).collect();
            self.send(id, Cmd::Rollout {
                t: opts.t,
                horizon: opts.horizon,
                frames: frame_bytes,
                msgs,
            })?;
        }
        let mut per_node = BTreeMap::new();
        for &id in &ids {
            match self.recv(id)? {
                Reply::Rollout(round) => {
                    per_node.insert(id, round);
                }
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad rollout reply"))),
            }
        }

        // Phase 3: backprop.
        for &id in &ids {
            self.send(id, Cmd::Backprop { mode: opts.mode })?;
        }
        let mut routed: BTreeMap<usize, Vec<Vec<u8>>> =
            ids.iter().map(|&id| (id, Vec::new())).collect();
        for &id in &ids {
            match self.recv(id)? {
                Reply::Packets(list) => {
                    for bytes in list {
                        let packet = decode_packet(&bytes)?;
                        routed
                            .get_mut(&packet.consumer)
                            .ok_or(ProtocolError::UnexpectedPacket {
                                producer: packet.producer,
                                consumer: packet.consumer,
                                t: opts.t,
                            })?
                            .push(bytes);
                    }
                }
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad backprop reply"))),
            }
        }

        // Phases 4 and 5: exchange delivery plus step, inside workers.
        for &id in &ids {
            let expected = expected_packet_producers(
                &self.topology,
                id,
                opts.mode,
                self.self_message[&id],
            );
            self.send(id, Cmd::Finish {
                expected,
                packets: routed.remove(&id).unwrap_or_default(),
                apply_now: opts.action == FinishAction::Apply,
                lifelong: opts
                    .lifelong
                    .then_some((opts.seed, opts.round_tag, opts.horizon)),
            })?;
        }
        for &id in &ids {
            match self.recv(id)? {
                Reply::Finished => {}
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad finish reply"))),
            }
        }
        Ok(RoundReport { per_node, grads: None })
    }

    /// Tears the session down, returning the workers.
    pub fn shutdown(mut self) -> Result<BTreeMap<usize, NodeWorker>> {
        let ids = self.node_ids();
        let mut out = BTreeMap::new();
        for &id in &ids {
            self.send(id, Cmd::TakeWorker)?;
        }
        for &id in &ids {
            match self.recv(id)? {
                Reply::Worker(worker) => {
                    out.insert(id, *worker);
                }
                _ => return Err(ProtocolError::WorkerLost(format!("node {id}: bad shutdown reply"))),
            }
        }
        for handle in self.handles.drain(..) {
            handle
                .join()
                .map_err(|_| ProtocolError::WorkerLost("worker thread panicked".into()))?;
        }
        Ok(out)
    }
}
