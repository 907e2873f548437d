//! Message fabric between the spout, the workers and the master.
//!
//! Two interchangeable drivers run the same protocol: [`lockstep_run`] is a
//! single-threaded discrete-event loop with virtual time, [`socket_run`] puts
//! every node on its own thread and talks newline-delimited records over TCP.

mod latency;
mod lockstep;
mod socket;
mod spout;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::master::{Master, QueuedGradient};
use crate::wire::{Body, Envelope, Kind, NodeId, WireError};
use crate::worker::{NodeError, Worker};

pub use latency::{Delay, LatencyModel, LatencySampler};
pub use lockstep::{lockstep_run, LockstepOptions};
pub use socket::{socket_run, RetryPolicy, SocketOptions};
pub use spout::{spout_dispatch, Dispatch, Interleave, Spout};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no workers registered")]
    NoWorkers,
    #[error("worker {index} reports id {id}")]
    WorkerId { index: usize, id: usize },
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("master aborted: {0}")]
    MasterAbort(String),
    #[error("worker {worker} failed: {reason}")]
    WorkerFailed { worker: usize, reason: String },
    #[error("illegal message {kind:?} from {sender} to {receiver}")]
    Illegal {
        kind: Kind,
        sender: NodeId,
        receiver: NodeId,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
}

/// One delivered message, as seen by its receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    /// Microseconds: virtual in lockstep mode, since run start in socket mode.
    pub sent: u64,
    pub delivered: u64,
    pub kind: Kind,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub seq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
}

impl TranscriptEntry {
    pub fn of(env: &Envelope, delivered: u64) -> Self {
        let mut e = Self {
            sent: env.time,
            delivered,
            kind: env.kind(),
            sender: env.sender,
            receiver: env.receiver,
            seq: env.seq,
            task: None,
            index: None,
            version: None,
            blocks: None,
        };
        match &env.body {
            Body::Data(p) => {
                e.task = Some(p.task);
                e.index = Some(p.index);
            }
            Body::Model(p) => e.version = Some(p.version),
            Body::Gradient(p) => {
                e.version = Some(p.basis_version);
                e.blocks = Some(p.blocks.iter().map(|(t, _)| *t).collect());
            }
            Body::PullRequest | Body::Shutdown => {}
        }
        e
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounts {
    pub data: u64,
    pub pull_request: u64,
    pub model: u64,
    pub gradient: u64,
    pub shutdown: u64,
}

impl MessageCounts {
    pub fn from_transcript(t: &[TranscriptEntry]) -> Self {
        let mut c = Self::default();
        for e in t {
            match e.kind {
                Kind::Data => c.data += 1,
                Kind::PullRequest => c.pull_request += 1,
                Kind::Model => c.model += 1,
                Kind::Gradient => c.gradient += 1,
                Kind::Shutdown => c.shutdown += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.data + self.pull_request + self.model + self.gradient + self.shutdown
    }
}

/// Final node states plus everything needed to audit the run.
#[derive(Debug)]
pub struct RunOutcome {
    pub master: Master,
    pub workers: Vec<Worker>,
    pub transcript: Vec<TranscriptEntry>,
    /// `(worker, envelope seq)` of every gradient put on the wire.
    pub gradients_sent: Vec<(usize, u64)>,
    pub counts: MessageCounts,
    /// Virtual (lockstep) or wall-clock (socket) microseconds.
    pub elapsed_micros: u64,
}

impl RunOutcome {
    pub fn queued_at_shutdown(&self) -> Vec<(usize, u64)> {
        self.master
            .inbox()
            .iter()
            .map(|q: &QueuedGradient| (q.gradient.worker(), q.seq))
            .collect()
    }
}

/// Only these links exist; workers never address each other.
pub(crate) fn check_link(env: &Envelope) -> Result<(), TransportError> {
    use NodeId::*;
    let ok = matches!(
        (env.kind(), env.sender, env.receiver),
        (Kind::Data, Spout, Worker(_))
            | (Kind::Shutdown, Spout, Worker(_))
            | (Kind::PullRequest, Worker(_), Master)
            | (Kind::Gradient, Worker(_), Master)
            | (Kind::Shutdown, Worker(_), Master)
            | (Kind::Model, Master, Worker(_))
    );
    if ok {
        Ok(())
    } else {
        Err(TransportError::Illegal {
            kind: env.kind(),
            sender: env.sender,
            receiver: env.receiver,
        })
    }
}

pub(crate) fn check_workers(master: &Master, workers: &[Worker]) -> Result<(), TransportError> {
    if workers.is_empty() {
        return Err(TransportError::NoWorkers);
    }
    for (index, w) in workers.iter().enumerate() {
        if w.id() != index {
            return Err(TransportError::WorkerId { index, id: w.id() });
        }
    }
    if master.workers() != workers.len() {
        return Err(TransportError::NoWorkers);
    }
    Ok(())
}

/// Per-sender sequence counters.
#[derive(Debug, Default)]
pub(crate) struct SeqCounter(HashMap<NodeId, u64>);

impl SeqCounter {
    pub fn next(&mut self, node: NodeId) -> u64 {
        let c = self.0.entry(node).or_insert(0);
        let s = *c;
        *c += 1;
        s
    }
}
