//! Deterministic single-threaded driver.
//!
//! Every message is an event keyed by `(arrival, sender, seq)` in virtual
//! microseconds. The spout emits item `k` at `k * spout_interval`. Links are
//! FIFO: a message never overtakes an earlier one on the same link. A worker
//! that has asked for the model handles nothing else until the model arrives;
//! data reaching it meanwhile waits in a local backlog.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;

use crate::master::Master;
use crate::math::{CompoundWeight, SparseGradient};
use crate::wire::{Body, Envelope, Kind, ModelPayload, NodeId};
use crate::worker::{Ingest, Worker};

use super::{
    check_link, check_workers, Dispatch, LatencyModel, LatencySampler, MessageCounts, RunOutcome,
    SeqCounter, TranscriptEntry, TransportError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LockstepOptions {
    pub latency: LatencyModel,
    /// Virtual microseconds between consecutive spout sends.
    pub spout_interval: u64,
    /// Send `shutdown` to every worker once the stream is exhausted.
    pub send_shutdown: bool,
    pub record_transcript: bool,
}

impl Default for LockstepOptions {
    fn default() -> Self {
        Self {
            latency: LatencyModel::zero(),
            spout_interval: 100,
            send_shutdown: true,
            record_transcript: true,
        }
    }
}

struct Pending {
    arrival: u64,
    env: Envelope,
}

impl Pending {
    fn key(&self) -> (u64, NodeId, u64) {
        (self.arrival, self.env.sender, self.env.seq)
    }
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

struct Net {
    heap: BinaryHeap<Reverse<Pending>>,
    seqs: SeqCounter,
    last_arrival: HashMap<(NodeId, NodeId), u64>,
    latency: LatencySampler,
    now: u64,
    gradients_sent: Vec<(usize, u64)>,
}

impl Net {
    fn send(&mut self, sender: NodeId, receiver: NodeId, body: Body) -> Result<(), TransportError> {
        let env = Envelope {
            sender,
            receiver,
            seq: self.seqs.next(sender),
            time: self.now,
            body,
        };
        check_link(&env)?;
        let delay = self.latency.sample(env.kind());
        let last = self.last_arrival.entry((sender, receiver)).or_insert(0);
        let arrival = (self.now + delay).max(*last);
        *last = arrival;
        if let (Kind::Gradient, NodeId::Worker(w)) = (env.kind(), sender) {
            self.gradients_sent.push((w, env.seq));
        }
        self.heap.push(Reverse(Pending { arrival, env }));
        Ok(())
    }
}

#[derive(Default)]
struct WorkerState {
    blocked: bool,
    backlog: VecDeque<Envelope>,
}

struct Sim<'a> {
    net: Net,
    master: Master,
    workers: Vec<Worker>,
    states: Vec<WorkerState>,
    transcript: Vec<TranscriptEntry>,
    counts: MessageCounts,
    opts: &'a LockstepOptions,
}

impl Sim<'_> {
    fn deliver(&mut self, env: Envelope) -> Result<(), TransportError> {
        match env.kind() {
            Kind::Data => self.counts.data += 1,
            Kind::PullRequest => self.counts.pull_request += 1,
            Kind::Model => self.counts.model += 1,
            Kind::Gradient => self.counts.gradient += 1,
            Kind::Shutdown => self.counts.shutdown += 1,
        }
        if self.opts.record_transcript {
            self.transcript.push(TranscriptEntry::of(&env, self.net.now));
        }
        match env.receiver {
            NodeId::Worker(i) => self.at_worker(i, env),
            NodeId::Master => self.at_master(env),
            NodeId::Spout => Err(TransportError::Illegal {
                kind: env.kind(),
                sender: env.sender,
                receiver: env.receiver,
            }),
        }
    }

    fn at_worker(&mut self, i: usize, env: Envelope) -> Result<(), TransportError> {
        match env.body {
            Body::Model(p) => {
                let model = CompoundWeight::try_from(p).map_err(crate::worker::NodeError::from)?;
                let g = self.workers[i].flush(model)?;
                self.net
                    .send(NodeId::Worker(i), NodeId::Master, Body::Gradient((&g).into()))?;
                self.states[i].blocked = false;
                while !self.states[i].blocked {
                    match self.states[i].backlog.pop_front() {
                        Some(e) => self.worker_input(i, e)?,
                        None => break,
                    }
                }
                Ok(())
            }
            _ if self.states[i].blocked => {
                self.states[i].backlog.push_back(env);
                Ok(())
            }
            _ => self.worker_input(i, env),
        }
    }

    fn worker_input(&mut self, i: usize, env: Envelope) -> Result<(), TransportError> {
        match env.body {
            Body::Data(p) => {
                let (seq, inst) = p.into_instance();
                if self.workers[i].ingest(seq, inst)? == Ingest::Full {
                    self.net
                        .send(NodeId::Worker(i), NodeId::Master, Body::PullRequest)?;
                    self.states[i].blocked = true;
                }
                Ok(())
            }
            Body::Shutdown => {
                self.net
                    .send(NodeId::Worker(i), NodeId::Master, Body::Shutdown)
            }
            _ => Err(TransportError::Illegal {
                kind: env.kind(),
                sender: env.sender,
                receiver: env.receiver,
            }),
        }
    }

    fn at_master(&mut self, env: Envelope) -> Result<(), TransportError> {
        let from = env.sender;
        match env.body {
            Body::PullRequest => {
                let model = ModelPayload::from(self.master.weight());
                self.net.send(NodeId::Master, from, Body::Model(model))
            }
            Body::Gradient(p) => {
                let g = SparseGradient::try_from(p).map_err(crate::worker::NodeError::from)?;
                self.master.enqueue(env.seq, g)?;
                self.master.drain()?;
                Ok(())
            }
            Body::Shutdown => Ok(()),
            _ => Err(TransportError::Illegal {
                kind: env.kind(),
                sender: env.sender,
                receiver: env.receiver,
            }),
        }
    }

    fn queue_state(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "round {}, outage {:?}, inbox [",
            self.master.round(),
            self.master.outage().counters()
        );
        for q in self.master.inbox() {
            let _ = write!(s, "(worker {}, seq {}) ", q.gradient.worker(), q.seq);
        }
        s.push_str("], buffers [");
        for w in &self.workers {
            let _ = write!(s, "{}/{} ", w.buffer_len(), w.buffer_size());
        }
        s.push(']');
        s
    }
}

/// Runs the protocol to completion in virtual time.
pub fn lockstep_run<I>(
    master: Master,
    workers: Vec<Worker>,
    spout: I,
    opts: &LockstepOptions,
) -> Result<RunOutcome, TransportError>
where
    I: IntoIterator<Item = Dispatch>,
{
    check_workers(&master, &workers)?;
    let n = workers.len();
    let mut sim = Sim {
        net: Net {
            heap: BinaryHeap::new(),
            seqs: SeqCounter::default(),
            last_arrival: HashMap::new(),
            latency: opts.latency.sampler(),
            now: 0,
            gradients_sent: Vec::new(),
        },
        master,
        workers,
        states: (0..n).map(|_| WorkerState::default()).collect(),
        transcript: Vec::new(),
        counts: MessageCounts::default(),
        opts,
    };

    let mut spout = spout.into_iter().peekable();
    let mut emitted: u64 = 0;
    let mut shutdown_sent = !opts.send_shutdown;
    loop {
        // Emit every spout send due no later than the next delivery.
        loop {
            let due = emitted * opts.spout_interval;
            let next_arrival = sim.net.heap.peek().map(|Reverse(p)| p.arrival);
            if next_arrival.is_some_and(|a| due > a) {
                break;
            }
            if let Some(d) = spout.next() {
                if d.worker >= n {
                    return Err(crate::worker::NodeError::UnknownWorker(d.worker).into());
                }
                sim.net.now = due;
                let env = d.into_envelope(due);
                sim.net.send(NodeId::Spout, env.receiver, env.body)?;
                emitted += 1;
            } else if !shutdown_sent {
                sim.net.now = due;
                for i in 0..n {
                    sim.net.send(NodeId::Spout, NodeId::Worker(i), Body::Shutdown)?;
                }
                shutdown_sent = true;
            } else {
                break;
            }
        }
        let Some(Reverse(p)) = sim.net.heap.pop() else {
            break;
        };
        sim.net.now = p.arrival;
        sim.deliver(p.env)?;
    }

    if !opts.send_shutdown {
        if let Some(i) = sim.master.waiting_for() {
            if !sim.workers[i].flush_pending() {
                return Err(TransportError::Deadlock(format!(
                    "master waits on worker {i}, which has no pending flush; {}",
                    sim.queue_state()
                )));
            }
        }
    }

    Ok(RunOutcome {
        master: sim.master,
        workers: sim.workers,
        transcript: sim.transcript,
        gradients_sent: sim.net.gradients_sent,
        counts: sim.counts,
        elapsed_micros: sim.net.now,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::Oml;
    use crate::math::HyperParams;
    use crate::synth::generate_family;
    use crate::transport::{spout_dispatch, Delay, Interleave};

    fn nodes(k: usize, n: usize, hp: HyperParams) -> (Master, Vec<Worker>) {
        let master = Master::new(k, 9, n, hp).unwrap();
        let workers = (0..n).map(|i| Worker::new(i, k, 9, hp.buffer)).collect();
        (master, workers)
    }

    fn run(k: usize, n: usize, per_task: usize, hp: HyperParams, opts: &LockstepOptions) -> RunOutcome {
        let f = generate_family(k, 0.3, 3).unwrap();
        let spout = spout_dispatch(&f, &vec![per_task; k], 3, n, Interleave::RoundRobin).unwrap();
        let (m, w) = nodes(k, n, hp);
        lockstep_run(m, w, spout, opts).unwrap()
    }

    #[test]
    fn single_worker_single_sample_visits_in_order() {
        let hp = HyperParams {
            buffer: 1,
            ..Default::default()
        };
        let out = run(4, 1, 5, hp, &LockstepOptions::default());
        let kinds: Vec<Kind> = out.transcript.iter().take(8).map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            [
                Kind::Data,
                Kind::PullRequest,
                Kind::Model,
                Kind::Gradient,
                Kind::Data,
                Kind::PullRequest,
                Kind::Model,
                Kind::Gradient
            ]
        );
        assert_eq!(out.master.round(), 20);

        let f = generate_family(4, 0.3, 3).unwrap();
        let mut oml = Oml::new(4, 9, hp).unwrap();
        for d in spout_dispatch(&f, &[5; 4], 3, 1, Interleave::RoundRobin).unwrap() {
            oml.step(d.index, &d.instance).unwrap();
        }
        assert_eq!(oml.weight().as_slice(), out.master.weight().as_slice());
    }

    #[test]
    fn same_seed_same_run() {
        let hp = HyperParams::default();
        let opts = LockstepOptions {
            latency: LatencyModel {
                gradient: Delay::Uniform { lo: 0, hi: 900 },
                model: Delay::Fixed { micros: 150 },
                seed: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = run(8, 3, 40, hp, &opts);
        let b = run(8, 3, 40, hp, &opts);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.master.weight().as_slice(), b.master.weight().as_slice());
    }

    #[test]
    fn shutdown_drains_cleanly() {
        let out = run(8, 4, 25, HyperParams::default(), &LockstepOptions::default());
        assert_eq!(out.counts.shutdown, 8);
        assert_eq!(out.counts.data, 200);
        let applied = out.master.log().len() + out.queued_at_shutdown().len();
        assert_eq!(applied, out.gradients_sent.len());
        assert!(out.transcript.iter().all(|e| !(e.sender.worker().is_some()
            && e.receiver.worker().is_some())));
    }

    #[test]
    fn fifo_links_under_jitter() {
        let opts = LockstepOptions {
            latency: LatencyModel {
                data: Delay::Uniform { lo: 0, hi: 5000 },
                seed: 9,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run(4, 2, 30, HyperParams::default(), &opts);
        for w in 0..2 {
            let seqs: Vec<u64> = out
                .transcript
                .iter()
                .filter(|e| e.kind == Kind::Data && e.receiver == NodeId::Worker(w))
                .map(|e| e.seq)
                .collect();
            assert!(seqs.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn missing_shutdown_reports_deadlock() {
        let hp = HyperParams {
            tau_max: 1,
            buffer: 10,
            ..Default::default()
        };
        let f = generate_family(4, 0.3, 3).unwrap();
        // Everything goes to worker 0; worker 1 never fills its buffer.
        let spout = spout_dispatch(&f, &[10; 4], 3, 1, Interleave::RoundRobin).unwrap();
        let (m, w) = nodes(4, 2, hp);
        let opts = LockstepOptions {
            send_shutdown: false,
            ..Default::default()
        };
        match lockstep_run(m, w, spout, &opts) {
            Err(TransportError::Deadlock(msg)) => assert!(msg.contains("worker 1"), "{msg}"),
            other => panic!("expected deadlock, got {other:?}"),
        }
    }
}
