//! Threaded driver over loopback TCP.
//!
//! The master accepts one connection per worker; each worker listens for the
//! spout. Every record is one line of [`crate::wire`]. Injected latency is a
//! blocking sleep before the sender writes, so a sender is busy for the whole
//! delay. The master consumes a single inbox fed by one reader thread per
//! connection.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::master::Master;
use crate::math::{CompoundWeight, SparseGradient};
use crate::wire::{decode, encode, Body, Envelope, Kind, ModelPayload, NodeId};
use crate::worker::{Ingest, NodeError, Worker};

use super::{
    check_link, check_workers, Dispatch, LatencyModel, LatencySampler, MessageCounts, RunOutcome,
    TranscriptEntry, TransportError,
};

pub const ENV_MASTER_PORT: &str = "DOML_MASTER_PORT";
pub const ENV_WORKER_PORT_BASE: &str = "DOML_WORKER_PORT_BASE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Doubled after every failed attempt.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 5,
            base_backoff: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocketOptions {
    pub host: String,
    /// 0 picks a free port.
    pub master_port: u16,
    /// Worker `i` listens on `worker_port_base + i`; 0 picks free ports.
    pub worker_port_base: u16,
    pub latency: LatencyModel,
    /// The master gives up after this long without any inbound message.
    pub abort_timeout: Duration,
    pub retry: RetryPolicy,
    /// `(worker, n)`: the worker drops all connections after `n` data items.
    pub kill_worker_after: Option<(usize, u64)>,
    pub record_transcript: bool,
}

impl Default for SocketOptions {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            master_port: 0,
            worker_port_base: 0,
            latency: LatencyModel::zero(),
            abort_timeout: Duration::from_secs(10),
            retry: RetryPolicy::default(),
            kill_worker_after: None,
            record_transcript: true,
        }
    }
}

impl SocketOptions {
    /// Applies `DOML_MASTER_PORT` and `DOML_WORKER_PORT_BASE` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(p) = std::env::var(ENV_MASTER_PORT).ok().and_then(|v| v.parse().ok()) {
            self.master_port = p;
        }
        if let Some(p) = std::env::var(ENV_WORKER_PORT_BASE)
            .ok()
            .and_then(|v| v.parse().ok())
        {
            self.worker_port_base = p;
        }
        self
    }
}

/// State shared by every thread of one run.
struct Shared {
    start: Instant,
    record: bool,
    transcript: Mutex<Vec<TranscriptEntry>>,
    gradients_sent: Mutex<Vec<(usize, u64)>>,
}

impl Shared {
    fn now(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn received(&self, env: &Envelope) {
        if self.record {
            let e = TranscriptEntry::of(env, self.now());
            self.transcript.lock().expect("transcript lock").push(e);
        }
    }
}

fn write_line<W: Write>(w: &mut W, env: &Envelope) -> std::io::Result<()> {
    let mut line = encode(env);
    line.push('\n');
    w.write_all(line.as_bytes())
}

fn sleep_micros(us: u64) {
    if us > 0 {
        thread::sleep(Duration::from_micros(us));
    }
}

enum Inbound {
    Connected(usize, TcpStream),
    Message(Envelope),
    Closed(usize),
}

fn reader_loop(stream: TcpStream, tx: mpsc::Sender<Inbound>) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut write_half = Some(write_half);
    let mut worker = None;
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        let Ok(env) = decode(&line) else { break };
        if worker.is_none() {
            worker = env.sender.worker();
            if let (Some(w), Some(s)) = (worker, write_half.take()) {
                if tx.send(Inbound::Connected(w, s)).is_err() {
                    return;
                }
            }
        }
        if tx.send(Inbound::Message(env)).is_err() {
            return;
        }
    }
    if let Some(w) = worker {
        let _ = tx.send(Inbound::Closed(w));
    }
}

/// Delivers model replies to one worker after the injected delay.
fn model_writer(stream: TcpStream, rx: mpsc::Receiver<(Instant, Envelope)>) {
    let mut out = BufWriter::new(stream);
    while let Ok((due, env)) = rx.recv() {
        let wait = due.saturating_duration_since(Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
        }
        if write_line(&mut out, &env).and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}

fn master_loop(
    mut master: Master,
    listener: TcpListener,
    opts: &SocketOptions,
    shared: &Shared,
) -> Result<Master, TransportError> {
    let n = master.workers();
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Inbound>();
    let acceptor = {
        let stop = Arc::clone(&stop);
        let tx = tx.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let tx = tx.clone();
                thread::spawn(move || reader_loop(stream, tx));
            }
        })
    };
    drop(tx);

    let mut latency = opts.latency.sampler();
    let mut seq = 0u64;
    let mut writers: HashMap<usize, mpsc::Sender<(Instant, Envelope)>> = HashMap::new();
    let mut sockets: Vec<TcpStream> = Vec::new();
    let mut seen: HashSet<(usize, u64)> = HashSet::new();
    let mut finished: HashSet<usize> = HashSet::new();
    let mut closed: Vec<usize> = Vec::new();

    let result = loop {
        if finished.len() == n {
            break Ok(());
        }
        let msg = match rx.recv_timeout(opts.abort_timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => {
                let missing: Vec<usize> = (0..n).filter(|i| !finished.contains(i)).collect();
                break Err(TransportError::MasterAbort(format!(
                    "no message for {:?}; round {}, outage {:?}, waiting for {:?}, \
                     inbox {} gradients, workers not shut down {:?}, links lost {:?}",
                    opts.abort_timeout,
                    master.round(),
                    master.outage().counters(),
                    master.waiting_for(),
                    master.inbox().len(),
                    missing,
                    closed
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                break Err(TransportError::MasterAbort("all links closed".into()))
            }
        };
        match msg {
            Inbound::Connected(w, stream) => {
                if let Ok(s) = stream.try_clone() {
                    sockets.push(s);
                }
                let (wtx, wrx) = mpsc::channel();
                thread::spawn(move || model_writer(stream, wrx));
                writers.insert(w, wtx);
            }
            Inbound::Closed(w) => {
                if !finished.contains(&w) {
                    closed.push(w);
                }
            }
            Inbound::Message(env) => {
                shared.received(&env);
                if let Err(e) = check_link(&env) {
                    break Err(e);
                }
                let Some(from) = env.sender.worker() else {
                    continue;
                };
                match env.body {
                    Body::PullRequest => {
                        let reply = Envelope {
                            sender: NodeId::Master,
                            receiver: env.sender,
                            seq,
                            time: shared.now(),
                            body: Body::Model(ModelPayload::from(master.weight())),
                        };
                        seq += 1;
                        let due = Instant::now()
                            + Duration::from_micros(latency.sample(Kind::Model));
                        if let Some(w) = writers.get(&from) {
                            let _ = w.send((due, reply));
                        }
                    }
                    Body::Gradient(p) => {
                        // A resent gradient must not be applied twice.
                        if !seen.insert((from, env.seq)) {
                            continue;
                        }
                        let g = match SparseGradient::try_from(p) {
                            Ok(g) => g,
                            Err(e) => break Err(NodeError::from(e).into()),
                        };
                        if let Err(e) = master.enqueue(env.seq, g).and_then(|_| master.drain()) {
                            break Err(e.into());
                        }
                    }
                    Body::Shutdown => {
                        finished.insert(from);
                    }
                    _ => {}
                }
            }
        }
    };

    stop.store(true, Ordering::SeqCst);
    let _ = TcpStream::connect(addr);
    let _ = acceptor.join();
    drop(writers);
    if result.is_err() {
        for s in &sockets {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
    result.map(|_| master)
}

/// A worker's connection to the master, reopened on failure.
struct MasterLink<'a> {
    id: usize,
    addr: SocketAddr,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    retry: RetryPolicy,
    latency: LatencySampler,
    seq: u64,
    shared: &'a Shared,
}

impl MasterLink<'_> {
    fn connection(&mut self) -> Result<&mut (BufReader<TcpStream>, BufWriter<TcpStream>), NodeError> {
        if self.conn.is_none() {
            let mut backoff = self.retry.base_backoff;
            let mut last_err = String::new();
            for attempt in 0..self.retry.attempts.max(1) {
                if attempt > 0 {
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                match TcpStream::connect(self.addr) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        let r = s.try_clone().map_err(|e| NodeError::Pull(e.to_string()))?;
                        self.conn = Some((BufReader::new(r), BufWriter::new(s)));
                        break;
                    }
                    Err(e) => last_err = e.to_string(),
                }
            }
            if self.conn.is_none() {
                return Err(NodeError::Pull(format!(
                    "worker {} could not reach the master: {last_err}",
                    self.id
                )));
            }
        }
        Ok(self.conn.as_mut().expect("connected above"))
    }

    fn envelope(&mut self, body: Body) -> Envelope {
        let env = Envelope {
            sender: NodeId::Worker(self.id),
            receiver: NodeId::Master,
            seq: self.seq,
            time: self.shared.now(),
            body,
        };
        self.seq += 1;
        env
    }

    fn try_send(&mut self, env: &Envelope) -> Result<(), NodeError> {
        let (_, w) = self.connection()?;
        let r = write_line(w, env).and_then(|_| w.flush());
        r.map_err(|e| {
            self.conn = None;
            NodeError::Send(e.to_string())
        })
    }

    /// Sends with retries; the same envelope (same seq) is resent.
    fn send(&mut self, body: Body) -> Result<(), NodeError> {
        sleep_micros(self.latency.sample(body.kind()));
        let env = self.envelope(body);
        if env.kind() == Kind::Gradient {
            self.shared
                .gradients_sent
                .lock()
                .expect("gradient log lock")
                .push((self.id, env.seq));
        }
        let mut last = None;
        for _ in 0..self.retry.attempts.max(1) {
            match self.try_send(&env) {
                Ok(()) => return Ok(()),
                Err(e) if e.is_retryable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn try_pull(&mut self) -> Result<CompoundWeight, NodeError> {
        sleep_micros(self.latency.sample(Kind::PullRequest));
        let req = self.envelope(Body::PullRequest);
        self.try_send(&req)?;
        let (r, _) = self.connection()?;
        let mut line = String::new();
        let read = r.read_line(&mut line);
        match read {
            Ok(0) | Err(_) => {
                self.conn = None;
                return Err(NodeError::Pull("connection closed".into()));
            }
            Ok(_) => {}
        }
        let env = decode(&line).map_err(|e| NodeError::Pull(e.to_string()))?;
        self.shared.received(&env);
        match env.body {
            Body::Model(p) => Ok(CompoundWeight::try_from(p)?),
            other => Err(NodeError::Pull(format!("expected a model, got {:?}", other.kind()))),
        }
    }

    fn pull(&mut self) -> Result<CompoundWeight, NodeError> {
        let mut backoff = self.retry.base_backoff;
        let mut last = None;
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.try_pull() {
                Ok(w) => return Ok(w),
                Err(e) if e.is_retryable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

enum WorkerExit {
    Finished(Worker),
    Killed,
}

fn worker_loop(
    mut worker: Worker,
    listener: TcpListener,
    master_addr: SocketAddr,
    opts: &SocketOptions,
    shared: &Shared,
) -> Result<WorkerExit, TransportError> {
    let id = worker.id();
    let kill_after = opts
        .kill_worker_after
        .and_then(|(w, n)| (w == id).then_some(n));
    let mut link = MasterLink {
        id,
        addr: master_addr,
        conn: None,
        retry: opts.retry,
        latency: LatencyModel {
            seed: opts.latency.seed ^ (id as u64 + 1),
            ..opts.latency
        }
        .sampler(),
        seq: 0,
        shared,
    };
    let (spout, _) = listener.accept()?;
    drop(listener);
    let mut received = 0u64;
    for line in BufReader::new(spout).lines() {
        let env = decode(&line?)?;
        shared.received(&env);
        match env.body {
            Body::Data(p) => {
                if kill_after.is_some_and(|n| received >= n) {
                    return Ok(WorkerExit::Killed);
                }
                received += 1;
                let (seq, inst) = p.into_instance();
                if worker.ingest(seq, inst)? == Ingest::Full {
                    let model = link.pull()?;
                    let g = worker.flush(model)?;
                    link.send(Body::Gradient((&g).into()))?;
                }
            }
            Body::Shutdown => {
                link.send(Body::Shutdown)?;
                return Ok(WorkerExit::Finished(worker));
            }
            _ => {
                return Err(TransportError::Illegal {
                    kind: env.kind(),
                    sender: env.sender,
                    receiver: env.receiver,
                })
            }
        }
    }
    Err(TransportError::WorkerFailed {
        worker: id,
        reason: "spout closed without shutdown".into(),
    })
}

fn spout_loop<I>(spout: I, addrs: &[SocketAddr], latency: &LatencyModel, shared: &Shared) -> Result<(), TransportError>
where
    I: Iterator<Item = Dispatch>,
{
    let mut sampler = latency.sampler();
    let mut links = Vec::with_capacity(addrs.len());
    for a in addrs {
        let s = TcpStream::connect(a)?;
        let _ = s.set_nodelay(true);
        links.push(Some(BufWriter::new(s)));
    }
    let mut seq = 0u64;
    for d in spout {
        let w = d.worker;
        if w >= links.len() {
            return Err(NodeError::UnknownWorker(w).into());
        }
        sleep_micros(sampler.sample(Kind::Data));
        let mut env = d.into_envelope(shared.now());
        env.seq = seq;
        seq += 1;
        if let Some(out) = links[w].as_mut() {
            if write_line(out, &env).is_err() {
                links[w] = None;
            }
        }
    }
    for (i, link) in links.iter_mut().enumerate() {
        if let Some(out) = link.as_mut() {
            let env = Envelope {
                sender: NodeId::Spout,
                receiver: NodeId::Worker(i),
                seq,
                time: shared.now(),
                body: Body::Shutdown,
            };
            seq += 1;
            let _ = write_line(out, &env).and_then(|_| out.flush());
        }
    }
    Ok(())
}

/// Runs the protocol with one thread per node over TCP on `opts.host`.
pub fn socket_run<I>(
    master: Master,
    workers: Vec<Worker>,
    spout: I,
    opts: &SocketOptions,
) -> Result<RunOutcome, TransportError>
where
    I: IntoIterator<Item = Dispatch>,
    I::IntoIter: Send,
{
    check_workers(&master, &workers)?;
    let shared = Shared {
        start: Instant::now(),
        record: opts.record_transcript,
        transcript: Mutex::new(Vec::new()),
        gradients_sent: Mutex::new(Vec::new()),
    };
    let master_listener = TcpListener::bind((opts.host.as_str(), opts.master_port))?;
    let master_addr = master_listener.local_addr()?;
    let mut worker_listeners = Vec::with_capacity(workers.len());
    for i in 0..workers.len() {
        let port = if opts.worker_port_base == 0 {
            0
        } else {
            opts.worker_port_base
                .checked_add(i as u16)
                .ok_or_else(|| std::io::Error::other("worker port out of range"))?
        };
        worker_listeners.push(TcpListener::bind((opts.host.as_str(), port))?);
    }
    let worker_addrs = worker_listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<Result<Vec<_>, _>>()?;
    let spout = spout.into_iter();

    let (master_res, worker_res, spout_res) = thread::scope(|s| {
        let shared = &shared;
        let m = s.spawn(move || master_loop(master, master_listener, opts, shared));
        let ws: Vec<_> = workers
            .into_iter()
            .zip(worker_listeners)
            .map(|(w, l)| s.spawn(move || worker_loop(w, l, master_addr, opts, shared)))
            .collect();
        let sp = s.spawn(|| spout_loop(spout, &worker_addrs, &opts.latency, shared));
        let spout_res = sp.join().expect("spout thread panicked");
        let worker_res: Vec<_> = ws
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
        let master_res = m.join().expect("master thread panicked");
        (master_res, worker_res, spout_res)
    });

    let master = master_res?;
    spout_res?;
    let mut finished = Vec::with_capacity(worker_res.len());
    for (i, r) in worker_res.into_iter().enumerate() {
        match r {
            Ok(WorkerExit::Finished(w)) => finished.push(w),
            Ok(WorkerExit::Killed) => {
                return Err(TransportError::WorkerFailed {
                    worker: i,
                    reason: "killed".into(),
                })
            }
            Err(e) => {
                return Err(TransportError::WorkerFailed {
                    worker: i,
                    reason: e.to_string(),
                })
            }
        }
    }

    let mut transcript = shared.transcript.into_inner().expect("transcript lock");
    transcript.sort_by_key(|e| e.delivered);
    let counts = if opts.record_transcript {
        MessageCounts::from_transcript(&transcript)
    } else {
        MessageCounts::default()
    };
    Ok(RunOutcome {
        master,
        workers: finished,
        transcript,
        gradients_sent: shared.gradients_sent.into_inner().expect("gradient log lock"),
        counts,
        elapsed_micros: shared.start.elapsed().as_micros() as u64,
    })
}
