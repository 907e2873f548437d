//! Worker node: predicts with the last pulled model, buffers `m` instances,
//! then pulls the latest model and ships the raw buffer gradient to the
//! master. Workers have no way to address each other.

use thiserror::Error;

use crate::math::{
    predict, raw_buffer_gradient, CompoundInstance, CompoundWeight, MathError, SparseGradient,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("model pull failed: {0}")]
    Pull(String),
    #[error("send failed: {0}")]
    Send(String),
    #[error("pulled model version {pulled} is older than held version {held}")]
    StaleModel { pulled: u64, held: u64 },
    #[error("worker {0} has a full buffer awaiting a flush")]
    FlushPending(usize),
    #[error("worker {0} buffer is not full")]
    NotReady(usize),
    #[error("unknown worker {0}")]
    UnknownWorker(usize),
    #[error(transparent)]
    Math(#[from] MathError),
}

impl NodeError {
    /// Transport failures can be retried; the worker keeps its buffer.
    pub fn is_retryable(&self) -> bool {
        matches!(self, NodeError::Pull(_) | NodeError::Send(_))
    }
}

/// Something a worker can pull the current global model from.
pub trait ModelSource {
    fn pull(&mut self, worker: usize) -> Result<CompoundWeight, NodeError>;
}

impl<F> ModelSource for F
where
    F: FnMut(usize) -> Result<CompoundWeight, NodeError>,
{
    fn pull(&mut self, worker: usize) -> Result<CompoundWeight, NodeError> {
        self(worker)
    }
}

/// One evaluated instance, recorded before its label is used for learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Prediction {
    pub seq: u64,
    pub task: usize,
    pub mistake: bool,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Buffered,
    /// The buffer reached `m`; a pull and flush must follow.
    Full,
}

#[derive(Debug, Clone)]
pub struct Worker {
    id: usize,
    k: usize,
    d: usize,
    buffer_size: usize,
    buffer: Vec<CompoundInstance>,
    model: CompoundWeight,
    mistakes: Vec<u64>,
    seen: Vec<u64>,
    predictions: Vec<Prediction>,
    local_seq: u64,
    flushes: u64,
}

impl Worker {
    pub fn new(id: usize, k: usize, d: usize, buffer_size: usize) -> Self {
        assert!(buffer_size >= 1, "buffer size must be at least 1");
        Self {
            id,
            k,
            d,
            buffer_size,
            buffer: Vec::with_capacity(buffer_size),
            model: CompoundWeight::zeros(k, d),
            mistakes: vec![0; k],
            seen: vec![0; k],
            predictions: Vec::new(),
            local_seq: 0,
            flushes: 0,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffer_size(&self) -> usize {
        self.buffer_size
    }

    pub fn flush_pending(&self) -> bool {
        self.buffer.len() == self.buffer_size
    }

    pub fn model(&self) -> &CompoundWeight {
        &self.model
    }

    pub fn mistakes(&self) -> &[u64] {
        &self.mistakes
    }

    pub fn seen(&self) -> &[u64] {
        &self.seen
    }

    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    pub fn take_predictions(&mut self) -> Vec<Prediction> {
        std::mem::take(&mut self.predictions)
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
        self.model = CompoundWeight::zeros(self.k, self.d);
        self.mistakes.iter_mut().for_each(|m| *m = 0);
        self.seen.iter_mut().for_each(|s| *s = 0);
        self.predictions.clear();
        self.local_seq = 0;
        self.flushes = 0;
    }

    /// Evaluates the instance with the held model, counts the outcome, then
    /// buffers it. `seq` is the stream position used for metric ordering.
    pub fn ingest(&mut self, seq: u64, inst: CompoundInstance) -> Result<Ingest, NodeError> {
        if self.flush_pending() {
            return Err(NodeError::FlushPending(self.id));
        }
        inst.validate(self.k, self.d)?;
        let mistake = predict(&self.model, &inst) != inst.label;
        self.seen[inst.task] += 1;
        if mistake {
            self.mistakes[inst.task] += 1;
        }
        self.predictions.push(Prediction {
            seq,
            task: inst.task,
            mistake,
            model_version: self.model.version(),
        });
        self.buffer.push(inst);
        Ok(if self.flush_pending() {
            Ingest::Full
        } else {
            Ingest::Buffered
        })
    }

    /// Installs the freshly pulled model, computes the raw gradient of the full
    /// buffer against it and clears the buffer.
    pub fn flush(&mut self, model: CompoundWeight) -> Result<SparseGradient, NodeError> {
        if !self.flush_pending() {
            return Err(NodeError::NotReady(self.id));
        }
        model.check_shape(self.k, self.d)?;
        if model.version() < self.model.version() {
            return Err(NodeError::StaleModel {
                pulled: model.version(),
                held: self.model.version(),
            });
        }
        self.model = model;
        let g = raw_buffer_gradient(&self.model, &self.buffer, self.id)?;
        self.buffer.clear();
        self.flushes += 1;
        Ok(g)
    }

    /// Pulls from `source` and flushes. On a pull failure the buffer is kept so
    /// the call can be retried.
    pub fn try_flush<S: ModelSource>(&mut self, source: &mut S) -> Result<SparseGradient, NodeError> {
        if !self.flush_pending() {
            return Err(NodeError::NotReady(self.id));
        }
        let model = source.pull(self.id)?;
        self.flush(model)
    }

    /// Single-call form: ingest, and when the buffer fills, pull and emit.
    pub fn on_instance<S: ModelSource>(
        &mut self,
        inst: CompoundInstance,
        source: &mut S,
    ) -> Result<Option<SparseGradient>, NodeError> {
        let seq = self.local_seq;
        match self.ingest(seq, inst)? {
            Ingest::Buffered => {
                self.local_seq += 1;
                Ok(None)
            }
            Ingest::Full => {
                self.local_seq += 1;
                self.try_flush(source).map(Some)
            }
        }
    }
}
