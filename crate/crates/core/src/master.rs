//! Master node: keeps the global model, tracks how many rounds each worker's
//! gradient has gone unused, and applies one delayed gradient per round.
//!
//! Each round the worker with the largest outage is found (lowest index on
//! ties). If its outage has reached `tau_max` the master waits for that
//! worker's gradient; otherwise it takes the oldest queued gradient from
//! anyone. The update is
//!
//! ```text
//! w_t = project(w_{t-1} - eta * [(A^-1 ⊗ I) g_j + lambda * w_{t-1-tau_j}], R)
//! ```
//!
//! after which `tau_j` resets and every other counter increments.

use std::collections::VecDeque;

use serde::Serialize;

use crate::math::{
    assemble_direction, descend, CompoundWeight, HyperParams, InteractionMatrix, SparseGradient,
};
use crate::worker::{ModelSource, NodeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutageTable {
    tau: Vec<u64>,
    tau_max: u64,
}

impl OutageTable {
    pub fn new(workers: usize, tau_max: u64) -> Self {
        Self {
            tau: vec![0; workers],
            tau_max,
        }
    }

    pub fn from_counters(tau: Vec<u64>, tau_max: u64) -> Self {
        Self { tau, tau_max }
    }

    pub fn tau_max(&self) -> u64 {
        self.tau_max
    }

    pub fn counters(&self) -> &[u64] {
        &self.tau
    }

    pub fn get(&self, worker: usize) -> u64 {
        self.tau[worker]
    }

    /// Index of the largest counter, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &t) in self.tau.iter().enumerate() {
            if t > self.tau[best] {
                best = i;
            }
        }
        best
    }

    pub fn record_use(&mut self, worker: usize) {
        for (i, t) in self.tau.iter_mut().enumerate() {
            if i == worker {
                *t = 0;
            } else {
                *t += 1;
            }
        }
    }
}

/// Recent model snapshots, newest first. Version 0 is always available since
/// the initial model is zero.
#[derive(Debug, Clone)]
pub struct WeightHistory {
    capacity: usize,
    snapshots: VecDeque<CompoundWeight>,
    initial: CompoundWeight,
}

impl WeightHistory {
    pub fn new(initial: CompoundWeight, capacity: usize) -> Self {
        let mut snapshots = VecDeque::with_capacity(capacity);
        snapshots.push_front(initial.clone());
        Self {
            capacity: capacity.max(1),
            snapshots,
            initial,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, w: CompoundWeight) {
        self.snapshots.push_front(w);
        self.snapshots.truncate(self.capacity);
    }

    pub fn get(&self, version: u64) -> Option<&CompoundWeight> {
        if version == self.initial.version() {
            return Some(&self.initial);
        }
        let newest = self.snapshots.front()?.version();
        let back = newest.checked_sub(version)? as usize;
        self.snapshots.get(back).filter(|w| w.version() == version)
    }

    pub fn oldest(&self) -> &CompoundWeight {
        self.snapshots.back().unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    WaitFor(usize),
    FirstResponder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedGradient {
    /// Sequence number of the envelope that carried the gradient.
    pub seq: u64,
    pub gradient: SparseGradient,
}

/// One line of the master's update log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub round: u64,
    pub worker: usize,
    pub seq: u64,
    pub tau: u64,
    pub waited: bool,
    pub basis_version: u64,
    pub stale_version: u64,
    pub nonzero_blocks: usize,
    pub blocks: Vec<usize>,
    pub norm: f64,
    pub outage: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Master {
    k: usize,
    d: usize,
    hp: HyperParams,
    inverse: InteractionMatrix,
    weight: CompoundWeight,
    history: WeightHistory,
    outage: OutageTable,
    inbox: VecDeque<QueuedGradient>,
    strict_staleness: bool,
    log: Vec<UpdateRecord>,
}

impl Master {
    pub fn new(k: usize, d: usize, workers: usize, hp: HyperParams) -> Result<Self, NodeError> {
        hp.validate()?;
        if workers == 0 {
            return Err(NodeError::UnknownWorker(0));
        }
        let inverse = InteractionMatrix::inverse(k, hp.b)?;
        let weight = CompoundWeight::zeros(k, d);
        // Counters can overshoot tau_max while several workers sit at the
        // threshold together, by at most workers - 1.
        let capacity = hp.tau_max as usize + workers + 1;
        Ok(Self {
            k,
            d,
            hp,
            inverse,
            history: WeightHistory::new(weight.clone(), capacity),
            weight,
            outage: OutageTable::new(workers, hp.tau_max),
            inbox: VecDeque::new(),
            strict_staleness: false,
            log: Vec::new(),
        })
    }

    /// Use the snapshot at the gradient's basis version as the stale weight
    /// instead of `w_{t-1-tau_j}`.
    pub fn with_strict_staleness(mut self, strict: bool) -> Self {
        self.strict_staleness = strict;
        self
    }

    pub fn workers(&self) -> usize {
        self.outage.counters().len()
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn round(&self) -> u64 {
        self.weight.version()
    }

    pub fn weight(&self) -> &CompoundWeight {
        &self.weight
    }

    pub fn outage(&self) -> &OutageTable {
        &self.outage
    }

    pub fn inbox(&self) -> &VecDeque<QueuedGradient> {
        &self.inbox
    }

    pub fn log(&self) -> &[UpdateRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<UpdateRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn serve_model(&self) -> CompoundWeight {
        self.weight.clone()
    }

    pub fn select_source(&self) -> Selection {
        let i = self.outage.argmax();
        if self.outage.get(i) >= self.outage.tau_max() {
            Selection::WaitFor(i)
        } else {
            Selection::FirstResponder
        }
    }

    /// The worker the master is blocked on, if the selection demands a worker
    /// whose gradient has not arrived.
    pub fn waiting_for(&self) -> Option<usize> {
        match self.select_source() {
            Selection::WaitFor(i) if !self.inbox.iter().any(|q| q.gradient.worker() == i) => Some(i),
            _ => None,
        }
    }

    pub fn enqueue(&mut self, seq: u64, gradient: SparseGradient) -> Result<(), NodeError> {
        if gradient.worker() >= self.workers() {
            return Err(NodeError::UnknownWorker(gradient.worker()));
        }
        self.inbox.push_back(QueuedGradient { seq, gradient });
        Ok(())
    }

    /// Runs one round if the selected gradient is available.
    pub fn try_round(&mut self) -> Result<Option<UpdateRecord>, NodeError> {
        let (pos, waited) = match self.select_source() {
            Selection::WaitFor(i) => {
                match self.inbox.iter().position(|q| q.gradient.worker() == i) {
                    Some(p) => (p, true),
                    None => return Ok(None),
                }
            }
            Selection::FirstResponder if self.inbox.is_empty() => return Ok(None),
            Selection::FirstResponder => (0, false),
        };
        let q = self.inbox.remove(pos).expect("position is in range");
        let from = q.gradient.worker();
        self.update(&q.gradient, from, q.seq, waited).map(Some)
    }

    /// Runs rounds until the master blocks or the inbox is empty.
    pub fn drain(&mut self) -> Result<Vec<UpdateRecord>, NodeError> {
        let mut out = Vec::new();
        while let Some(rec) = self.try_round()? {
            out.push(rec);
        }
        Ok(out)
    }

    /// Applies `g` as coming from worker `from`, bypassing the inbox.
    pub fn apply_gradient(
        &mut self,
        g: &SparseGradient,
        from: usize,
    ) -> Result<UpdateRecord, NodeError> {
        self.update(g, from, 0, false)
    }

    fn update(
        &mut self,
        g: &SparseGradient,
        from: usize,
        seq: u64,
        waited: bool,
    ) -> Result<UpdateRecord, NodeError> {
        if from >= self.workers() {
            return Err(NodeError::UnknownWorker(from));
        }
        self.weight.check_shape(g.tasks(), g.dim())?;
        let tau = self.outage.get(from);
        let current = self.weight.version();
        let wanted = if self.strict_staleness {
            g.basis_version().min(current)
        } else {
            current.saturating_sub(tau)
        };
        let stale = self.history.get(wanted).unwrap_or_else(|| self.history.oldest());
        let stale_version = stale.version();
        let direction = assemble_direction(&self.inverse, g, self.hp.lambda, stale)?;
        let round = current + 1;
        let next = descend(
            &self.weight,
            &direction,
            self.hp.step_size(round),
            self.hp.radius,
            round,
        )?;
        self.outage.record_use(from);
        self.history.push(next.clone());
        self.weight = next;

        let record = UpdateRecord {
            round,
            worker: from,
            seq,
            tau,
            waited,
            basis_version: g.basis_version(),
            stale_version,
            nonzero_blocks: g.block_count(),
            blocks: g.support(),
            norm: self.weight.norm(),
            outage: self.outage.counters().to_vec(),
        };
        self.log.push(record.clone());
        Ok(record)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.k, self.d)
    }
}

impl ModelSource for &Master {
    fn pull(&mut self, _worker: usize) -> Result<CompoundWeight, NodeError> {
        Ok(self.serve_model())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{CompoundInstance, Label};
    use std::collections::BTreeMap;

    fn hp(lambda: f64, tau_max: u64) -> HyperParams {
        HyperParams {
            eta: 0.1,
            lambda,
            b: 1.0,
            radius: f64::INFINITY,
            buffer: 1,
            tau_max,
            ..Default::default()
        }
    }

    fn zero_grad(k: usize, d: usize, worker: usize) -> SparseGradient {
        SparseGradient::new(k, d, BTreeMap::new(), 1, 0, worker).unwrap()
    }

    #[test]
    fn select_source_examples() {
        let mut m = Master::new(2, 1, 3, hp(0.0, 4)).unwrap();
        assert_eq!(m.select_source(), Selection::FirstResponder);
        m.outage = OutageTable::from_counters(vec![4, 2, 0], 4);
        assert_eq!(m.select_source(), Selection::WaitFor(0));
        m.outage = OutageTable::from_counters(vec![4, 4, 0], 4);
        assert_eq!(m.select_source(), Selection::WaitFor(0));
        m.outage = OutageTable::from_counters(vec![1, 4, 4], 4);
        assert_eq!(m.select_source(), Selection::WaitFor(1));
    }

    #[test]
    fn zero_gradient_only_advances_version() {
        let mut m = Master::new(2, 2, 1, hp(0.0, 3)).unwrap();
        m.weight = CompoundWeight::from_flat(2, 2, vec![1.0, 2.0, 3.0, 4.0], 0).unwrap();
        let rec = m.apply_gradient(&zero_grad(2, 2, 0), 0).unwrap();
        assert_eq!(rec.round, 1);
        assert_eq!(m.weight().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.serve_model().version(), 1);
    }

    #[test]
    fn zero_gradient_shrinks_with_constant_history() {
        let start = CompoundWeight::from_flat(1, 2, vec![2.0, -4.0], 0).unwrap();
        let mut m = Master::new(1, 2, 2, hp(0.5, 3)).unwrap();
        m.history = WeightHistory::new(start.clone(), 8);
        m.weight = start;
        m.apply_gradient(&zero_grad(1, 2, 1), 1).unwrap();
        // (1 - eta * lambda) * w
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(m.weight().as_slice(), &[2.0 * f, -4.0 * f]);
    }

    #[test]
    fn single_worker_uses_previous_weight() {
        let mut m = Master::new(2, 1, 1, hp(0.3, 5)).unwrap();
        let inst = CompoundInstance::new(1, vec![2.0], Label::Positive);
        for _ in 0..6 {
            let g = crate::math::raw_buffer_gradient(m.weight(), &[inst.clone()], 0).unwrap();
            let before = m.round();
            let rec = m.apply_gradient(&g, 0).unwrap();
            assert_eq!(rec.tau, 0);
            assert_eq!(rec.stale_version, before);
            assert_eq!(m.outage().counters(), &[0]);
        }
    }

    #[test]
    fn serve_is_stable_between_updates() {
        let mut m = Master::new(3, 2, 2, hp(0.0, 2)).unwrap();
        let fresh = m.serve_model();
        assert_eq!(fresh.version(), 0);
        assert!(fresh.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(m.serve_model(), m.serve_model());
        for u in 1..=4 {
            m.apply_gradient(&zero_grad(3, 2, 0), 0).unwrap();
            assert_eq!(m.serve_model().version(), u);
        }
    }

    #[test]
    fn wait_branch_blocks_until_target_arrives() {
        let mut m = Master::new(1, 1, 2, hp(0.0, 1)).unwrap();
        m.enqueue(0, zero_grad(1, 1, 0)).unwrap();
        // Round 1: first responder, worker 0. Worker 1's outage becomes 1.
        let r = m.try_round().unwrap().unwrap();
        assert_eq!((r.worker, r.waited), (0, false));
        m.enqueue(1, zero_grad(1, 1, 0)).unwrap();
        assert_eq!(m.select_source(), Selection::WaitFor(1));
        assert_eq!(m.waiting_for(), Some(1));
        assert!(m.try_round().unwrap().is_none());
        m.enqueue(2, zero_grad(1, 1, 1)).unwrap();
        let r = m.try_round().unwrap().unwrap();
        assert_eq!((r.worker, r.waited, r.seq, r.tau), (1, true, 2, 1));
        // The queued gradient from worker 0 is applied next.
        let r = m.try_round().unwrap().unwrap();
        assert_eq!((r.worker, r.seq), (0, 1));
        assert!(m.inbox().is_empty());
    }

    #[test]
    fn unknown_worker_rejected() {
        let mut m = Master::new(1, 1, 2, hp(0.0, 1)).unwrap();
        assert_eq!(
            m.enqueue(0, zero_grad(1, 1, 5)),
            Err(NodeError::UnknownWorker(5))
        );
        assert!(m.apply_gradient(&zero_grad(1, 1, 0), 7).is_err());
        assert!(m.apply_gradient(&zero_grad(2, 1, 0), 0).is_err());
    }

    #[test]
    fn history_lookup() {
        let mut h = WeightHistory::new(CompoundWeight::zeros(1, 1), 3);
        for v in 1..=5 {
            let mut w = CompoundWeight::zeros(1, 1);
            w.set_version(v);
            h.push(w);
        }
        assert_eq!(h.get(5).unwrap().version(), 5);
        assert_eq!(h.get(3).unwrap().version(), 3);
        assert!(h.get(2).is_none());
        assert_eq!(h.get(0).unwrap().version(), 0);
        assert_eq!(h.oldest().version(), 3);
    }

    #[test]
    fn outage_counter_law() {
        let mut t = OutageTable::new(4, 3);
        for (round, j) in [2usize, 0, 0, 3, 1].into_iter().enumerate() {
            t.record_use(j);
            assert_eq!(t.get(j), 0);
            assert_eq!(*t.counters().iter().min().unwrap(), 0);
            assert!(t.counters().iter().all(|&c| c <= round as u64 + 1));
        }
        assert_eq!(t.counters(), &[2, 0, 4, 1]);
    }
}
