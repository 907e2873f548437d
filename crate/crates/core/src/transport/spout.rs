use serde::{Deserialize, Serialize};

use crate::math::CompoundInstance;
use crate::rng::{tags, SplitMix64};
use crate::synth::{SampleStream, SynthError, TaskFamily};
use crate::wire::{Body, DataPayload, Envelope, NodeId};

use super::TransportError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Task 0, 1, ..., K-1, then again, skipping tasks whose count is spent.
    #[default]
    RoundRobin,
    /// A seeded permutation of the round-robin sequence.
    Shuffled,
}

/// One routed instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub index: u64,
    pub worker: usize,
    pub instance: CompoundInstance,
}

impl Dispatch {
    pub fn into_envelope(self, time: u64) -> Envelope {
        Envelope {
            sender: NodeId::Spout,
            receiver: NodeId::Worker(self.worker),
            seq: self.index,
            time,
            body: Body::Data(DataPayload::new(self.index, self.instance)),
        }
    }
}

/// Routes an instance stream to workers chosen uniformly at random.
pub struct Spout {
    source: Box<dyn Iterator<Item = CompoundInstance> + Send>,
    route: SplitMix64,
    workers: u64,
    next_index: u64,
}

impl std::fmt::Debug for Spout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spout")
            .field("workers", &self.workers)
            .field("next_index", &self.next_index)
            .finish()
    }
}

impl Spout {
    /// Routes a pre-built instance sequence, e.g. one read from a dataset file.
    pub fn from_instances<I>(instances: I, seed: u64, workers: usize) -> Result<Self, TransportError>
    where
        I: IntoIterator<Item = CompoundInstance>,
        I::IntoIter: Send + 'static,
    {
        if workers == 0 {
            return Err(TransportError::NoWorkers);
        }
        Ok(Self {
            source: Box::new(instances.into_iter()),
            route: SplitMix64::substream(seed, tags::ROUTE, 0),
            workers: workers as u64,
            next_index: 0,
        })
    }
}

impl Iterator for Spout {
    type Item = Dispatch;

    fn next(&mut self) -> Option<Dispatch> {
        let instance = self.source.next()?;
        let worker = self.route.below(self.workers) as usize;
        let index = self.next_index;
        self.next_index += 1;
        Some(Dispatch {
            index,
            worker,
            instance,
        })
    }
}

/// Task visiting order for per-task counts `schedule`.
pub fn task_order(schedule: &[usize], interleave: Interleave, seed: u64) -> Vec<usize> {
    let total: usize = schedule.iter().sum();
    let mut order = Vec::with_capacity(total);
    let mut left = schedule.to_vec();
    while order.len() < total {
        for (t, n) in left.iter_mut().enumerate() {
            if *n > 0 {
                *n -= 1;
                order.push(t);
            }
        }
    }
    if interleave == Interleave::Shuffled {
        let mut rng = SplitMix64::substream(seed, tags::ORDER, 0);
        for i in (1..order.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
    }
    order
}

struct FamilySource {
    order: std::vec::IntoIter<usize>,
    streams: Vec<SampleStream>,
}

impl Iterator for FamilySource {
    type Item = CompoundInstance;

    fn next(&mut self) -> Option<CompoundInstance> {
        let t = self.order.next()?;
        self.streams[t].next()
    }
}

/// Draws `schedule[t]` samples from task `t` and routes them to `workers`
/// workers. Sampling, ordering and routing use separate substreams of `seed`.
pub fn spout_dispatch(
    family: &TaskFamily,
    schedule: &[usize],
    seed: u64,
    workers: usize,
    interleave: Interleave,
) -> Result<Spout, TransportError> {
    let streams = (0..schedule.len())
        .map(|t| SampleStream::new(family, t, seed))
        .collect::<Result<Vec<_>, SynthError>>()?;
    let source = FamilySource {
        order: task_order(schedule, interleave, seed).into_iter(),
        streams,
    };
    Spout::from_instances(source, seed, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_family;

    #[test]
    fn one_worker_gets_everything() {
        let f = generate_family(4, 0.3, 1).unwrap();
        let s = spout_dispatch(&f, &[5; 4], 1, 1, Interleave::RoundRobin).unwrap();
        assert!(s.map(|d| d.worker).all(|w| w == 0));
    }

    #[test]
    fn empty_schedule_is_empty() {
        let f = generate_family(4, 0.3, 1).unwrap();
        assert_eq!(spout_dispatch(&f, &[], 1, 3, Interleave::RoundRobin).unwrap().count(), 0);
        assert_eq!(spout_dispatch(&f, &[0; 4], 1, 3, Interleave::Shuffled).unwrap().count(), 0);
    }

    #[test]
    fn no_workers_is_an_error() {
        let f = generate_family(2, 0.3, 1).unwrap();
        assert!(matches!(
            spout_dispatch(&f, &[1, 1], 1, 0, Interleave::RoundRobin),
            Err(TransportError::NoWorkers)
        ));
    }

    #[test]
    fn round_robin_order() {
        assert_eq!(
            task_order(&[2, 0, 3], Interleave::RoundRobin, 0),
            vec![0, 2, 0, 2, 2]
        );
        let mut shuffled = task_order(&[2, 0, 3], Interleave::Shuffled, 4);
        shuffled.sort();
        assert_eq!(shuffled, vec![0, 0, 2, 2, 2]);
    }

    #[test]
    fn per_task_streams_ignore_order() {
        let f = generate_family(3, 0.3, 8).unwrap();
        let rr: Vec<_> = spout_dispatch(&f, &[4; 3], 8, 2, Interleave::RoundRobin)
            .unwrap()
            .map(|d| d.instance)
            .collect();
        let sh: Vec<_> = spout_dispatch(&f, &[4; 3], 8, 2, Interleave::Shuffled)
            .unwrap()
            .map(|d| d.instance)
            .collect();
        for t in 0..3 {
            let a: Vec<_> = rr.iter().filter(|i| i.task == t).collect();
            let b: Vec<_> = sh.iter().filter(|i| i.task == t).collect();
            assert_eq!(a, b);
        }
    }
}
