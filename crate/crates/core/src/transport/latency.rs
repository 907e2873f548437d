use serde::{Deserialize, Serialize};

use crate::rng::{tags, SplitMix64};
use crate::wire::Kind;

/// Delay distribution in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Delay {
    #[default]
    Zero,
    Fixed {
        micros: u64,
    },
    Uniform {
        lo: u64,
        hi: u64,
    },
}

impl Delay {
    fn sample(self, rng: &mut SplitMix64) -> u64 {
        match self {
            Delay::Zero => 0,
            Delay::Fixed { micros } => micros,
            Delay::Uniform { lo, hi } if hi <= lo => lo,
            Delay::Uniform { lo, hi } => lo + rng.below(hi - lo + 1),
        }
    }

    pub fn is_zero(self) -> bool {
        matches!(self, Delay::Zero | Delay::Fixed { micros: 0 })
            || matches!(self, Delay::Uniform { lo: 0, hi: 0 })
    }
}

/// One delay distribution per link direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    /// Spout to worker.
    pub data: Delay,
    /// Worker to master, pull requests.
    pub pull: Delay,
    /// Master to worker.
    pub model: Delay,
    /// Worker to master, gradients and shutdown.
    pub gradient: Delay,
    pub seed: u64,
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn delay_for(&self, kind: Kind) -> Delay {
        match kind {
            Kind::Data => self.data,
            Kind::PullRequest => self.pull,
            Kind::Model => self.model,
            Kind::Gradient | Kind::Shutdown => self.gradient,
        }
    }

    pub fn sampler(&self) -> LatencySampler {
        LatencySampler {
            model: *self,
            rng: SplitMix64::substream(self.seed, tags::LATENCY, 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: SplitMix64,
}

impl LatencySampler {
    pub fn sample(&mut self, kind: Kind) -> u64 {
        self.model.delay_for(kind).sample(&mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_are_deterministic_and_in_range() {
        let m = LatencyModel {
            gradient: Delay::Uniform { lo: 10, hi: 20 },
            model: Delay::Fixed { micros: 7 },
            seed: 3,
            ..Default::default()
        };
        let mut a = m.sampler();
        let mut b = m.sampler();
        for _ in 0..200 {
            let x = a.sample(Kind::Gradient);
            assert_eq!(x, b.sample(Kind::Gradient));
            assert!((10..=20).contains(&x));
        }
        assert_eq!(a.sample(Kind::Model), 7);
        assert_eq!(a.sample(Kind::Data), 0);
    }

    #[test]
    fn serde_shape() {
        let d: Delay = serde_json::from_str(r#"{"type":"fixed","micros":50000}"#).unwrap();
        assert_eq!(d, Delay::Fixed { micros: 50000 });
        let m: LatencyModel = serde_json::from_str(r#"{"seed":1}"#).unwrap();
        assert_eq!(m.gradient, Delay::Zero);
    }
}
