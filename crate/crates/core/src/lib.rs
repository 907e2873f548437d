pub mod baselines;
pub mod experiment;
pub mod master;
pub mod math;
pub mod rng;
pub mod synth;
pub mod transport;
pub mod wire;
pub mod worker;
