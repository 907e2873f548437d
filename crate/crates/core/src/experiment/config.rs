use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::math::HyperParams;
use crate::synth::FEATURE_DIM;
use crate::transport::{Interleave, LatencyModel, RetryPolicy, SocketOptions};

use super::ExperimentError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Lockstep,
    Socket,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Doml,
    Oml,
    Ol,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Doml, Algorithm::Oml, Algorithm::Ol];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Doml => "doml",
            Algorithm::Oml => "oml",
            Algorithm::Ol => "ol",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "doml" => Ok(Algorithm::Doml),
            "oml" => Ok(Algorithm::Oml),
            "ol" => Ok(Algorithm::Ol),
            _ => Err(format!("unknown algorithm `{s}` (doml, oml, ol)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocketConfig {
    pub host: String,
    pub master_port: u16,
    pub worker_port_base: u16,
    pub abort_timeout_ms: u64,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
}

impl Default for SocketConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            master_port: 0,
            worker_port_base: 0,
            abort_timeout_ms: 30_000,
            retry_attempts: 5,
            retry_backoff_ms: 20,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of tasks.
    pub k: usize,
    /// Number of workers.
    pub n: usize,
    pub d: usize,
    pub samples_per_task: usize,
    pub sigma: f64,
    pub seed: u64,
    pub hp: HyperParams,
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub output: Option<PathBuf>,
    /// Read instances from an exported dataset instead of generating them.
    pub dataset: Option<PathBuf>,
    pub interleave: Interleave,
    /// Emit a metrics record every this many samples per task.
    pub metrics_interval: usize,
    /// Rows kept in the sparsity bitmap.
    pub sparsity_rows: usize,
    pub latency: LatencyModel,
    /// Virtual microseconds between spout sends in lockstep mode.
    pub spout_interval_us: u64,
    /// Use the gradient's own basis version for the regularizer.
    pub strict_staleness: bool,
    pub ol_projection: bool,
    pub socket: SocketConfig,
    pub write_transcript: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 64,
            n: 8,
            d: FEATURE_DIM,
            samples_per_task: 2000,
            sigma: 0.3,
            seed: 1,
            hp: HyperParams::default(),
            mode: Mode::Lockstep,
            algorithm: Algorithm::Doml,
            output: None,
            dataset: None,
            interleave: Interleave::RoundRobin,
            metrics_interval: 100,
            sparsity_rows: 100,
            latency: LatencyModel::zero(),
            spout_interval_us: 100,
            strict_staleness: false,
            ol_projection: false,
            socket: SocketConfig::default(),
            write_transcript: false,
        }
    }
}

fn field(name: &'static str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: name,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// The full-scale profile: 15,000 samples per task.
    pub fn full_scale() -> Self {
        Self {
            samples_per_task: 15_000,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.k == 0 {
            return Err(field("k", "must be positive"));
        }
        if self.n == 0 {
            return Err(field("n", "must be positive"));
        }
        if self.d != FEATURE_DIM {
            return Err(field("d", format!("must be {FEATURE_DIM} for the synthetic family")));
        }
        if self.samples_per_task == 0 && self.dataset.is_none() {
            return Err(field("samples_per_task", "must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(field("sigma", "must be finite and non-negative"));
        }
        if self.metrics_interval == 0 {
            return Err(field("metrics_interval", "must be positive"));
        }
        self.hp.validate().map_err(|e| match e {
            crate::math::MathError::InvalidHyperParam { name, reason } => ExperimentError::Config {
                field: match name {
                    "eta" => "hp.eta",
                    "lambda" => "hp.lambda",
                    "b" => "hp.b",
                    "radius" => "hp.radius",
                    "buffer" => "hp.buffer",
                    _ => "hp",
                },
                reason,
            },
            other => field("hp", other.to_string()),
        })?;
        if let crate::transport::Delay::Uniform { lo, hi } = self.latency.gradient {
            if hi < lo {
                return Err(field("latency.gradient", "hi must not be below lo"));
            }
        }
        Ok(())
    }

    pub fn socket_options(&self) -> SocketOptions {
        SocketOptions {
            host: self.socket.host.clone(),
            master_port: self.socket.master_port,
            worker_port_base: self.socket.worker_port_base,
            latency: self.latency,
            abort_timeout: Duration::from_millis(self.socket.abort_timeout_ms),
            retry: RetryPolicy {
                attempts: self.socket.retry_attempts,
                base_backoff: Duration::from_millis(self.socket.retry_backoff_ms),
            },
            kill_worker_after: None,
            record_transcript: true,
        }
        .with_env_overrides()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_profile() {
        let c = ExperimentConfig::default();
        assert_eq!((c.k, c.n, c.d, c.samples_per_task), (64, 8, 9, 2000));
        assert_eq!((c.hp.eta, c.hp.lambda, c.hp.b, c.hp.buffer), (0.01, 0.001, 6.0, 10));
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::full_scale().samples_per_task, 15_000);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"k": 4, "hp": {"buffer": 3}, "algorithm": "ol"}"#).unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.hp.buffer, 3);
        assert_eq!(c.hp.eta, 0.01);
        assert_eq!(c.algorithm, Algorithm::Ol);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kk": 4}"#).is_err());
    }

    #[test]
    fn field_level_errors() {
        let cases: [(fn(&mut ExperimentConfig), &str); 5] = [
            (|c| c.k = 0, "k"),
            (|c| c.n = 0, "n"),
            (|c| c.d = 3, "d"),
            (|c| c.sigma = f64::NAN, "sigma"),
            (|c| c.hp.buffer = 0, "hp.buffer"),
        ];
        for (edit, name) in cases {
            let mut c = ExperimentConfig::default();
            edit(&mut c);
            match c.validate() {
                Err(ExperimentError::Config { field, .. }) => assert_eq!(field, name),
                other => panic!("{name}: {other:?}"),
            }
        }
    }
}
