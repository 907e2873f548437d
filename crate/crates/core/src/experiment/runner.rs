use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{Ol, Oml};
use crate::master::{Master, UpdateRecord};
use crate::math::CompoundInstance;
use crate::synth::generate_family;
use crate::transport::{
    lockstep_run, socket_run, spout_dispatch, LockstepOptions, MessageCounts, RunOutcome, Spout,
    TranscriptEntry,
};
use crate::worker::{Prediction, Worker};

use super::{
    cumulative_error, mean_sparsity, read_dataset, sparsity_trace, write_curve_csv, write_dataset,
    write_per_task_csv, write_sparsity_csv, Algorithm, DatasetHeader, ExperimentConfig,
    ExperimentError, MetricsRecord, Mode,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub k: usize,
    pub n: usize,
    pub samples_per_task: usize,
    pub sigma: f64,
    pub seed: u64,
    pub samples: u64,
    pub final_error: f64,
    pub wall_seconds: f64,
    pub messages: Option<MessageCounts>,
    pub rounds: u64,
    pub gradients_sent: usize,
    pub queued_at_shutdown: usize,
    pub mean_sparsity: Option<f64>,
    pub max_tau: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub predictions: Vec<Prediction>,
    pub updates: Vec<UpdateRecord>,
    pub transcript: Vec<TranscriptEntry>,
    pub gradients_sent: Vec<(usize, u64)>,
    pub queued_at_shutdown: Vec<(usize, u64)>,
    pub final_weight: Vec<f64>,
}

/// The routed instance stream described by `cfg`.
pub fn build_spout(cfg: &ExperimentConfig) -> Result<Spout, ExperimentError> {
    match &cfg.dataset {
        Some(path) => {
            let (header, instances) = read_dataset(BufReader::new(File::open(path)?))?;
            if header.k != cfg.k {
                return Err(ExperimentError::Config {
                    field: "k",
                    reason: format!("dataset has {} tasks", header.k),
                });
            }
            Ok(Spout::from_instances(instances, cfg.seed, cfg.n)?)
        }
        None => {
            let family = generate_family(cfg.k, cfg.sigma, cfg.seed)?;
            Ok(spout_dispatch(
                &family,
                &vec![cfg.samples_per_task; cfg.k],
                cfg.seed,
                cfg.n,
                cfg.interleave,
            )?)
        }
    }
}

/// Instances in spout order.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(DatasetHeader, Vec<CompoundInstance>), ExperimentError> {
    cfg.validate()?;
    let instances: Vec<CompoundInstance> = build_spout(cfg)?.map(|d| d.instance).collect();
    Ok((
        DatasetHeader {
            k: cfg.k,
            sigma: cfg.sigma,
            seed: cfg.seed,
            count: instances.len(),
        },
        instances,
    ))
}

fn run_distributed(cfg: &ExperimentConfig, spout: Spout) -> Result<RunOutcome, ExperimentError> {
    let master = Master::new(cfg.k, cfg.d, cfg.n, cfg.hp)?.with_strict_staleness(cfg.strict_staleness);
    let workers = (0..cfg.n)
        .map(|i| Worker::new(i, cfg.k, cfg.d, cfg.hp.buffer))
        .collect();
    let out = match cfg.mode {
        Mode::Lockstep => {
            let opts = LockstepOptions {
                latency: cfg.latency,
                spout_interval: cfg.spout_interval_us,
                send_shutdown: true,
                record_transcript: cfg.write_transcript,
            };
            lockstep_run(master, workers, spout, &opts)?
        }
        Mode::Socket => socket_run(master, workers, spout, &cfg.socket_options())?,
    };
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let spout = build_spout(cfg)?;

    let mut predictions;
    let mut updates = Vec::new();
    let mut transcript = Vec::new();
    let mut gradients_sent = Vec::new();
    let mut queued = Vec::new();
    let mut messages = None;
    let mut rounds = 0;
    let final_weight;
    match cfg.algorithm {
        Algorithm::Doml => {
            let mut out = run_distributed(cfg, spout)?;
            predictions = out
                .workers
                .iter_mut()
                .flat_map(|w| w.take_predictions())
                .collect::<Vec<_>>();
            queued = out.queued_at_shutdown();
            rounds = out.master.round();
            updates = out.master.take_log();
            final_weight = out.master.weight().as_slice().to_vec();
            messages = Some(out.counts);
            gradients_sent = out.gradients_sent;
            transcript = out.transcript;
        }
        Algorithm::Oml => {
            let mut oml = Oml::new(cfg.k, cfg.d, cfg.hp)?;
            for d in spout {
                oml.step(d.index, &d.instance)?;
            }
            predictions = oml.take_predictions();
            final_weight = oml.weight().as_slice().to_vec();
        }
        Algorithm::Ol => {
            let mut ol = Ol::new(cfg.k, cfg.d, &cfg.hp)?;
            if cfg.ol_projection {
                ol = ol.with_projection(cfg.hp.radius);
            }
            for d in spout {
                ol.step(d.index, &d.instance)?;
            }
            predictions = ol.take_predictions();
            final_weight = ol.weight().to_vec();
        }
    }
    predictions.sort_by_key(|p| p.seq);
    if !cfg.write_transcript && cfg.mode == Mode::Socket {
        transcript.clear();
    }

    let records = cumulative_error(&predictions, cfg.k, cfg.metrics_interval);
    let final_error = records.last().map_or(0.0, |r| r.macro_error);
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        mode: cfg.mode,
        k: cfg.k,
        n: cfg.n,
        samples_per_task: cfg.samples_per_task,
        sigma: cfg.sigma,
        seed: cfg.seed,
        samples: predictions.len() as u64,
        final_error,
        wall_seconds: started.elapsed().as_secs_f64(),
        messages,
        rounds,
        gradients_sent: gradients_sent.len(),
        queued_at_shutdown: queued.len(),
        mean_sparsity: mean_sparsity(&updates, cfg.k),
        max_tau: updates.iter().map(|u| u.tau).max(),
    };
    Ok(RunReport {
        summary,
        records,
        predictions,
        updates,
        transcript,
        gradients_sent,
        queued_at_shutdown: queued,
        final_weight,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExperimentError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `config.json`, `summary.json`, `curve.csv`, `per_task.csv` and, for
/// distributed runs, `sparsity.csv` and `updates.jsonl`. `transcript.jsonl`
/// is written when the config asks for it.
pub fn write_outputs(report: &RunReport, cfg: &ExperimentConfig, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summary)? + "\n",
    )?;
    write_curve_csv(File::create(dir.join("curve.csv"))?, &report.records)?;
    if let Some(last) = report.records.last() {
        write_per_task_csv(File::create(dir.join("per_task.csv"))?, last)?;
    }
    if cfg.algorithm == Algorithm::Doml {
        let rows = sparsity_trace(&report.updates, cfg.sparsity_rows);
        write_sparsity_csv(File::create(dir.join("sparsity.csv"))?, &rows, cfg.k)?;
        write_jsonl(&dir.join("updates.jsonl"), &report.updates)?;
    }
    if cfg.write_transcript {
        write_jsonl(&dir.join("transcript.jsonl"), &report.transcript)?;
    }
    Ok(())
}

pub fn write_dataset_file(cfg: &ExperimentConfig, path: &Path) -> Result<DatasetHeader, ExperimentError> {
    let (header, instances) = generate_dataset(cfg)?;
    write_dataset(BufWriter::new(File::create(path)?), &header, &instances)?;
    Ok(header)
}

/// Final macro errors of several algorithms over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// `errors[a][s]` for algorithm `a` and seed `s`.
    pub errors: Vec<Vec<f64>>,
}

impl CompareTable {
    pub fn mean(&self, algorithm: Algorithm) -> Option<f64> {
        let a = self.algorithms.iter().position(|x| *x == algorithm)?;
        let e = &self.errors[a];
        Some(e.iter().sum::<f64>() / e.len() as f64)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<6}", "algo");
        for seed in &self.seeds {
            s.push_str(&format!(" {:>9}", format!("seed {seed}")));
        }
        s.push_str(&format!(" {:>9}\n", "mean"));
        for (a, row) in self.algorithms.iter().zip(&self.errors) {
            s.push_str(&format!("{:<6}", a.name()));
            for e in row {
                s.push_str(&format!(" {:>8.2}%", e * 100.0));
            }
            let mean = self.mean(*a).unwrap_or(f64::NAN);
            s.push_str(&format!(" {:>8.2}%\n", mean * 100.0));
        }
        s
    }
}

/// Runs every `(algorithm, seed)` pair of `base`, in parallel.
pub fn compare(
    base: &ExperimentConfig,
    algorithms: &[Algorithm],
    seeds: &[u64],
) -> Result<CompareTable, ExperimentError> {
    let jobs: Vec<(usize, usize)> = (0..algorithms.len())
        .flat_map(|a| (0..seeds.len()).map(move |s| (a, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<f64, ExperimentError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(a, si)) = jobs.get(j) else { break };
                let cfg = ExperimentConfig {
                    algorithm: algorithms[a],
                    seed: seeds[si],
                    write_transcript: false,
                    ..base.clone()
                };
                let r = run_experiment(&cfg).map(|rep| rep.summary.final_error);
                results.lock().expect("results lock")[j] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut errors = vec![vec![0.0; seeds.len()]; algorithms.len()];
    for (&(a, s), r) in jobs.iter().zip(results) {
        errors[a][s] = r.expect("every job ran")?;
    }
    Ok(CompareTable {
        algorithms: algorithms.to_vec(),
        seeds: seeds.to_vec(),
        errors,
    })
}
