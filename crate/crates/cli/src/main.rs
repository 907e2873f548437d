use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use doml::experiment::{
    compare, run_experiment, sparsity_trace, write_dataset_file, write_outputs, Algorithm,
    ExperimentConfig, ExperimentError, Mode,
};
use doml::transport::Interleave;

#[derive(Parser)]
#[command(name = "doml", version, about = "Distributed online multitask learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as one record per line.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one experiment and write its metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides the config's `output`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Final error of several algorithms across several seeds.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "doml,oml,ol")]
        algorithms: Vec<Algorithm>,
        /// Exit nonzero unless DOML and OML agree within 2 points and both
        /// beat OL by at least 2 points.
        #[arg(long)]
        check: bool,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the nonzero-block bitmap of the first transmitted gradients.
    Trace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        rows: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Use 15,000 samples per task.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    k: Option<usize>,
    /// Number of workers.
    #[arg(long = "workers")]
    n: Option<usize>,
    #[arg(long)]
    samples_per_task: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    tau_max: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    metrics_interval: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    transcript: bool,
    #[arg(long)]
    strict_staleness: bool,
    #[arg(long)]
    ol_projection: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "lockstep" => Ok(Mode::Lockstep),
        "socket" => Ok(Mode::Socket),
        _ => Err(format!("unknown mode `{s}` (lockstep, socket)")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.full_scale {
            c.samples_per_task = ExperimentConfig::full_scale().samples_per_task;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            k => k, n => n, samples_per_task => samples_per_task, sigma => sigma,
            seed => seed, eta => hp.eta, lambda => hp.lambda, b => hp.b,
            radius => hp.radius, buffer => hp.buffer, tau_max => hp.tau_max,
            mode => mode, algorithm => algorithm, metrics_interval => metrics_interval,
        );
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        if self.shuffle {
            c.interleave = Interleave::Shuffled;
        }
        c.write_transcript |= self.transcript;
        c.strict_staleness |= self.strict_staleness;
        c.ol_projection |= self.ol_projection;
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let h = write_dataset_file(&cfg, &out)?;
            println!("wrote {} records for {} tasks to {}", h.count, h.k, out.display());
        }
        Command::Run { cfg, out } => {
            let mut cfg = cfg.resolve()?;
            if out.is_some() {
                cfg.output = out;
            }
            let report = run_experiment(&cfg)?;
            if let Some(dir) = &cfg.output {
                write_outputs(&report, &cfg, dir)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Command::Compare {
            cfg,
            seeds,
            algorithms,
            check,
            json,
        } => {
            let cfg = cfg.resolve()?;
            let table = compare(&cfg, &algorithms, &seeds)?;
            print!("{}", table.render());
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&table)?)?;
            }
            if check {
                let (Some(d), Some(o), Some(l)) = (
                    table.mean(Algorithm::Doml),
                    table.mean(Algorithm::Oml),
                    table.mean(Algorithm::Ol),
                ) else {
                    eprintln!("--check needs doml, oml and ol");
                    return Ok(ExitCode::from(2));
                };
                let ok = (d - o).abs() <= 0.02 && d <= l - 0.02 && o <= l - 0.02;
                println!("check: {}", if ok { "pass" } else { "FAIL" });
                if !ok {
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Trace { cfg, rows } => {
            let mut cfg = cfg.resolve()?;
            cfg.algorithm = Algorithm::Doml;
            let report = run_experiment(&cfg)?;
            for r in sparsity_trace(&report.updates, rows) {
                println!("{:>5} w{:<3} {:>3} {}", r.round, r.worker, r.blocks.len(), r.bitmap(cfg.k));
            }
            if let Some(s) = report.summary.mean_sparsity {
                println!("mean nonzero fraction {s:.4}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
