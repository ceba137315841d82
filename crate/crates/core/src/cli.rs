//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::aipw::ClientScores;
use crate::datagen::allocate;
use crate::diagnostics::{shift_report, skewness};
use crate::error::{FedoplError, Result};
use crate::experiments::{run_experiment, Manifest, Scenario};
use crate::federation::{run_fedopl, Scheduler};
use crate::report;
use crate::rng::{derive_seed, purpose, substream};
use crate::types::ClientSamplingDistribution;

#[derive(Debug, Parser)]
#[command(name = "fedopl", version, about = "Federated offline policy learning on synthetic multi-client bandit data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario over its sample-size grid and seeds.
    Experiment(CommonArgs),
    /// Train one global policy with FedOPL at a single sample size.
    Fedopl(StageArgs),
    /// Compute cross-fitted AIPW scores at a single sample size.
    Aipw(StageArgs),
    /// Skewness and distribution-shift diagnostics.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// homogeneous or heterogeneous
    #[arg(long)]
    pub scenario: Option<String>,
    /// TOML manifest; missing keys take the scenario defaults
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to FEDOPL_THREADS, then all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated sample sizes
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// empirical or skewed
    #[arg(long)]
    pub lambda_mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Manifest override, repeatable (e.g. --set nuisance.l2=0.01)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Total sample size; defaults to the largest grid point
    #[arg(long)]
    pub n: Option<usize>,
    /// Run clients on their own threads instead of sequentially
    #[arg(long)]
    pub threaded: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Client sampling weights, comma-separated
    #[arg(long, value_delimiter = ',', requires = "counts")]
    pub lambda: Option<Vec<f64>>,
    /// Client sample counts, comma-separated
    #[arg(long, value_delimiter = ',', requires = "lambda")]
    pub counts: Option<Vec<usize>>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(g) = &self.grid {
            let items: Vec<String> = g.iter().map(usize::to_string).collect();
            out.push(("grid".into(), format!("[{}]", items.join(","))));
        }
        if let Some(s) = self.seeds {
            out.push(("seeds".into(), s.to_string()));
        }
        if let Some(m) = &self.lambda_mode {
            if m != "empirical" && m != "skewed" {
                return Err(FedoplError::Config(format!("unknown lambda mode `{m}`")));
            }
            out.push(("lambda_mode".into(), format!("\"{m}\"")));
        }
        if let Some(a) = self.alpha {
            out.push(("alpha".into(), format!("{a:?}")));
        }
        for (key, v) in [("rounds", self.rounds), ("local_steps", self.local_steps), ("batch", self.batch)] {
            if let Some(v) = v {
                out.push((key.into(), v.to_string()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| FedoplError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let text = match &self.manifest {
            Some(p) => Some(
                fs::read_to_string(p)
                    .map_err(|e| FedoplError::Config(format!("cannot read manifest {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let scenario = self.scenario.as_deref().map(str::parse::<Scenario>).transpose()?;
        Manifest::resolve(text.as_deref(), scenario, &self.overrides()?)
    }

    pub fn threads(&self) -> Result<usize> {
        if let Some(t) = self.threads {
            return Ok(t.max(1));
        }
        match std::env::var("FEDOPL_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map(|t| t.max(1))
                .map_err(|_| FedoplError::Config(format!("FEDOPL_THREADS=`{v}` is not a thread count"))),
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
        }
    }

    fn prepare_out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .map_err(|e| FedoplError::Config(format!("output directory {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            }
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_configuration() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Experiment(args) => experiment(&args),
        Command::Fedopl(args) => fedopl(&args),
        Command::Aipw(args) => aipw(&args),
        Command::Diagnose(args) => diagnose(&args),
    }
}

fn experiment(args: &CommonArgs) -> Result<()> {
    let manifest = args.manifest()?;
    let threads = args.threads()?;
    let dir = args.prepare_out()?;
    let out = run_experiment::<f64>(&manifest, threads)?;
    report::write_experiment(dir, &out)?;
    for w in out.warnings() {
        log::debug!("{w}");
    }
    println!(
        "{}: {} cells, {} failed; results in {}",
        manifest.scenario.name(),
        out.cells.len(),
        out.failures.len(),
        dir.display()
    );
    Ok(())
}

/// Cross-fitted scores of every client for seed 0 at sample size `n`.
fn stage_scores(manifest: &Manifest, n: usize, threads: usize) -> Result<(Vec<ClientScores<f64>>, Vec<usize>)> {
    let dims = manifest.dims()?;
    let specs = manifest.specs::<f64>()?;
    let counts = allocate(manifest.allocation, n, manifest.clients)?;
    let cell = derive_seed(manifest.seed, &[n as u64, 0]);
    let cfg = manifest.nuisance_config::<f64>();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FedoplError::Config(format!("thread pool: {e}")))?;
    let scores = pool.install(|| {
        specs
            .iter()
            .zip(&counts)
            .map(|(spec, &nc)| {
                let c = spec.client_id as u64;
                let data = crate::datagen::sample_dataset(spec, nc, &mut substream(cell, &[purpose::TRAIN, c]));
                let k = manifest.folds.min(nc).max(1);
                let fit = crate::aipw::cross_fit_scores(&data, dims, k, &cfg, &mut substream(cell, &[purpose::FOLDS, purpose::TRAIN, c]))?;
                Ok(fit.scores)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((scores, counts))
}

fn stage_n(args: &StageArgs, manifest: &Manifest) -> Result<usize> {
    let n = args.n.unwrap_or(manifest.n_max);
    allocate(manifest.allocation, n, manifest.clients).map_err(|e| FedoplError::Config(e.to_string()))?;
    Ok(n)
}

fn fedopl(args: &StageArgs) -> Result<()> {
    let manifest = args.common.manifest()?;
    let n = stage_n(args, &manifest)?;
    let dir = args.common.prepare_out()?;
    let (scores, counts) = stage_scores(&manifest, n, args.common.threads()?)?;
    let mut cfg = manifest.round_config(manifest.lambda_for::<f64>(&counts)?, manifest.rounds);
    if args.threaded {
        cfg.scheduler = Scheduler::Threaded;
    }
    let cell = derive_seed(manifest.seed, &[n as u64, 0]);
    let out = run_fedopl(&scores, manifest.dims()?, &cfg, derive_seed(cell, &[purpose::BATCHES]))?;
    fs::write(dir.join("manifest_resolved.toml"), manifest.to_toml()?)?;
    let mut w = report::writer(fs::File::create(dir.join("training_log.csv"))?, &report::TRAINING_LOG_HEADER)?;
    report::write_training_log(&mut w, n, 0, &out.log)?;
    w.flush()?;
    report::write_policy(fs::File::create(dir.join("policy.csv"))?, &out.policy)?;
    for warning in &out.warnings {
        log::warn!("{warning}");
    }
    let last = out.log.last().map_or(0.0, |l| l.theta_norm);
    println!("fedopl: n={n} rounds={} final theta norm {last}", out.log.len());
    Ok(())
}

fn aipw(args: &StageArgs) -> Result<()> {
    let manifest = args.common.manifest()?;
    let n = stage_n(args, &manifest)?;
    let dir = args.common.prepare_out()?;
    let (scores, _) = stage_scores(&manifest, n, args.common.threads()?)?;
    fs::write(dir.join("manifest_resolved.toml"), manifest.to_toml()?)?;
    report::write_scores(fs::File::create(dir.join("scores.csv"))?, &scores)?;
    for s in &scores {
        println!("aipw: client {} rows {}", s.client_id, s.len());
    }
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let dir = args.common.prepare_out()?;
    let mut w = report::writer(fs::File::create(dir.join("skewness.csv"))?, &report::SKEWNESS_HEADER)?;
    if let (Some(lambda), Some(counts)) = (&args.lambda, &args.counts) {
        if lambda.len() != counts.len() {
            return Err(FedoplError::Config(format!(
                "{} weights for {} clients",
                lambda.len(),
                counts.len()
            )));
        }
        let lambda = ClientSamplingDistribution::new(lambda.clone()).map_err(|e| FedoplError::Config(e.to_string()))?;
        let rep = skewness(&lambda, counts)?;
        let row = report::skewness_row(&rep, counts.iter().sum());
        report::write_skewness(&mut w, "custom", &row)?;
        w.flush()?;
        match (rep.skewness, rep.chi2) {
            (Some(s), Some(c)) => println!("skewness={s} chi2={c}"),
            _ => println!("skewness=inf (weight on empty clients {:?})", rep.infinite_mass),
        }
        return Ok(());
    }
    let manifest = args.common.manifest()?;
    let scenario = manifest.scenario.name();
    for &n in &manifest.grid {
        let counts = allocate(manifest.allocation, n, manifest.clients)?;
        let rep = skewness(&manifest.lambda_for::<f64>(&counts)?, &counts)?;
        report::write_skewness(&mut w, scenario, &report::skewness_row(&rep, n))?;
    }
    w.flush()?;
    let specs = manifest.specs::<f64>()?;
    let lambda = manifest.lambda_for::<f64>(&allocate(manifest.allocation, manifest.n_max, manifest.clients)?)?;
    let shift = shift_report(&specs, &lambda, manifest.shift_draws, manifest.seed)?;
    let mut w = report::writer(fs::File::create(dir.join("shift.csv"))?, &report::SHIFT_HEADER)?;
    report::write_shift(&mut w, &shift)?;
    w.flush()?;
    fs::write(dir.join("manifest_resolved.toml"), manifest.to_toml()?)?;
    for (c, tv) in shift.tv_upper.iter().enumerate() {
        println!("client {c}: tv_upper={tv}");
    }
    Ok(())
}
