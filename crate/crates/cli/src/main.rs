use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use primcert::bounds::Categorical;
use primcert::config::PipelineConfig;
use primcert::es::{self, TrainerState};
use primcert::export;
use primcert::matrix::CostMatrix;
use primcert::pipeline::{
    certify_matrix, read_json, write_json, CertificateFile, Pipeline, PolicySet, PosteriorFile, PriorFile,
};
use primcert::{Error, Result, FORMAT_VERSION};

const PRIOR: &str = "prior.json";
const CHECKPOINT: &str = "checkpoint.json";
const TRAINING_LOG: &str = "training_log.csv";
const POLICIES: &str = "policies.json";
const COST_MATRIX: &str = "cost_matrix.pbcm";
const CERTIFICATE: &str = "certificate.json";
const POSTERIOR: &str = "posterior.json";
const VALIDATION: &str = "validation.json";
const CHECKPOINT_EVERY: usize = 25;

/// Train, certify and validate motion-primitive planning policies.
#[derive(Parser)]
#[command(name = "primcert", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the ES and policy-sampling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rollouts.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Continue from existing artifacts (training checkpoint, cost matrix).
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the Gaussian prior with evolution strategies.
    TrainPrior,
    /// Draw the finite policy set from the prior.
    SamplePolicies,
    /// Roll out every policy on the bound environments.
    EvalCosts,
    /// Optimize the posterior and write the certificate.
    Certify,
    /// Replicate the pipeline and compare bounds with held-out costs.
    Validate {
        /// Number of replications; defaults to `validate.trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Write plot-ready CSV files.
    Export {
        /// Certificates for the bound-versus-N curve; defaults to the run's own.
        #[arg(long, num_args = 1..)]
        certificates: Vec<PathBuf>,
        /// Environment seeds to record trajectories on.
        #[arg(long, num_args = 1..)]
        trace_seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut config = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.es.seed = seed;
        config.seeds.policy_sampling = seed;
    }
    if let Command::Validate { trials: Some(t) } = &cli.command {
        config.validate.trials = *t;
    }
    if c.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let pipeline = Pipeline::new(config)?;
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("config.toml"), pipeline.config.to_toml())?;

    match &cli.command {
        Command::TrainPrior => train_prior(&pipeline, c),
        Command::SamplePolicies => {
            let prior: PriorFile = require(&c.out, PRIOR, "train-prior")?;
            let set = pipeline.sample_policies(&prior, 0)?;
            write_json(&c.out.join(POLICIES), &set)?;
            println!("sampled {} policies", set.len());
            Ok(())
        }
        Command::EvalCosts => {
            let set: PolicySet = require(&c.out, POLICIES, "sample-policies")?;
            let matrix = cost_matrix(&pipeline, &set, c, true)?;
            println!("cost matrix {}x{}, mean cost {:.4}", matrix.m(), matrix.n(), mean(matrix.values()));
            Ok(())
        }
        Command::Certify => certify(&pipeline, c),
        Command::Validate { .. } => {
            let prior: PriorFile = require(&c.out, PRIOR, "train-prior")?;
            let report = pipeline.validate(&prior, pipeline.config.validate.trials, c.workers)?;
            write_json(&c.out.join(VALIDATION), &report)?;
            for t in &report.trials {
                println!(
                    "trial {:>3}: bound {:.4}  estimate {:.4} +- {:.4}  gap {:+.4}{}",
                    t.trial,
                    t.bound,
                    t.estimate,
                    t.std_error,
                    t.gap,
                    if t.violated { "  VIOLATED" } else { "" }
                );
            }
            println!("{} of {} replications violated the bound", report.violations, report.trials.len());
            Ok(())
        }
        Command::Export { certificates, trace_seeds } => export_all(&pipeline, c, certificates, trace_seeds),
    }
}

fn require<T: for<'de> serde::Deserialize<'de>>(out: &Path, name: &str, producer: &str) -> Result<T> {
    let path = out.join(name);
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run `{producer}` first", path.display())));
    }
    read_json(&path)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn train_prior(pipeline: &Pipeline, c: &Common) -> Result<()> {
    let ckpt = c.out.join(CHECKPOINT);
    let log_path = c.out.join(TRAINING_LOG);
    let (state, mut log) = if c.resume && ckpt.exists() {
        let state = TrainerState::load(&ckpt)?;
        let log = if log_path.exists() { es::read_training_log(&log_path)? } else { Vec::new() };
        let log = log.into_iter().filter(|r| r.iteration < state.iteration).collect();
        (state, log)
    } else {
        (pipeline.initial_state()?, Vec::new())
    };
    let start = state.iteration;
    let (prior, _, new_rows) = pipeline.train_prior(state, c.workers, Some((&ckpt, CHECKPOINT_EVERY)))?;
    log.extend(new_rows);
    es::write_training_log(&log, std::fs::File::create(&log_path)?)?;
    write_json(&c.out.join(PRIOR), &prior)?;
    match log.last() {
        Some(last) => println!(
            "trained iterations {start}..{}; last empirical cost {:.4} ({})",
            prior.iterations, last.empirical_cost, last.mode
        ),
        None => println!("prior already trained for {} iterations", prior.iterations),
    }
    Ok(())
}

/// Builds the bound-data cost matrix, or under `--resume` reuses a stored
/// one when `set` is the policy set it was computed for.
fn cost_matrix(pipeline: &Pipeline, set: &PolicySet, c: &Common, set_unchanged: bool) -> Result<CostMatrix> {
    let path = c.out.join(COST_MATRIX);
    let seeds = pipeline.config.pac_seeds(0);
    if c.resume && set_unchanged && path.exists() {
        let stored = CostMatrix::read(&path)?;
        if stored.policy_ids == set.ids && stored.env_seeds == seeds {
            return Ok(stored);
        }
    }
    let matrix = pipeline.build_cost_matrix(set, &seeds, c.workers)?;
    matrix.write(&path)?;
    Ok(matrix)
}

fn certify(pipeline: &Pipeline, c: &Common) -> Result<()> {
    let prior: PriorFile = require(&c.out, PRIOR, "train-prior")?;
    let set = pipeline.sample_policies(&prior, 0)?;
    let stored = c.out.join(POLICIES);
    let unchanged = stored.exists() && read_json::<PolicySet>(&stored).is_ok_and(|old| old == set);
    write_json(&stored, &set)?;
    let matrix = cost_matrix(pipeline, &set, c, unchanged)?;
    let outcome = certify_matrix(&matrix, pipeline.config.pac.delta, pipeline.config.pac.k)
        .map_err(|e| e.in_stage("certify"))?;
    let file = outcome.to_file();
    write_json(&c.out.join(CERTIFICATE), &file)?;
    let posterior = PosteriorFile {
        spec_version: FORMAT_VERSION.to_owned(),
        policy_ids: set.ids.clone(),
        probabilities: outcome.posterior().clone(),
    };
    write_json(&c.out.join(POSTERIOR), &posterior)?;
    let cert = &file.certificate;
    println!(
        "C_S {:.4}  KL {:.4}  C_PAC {:.4}  C_QPAC {:.4}  selected {} = {:.4} (prior {:.4})",
        cert.c_s, cert.kl, cert.c_pac, cert.c_qpac, cert.selected_bound, cert.selected_value, file.prior_bound
    );
    println!("{}", file.guarantee);
    Ok(())
}

fn export_all(pipeline: &Pipeline, c: &Common, certificates: &[PathBuf], trace_seeds: &[u64]) -> Result<()> {
    let log_path = c.out.join(TRAINING_LOG);
    let log = if log_path.exists() { es::read_training_log(&log_path)? } else { Vec::new() };
    export::learning_curve(&log, std::fs::File::create(c.out.join("learning_curve.csv"))?)?;

    let mut cert_paths = certificates.to_vec();
    let own = c.out.join(CERTIFICATE);
    if cert_paths.is_empty() && own.exists() {
        cert_paths.push(own);
    }
    let certs = cert_paths.iter().map(|p| read_json::<CertificateFile>(p)).collect::<Result<Vec<_>>>()?;
    export::bound_curve(&certs, std::fs::File::create(c.out.join("bound_curve.csv"))?)?;

    let mut written = vec!["learning_curve.csv", "bound_curve.csv"];
    if !trace_seeds.is_empty() {
        let set: PolicySet = require(&c.out, POLICIES, "certify")?;
        let posterior: PosteriorFile = require(&c.out, POSTERIOR, "certify")?;
        let best = most_likely(&posterior.probabilities);
        let mut traces = Vec::new();
        for &seed in trace_seeds {
            let env = pipeline.sim.environment(seed)?;
            let policy = pipeline.sim.rollout(&pipeline.planner(&set.weights[best]), &env)?;
            traces.push((format!("policy{}-env{seed}", set.ids[best]), policy.trace));
            let filter = pipeline.sim.rollout(&pipeline.filter, &env)?;
            traces.push((format!("depth-filter-env{seed}"), filter.trace));
        }
        export::trajectories(&traces, std::fs::File::create(c.out.join("trajectories.csv"))?)?;
        written.push("trajectories.csv");
    }
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn most_likely(p: &Categorical) -> usize {
    let probs = p.probs();
    (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best })
}
