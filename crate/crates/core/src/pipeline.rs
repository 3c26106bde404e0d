//! End-to-end certification: prior training, policy sampling, cost-matrix
//! evaluation, posterior optimization and held-out validation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{c_pac, c_qpac, kl_divergence, select_bound, BoundKind, Categorical, Certificate};
use crate::config::PipelineConfig;
use crate::error::{check_len, Error, Result};
use crate::es::{self, CostLandscape, GaussianPolicyDistribution, IterationLog, Trainer, TrainerState};
use crate::matrix::CostMatrix;
use crate::policy::{DepthFilter, NetPlanner, PolicyArchitecture};
use crate::rep::{optimize_pac, optimize_qpac, RepInstance, RepSolution};
use crate::rng;
use crate::sim::{self, CostEstimate, Environment, Simulator};
use crate::FORMAT_VERSION;

/// Trained prior over policy weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub spec_version: String,
    pub arch: PolicyArchitecture,
    pub iterations: u64,
    pub mu: Vec<f64>,
    pub log_sigma_sq: Vec<f64>,
}

impl PriorFile {
    pub fn new(arch: PolicyArchitecture, iterations: u64, dist: GaussianPolicyDistribution) -> Result<Self> {
        check_len(arch.d(), dist.d())?;
        Ok(Self { spec_version: FORMAT_VERSION.to_owned(), arch, iterations, mu: dist.mu, log_sigma_sq: dist.log_sigma_sq })
    }

    pub fn distribution(&self) -> Result<GaussianPolicyDistribution> {
        GaussianPolicyDistribution::new(self.mu.clone(), self.log_sigma_sq.clone())
    }
}

/// The finite policy set drawn from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub spec_version: String,
    pub arch: PolicyArchitecture,
    /// Stream key the draws came from.
    pub seed: Vec<u64>,
    pub ids: Vec<u64>,
    pub weights: Vec<Vec<f64>>,
}

impl PolicySet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Posterior over the policy set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub spec_version: String,
    pub policy_ids: Vec<u64>,
    pub probabilities: Categorical,
}

/// Everything `certify` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub spec_version: String,
    #[serde(flatten)]
    pub certificate: Certificate,
    pub solution: RepSolution,
    /// Bound of the uniform prior over the policy set.
    pub prior_bound: f64,
    /// Optimized objective values of the two bound forms.
    pub qpac_objective: f64,
    pub pac_objective: f64,
    pub guarantee: String,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// `m` draws `mu + sigma * eps_i`; draw `i` reads stream `key ++ [i]`.
pub fn sample_policy_set(mu: &[f64], sigma: &[f64], m: usize, key: &[u64]) -> Result<Vec<Vec<f64>>> {
    check_len(mu.len(), sigma.len())?;
    if m == 0 {
        return Err(Error::domain("policy set needs m >= 1"));
    }
    Ok((0..m as u64)
        .map(|i| {
            let mut stream_key = key.to_vec();
            stream_key.push(i);
            let mut r = rng::stream(&stream_key);
            mu.iter()
                .zip(sigma)
                .map(|(m, s)| {
                    let e: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
                    m + s * e
                })
                .collect()
        })
        .collect())
}

/// Bound-optimal posterior for a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOutcome {
    pub certificate: Certificate,
    pub solution: RepSolution,
    pub prior_bound: f64,
    pub qpac_objective: f64,
    pub pac_objective: f64,
}

impl CertifyOutcome {
    pub fn posterior(&self) -> &Categorical {
        &self.solution.p_star
    }

    pub fn to_file(&self) -> CertificateFile {
        CertificateFile {
            spec_version: FORMAT_VERSION.to_owned(),
            certificate: self.certificate.clone(),
            solution: self.solution.clone(),
            prior_bound: self.prior_bound,
            qpac_objective: self.qpac_objective,
            pac_objective: self.pac_objective,
            guarantee: self.certificate.guarantee_sentence(),
        }
    }
}

/// Optimizes both bound forms over posteriors on the matrix rows (uniform
/// prior) and certifies the better optimum.
pub fn certify_matrix(matrix: &CostMatrix, delta: f64, k: usize) -> Result<CertifyOutcome> {
    let inst = RepInstance::uniform(matrix.policy_means(), matrix.n(), delta)?;
    let qpac = optimize_qpac(&inst, k)?;
    let pac = optimize_pac(&inst, k)?;
    let solution = if qpac.tau_star <= pac.tau_star { qpac.clone() } else { pac.clone() };
    let prior_r = inst.r0();
    let prior_c = inst.prior_cost();
    let p = &solution.p_star;
    let certificate = select_bound(p.expect(&inst.costs)?, kl_divergence(p, &inst.prior)?, matrix.n(), delta, matrix.m())?;
    Ok(CertifyOutcome {
        certificate,
        solution,
        prior_bound: c_pac(prior_c, prior_r).min(c_qpac(prior_c, prior_r)),
        qpac_objective: qpac.tau_star,
        pac_objective: pac.tau_star,
    })
}

/// A bound is violated when it sits more than two standard errors below the
/// Monte-Carlo estimate of the true cost.
pub fn is_violation(bound: f64, estimate: &CostEstimate) -> bool {
    bound < estimate.mean - 2.0 * estimate.std_error
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: u64,
    pub bound: f64,
    pub selected_bound: BoundKind,
    pub prior_bound: f64,
    pub c_s: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub gap: f64,
    pub violated: bool,
}

impl TrialReport {
    pub fn new(trial: u64, outcome: &CertifyOutcome, estimate: &CostEstimate) -> Self {
        let bound = outcome.certificate.selected_value;
        Self {
            trial,
            bound,
            selected_bound: outcome.certificate.selected_bound,
            prior_bound: outcome.prior_bound,
            c_s: outcome.certificate.c_s,
            estimate: estimate.mean,
            std_error: estimate.std_error,
            gap: bound - estimate.mean,
            violated: is_violation(bound, estimate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub spec_version: String,
    pub delta: f64,
    pub n: usize,
    pub m: usize,
    pub n_eval: usize,
    pub violations: usize,
    pub trials: Vec<TrialReport>,
}

impl ValidationReport {
    pub fn from_trials(config: &PipelineConfig, trials: Vec<TrialReport>) -> Self {
        Self {
            spec_version: FORMAT_VERSION.to_owned(),
            delta: config.pac.delta,
            n: config.data.n,
            m: config.pac.m,
            n_eval: config.data.n_eval,
            violations: trials.iter().filter(|t| t.violated).count(),
            trials,
        }
    }
}

/// Configured simulator, policy architecture and depth filter.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub sim: Simulator,
    pub arch: PolicyArchitecture,
    pub filter: DepthFilter,
}

/// The prior training set as an ES landscape.
pub struct NavLandscape<'a> {
    pipeline: &'a Pipeline,
    envs: Vec<Environment>,
}

impl CostLandscape for NavLandscape<'_> {
    fn num_environments(&self) -> usize {
        self.envs.len()
    }

    fn cost(&self, env: usize, weights: &[f64]) -> Result<f64> {
        self.pipeline.sim.rollout_cost(&self.pipeline.planner(weights), &self.envs[env])
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let sim = Simulator::new(config.sim.clone())?;
        let arch = config.architecture()?;
        let filter = DepthFilter::new(&sim.config.sensor, &sim.library);
        Ok(Self { config, sim, arch, filter })
    }

    pub fn planner<'a>(&'a self, weights: &'a [f64]) -> NetPlanner<'a> {
        NetPlanner { arch: &self.arch, filter: &self.filter, weights }
    }

    pub fn landscape(&self) -> Result<NavLandscape<'_>> {
        let envs = self.config.prior_seeds().into_iter().map(|s| self.sim.environment(s)).collect::<Result<_>>()?;
        Ok(NavLandscape { pipeline: self, envs })
    }

    pub fn initial_state(&self) -> Result<TrainerState> {
        Ok(TrainerState::new(self.config.es.seed, self.config.es.initial_distribution(self.arch.d())?))
    }

    /// Trains (or continues training) the prior up to `es.iters`
    /// iterations. With a checkpoint path the optimizer state is saved after
    /// every `checkpoint_every` iterations and at the end.
    pub fn train_prior(
        &self,
        state: TrainerState,
        workers: usize,
        checkpoint: Option<(&Path, usize)>,
    ) -> Result<(PriorFile, TrainerState, Vec<IterationLog>)> {
        let landscape = self.landscape().map_err(|e| e.in_stage("train-prior"))?;
        check_len(self.arch.d(), state.mu.len())?;
        let mut trainer = Trainer::resume(self.config.es.clone(), &landscape, state)?;
        let mut log = Vec::new();
        es::with_workers(workers, || -> Result<()> {
            while (trainer.state.iteration as usize) < self.config.es.iters {
                log.push(trainer.step()?);
                if let Some((path, every)) = checkpoint {
                    if trainer.state.iteration as usize % every.max(1) == 0 {
                        trainer.state.save(path)?;
                    }
                }
            }
            if let Some((path, _)) = checkpoint {
                trainer.state.save(path)?;
            }
            Ok(())
        })?
        .map_err(|e| e.in_stage("train-prior"))?;
        let prior = PriorFile::new(self.arch.clone(), trainer.state.iteration, trainer.state.distribution())?;
        Ok((prior, trainer.state, log))
    }

    /// Policy set for validation replication `trial` (certify uses trial 0).
    pub fn sample_policies(&self, prior: &PriorFile, trial: u64) -> Result<PolicySet> {
        if prior.arch != self.arch {
            return Err(Error::Config("prior was trained for a different policy architecture".into()));
        }
        let dist = prior.distribution()?;
        let key = vec![self.config.seeds.policy_sampling, trial];
        let weights = sample_policy_set(&dist.mu, &dist.sigma(), self.config.pac.m, &key)
            .map_err(|e| e.in_stage("sample-policies"))?;
        Ok(PolicySet {
            spec_version: FORMAT_VERSION.to_owned(),
            arch: self.arch.clone(),
            seed: key,
            ids: (0..weights.len() as u64).collect(),
            weights,
        })
    }

    /// Rollout cost of every policy on every environment seed.
    pub fn build_cost_matrix(&self, policies: &PolicySet, env_seeds: &[u64], workers: usize) -> Result<CostMatrix> {
        if policies.arch != self.arch {
            return Err(Error::Config("policy set was drawn for a different policy architecture".into()));
        }
        build_cost_matrix(&self.sim, &self.arch, &self.filter, policies, env_seeds, workers)
            .map_err(|e| e.in_stage("eval-costs"))
    }

    /// One full replication on the bound data of `trial`.
    pub fn certify(&self, prior: &PriorFile, trial: u64, workers: usize) -> Result<(PolicySet, CostMatrix, CertifyOutcome)> {
        let policies = self.sample_policies(prior, trial)?;
        let matrix = self.build_cost_matrix(&policies, &self.config.pac_seeds(trial), workers)?;
        let outcome = certify_matrix(&matrix, self.config.pac.delta, self.config.pac.k).map_err(|e| e.in_stage("certify"))?;
        Ok((policies, matrix, outcome))
    }

    /// Monte-Carlo true cost of a posterior on the held-out seeds of `trial`.
    pub fn estimate_true_cost(
        &self,
        posterior: &Categorical,
        policies: &PolicySet,
        trial: u64,
        workers: usize,
    ) -> Result<CostEstimate> {
        let planners: Vec<NetPlanner> = policies.weights.iter().map(|w| self.planner(w)).collect();
        es::with_workers(workers, || {
            sim::estimate_true_cost(&self.sim, posterior, &planners, self.config.data.n_eval, self.config.eval_seed(trial))
        })?
        .map_err(|e| e.in_stage("validate"))
    }

    /// Replications `0..trials`, each with fresh bound data, policy draws
    /// and held-out environments; the prior is shared.
    pub fn validate(&self, prior: &PriorFile, trials: usize, workers: usize) -> Result<ValidationReport> {
        let mut reports = Vec::with_capacity(trials);
        for t in 0..trials as u64 {
            let (policies, _, outcome) = self.certify(prior, t, workers)?;
            let estimate = self.estimate_true_cost(outcome.posterior(), &policies, t, workers)?;
            reports.push(TrialReport::new(t, &outcome, &estimate));
        }
        Ok(ValidationReport::from_trials(&self.config, reports))
    }
}

/// Parallel over environments; each environment is generated once and every
/// policy is rolled out on it. Results land in index-addressed slots.
pub fn build_cost_matrix(
    sim: &Simulator,
    arch: &PolicyArchitecture,
    filter: &DepthFilter,
    policies: &PolicySet,
    env_seeds: &[u64],
    workers: usize,
) -> Result<CostMatrix> {
    if policies.is_empty() || env_seeds.is_empty() {
        return Err(Error::domain("cost matrix needs at least one policy and one environment"));
    }
    for w in &policies.weights {
        check_len(arch.d(), w.len())?;
    }
    let columns: Vec<Vec<f64>> = es::with_workers(workers, || {
        env_seeds
            .par_iter()
            .map(|&seed| {
                let env = sim.environment(seed)?;
                policies
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        sim.rollout_cost(&NetPlanner { arch, filter, weights: w }, &env)
                            .map_err(|e| Error::Rollout { policy: i, seed, source: Box::new(e) })
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })??;
    let (m, n) = (policies.len(), env_seeds.len());
    let mut values = vec![0.0; m * n];
    for (j, col) in columns.iter().enumerate() {
        for (i, c) in col.iter().enumerate() {
            values[i * n + j] = *c;
        }
    }
    CostMatrix::new(values, policies.ids.clone(), env_seeds.to_vec())
}
