//! Evolution-strategies training of a diagonal Gaussian over policy weights.
//!
//! Gradients of the expected cost with respect to the mean and the standard
//! deviation are estimated from antithetic pairs `mu +/- sigma * eps`, averaged
//! over a minibatch of environments, and applied with Adam in `(mu, ln sigma^2)`
//! coordinates. When the smoothed cost stalls the estimator switches to
//! rank-based utilities and reverts once progress resumes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const GRAD_CLIP: f64 = 10.0;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SMOOTHING_WINDOW: usize = 5;
const IMPROVEMENT_TOL: f64 = 1e-3;
const BATCH_STREAM: u64 = 0xba7c4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyDistribution {
    pub mu: Vec<f64>,
    pub log_sigma_sq: Vec<f64>,
}

impl GaussianPolicyDistribution {
    pub fn new(mu: Vec<f64>, log_sigma_sq: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::domain("search distribution needs d >= 1"));
        }
        check_len(mu.len(), log_sigma_sq.len())?;
        if mu.iter().chain(&log_sigma_sq).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("search distribution parameters"));
        }
        Ok(Self { mu, log_sigma_sq })
    }

    /// `N(mean * 1, variance * I)`.
    pub fn isotropic(d: usize, mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::domain("variance must be positive"));
        }
        Self::new(vec![mean; d], vec![variance.ln(); d])
    }

    pub fn from_sigma(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::domain("sigma entries must be positive"));
        }
        Self::new(mu, sigma.iter().map(|s| 2.0 * s.ln()).collect())
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma_sq.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// `mu + sigma * eps`.
    pub fn perturb(&self, sigma: &[f64], eps: &[f64], sign: f64) -> Vec<f64> {
        self.mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + sign * s * e).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = standard_normal(rng, self.d());
        self.perturb(&self.sigma(), &eps, 1.0)
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsGradient {
    pub grad_mu: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

impl EsGradient {
    pub fn zeros(d: usize) -> Self {
        Self { grad_mu: vec![0.0; d], grad_sigma: vec![0.0; d] }
    }

    fn check_finite(&self) -> Result<()> {
        if self.grad_mu.iter().chain(&self.grad_sigma).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("ES gradient"))
        }
    }
}

/// Which numbers feed the gradient estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// Raw rollout costs.
    Es,
    /// Rank-based utilities (negated, so the estimators still descend).
    Utility,
}

impl std::fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorMode::Es => "es",
            EstimatorMode::Utility => "utility",
        })
    }
}

/// Log-rank fitness shaping. Lower cost earns higher utility; utilities sum
/// to zero, and tied costs share the mean utility of the ranks they span.
pub fn utility_transform(costs: &[f64]) -> Vec<f64> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    let top = (n as f64 / 2.0 + 1.0).ln();
    let raw: Vec<f64> = (1..=n).map(|k| (top - (k as f64).ln()).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && costs[order[end]] == costs[order[start]] {
            end += 1;
        }
        let shared = raw[start..end].iter().sum::<f64>() / (end - start) as f64 / total - 1.0 / n as f64;
        for &i in &order[start..end] {
            out[i] = shared;
        }
        start = end;
    }
    out
}

/// Antithetic estimate on one environment plus the raw costs it observed
/// (ordered `+eps_1, -eps_1, +eps_2, ...`).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvEstimate {
    pub gradient: EsGradient,
    pub costs: Vec<f64>,
}

/// Antithetic gradient of `E[cost(w)]`, `w ~ dist`, from `m_hat` pairs.
pub fn es_estimate_env<F, R>(
    dist: &GaussianPolicyDistribution,
    mut cost: F,
    m_hat: usize,
    rng: &mut R,
    mode: EstimatorMode,
) -> Result<EnvEstimate>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if m_hat == 0 {
        return Err(Error::domain("m_hat must be at least 1"));
    }
    let d = dist.d();
    let sigma = dist.sigma();
    let mut eps = Vec::with_capacity(m_hat);
    let mut costs = Vec::with_capacity(2 * m_hat);
    for _ in 0..m_hat {
        let e = standard_normal(rng, d);
        costs.push(cost(&dist.perturb(&sigma, &e, 1.0))?);
        costs.push(cost(&dist.perturb(&sigma, &e, -1.0))?);
        eps.push(e);
    }
    let shaped = match mode {
        EstimatorMode::Es => costs.clone(),
        EstimatorMode::Utility => utility_transform(&costs).into_iter().map(|u| -u).collect(),
    };

    let mut g = EsGradient::zeros(d);
    for (i, e) in eps.iter().enumerate() {
        let (plus, minus) = (shaped[2 * i], shaped[2 * i + 1]);
        let diff = plus - minus;
        let sum = plus + minus;
        for k in 0..d {
            g.grad_mu[k] += diff * e[k];
            g.grad_sigma[k] += sum * (e[k] * e[k] - 1.0);
        }
    }
    let scale = 1.0 / (2.0 * m_hat as f64);
    for k in 0..d {
        g.grad_mu[k] *= scale / sigma[k];
        g.grad_sigma[k] *= scale / sigma[k];
    }
    g.check_finite()?;
    Ok(EnvEstimate { gradient: g, costs })
}

/// Gradient-only form of [`es_estimate_env`] on raw costs.
pub fn es_grad_env<F, R>(dist: &GaussianPolicyDistribution, cost: F, m_hat: usize, rng: &mut R) -> Result<EsGradient>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    es_estimate_env(dist, cost, m_hat, rng, EstimatorMode::Es).map(|e| e.gradient)
}

/// Elementwise sum in list order, divided by `n_hat`.
pub fn aggregate_gradients(per_env: &[EsGradient], n_hat: usize) -> Result<EsGradient> {
    let first = per_env.first().ok_or_else(|| Error::domain("no gradients to aggregate"))?;
    if n_hat == 0 {
        return Err(Error::domain("n_hat must be at least 1"));
    }
    let d = first.grad_mu.len();
    let mut acc = EsGradient::zeros(d);
    for g in per_env {
        check_len(d, g.grad_mu.len())?;
        check_len(d, g.grad_sigma.len())?;
        for k in 0..d {
            acc.grad_mu[k] += g.grad_mu[k];
            acc.grad_sigma[k] += g.grad_sigma[k];
        }
    }
    let n = n_hat as f64;
    acc.grad_mu.iter_mut().chain(acc.grad_sigma.iter_mut()).for_each(|v| *v /= n);
    Ok(acc)
}

/// First and second moments for both parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m_mu: Vec<f64>,
    pub v_mu: Vec<f64>,
    pub m_logvar: Vec<f64>,
    pub v_logvar: Vec<f64>,
}

impl AdamState {
    pub fn new(d: usize) -> Self {
        Self { t: 0, m_mu: vec![0.0; d], v_mu: vec![0.0; d], m_logvar: vec![0.0; d], v_logvar: vec![0.0; d] }
    }
}

fn adam_update(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for k in 0..theta.len() {
        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
        theta[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
    }
}

/// One Adam step on `(mu, ln sigma^2)`. The sigma gradient is mapped through
/// `dC/d ln sigma^2 = (sigma / 2) dC/d sigma`; both gradients are clipped to
/// `[-GRAD_CLIP, GRAD_CLIP]` and sigma is floored at [`SIGMA_FLOOR`].
pub fn adam_step(
    state: &mut AdamState,
    dist: &GaussianPolicyDistribution,
    grad: &EsGradient,
    lr_mu: f64,
    lr_logvar: f64,
) -> Result<GaussianPolicyDistribution> {
    let d = dist.d();
    check_len(d, grad.grad_mu.len())?;
    check_len(d, grad.grad_sigma.len())?;
    check_len(d, state.m_mu.len())?;
    grad.check_finite()?;
    let sigma = dist.sigma();
    let g_mu: Vec<f64> = grad.grad_mu.iter().map(|g| g.clamp(-GRAD_CLIP, GRAD_CLIP)).collect();
    let g_lv: Vec<f64> =
        grad.grad_sigma.iter().zip(&sigma).map(|(g, s)| (0.5 * s * g).clamp(-GRAD_CLIP, GRAD_CLIP)).collect();

    state.t += 1;
    let mut next = dist.clone();
    adam_update(&mut next.mu, &mut state.m_mu, &mut state.v_mu, &g_mu, lr_mu, state.t);
    adam_update(&mut next.log_sigma_sq, &mut state.m_logvar, &mut state.v_logvar, &g_lv, lr_logvar, state.t);
    let floor = 2.0 * SIGMA_FLOOR.ln();
    next.log_sigma_sq.iter_mut().for_each(|l| *l = l.max(floor));
    Ok(next)
}

/// How each iteration's environments are drawn from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSampling {
    /// Fresh random subset every iteration.
    Resample,
    /// Consecutive blocks, wrapping around the set.
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsConfig {
    pub m_hat: usize,
    pub batch: usize,
    pub lr_mu: f64,
    pub lr_logvar: f64,
    pub iters: usize,
    pub stall_window: usize,
    pub seed: u64,
    pub init_mean: f64,
    pub init_variance: f64,
    pub sampling: BatchSampling,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            m_hat: 16,
            batch: 16,
            lr_mu: 0.1,
            lr_logvar: 0.01,
            iters: 1000,
            stall_window: 10,
            seed: 0,
            init_mean: 0.0,
            init_variance: 4.0,
            sampling: BatchSampling::Resample,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_hat == 0 || self.batch == 0 || self.stall_window == 0 {
            return Err(Error::Config("es: m_hat, batch and stall_window must be at least 1".into()));
        }
        if !(self.lr_mu > 0.0 && self.lr_logvar > 0.0) {
            return Err(Error::Config("es: learning rates must be positive".into()));
        }
        if !(self.init_variance > 0.0 && self.init_mean.is_finite()) {
            return Err(Error::Config("es: init_variance must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_distribution(&self, d: usize) -> Result<GaussianPolicyDistribution> {
        GaussianPolicyDistribution::isotropic(d, self.init_mean, self.init_variance)
    }
}

/// A finite training set of environments with a cost for any weight vector.
pub trait CostLandscape: Sync {
    fn num_environments(&self) -> usize;
    fn cost(&self, env: usize, weights: &[f64]) -> Result<f64>;
}

/// Complete optimizer state; serialized as the training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub seed: u64,
    pub iteration: u64,
    pub mu: Vec<f64>,
    pub log_sigma_sq: Vec<f64>,
    pub adam: AdamState,
    pub mode: EstimatorMode,
    /// Most recent empirical costs, for the moving average.
    pub recent: Vec<f64>,
    pub best_smoothed: Option<f64>,
    pub stalled_for: usize,
}

impl TrainerState {
    pub fn new(seed: u64, init: GaussianPolicyDistribution) -> Self {
        let d = init.d();
        Self {
            seed,
            iteration: 0,
            mu: init.mu,
            log_sigma_sq: init.log_sigma_sq,
            adam: AdamState::new(d),
            mode: EstimatorMode::Es,
            recent: Vec::new(),
            best_smoothed: None,
            stalled_for: 0,
        }
    }

    pub fn distribution(&self) -> GaussianPolicyDistribution {
        GaussianPolicyDistribution { mu: self.mu.clone(), log_sigma_sq: self.log_sigma_sq.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let state: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        GaussianPolicyDistribution::new(state.mu.clone(), state.log_sigma_sq.clone())?;
        Ok(state)
    }

    /// Updates the stall tracker with this iteration's cost and returns the
    /// mode for the next iteration. A switch to utilities needs a cost spread
    /// in the current iteration; with no spread the ranks carry no signal.
    fn track(&mut self, empirical_cost: f64, had_spread: bool, stall_window: usize) {
        self.recent.push(empirical_cost);
        if self.recent.len() > SMOOTHING_WINDOW {
            self.recent.remove(0);
        }
        let smoothed = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        match self.best_smoothed {
            None => self.best_smoothed = Some(smoothed),
            Some(best) if smoothed <= best - IMPROVEMENT_TOL => {
                self.best_smoothed = Some(smoothed);
                self.stalled_for = 0;
                self.mode = EstimatorMode::Es;
            }
            Some(_) => {
                self.stalled_for += 1;
                if self.stalled_for >= stall_window && self.mode == EstimatorMode::Es && had_spread {
                    self.mode = EstimatorMode::Utility;
                    self.stalled_for = 0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub empirical_cost: f64,
    pub mode: EstimatorMode,
    pub wall_time_s: f64,
}

pub fn write_training_log<W: Write>(log: &[IterationLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "empirical_cost", "mode", "wall_time_s"])?;
    for row in log {
        w.write_record([
            row.iteration.to_string(),
            row.empirical_cost.to_string(),
            row.mode.to_string(),
            row.wall_time_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Format { path: path.to_path_buf(), reason: format!("bad {what} in training log") };
        let field = |i: usize| rec.get(i).unwrap_or("");
        rows.push(IterationLog {
            iteration: field(0).parse().map_err(|_| bad("iteration"))?,
            empirical_cost: field(1).parse().map_err(|_| bad("empirical_cost"))?,
            mode: match field(2) {
                "es" => EstimatorMode::Es,
                "utility" => EstimatorMode::Utility,
                _ => return Err(bad("mode")),
            },
            wall_time_s: field(3).parse().map_err(|_| bad("wall_time_s"))?,
        });
    }
    Ok(rows)
}

/// Runs closures on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Minibatch ES over a [`CostLandscape`].
pub struct Trainer<'a, L: CostLandscape> {
    pub config: EsConfig,
    pub landscape: &'a L,
    pub state: TrainerState,
    started: Instant,
}

impl<'a, L: CostLandscape> Trainer<'a, L> {
    pub fn new(config: EsConfig, landscape: &'a L, init: GaussianPolicyDistribution) -> Result<Self> {
        config.validate()?;
        if landscape.num_environments() == 0 {
            return Err(Error::Config("es: the prior training set is empty".into()));
        }
        let state = TrainerState::new(config.seed, init);
        Ok(Self { config, landscape, state, started: Instant::now() })
    }

    pub fn resume(config: EsConfig, landscape: &'a L, state: TrainerState) -> Result<Self> {
        config.validate()?;
        if state.seed != config.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {} but the config says {}",
                state.seed, config.seed
            )));
        }
        Ok(Self { config, landscape, state, started: Instant::now() })
    }

    /// Environment indices used at `iteration`, ascending.
    pub fn minibatch(&self, iteration: u64) -> Vec<usize> {
        let n = self.landscape.num_environments();
        let b = self.config.batch.min(n);
        let mut idx = match self.config.sampling {
            BatchSampling::Resample => {
                let mut r = rng::stream(&[self.config.seed, iteration, BATCH_STREAM]);
                rand::seq::index::sample(&mut r, n, b).into_vec()
            }
            BatchSampling::Sweep => {
                let start = (iteration as usize % n) * self.config.batch % n;
                (0..b).map(|k| (start + k) % n).collect()
            }
        };
        idx.sort_unstable();
        idx
    }

    pub fn step(&mut self) -> Result<IterationLog> {
        let it = self.state.iteration;
        let dist = self.state.distribution();
        let mode = self.state.mode;
        let batch = self.minibatch(it);
        let (seed, m_hat, landscape) = (self.config.seed, self.config.m_hat, self.landscape);
        let estimates: Vec<EnvEstimate> = batch
            .par_iter()
            .map(|&env| {
                let mut r = rng::stream(&[seed, it, env as u64]);
                es_estimate_env(&dist, |w| landscape.cost(env, w), m_hat, &mut r, mode)
            })
            .collect::<Result<_>>()?;

        let grads: Vec<EsGradient> = estimates.iter().map(|e| e.gradient.clone()).collect();
        let grad = aggregate_gradients(&grads, batch.len())?;
        let all_costs = estimates.iter().flat_map(|e| e.costs.iter().copied());
        let (mut sum, mut lo, mut hi, mut n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
        for c in all_costs {
            sum += c;
            lo = lo.min(c);
            hi = hi.max(c);
            n += 1;
        }
        let empirical_cost = sum / n as f64;

        let next = adam_step(&mut self.state.adam, &dist, &grad, self.config.lr_mu, self.config.lr_logvar)?;
        self.state.mu = next.mu;
        self.state.log_sigma_sq = next.log_sigma_sq;
        self.state.iteration += 1;
        self.state.track(empirical_cost, hi > lo, self.config.stall_window);
        Ok(IterationLog { iteration: it, empirical_cost, mode, wall_time_s: self.started.elapsed().as_secs_f64() })
    }

    /// Steps until `config.iters` iterations have been completed in total.
    pub fn run(&mut self) -> Result<Vec<IterationLog>> {
        let mut log = Vec::new();
        while (self.state.iteration as usize) < self.config.iters {
            log.push(self.step()?);
        }
        Ok(log)
    }
}

/// Trains from `init` for `config.iters` iterations on `workers` threads.
pub fn train_prior<L: CostLandscape>(
    config: &EsConfig,
    landscape: &L,
    init: GaussianPolicyDistribution,
    workers: usize,
) -> Result<(GaussianPolicyDistribution, Vec<IterationLog>)> {
    let mut trainer = Trainer::new(config.clone(), landscape, init)?;
    let log = with_workers(workers, || trainer.run())??;
    Ok((trainer.state.distribution(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Surrogate<F: Fn(&[f64]) -> f64 + Sync>(usize, F);

    impl<F: Fn(&[f64]) -> f64 + Sync> CostLandscape for Surrogate<F> {
        fn num_environments(&self) -> usize {
            self.0
        }
        fn cost(&self, _: usize, w: &[f64]) -> Result<f64> {
            Ok((self.1)(w))
        }
    }

    fn quad(w: &[f64]) -> f64 {
        w.iter().map(|v| v * v).sum::<f64>().min(1.0)
    }

    #[test]
    fn constant_cost_gives_zero_mean_gradient() {
        let dist = GaussianPolicyDistribution::isotropic(7, 0.3, 4.0).unwrap();
        let mut r = rng::stream(&[1]);
        let g = es_grad_env(&dist, |_| Ok(0.37), 50, &mut r).unwrap();
        assert!(g.grad_mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_surrogate_gradient() {
        let dist = GaussianPolicyDistribution::from_sigma(vec![0.5], &[0.1]).unwrap();
        let mut r = rng::stream(&[2]);
        let g = es_grad_env(&dist, |w| Ok(w[0].clamp(0.0, 1.0)), 100_000, &mut r).unwrap();
        assert!((g.grad_mu[0] - 1.0).abs() < 0.05, "{:?}", g);
        assert!(g.grad_sigma[0].abs() < 0.05, "{:?}", g);
    }

    #[test]
    fn quadratic_surrogate_gradient() {
        let dist = GaussianPolicyDistribution::from_sigma(vec![0.2], &[0.1]).unwrap();
        let mut r = rng::stream(&[3]);
        let g = es_grad_env(&dist, |w| Ok(quad(w)), 100_000, &mut r).unwrap();
        assert!((g.grad_mu[0] / 0.4 - 1.0).abs() < 0.05, "{:?}", g);
        assert!((g.grad_sigma[0] / 0.2 - 1.0).abs() < 0.05, "{:?}", g);
    }

    #[test]
    fn non_finite_cost_is_a_fault() {
        let dist = GaussianPolicyDistribution::isotropic(2, 0.0, 1.0).unwrap();
        let mut r = rng::stream(&[4]);
        assert!(matches!(es_grad_env(&dist, |_| Ok(f64::NAN), 3, &mut r), Err(Error::NonFinite(_))));
        assert!(es_grad_env(&dist, |_| Ok(0.0), 0, &mut r).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let g = EsGradient { grad_mu: vec![1.0, 2.0], grad_sigma: vec![3.0, 4.0] };
        assert_eq!(aggregate_gradients(std::slice::from_ref(&g), 1).unwrap(), g);
        assert_eq!(aggregate_gradients(&[g.clone(), g.clone()], 2).unwrap(), g);
        let a = EsGradient { grad_mu: vec![1.0, 0.0], grad_sigma: vec![0.0, 0.0] };
        let b = EsGradient { grad_mu: vec![0.0, 1.0], grad_sigma: vec![0.0, 0.0] };
        assert_eq!(aggregate_gradients(&[a, b], 2).unwrap().grad_mu, vec![0.5, 0.5]);
        assert!(aggregate_gradients(&[], 1).is_err());
        let short = EsGradient::zeros(1);
        assert!(matches!(aggregate_gradients(&[g, short], 2), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn utility_examples() {
        assert!(utility_transform(&[0.4; 6]).iter().all(|&u| u.abs() < 1e-15));
        let u = utility_transform(&[0.1, 0.9]);
        // ln 2 - ln 1 for the best, max(0, ln 2 - ln 2) = 0 for the worst.
        assert!((u[0] - 0.5).abs() < 1e-15 && (u[1] + 0.5).abs() < 1e-15);
        let u = utility_transform(&[0.3, 0.1, 0.3, 0.7]);
        assert!(u[1] > u[0] && u[0] == u[2] && u[2] > u[3]);
        assert!(u.iter().sum::<f64>().abs() < 1e-14);
        assert!(utility_transform(&[]).is_empty());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let dist = GaussianPolicyDistribution::isotropic(3, 0.5, 2.0).unwrap();
        let mut st = AdamState::new(3);
        let next = adam_step(&mut st, &dist, &EsGradient::zeros(3), 1.0, 0.01).unwrap();
        assert_eq!(next, dist);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let dist = GaussianPolicyDistribution::isotropic(2, 0.0, 1.0).unwrap();
        let mut st = AdamState::new(2);
        let g = EsGradient { grad_mu: vec![0.3, -2.0], grad_sigma: vec![0.0, 0.0] };
        let next = adam_step(&mut st, &dist, &g, 0.1, 0.01).unwrap();
        assert!((next.mu[0] + 0.1).abs() < 1e-6);
        assert!((next.mu[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_reversal_shrinks_step() {
        let dist = GaussianPolicyDistribution::isotropic(1, 0.0, 1.0).unwrap();
        let mut st = AdamState::new(1);
        let g = EsGradient { grad_mu: vec![1.0], grad_sigma: vec![0.0] };
        let neg = EsGradient { grad_mu: vec![-1.0], grad_sigma: vec![0.0] };
        let a = adam_step(&mut st, &dist, &g, 0.1, 0.01).unwrap();
        let b = adam_step(&mut st, &a, &neg, 0.1, 0.01).unwrap();
        let first = (a.mu[0] - dist.mu[0]).abs();
        let second = (b.mu[0] - a.mu[0]).abs();
        // m2 = 0.09 - 0.1 = -0.01 -> m_hat = -0.0526; v_hat = 1 -> step 0.00526.
        assert!(second < first);
        assert!((second - 0.1 * 0.01 / 0.19 / 1.0).abs() < 1e-6, "{second}");
    }

    #[test]
    fn adam_uses_log_variance_chain_rule_and_floor() {
        let dist = GaussianPolicyDistribution::from_sigma(vec![0.0], &[2e-6]).unwrap();
        let mut st = AdamState::new(1);
        let g = EsGradient { grad_mu: vec![0.0], grad_sigma: vec![1e9] };
        let next = adam_step(&mut st, &dist, &g, 1.0, 5.0).unwrap();
        assert!(next.sigma()[0] >= SIGMA_FLOOR * (1.0 - 1e-12));
        let bad = EsGradient { grad_mu: vec![f64::NAN], grad_sigma: vec![0.0] };
        assert!(adam_step(&mut st, &dist, &bad, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_iterations_returns_initial() {
        let init = GaussianPolicyDistribution::isotropic(2, 1.0, 0.25).unwrap();
        let cfg = EsConfig { iters: 0, ..EsConfig::default() };
        let (out, log) = train_prior(&cfg, &Surrogate(4, quad), init.clone(), 1).unwrap();
        assert_eq!(out, init);
        assert!(log.is_empty());
    }

    #[test]
    fn constant_landscape_never_moves_mu_or_switches() {
        let init = GaussianPolicyDistribution::isotropic(3, 0.2, 1.0).unwrap();
        let cfg = EsConfig { iters: 40, m_hat: 4, batch: 2, stall_window: 3, ..EsConfig::default() };
        let (out, log) = train_prior(&cfg, &Surrogate(5, |_: &[f64]| 0.5), init.clone(), 1).unwrap();
        assert_eq!(out.mu, init.mu);
        assert!(log.iter().all(|r| r.mode == EstimatorMode::Es));
    }

    #[test]
    fn stall_switches_to_utilities_and_reverts_on_progress() {
        let mut st = TrainerState::new(0, GaussianPolicyDistribution::isotropic(1, 0.0, 1.0).unwrap());
        for _ in 0..11 {
            st.track(0.5, true, 10);
        }
        assert_eq!(st.mode, EstimatorMode::Utility);
        st.track(0.1, true, 10);
        assert_eq!(st.mode, EstimatorMode::Es);
        // Without any spread in costs the switch is withheld.
        let mut st = TrainerState::new(0, GaussianPolicyDistribution::isotropic(1, 0.0, 1.0).unwrap());
        for _ in 0..30 {
            st.track(0.5, false, 10);
        }
        assert_eq!(st.mode, EstimatorMode::Es);
    }

    #[test]
    fn quadratic_training_converges() {
        let init = GaussianPolicyDistribution::from_sigma(vec![1.0, 1.0], &[0.5, 0.5]).unwrap();
        let cfg = EsConfig { iters: 500, m_hat: 16, batch: 4, lr_mu: 0.05, lr_logvar: 0.05, ..EsConfig::default() };
        let (out, _) = train_prior(&cfg, &Surrogate(8, quad), init, 1).unwrap();
        let s = out.sigma();
        // E[|w|^2] bounds E[min(1, |w|^2)].
        let upper: f64 = out.mu.iter().zip(&s).map(|(m, s)| m * m + s * s).sum();
        assert!(upper < 0.05, "final expected cost bound {upper}");
    }

    #[test]
    fn training_is_worker_count_invariant() {
        let init = GaussianPolicyDistribution::isotropic(3, 0.7, 0.3).unwrap();
        let cfg = EsConfig { iters: 15, m_hat: 3, batch: 5, lr_mu: 0.05, ..EsConfig::default() };
        let land = Surrogate(9, quad);
        let (a, la) = train_prior(&cfg, &land, init.clone(), 1).unwrap();
        let (b, lb) = train_prior(&cfg, &land, init, 4).unwrap();
        assert_eq!(a, b);
        let costs = |l: &[IterationLog]| l.iter().map(|r| r.empirical_cost.to_bits()).collect::<Vec<_>>();
        assert_eq!(costs(&la), costs(&lb));
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let init = GaussianPolicyDistribution::isotropic(2, 0.9, 0.5).unwrap();
        let land = Surrogate(6, quad);
        let cfg = EsConfig { iters: 20, m_hat: 4, batch: 3, lr_mu: 0.05, ..EsConfig::default() };
        let (full, _) = train_prior(&cfg, &land, init.clone(), 1).unwrap();

        let half = EsConfig { iters: 9, ..cfg.clone() };
        let mut t = Trainer::new(half, &land, init).unwrap();
        t.run().unwrap();
        t.state.save(&path).unwrap();
        let mut resumed = Trainer::resume(cfg.clone(), &land, TrainerState::load(&path).unwrap()).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.state.distribution(), full);

        let other = EsConfig { seed: 1, ..cfg };
        assert!(Trainer::resume(other, &land, TrainerState::load(&path).unwrap()).is_err());
    }

    #[test]
    fn sweep_mode_walks_the_set() {
        let land = Surrogate(5, quad);
        let cfg = EsConfig { batch: 2, sampling: BatchSampling::Sweep, ..EsConfig::default() };
        let t = Trainer::new(cfg, &land, GaussianPolicyDistribution::isotropic(1, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!(t.minibatch(0), vec![0, 1]);
        assert_eq!(t.minibatch(1), vec![2, 3]);
        assert_eq!(t.minibatch(2), vec![0, 4]);
        let cfg = EsConfig { batch: 3, ..EsConfig::default() };
        let t = Trainer::new(cfg, &land, GaussianPolicyDistribution::isotropic(1, 0.0, 1.0).unwrap()).unwrap();
        let b = t.minibatch(7);
        assert_eq!(b.len(), 3);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn training_log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![
            IterationLog { iteration: 0, empirical_cost: 0.75, mode: EstimatorMode::Es, wall_time_s: 0.5 },
            IterationLog { iteration: 1, empirical_cost: 0.5, mode: EstimatorMode::Utility, wall_time_s: 1.0 },
        ];
        write_training_log(&rows, std::fs::File::create(&path).unwrap()).unwrap();
        assert_eq!(read_training_log(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn antithetic_symmetry_cancels(s0 in 0.1f64..2.0, s1 in 0.1f64..2.0, seed in any::<u64>()) {
            // With mu = 0 the pair is exactly (+x, -x), so an even cost ties each pair.
            let dist = GaussianPolicyDistribution::from_sigma(vec![0.0, 0.0], &[s0, s1]).unwrap();
            let mut r = rng::stream(&[seed]);
            let g = es_grad_env(&dist, |w| Ok((w[0] * w[0] + w[1].abs()).min(1.0)), 8, &mut r).unwrap();
            prop_assert!(g.grad_mu.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn utility_is_rank_only(costs in proptest::collection::vec(0.0f64..1.0, 2..20)) {
            let u = utility_transform(&costs);
            let warped: Vec<f64> = costs.iter().map(|c| (3.0 * c).exp() - 7.0).collect();
            prop_assert_eq!(&u, &utility_transform(&warped));
            prop_assert!(u.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn utility_permutation_equivariant(costs in proptest::collection::vec(0.0f64..1.0, 2..20), rot in 0usize..20) {
            let k = rot % costs.len();
            let mut rotated = costs.clone();
            rotated.rotate_left(k);
            let mut u = utility_transform(&costs);
            u.rotate_left(k);
            prop_assert_eq!(u, utility_transform(&rotated));
        }

        #[test]
        fn sigma_stays_above_floor(g in proptest::collection::vec(-1e6f64..1e6, 4), lr in 0.01f64..50.0) {
            let dist = GaussianPolicyDistribution::from_sigma(vec![0.0; 2], &[1e-5, 3.0]).unwrap();
            let mut st = AdamState::new(2);
            let grad = EsGradient { grad_mu: g[..2].to_vec(), grad_sigma: g[2..].to_vec() };
            let next = adam_step(&mut st, &dist, &grad, lr, lr).unwrap();
            prop_assert!(next.sigma().iter().all(|&s| s >= SIGMA_FLOOR * (1.0 - 1e-12)));
        }
    }
}
