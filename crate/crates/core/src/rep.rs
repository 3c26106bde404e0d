//! Bound minimization over the simplex of sampled policies.
//!
//! For a fixed target empirical cost `c_hat`, the KL-minimal posterior with
//! `C . p = c_hat` is a Gibbs tilt of the prior, `p_i ∝ p0_i exp(-theta C_i)`
//! ([`i_project`]). The bound is then a scalar function of `c_hat`, which is
//! swept over `[C_min, C_max]` on a grid and refined around the winner.
//!
//! [`solve_rep_fixed`] keeps the epigraph form of the quadratic-bound
//! program (target cost `c_hat`, auxiliary `lambda`) as an independent
//! route to the same optimum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{c_pac, c_qpac, kl_divergence, regularizer, BoundKind, Categorical, DiscretePrior};
use crate::error::{check_len, Error, Result};

/// Default number of grid points over `[C_min, C_max]`.
pub const DEFAULT_GRID: usize = 200;
/// Points in the refinement pass around the best grid cell.
pub const REFINE_POINTS: usize = 50;

const TARGET_TOL: f64 = 1e-10;
const MAX_BISECTIONS: usize = 200;
const FEASIBILITY_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepInstance {
    /// Row-mean cost of each sampled policy.
    pub costs: Vec<f64>,
    pub prior: DiscretePrior,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
}

impl RepInstance {
    pub fn new(costs: Vec<f64>, prior: DiscretePrior, n: usize, delta: f64) -> Result<Self> {
        check_len(prior.len(), costs.len())?;
        if costs.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("policy costs must lie in [0, 1]"));
        }
        regularizer(0.0, n, delta)?;
        Ok(Self { costs, prior, n, delta })
    }

    /// Instance with the uniform prior.
    pub fn uniform(costs: Vec<f64>, n: usize, delta: f64) -> Result<Self> {
        let prior = Categorical::uniform(costs.len())?;
        Self::new(costs, prior, n, delta)
    }

    /// `(C_min, C_max)` over the prior's support.
    pub fn cost_range(&self) -> (f64, f64) {
        support_range(&self.costs, &self.prior)
    }

    /// Regularizer at the prior itself (zero KL).
    pub fn r0(&self) -> f64 {
        regularizer(0.0, self.n, self.delta).expect("validated on construction")
    }

    pub fn prior_cost(&self) -> f64 {
        self.prior.expect(&self.costs).expect("validated on construction")
    }

    fn regularizer(&self, kl: f64) -> Result<f64> {
        regularizer(kl, self.n, self.delta)
    }
}

fn support_range(costs: &[f64], prior: &Categorical) -> (f64, f64) {
    costs
        .iter()
        .zip(prior.probs())
        .filter(|(_, &q)| q > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&c, _)| (lo.min(c), hi.max(c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepParams {
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSolution {
    pub objective: BoundKind,
    pub p_star: Categorical,
    pub tau_star: f64,
    #[serde(rename = "C_hat_star")]
    pub c_hat_star: f64,
    pub lambda_star: f64,
    /// Gibbs tilt of the optimum; `±inf` when the posterior sits on the
    /// cheapest (resp. dearest) policies.
    #[serde(with = "extended_float")]
    pub theta_star: f64,
}

/// Result of [`i_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub p: Categorical,
    pub kl: f64,
    pub theta: f64,
}

/// KL-closest distribution to `prior` whose expected cost equals `c_hat`.
pub fn i_project(costs: &[f64], prior: &DiscretePrior, c_hat: f64) -> Result<Projection> {
    check_len(prior.len(), costs.len())?;
    let (lo, hi) = support_range(costs, prior);
    if !(c_hat >= lo - TARGET_TOL && c_hat <= hi + TARGET_TOL) {
        return Err(Error::InfeasibleTarget { target: c_hat, lo, hi });
    }
    if hi - lo <= TARGET_TOL {
        return Ok(Projection { p: prior.clone(), kl: 0.0, theta: 0.0 });
    }
    if c_hat <= lo {
        return Ok(boundary_projection(costs, prior, lo, f64::INFINITY));
    }
    if c_hat >= hi {
        return Ok(boundary_projection(costs, prior, hi, f64::NEG_INFINITY));
    }

    let mean_at = |theta: f64| tilted_mean(costs, prior, theta);
    let mut bound = 50.0 / (hi - lo);
    // Expand until mean(-bound) >= c_hat >= mean(bound).
    for _ in 0..64 {
        if mean_at(-bound) >= c_hat && mean_at(bound) <= c_hat {
            break;
        }
        bound *= 2.0;
    }
    let (mut left, mut right) = (-bound, bound);
    let mut theta = 0.0;
    for _ in 0..MAX_BISECTIONS {
        theta = 0.5 * (left + right);
        let gap = mean_at(theta) - c_hat;
        if gap.abs() <= TARGET_TOL || theta == left || theta == right {
            break;
        }
        if gap > 0.0 {
            left = theta;
        } else {
            right = theta;
        }
    }
    let p = Categorical::from_weights(tilted_weights(costs, prior, theta))?;
    let kl = kl_divergence(&p, prior)?;
    Ok(Projection { p, kl, theta })
}

fn boundary_projection(costs: &[f64], prior: &Categorical, target: f64, theta: f64) -> Projection {
    let weights: Vec<f64> = costs
        .iter()
        .zip(prior.probs())
        .map(|(&c, &q)| if c == target { q } else { 0.0 })
        .collect();
    let p = Categorical::from_weights(weights).expect("target is attained on the support");
    let kl = kl_divergence(&p, prior).expect("support of p is inside the prior support");
    Projection { p, kl, theta }
}

fn tilted_weights(costs: &[f64], prior: &Categorical, theta: f64) -> Vec<f64> {
    let logw: Vec<f64> = costs
        .iter()
        .zip(prior.probs())
        .map(|(&c, &q)| if q > 0.0 { q.ln() - theta * c } else { f64::NEG_INFINITY })
        .collect();
    let shift = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logw.into_iter().map(|l| (l - shift).exp()).collect()
}

fn tilted_mean(costs: &[f64], prior: &Categorical, theta: f64) -> f64 {
    let w = tilted_weights(costs, prior, theta);
    let total: f64 = w.iter().sum();
    w.iter().zip(costs).map(|(wi, c)| wi * c).sum::<f64>() / total
}

/// Outcome of the epigraph program at fixed `(c_hat, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RepValue {
    Feasible { tau: f64, projection: Projection, r: f64 },
    /// `lambda^2 < c_hat R + R^2` at the KL-minimal posterior; the program
    /// value is taken as `+inf`.
    Infeasible,
}

impl RepValue {
    pub fn tau(&self) -> f64 {
        match self {
            RepValue::Feasible { tau, .. } => *tau,
            RepValue::Infeasible => f64::INFINITY,
        }
    }
}

fn lambda_feasible(c_hat: f64, lambda: f64, r: f64) -> bool {
    let need = c_hat * r + r * r;
    lambda >= 0.0 && lambda * lambda >= need * (1.0 - FEASIBILITY_RTOL)
}

/// Smallest `lambda` satisfying `lambda^2 >= c_hat R + R^2`.
pub fn closed_form_lambda(c_hat: f64, r: f64) -> f64 {
    (c_hat * r + r * r).sqrt()
}

/// Value of the epigraph program for fixed `(c_hat, lambda)`.
pub fn solve_rep_fixed(inst: &RepInstance, params: RepParams) -> Result<RepValue> {
    if !(params.lambda >= 0.0) {
        return Err(Error::domain(format!("lambda = {} must be non-negative", params.lambda)));
    }
    let projection = i_project(&inst.costs, &inst.prior, params.c_hat)?;
    let r = inst.regularizer(projection.kl)?;
    if !lambda_feasible(params.c_hat, params.lambda, r) {
        return Ok(RepValue::Infeasible);
    }
    Ok(RepValue::Feasible { tau: params.c_hat + 2.0 * r + 2.0 * params.lambda, projection, r })
}

/// Search intervals for `(c_hat, lambda)` that contain the optimum whenever
/// `gamma` upper-bounds the prior's quadratic bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop2Intervals {
    pub c_lo: f64,
    pub c_hi: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub gamma: f64,
    pub r0: f64,
}

impl Prop2Intervals {
    /// True when the lambda interval is empty; any `tau` found would be `>= gamma`.
    pub fn is_degenerate(&self) -> bool {
        self.lambda_lo >= self.lambda_hi
    }

    /// Lambda interval tightened by substituting `c_hat` for `C_min`.
    pub fn lambda_at(&self, c_hat: f64) -> (f64, f64) {
        (closed_form_lambda(c_hat, self.r0), (self.gamma - c_hat) / 2.0 - self.r0)
    }

    pub fn contains(&self, c_hat: f64, lambda: f64, tol: f64) -> bool {
        c_hat >= self.c_lo - tol && c_hat <= self.c_hi + tol && lambda >= self.lambda_lo - tol && lambda <= self.lambda_hi + tol
    }
}

pub fn prop2_intervals(inst: &RepInstance, gamma: f64) -> Result<Prop2Intervals> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::domain(format!("gamma = {gamma} must be positive and finite")));
    }
    let r0 = inst.r0();
    let prior_bound = c_qpac(inst.prior_cost(), r0);
    if gamma < prior_bound * (1.0 - 1e-12) {
        return Err(Error::domain(format!(
            "gamma = {gamma} is below the prior's quadratic bound {prior_bound}"
        )));
    }
    let (c_lo, c_hi) = inst.cost_range();
    Ok(Prop2Intervals {
        c_lo,
        c_hi,
        lambda_lo: closed_form_lambda(c_lo, r0),
        lambda_hi: (gamma - c_lo) / 2.0 - r0,
        gamma,
        r0,
    })
}

/// How the auxiliary `lambda` is chosen for each grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSearch {
    /// Smallest feasible `lambda`, in closed form.
    ClosedForm,
    /// Bisection over the tightened interval, stopping at width `tol`.
    Bisection { tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepOptions {
    pub grid: usize,
    pub refine: usize,
    pub lambda: LambdaSearch,
}

impl Default for RepOptions {
    fn default() -> Self {
        Self { grid: DEFAULT_GRID, refine: REFINE_POINTS, lambda: LambdaSearch::ClosedForm }
    }
}

impl RepOptions {
    pub fn with_grid(grid: usize) -> Self {
        Self { grid, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    tau: f64,
    c_hat: f64,
    lambda: f64,
    projection: Projection,
}

/// Minimizes the quadratic bound over the simplex.
pub fn optimize_qpac(inst: &RepInstance, k: usize) -> Result<RepSolution> {
    optimize_qpac_with(inst, &RepOptions::with_grid(k))
}

pub fn optimize_qpac_with(inst: &RepInstance, opts: &RepOptions) -> Result<RepSolution> {
    check_grid(opts.grid)?;
    let r0 = inst.r0();
    let prior_cost = inst.prior_cost();
    let gamma = c_qpac(prior_cost, r0);
    let prior = Candidate {
        tau: gamma,
        c_hat: prior_cost,
        lambda: closed_form_lambda(prior_cost, r0),
        projection: Projection { p: inst.prior.clone(), kl: 0.0, theta: 0.0 },
    };
    let intervals = prop2_intervals(inst, gamma)?;
    let eval = |c_hat: f64| qpac_at(inst, &intervals, c_hat, opts.lambda);
    let best = grid_search(inst, opts, prior, eval)?;
    Ok(solution(BoundKind::Qpac, best))
}

fn qpac_at(inst: &RepInstance, intervals: &Prop2Intervals, c_hat: f64, mode: LambdaSearch) -> Result<Option<Candidate>> {
    let (lam_lo, lam_hi) = intervals.lambda_at(c_hat);
    if lam_lo >= lam_hi {
        // tau >= gamma here, so the prior already does at least as well.
        return Ok(None);
    }
    let projection = i_project(&inst.costs, &inst.prior, c_hat)?;
    let r = inst.regularizer(projection.kl)?;
    let lambda = match mode {
        LambdaSearch::ClosedForm => closed_form_lambda(c_hat, r),
        LambdaSearch::Bisection { tol } => {
            if !lambda_feasible(c_hat, lam_hi, r) {
                return Ok(None);
            }
            if lambda_feasible(c_hat, lam_lo, r) {
                lam_lo
            } else {
                let (mut lo, mut hi) = (lam_lo, lam_hi);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if lambda_feasible(c_hat, mid, r) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    };
    Ok(Some(Candidate { tau: c_hat + 2.0 * r + 2.0 * lambda, c_hat, lambda, projection }))
}

/// Minimizes the linear-form bound `C_S + sqrt(R)` over the simplex.
pub fn optimize_pac(inst: &RepInstance, k: usize) -> Result<RepSolution> {
    optimize_pac_with(inst, &RepOptions::with_grid(k))
}

pub fn optimize_pac_with(inst: &RepInstance, opts: &RepOptions) -> Result<RepSolution> {
    check_grid(opts.grid)?;
    let r0 = inst.r0();
    let prior_cost = inst.prior_cost();
    let prior = Candidate {
        tau: c_pac(prior_cost, r0),
        c_hat: prior_cost,
        lambda: r0.sqrt(),
        projection: Projection { p: inst.prior.clone(), kl: 0.0, theta: 0.0 },
    };
    let eval = |c_hat: f64| -> Result<Option<Candidate>> {
        let projection = i_project(&inst.costs, &inst.prior, c_hat)?;
        let r = inst.regularizer(projection.kl)?;
        Ok(Some(Candidate { tau: c_pac(c_hat, r), c_hat, lambda: r.sqrt(), projection }))
    };
    let best = grid_search(inst, opts, prior, eval)?;
    Ok(solution(BoundKind::Pac, best))
}

fn check_grid(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::domain(format!("grid size K = {k} must be at least 2")));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// Evaluates `eval` over the grid, then over a finer grid spanning the two
/// cells adjacent to the best point. Ties keep the earliest candidate, with
/// the prior ranked first, so the result does not depend on scheduling.
fn grid_search<F>(inst: &RepInstance, opts: &RepOptions, prior: Candidate, eval: F) -> Result<Candidate>
where
    F: Fn(f64) -> Result<Option<Candidate>> + Sync,
{
    let (lo, hi) = inst.cost_range();
    if hi - lo <= TARGET_TOL {
        return Ok(prior);
    }
    let grid = linspace(lo, hi, opts.grid);
    let coarse = evaluate_all(&grid, &eval)?;
    let mut best = prior;
    let winner = argmin(&coarse);
    if let Some(i) = winner {
        let a = grid[i.saturating_sub(1)];
        let b = grid[(i + 1).min(grid.len() - 1)];
        let fine = if opts.refine >= 2 { evaluate_all(&linspace(a, b, opts.refine), &eval)? } else { Vec::new() };
        for cand in coarse.into_iter().chain(fine).flatten() {
            if cand.tau < best.tau {
                best = cand;
            }
        }
    }
    Ok(best)
}

fn evaluate_all<F>(points: &[f64], eval: &F) -> Result<Vec<Option<Candidate>>>
where
    F: Fn(f64) -> Result<Option<Candidate>> + Sync,
{
    points.par_iter().map(|&c| eval(c)).collect()
}

fn argmin(cands: &[Option<Candidate>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        if let Some(c) = c {
            if best.is_none_or(|(_, t)| c.tau < t) {
                best = Some((i, c.tau));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn solution(objective: BoundKind, best: Candidate) -> RepSolution {
    RepSolution {
        objective,
        p_star: best.projection.p,
        tau_star: best.tau,
        c_hat_star: best.c_hat,
        lambda_star: best.lambda,
        theta_star: best.projection.theta,
    }
}

/// Serializes `±inf` as the strings `"inf"`/`"-inf"`; JSON has no literal for them.
mod extended_float {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("expected a number, \"inf\" or \"-inf\", got {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform2() -> Categorical {
        Categorical::uniform(2).unwrap()
    }

    /// Minimizes `bound(p1)` over `p = [1 - p1, p1]` on a 1e-4 grid.
    fn brute_force_two(inst: &RepInstance, bound: fn(f64, f64) -> f64) -> f64 {
        (0..=10_000)
            .map(|i| {
                let p1 = i as f64 / 10_000.0;
                let p = Categorical::new(vec![1.0 - p1, p1]).unwrap();
                let kl = kl_divergence(&p, &inst.prior).unwrap();
                bound(p.expect(&inst.costs).unwrap(), regularizer(kl, inst.n, inst.delta).unwrap())
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn i_project_examples() {
        let c = [0.0, 1.0];
        let proj = i_project(&c, &uniform2(), 0.5).unwrap();
        assert!((proj.p.probs()[0] - 0.5).abs() < 1e-10);
        assert!(proj.theta.abs() < 1e-8);
        assert!(proj.kl < 1e-15);

        let proj = i_project(&c, &uniform2(), 0.25).unwrap();
        assert!((proj.p.probs()[0] - 0.75).abs() < 1e-9);
        assert!((proj.theta - 3f64.ln()).abs() < 1e-8);
        assert!((proj.kl - 0.130812).abs() < 1e-6);

        let proj = i_project(&c, &uniform2(), 0.0).unwrap();
        assert_eq!(proj.p.probs(), &[1.0, 0.0]);
        assert!((proj.kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(proj.theta, f64::INFINITY);
    }

    #[test]
    fn i_project_rejects_unreachable_targets() {
        assert!(matches!(i_project(&[0.2, 0.4], &uniform2(), 0.5), Err(Error::InfeasibleTarget { .. })));
        assert!(i_project(&[0.2, 0.4], &uniform2(), 0.1).is_err());
    }

    #[test]
    fn boundary_ties_follow_prior_ratio() {
        let prior = Categorical::new(vec![0.1, 0.3, 0.6]).unwrap();
        let proj = i_project(&[0.2, 0.2, 0.9], &prior, 0.2).unwrap();
        assert!((proj.p.probs()[0] - 0.25).abs() < 1e-15);
        assert!((proj.p.probs()[1] - 0.75).abs() < 1e-15);
        assert_eq!(proj.p.probs()[2], 0.0);
    }

    #[test]
    fn i_project_ignores_costs_outside_prior_support() {
        let prior = Categorical::new(vec![0.5, 0.5, 0.0]).unwrap();
        let proj = i_project(&[0.3, 0.6, 0.0], &prior, 0.4).unwrap();
        assert_eq!(proj.p.probs()[2], 0.0);
        assert!(i_project(&[0.3, 0.6, 0.0], &prior, 0.1).is_err());
    }

    #[test]
    fn fixed_program_examples() {
        let inst = RepInstance::uniform(vec![0.0, 1.0], 1000, 0.01).unwrap();
        let r_star = regularizer(0.0, 1000, 0.01).unwrap();
        match solve_rep_fixed(&inst, RepParams { c_hat: 0.5, lambda: 1.0 }).unwrap() {
            RepValue::Feasible { tau, .. } => assert!((tau - (0.5 + 2.0 * r_star + 2.0)).abs() < 1e-9),
            RepValue::Infeasible => panic!("lambda = 1 is feasible"),
        }
        let c_hat = 0.3;
        let proj = i_project(&inst.costs, &inst.prior, c_hat).unwrap();
        let r = regularizer(proj.kl, 1000, 0.01).unwrap();
        let lam = closed_form_lambda(c_hat, r);
        let tau = solve_rep_fixed(&inst, RepParams { c_hat, lambda: lam }).unwrap().tau();
        assert!((tau - c_qpac(c_hat, r)).abs() < 1e-8);
        let below = solve_rep_fixed(&inst, RepParams { c_hat, lambda: lam * 0.999 }).unwrap();
        assert_eq!(below, RepValue::Infeasible);
        assert_eq!(below.tau(), f64::INFINITY);
    }

    #[test]
    fn intervals_examples() {
        let inst = RepInstance::uniform(vec![0.4; 3], 100, 0.05).unwrap();
        let gamma = c_qpac(0.4, inst.r0());
        let iv = prop2_intervals(&inst, gamma).unwrap();
        assert_eq!((iv.c_lo, iv.c_hi), (0.4, 0.4));

        let inst = RepInstance::uniform(vec![0.0, 1.0], 1000, 0.01).unwrap();
        let r0 = inst.r0();
        let gamma = c_qpac(0.5, r0);
        let iv = prop2_intervals(&inst, gamma).unwrap();
        assert!((iv.lambda_lo - r0).abs() < 1e-15);
        assert!((iv.lambda_hi - (gamma / 2.0 - r0)).abs() < 1e-15);
        assert!(!iv.is_degenerate());
        assert!(prop2_intervals(&inst, gamma * 0.5).is_err());
    }

    #[test]
    fn single_policy_returns_prior() {
        let inst = RepInstance::uniform(vec![0.3], 500, 0.01).unwrap();
        let q = optimize_qpac(&inst, 200).unwrap();
        assert_eq!(q.p_star.probs(), &[1.0]);
        assert_eq!(q.tau_star, c_qpac(0.3, inst.r0()));
        let p = optimize_pac(&inst, 200).unwrap();
        assert_eq!(p.tau_star, c_pac(0.3, inst.r0()));
    }

    #[test]
    fn zero_cost_pac_stays_at_prior() {
        let inst = RepInstance::uniform(vec![0.0; 4], 500, 0.01).unwrap();
        let sol = optimize_pac(&inst, 200).unwrap();
        assert_eq!(sol.p_star, inst.prior);
        assert_eq!(sol.tau_star, inst.r0().sqrt());
    }

    #[test]
    fn two_policy_optimum_matches_brute_force() {
        let inst = RepInstance::uniform(vec![0.0, 1.0], 1000, 0.01).unwrap();
        let q = optimize_qpac(&inst, 1001).unwrap();
        assert!((q.tau_star - brute_force_two(&inst, c_qpac)).abs() < 1e-3);
        let p = optimize_pac(&inst, 1001).unwrap();
        assert!((p.tau_star - brute_force_two(&inst, c_pac)).abs() < 1e-3);
        // Never worse than the brute force by more than grid resolution.
        assert!(q.tau_star <= brute_force_two(&inst, c_qpac) + 1e-6);
    }

    #[test]
    fn bisection_mode_agrees_with_closed_form() {
        let inst = RepInstance::uniform(vec![0.05, 0.2, 0.6, 0.9], 800, 0.05).unwrap();
        let closed = optimize_qpac(&inst, 200).unwrap();
        let opts = RepOptions { lambda: LambdaSearch::Bisection { tol: 1e-8 }, ..RepOptions::default() };
        let bisect = optimize_qpac_with(&inst, &opts).unwrap();
        assert!((closed.tau_star - bisect.tau_star).abs() < 1e-7);
        assert!(bisect.tau_star >= closed.tau_star);
    }

    #[test]
    fn solution_serializes_infinite_tilt() {
        let sol = RepSolution {
            objective: BoundKind::Qpac,
            p_star: Categorical::uniform(2).unwrap(),
            tau_star: 0.3,
            c_hat_star: 0.1,
            lambda_star: 0.01,
            theta_star: f64::INFINITY,
        };
        let text = serde_json::to_string(&sol).unwrap();
        assert!(text.contains("\"theta_star\":\"inf\""));
        let back: RepSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
    }

    fn instance_strategy() -> impl Strategy<Value = RepInstance> {
        (
            proptest::collection::vec(0.0f64..=1.0, 2..6),
            proptest::collection::vec(0.05f64..1.0, 6),
            10usize..5000,
            0.001f64..0.5,
        )
            .prop_map(|(c, w, n, delta)| {
                let prior = Categorical::from_weights(w[..c.len()].to_vec()).unwrap();
                RepInstance::new(c, prior, n, delta).unwrap()
            })
    }

    proptest! {
        #[test]
        fn tilt_is_monotone(c in proptest::collection::vec(0.0f64..=1.0, 2..6), a in -20.0f64..20.0, b in 0.01f64..5.0) {
            let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            prop_assume!(hi - lo > 1e-3);
            let prior = Categorical::uniform(c.len()).unwrap();
            prop_assert!(tilted_mean(&c, &prior, a + b) < tilted_mean(&c, &prior, a));
        }

        #[test]
        fn projection_hits_target(inst in instance_strategy(), u in 0.0f64..=1.0) {
            let (lo, hi) = inst.cost_range();
            let target = lo + u * (hi - lo);
            let proj = i_project(&inst.costs, &inst.prior, target).unwrap();
            prop_assert!((proj.p.expect(&inst.costs).unwrap() - target).abs() <= 1e-9);
        }

        #[test]
        fn posterior_never_worse_than_prior(inst in instance_strategy()) {
            let r0 = inst.r0();
            let c0 = inst.prior_cost();
            let q = optimize_qpac(&inst, 50).unwrap();
            prop_assert!(q.tau_star <= c_qpac(c0, r0));
            let p = optimize_pac(&inst, 50).unwrap();
            prop_assert!(p.tau_star <= c_pac(c0, r0));
        }

        #[test]
        fn tau_matches_recomputed_bound(inst in instance_strategy()) {
            let q = optimize_qpac(&inst, 50).unwrap();
            let kl = kl_divergence(&q.p_star, &inst.prior).unwrap();
            let r = regularizer(kl, inst.n, inst.delta).unwrap();
            let c = q.p_star.expect(&inst.costs).unwrap();
            prop_assert!((q.tau_star - c_qpac(c, r)).abs() < 1e-8);
        }

        #[test]
        fn closed_form_lambda_identity(c_hat in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let lhs = c_hat + 2.0 * r + 2.0 * closed_form_lambda(c_hat, r);
            prop_assert!((lhs - c_qpac(c_hat, r)).abs() < 1e-10);
        }
    }
}
