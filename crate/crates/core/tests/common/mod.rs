//! Helpers shared by the integration tests. The brute-force oracle and the
//! bound formulas here are written out independently of the library.

#![allow(dead_code)]

use primcert::bounds::Categorical;
use primcert::rep::{closed_form_lambda, i_project, solve_rep_fixed, RepInstance, RepParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

pub fn reg(kl: f64, n: usize, delta: f64) -> f64 {
    let n = n as f64;
    (kl + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)
}

pub fn qpac(c: f64, r: f64) -> f64 {
    let s = (c + r).sqrt() + r.sqrt();
    s * s
}

pub fn objective(costs: &[f64], prior: &[f64], n: usize, delta: f64, p: &[f64]) -> f64 {
    let c: f64 = p.iter().zip(costs).map(|(a, b)| a * b).sum();
    qpac(c, reg(kl(p, prior), n, delta))
}

#[derive(Debug, Clone)]
pub struct BruteForce {
    pub tau: f64,
    pub p: Vec<f64>,
}

fn compositions(total: i64, parts: usize, prefix: &mut Vec<i64>, visit: &mut impl FnMut(&[i64])) {
    if parts == 1 {
        prefix.push(total);
        visit(prefix);
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(total - k, parts - 1, prefix, visit);
        prefix.pop();
    }
}

/// Minimizes the quadratic bound over the simplex: a 0.01 lattice, then a
/// 0.001 lattice within one coarse cell of the winner. The prior itself is
/// always a candidate.
pub fn brute_force_qpac(costs: &[f64], prior: &[f64], n: usize, delta: f64) -> BruteForce {
    let m = costs.len();
    let f = |p: &[f64]| objective(costs, prior, n, delta, p);
    let mut best = BruteForce { tau: f(prior), p: prior.to_vec() };
    let consider = |p: Vec<f64>, best: &mut BruteForce| {
        let v = f(&p);
        if v < best.tau {
            *best = BruteForce { tau: v, p };
        }
    };

    compositions(100, m, &mut Vec::new(), &mut |k| {
        consider(k.iter().map(|&x| x as f64 / 100.0).collect(), &mut best)
    });

    let centre: Vec<i64> = best.p.iter().map(|&x| (x * 1000.0).round() as i64).collect();
    let mut offsets = vec![0i64; m - 1];
    loop {
        let mut free: Vec<i64> = centre[..m - 1].iter().zip(&offsets).map(|(c, o)| c + o - 10).collect();
        let rest = 1000 - free.iter().sum::<i64>();
        if free.iter().all(|&x| (0..=1000).contains(&x)) && (0..=1000).contains(&rest) {
            free.push(rest);
            consider(free.iter().map(|&x| x as f64 / 1000.0).collect(), &mut best);
        }
        let mut i = 0;
        while i < m - 1 {
            offsets[i] += 1;
            if offsets[i] <= 20 {
                break;
            }
            offsets[i] = 0;
            i += 1;
        }
        if i == m - 1 {
            break;
        }
    }
    best
}

/// Random instances with `m` cycling through 2, 3, 4. Odd instances get a
/// non-uniform prior.
pub fn random_instances(count: usize, seed: u64) -> Vec<RepInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = [20, 50, 100, 300, 1000, 5000];
    let deltas = [0.01, 0.05, 0.1];
    (0..count)
        .map(|i| {
            let m = 2 + i % 3;
            let costs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let n = ns[rng.random_range(0..ns.len())];
            let delta = deltas[rng.random_range(0..deltas.len())];
            let prior = if i % 2 == 0 {
                Categorical::uniform(m).unwrap()
            } else {
                Categorical::from_weights((0..m).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
            };
            RepInstance::new(costs, prior, n, delta).unwrap()
        })
        .collect()
}

pub fn brute_force(inst: &RepInstance) -> BruteForce {
    brute_force_qpac(&inst.costs, inst.prior.probs(), inst.n, inst.delta)
}

/// Largest disagreement between the epigraph program at the closed-form
/// `lambda` and the quadratic bound evaluated directly at the I-projection,
/// over a grid of targets; also the gap between the two grid minima.
pub fn epigraph_gap(inst: &RepInstance, points: usize) -> (f64, f64) {
    let (lo, hi) = inst.cost_range();
    let (mut worst, mut min_fixed, mut min_direct) = (0.0f64, f64::INFINITY, f64::INFINITY);
    for j in 0..=points {
        let c_hat = lo + (hi - lo) * j as f64 / points as f64;
        let proj = i_project(&inst.costs, &inst.prior, c_hat).unwrap();
        let r = reg(proj.kl, inst.n, inst.delta);
        let fixed = solve_rep_fixed(inst, RepParams { c_hat, lambda: closed_form_lambda(c_hat, r) }).unwrap().tau();
        let c: f64 = proj.p.probs().iter().zip(&inst.costs).map(|(a, b)| a * b).sum();
        let direct = qpac(c, r);
        worst = worst.max((fixed - direct).abs());
        min_fixed = min_fixed.min(fixed);
        min_direct = min_direct.min(direct);
    }
    (worst, (min_fixed - min_direct).abs())
}
