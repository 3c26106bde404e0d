mod common;

use primcert::bounds::c_qpac;
use primcert::rep::{optimize_qpac, prop2_intervals};

#[test]
fn optimizer_matches_brute_force() {
    for (i, inst) in common::random_instances(24, 11).iter().enumerate() {
        let bf = common::brute_force(inst);
        let sol = optimize_qpac(inst, 200).unwrap();
        assert!((sol.tau_star - bf.tau).abs() < 1e-3, "instance {i}: optimizer {} brute force {}", sol.tau_star, bf.tau);
    }
}

#[test]
fn optimizer_value_is_its_posterior_bound() {
    for inst in common::random_instances(30, 12) {
        let sol = optimize_qpac(&inst, 200).unwrap();
        let direct = common::objective(&inst.costs, inst.prior.probs(), inst.n, inst.delta, sol.p_star.probs());
        assert!((sol.tau_star - direct).abs() < 1e-8, "{} vs {direct}", sol.tau_star);
        assert!(sol.tau_star <= c_qpac(inst.prior_cost(), inst.r0()) + 1e-12);
    }
}

#[test]
fn epigraph_program_agrees_with_direct_bound() {
    for inst in common::random_instances(30, 13) {
        let (pointwise, minima) = common::epigraph_gap(&inst, 100);
        assert!(pointwise < 1e-8 && minima < 1e-8, "{pointwise} {minima}");
    }
}

#[test]
fn brute_force_optimum_lies_in_search_intervals() {
    for inst in common::random_instances(30, 14) {
        let bf = common::brute_force(&inst);
        let c_hat: f64 = bf.p.iter().zip(&inst.costs).map(|(a, b)| a * b).sum();
        let r = common::reg(common::kl(&bf.p, inst.prior.probs()), inst.n, inst.delta);
        let lambda = (c_hat * r + r * r).sqrt();
        let gamma = c_qpac(inst.prior_cost(), inst.r0());
        let iv = prop2_intervals(&inst, gamma).unwrap();
        assert!(iv.contains(c_hat, lambda, 1e-12), "{iv:?} misses ({c_hat}, {lambda})");
    }
}
