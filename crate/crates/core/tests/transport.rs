mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use sot_core::rng;
use sot_core::transport::{self, exact_ot, sinkhorn, CostMatrix, SinkhornOptions, Solver, DEFAULT_EXACT_CAP};

fn instance(seed: u64, m: usize, n: usize) -> (CostMatrix, nalgebra::DVector<f64>, nalgebra::DVector<f64>) {
    let mut r = rng::stream(seed, 0);
    let c = CostMatrix::new(DMatrix::from_fn(m, n, |_, _| r.gen_range(0.0..1.0))).unwrap();
    let a = common::simplex(&mut r, m);
    let b = common::simplex(&mut r, n);
    (c, a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn exact_plans_are_feasible_sparse_vertices(seed in any::<u64>(), m in 1usize..9, n in 1usize..9) {
        let (c, a, b) = instance(seed, m, n);
        let plan = exact_ot(&c, &a, &b, DEFAULT_EXACT_CAP).unwrap();
        prop_assert!(plan.entries.iter().all(|&t| t >= 0.0));
        prop_assert!((plan.entries.column_sum() - &a).abs().max() < 1e-12);
        prop_assert!((plan.entries.row_sum().transpose() - &b).abs().max() < 1e-12);
        prop_assert!(plan.entries.iter().filter(|&&t| t > 1e-12).count() < m + n);
    }

    #[test]
    fn exact_cost_lower_bounds_entropic_cost(seed in any::<u64>(), m in 2usize..7, n in 2usize..7) {
        let (c, a, b) = instance(seed, m, n);
        let exact = exact_ot(&c, &a, &b, DEFAULT_EXACT_CAP).unwrap();
        let opts = SinkhornOptions { max_iters: 20_000, tol: 1e-13, ..SinkhornOptions::default() };
        let ent = sinkhorn(&c, &a, &b, 0.1, &opts).unwrap();
        prop_assume!(ent.marginal_error < 1e-12);
        let ce = transport::transport_cost(&c, &exact).unwrap();
        let cs = transport::transport_cost(&c, &ent).unwrap();
        prop_assert!(ce <= cs + 1e-9, "exact {} > entropic {}", ce, cs);
    }

    #[test]
    fn sinkhorn_plan_is_positive_with_matching_marginals(seed in any::<u64>(), m in 1usize..10, n in 1usize..10) {
        let (c, a, b) = instance(seed, m, n);
        let plan = sinkhorn(&c, &a, &b, 0.05, &SinkhornOptions { max_iters: 2000, ..SinkhornOptions::default() }).unwrap();
        prop_assert!(plan.entries.iter().all(|&t| t > 0.0 && t.is_finite()));
        prop_assert!(plan.marginal_error < 1e-8);
    }
}

#[test]
fn transposed_problem_has_transposed_exact_plan_cost() {
    let (c, a, b) = instance(11, 5, 7);
    let p = exact_ot(&c, &a, &b, DEFAULT_EXACT_CAP).unwrap();
    let q = exact_ot(&c.transpose(), &b, &a, DEFAULT_EXACT_CAP).unwrap();
    let cp = transport::transport_cost(&c, &p).unwrap();
    let cq = transport::transport_cost(&c.transpose(), &q).unwrap();
    assert!((cp - cq).abs() < 1e-12);
}

#[test]
fn tiny_eta_switches_to_log_domain_and_stays_finite() {
    let (c, a, b) = instance(12, 6, 6);
    let plan = sinkhorn(&c, &a, &b, 1e-4, &SinkhornOptions::default()).unwrap();
    assert_eq!(plan.solver, Solver::SinkhornLog);
    assert!(plan.entries.iter().all(|t| t.is_finite()));
}

#[test]
fn plan_csv_lists_entries_and_marginals() {
    let (c, a, b) = instance(13, 2, 3);
    let plan = exact_ot(&c, &a, &b, DEFAULT_EXACT_CAP).unwrap();
    let csv = plan.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kind,i,j,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|l| l.starts_with("T,")).count(), 6);
    assert_eq!(rows.iter().filter(|l| l.starts_with("a,")).count(), 2);
    assert_eq!(rows.iter().filter(|l| l.starts_with("b,")).count(), 3);
    let total: f64 = rows
        .iter()
        .filter(|l| l.starts_with("T,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);
}
