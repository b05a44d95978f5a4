use proptest::prelude::*;
use std::path::PathBuf;
use wdro_opf::case_io::{load_case, Network};
use wdro_opf::chance::{min_sigma, worst_case_violation};
use wdro_opf::costdro::{sample_average, worst_case_cost_exact, worst_case_cost_ub, CostAggregate, OmegaSamples};
use wdro_opf::opfcore::{solve_with_enforcement, Method, SolveConfig, StrategyFile};
use wdro_opf::simlab::{evaluate_strategy, generate_samples, EvalModel, RngProtocol};
use wdro_opf::Error;

fn case14() -> Network {
    load_case(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/ieee14_wind.m")).unwrap()
}

#[test]
fn every_method_yields_a_consistent_strategy() {
    let net = case14();
    let train = generate_samples(&RngProtocol { seed: 11, ..RngProtocol::default() }, &net, 300).unwrap();
    let test = generate_samples(&RngProtocol { seed: 12, ..RngProtocol::default() }, &net, 3000).unwrap();
    for method in Method::ALL {
        let sol = match solve_with_enforcement(&net, &train, &SolveConfig { method, ..SolveConfig::default() }) {
            Ok(sol) => sol,
            // The full support box is too wide for this small system.
            Err(Error::Infeasible(_)) if method == Method::Ro => continue,
            Err(e) => panic!("{}: {e}", method.as_str()),
        };
        let s = &sol.strategy;
        assert!((s.alpha_sum() - 1.0).abs() < 1e-6, "{}", method.as_str());
        assert!(s.alpha.iter().all(|&a| a >= -1e-9));
        for (g, gen) in net.generators.iter().enumerate() {
            assert!(s.pg[g] + s.r_up[g] <= gen.p_max + 1e-6, "{} unit {g}", method.as_str());
            assert!(s.pg[g] - s.r_dn[g] >= gen.p_min - 1e-6, "{} unit {g}", method.as_str());
        }
        assert!(sol.report.kkt_residual < 1e-6);
        let rep = evaluate_strategy(&net, s, &test, EvalModel::FullAc).unwrap();
        assert_eq!(rep.trials, 3000);
        assert!(rep.mean_cost.is_finite() && rep.mean_cost > 0.0);
    }
}

#[test]
fn strategy_file_round_trip_and_tamper_check() {
    let net = case14();
    let train = generate_samples(&RngProtocol { seed: 5, ..RngProtocol::default() }, &net, 200).unwrap();
    let config = SolveConfig::default();
    let sol = solve_with_enforcement(&net, &train, &config).unwrap();
    let file = StrategyFile::new(&net, &train, &config, &sol);
    let back = StrategyFile::from_json(&file.to_json().unwrap()).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.strategy_for(&net).unwrap(), sol.strategy);

    let mut tampered = back.clone();
    tampered.config.beta = 0.5;
    assert!(matches!(tampered.strategy_for(&net), Err(Error::Input(_))));
    let mut other = back;
    other.case_hash = "0".repeat(64);
    assert!(other.strategy_for(&net).is_err());
}

#[test]
fn larger_radius_costs_more() {
    let net = case14();
    let train = generate_samples(&RngProtocol { seed: 9, ..RngProtocol::default() }, &net, 400).unwrap();
    let cost = |beta: f64| {
        solve_with_enforcement(&net, &train, &SolveConfig { beta, ..SolveConfig::default() }).unwrap().report.objective
    };
    assert!(cost(0.99) >= cost(0.5) - 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn violation_monotone_in_box_and_radius(
        d in proptest::collection::vec(0.0f64..5.0, 1..120),
        s1 in 0.0f64..5.0, s2 in 0.0f64..5.0, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5,
    ) {
        let (slo, shi) = (s1.min(s2), s1.max(s2));
        let (elo, ehi) = (e1.min(e2), e1.max(e2));
        prop_assert!(worst_case_violation(shi, &d, elo) <= worst_case_violation(slo, &d, elo) + 1e-9);
        prop_assert!(worst_case_violation(slo, &d, elo) <= worst_case_violation(slo, &d, ehi) + 1e-9);
        let v = worst_case_violation(slo, &d, ehi);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn box_shrinks_with_looser_level(
        d in proptest::collection::vec(0.0f64..3.0, 5..120),
        eps in 0.0f64..0.05, r1 in 0.05f64..0.5, r2 in 0.05f64..0.5,
    ) {
        let (rlo, rhi) = (r1.min(r2), r1.max(r2));
        if let (Ok(a), Ok(b)) = (min_sigma(&d, eps, rlo, 10.0), min_sigma(&d, eps, rhi, 10.0)) {
            prop_assert!(b.sigma <= a.sigma + 1e-4);
        }
    }

    #[test]
    fn cost_bounds_are_ordered(
        w in proptest::collection::vec(-1.0f64..1.0, 2..100),
        c2 in 0.0f64..50.0, c1 in -50.0f64..50.0, eps in 0.0f64..0.3, pad in 0.0f64..1.0,
    ) {
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min) - pad;
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
        let agg = CostAggregate { c2, c1, c0: 1.0 };
        let s = OmegaSamples::new(w, lo, hi, eps);
        let exact = worst_case_cost_exact(&agg, &s);
        let (ub, _) = worst_case_cost_ub(&agg, &s);
        let tol = 1e-9 * ub.abs().max(1.0);
        prop_assert!(sample_average(&agg, &s) <= exact + tol);
        prop_assert!(exact <= ub + tol);
    }
}
