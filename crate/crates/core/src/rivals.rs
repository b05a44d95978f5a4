//! Benchmark formulations on the same enforcement skeleton: robust over the
//! support box, moment-based and Gaussian margins through cutting planes, and
//! the Wasserstein formulation on the lossless angle-only network.

use crate::acgrid::{realize, solve_newton, DispatchContext, NewtonOptions, SystemState};
use crate::case_io::{build_admittance, AdmittanceSet, Network};
use crate::chance::{Quantity, UncertaintySet};
use crate::error::{Error, Result};
use crate::linalg::{DenseLu, Matrix};
use crate::opfcore::{
    enforce, finish, solve_ipm, strategy_from_x, x_from_strategy, ChanceContext, CostMode, DcPhysics, Method, MonitoredQuantity,
    OperatingStrategy, OpfModel, SolveConfig, Solution, Timings, VarLayout,
};
use crate::wasserstein::{box_vertices, ForecastErrors, SampleSet};
use statrs::distribution::{ContinuousCDF, Normal};
use std::time::Instant;

/// Corners of the support box (`σ = σ_max`) of a projection.
pub fn ro_vertices(set: &SampleSet, sigma_max: f64) -> UncertaintySet {
    UncertaintySet { dim: set.dim(), vertices: box_vertices(set.dim(), &set.mean, &set.sqrt_cov, sigma_max) }
}

/// Multiplier on the standard deviation of the random term:
/// `sqrt(1/ρ)` from the Chebyshev bound, `Φ⁻¹(1 − ρ/2)` for Gaussian errors.
pub fn moment_margin(method: Method, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Input(format!("violation level must lie in (0, 1), got {rho}")));
    }
    match method {
        Method::Mdro => Ok((1.0 / rho).sqrt()),
        Method::Gsp => Ok(Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - rho / 2.0)),
        m => Err(Error::Input(format!("{m} has no moment margin"))),
    }
}

/// Point of the ellipse `{μ + k Σ^{1/2} u : |u| <= 1}` that maximizes `c'ξ`
/// when `signed_k > 0` (minimizes when negative), given `Σc` and `sqrt(c'Σc)`.
/// The linear cut through it is tight at the current `c` and valid for all others.
pub fn cut_point(mean: &[f64; 2], sigma_c: &[f64; 2], sd: f64, signed_k: f64) -> [f64; 2] {
    if sd <= 0.0 {
        return *mean;
    }
    [mean[0] + signed_k * sigma_c[0] / sd, mean[1] + signed_k * sigma_c[1] / sd]
}

/// Moment-based or Gaussian dispatch through successive linear cuts.
pub fn cutting_plane_solve(net: &Network, samples: &ForecastErrors, config: &SolveConfig) -> Result<Solution> {
    if !matches!(config.method, Method::Mdro | Method::Gsp) {
        return Err(Error::Input(format!("{} is not a cutting-plane method", config.method)));
    }
    crate::opfcore::solve_with_enforcement(net, samples, config)
}

/// Flow per unit injection at every bus on the angle-only network, one row
/// per branch; the reference bus absorbs the injection (zero column).
pub fn dc_ptdf(net: &Network, adm: &AdmittanceSet, dc: &DcPhysics) -> Result<Vec<Vec<f64>>> {
    let n = net.n_buses();
    let r = net.partition.reference;
    let keep: Vec<usize> = (0..n).filter(|&i| i != r).collect();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in keep.iter().enumerate() {
        pos[i] = k;
    }
    let mut lap = Matrix::zeros(keep.len(), keep.len());
    for &i in &keep {
        for &(j, b) in &dc.bus_rows[i] {
            if j != r {
                lap[(pos[i], pos[j])] += b;
            }
        }
    }
    let lu = DenseLu::factor(&lap, "angle-only bus matrix")?;
    let mut reach = vec![vec![0.0; n]; n];
    for &col in &keep {
        let mut e = vec![0.0; keep.len()];
        e[pos[col]] = 1.0;
        let th = lu.solve_vec(&e);
        for &i in &keep {
            reach[i][col] = th[pos[i]];
        }
    }
    Ok((0..net.branches.len())
        .map(|k| {
            let (i, j) = adm.branch_ends[k];
            let b = dc.branch_b[k];
            (0..n).map(|bus| b * (reach[i][bus] - reach[j][bus])).collect()
        })
        .collect())
}

/// Flow sensitivities of the angle-only network: `(a_row, b_row)` per limited
/// branch, for injections at generator and wind buses respectively.
pub fn dc_quantities(net: &Network, adm: &AdmittanceSet, dc: &DcPhysics) -> Result<Vec<MonitoredQuantity>> {
    let ptdf = dc_ptdf(net, adm, dc)?;
    Ok(net
        .limited_branches()
        .into_iter()
        .map(|k| {
            let rate = net.branches[k].rate.unwrap();
            MonitoredQuantity {
                quantity: Quantity::Flow(k),
                a_row: net.generators.iter().map(|g| -ptdf[k][g.bus]).collect(),
                b_row: net.wind_farms.iter().map(|w| ptdf[k][w.bus]).collect(),
                lower: -rate,
                upper: rate,
            }
        })
        .collect())
}

/// AC operating point for setpoints chosen on the angle-only model: units keep
/// their active setpoints, generator buses their case voltage setpoints, and
/// the reference bus covers the losses.
pub fn ac_completion(net: &Network, adm: &AdmittanceSet, dc: &OperatingStrategy) -> Result<OperatingStrategy> {
    let mut v_set = vec![1.0; net.n_buses()];
    for g in &net.generators {
        v_set[g.bus] = g.v_set;
    }
    let mut p: Vec<f64> = net.buses.iter().map(|b| -b.p_load).collect();
    let mut q: Vec<f64> = net.buses.iter().map(|b| -b.q_load).collect();
    let (pw, qw) = net.wind_forecast_injection();
    for i in 0..net.n_buses() {
        p[i] += pw[i];
        q[i] += qw[i];
    }
    for (g, gen) in net.generators.iter().enumerate() {
        p[gen.bus] += dc.pg[g];
    }
    let ctx = DispatchContext { p, q, v_set: v_set.clone(), partition: net.partition.clone() };
    let report = solve_newton(&ctx, adm, &SystemState::flat_with_setpoints(net), NewtonOptions::default())?;
    let template = OperatingStrategy { theta: report.state.theta.clone(), v: report.state.v.clone(), qg: vec![0.0; net.n_generators()], ..dc.clone() };
    let zeta = vec![0.0; net.n_wind()];
    let out = realize(net, adm, &template, &zeta, report.state, report.iterations);
    Ok(OperatingStrategy { theta: out.state.theta, v: out.state.v, pg: out.pg, qg: out.qg, ..dc.clone() })
}

/// Wasserstein dispatch on the angle-only network with flow and reserve
/// chance constraints only, completed into an AC operating point.
pub fn dc_opf(net: &Network, samples: &ForecastErrors, config: &SolveConfig) -> Result<Solution> {
    let t0 = Instant::now();
    let adm = build_admittance(net);
    let dc = DcPhysics::new(net, &adm);
    let lay = VarLayout::new(net);
    let det = OpfModel::new(net, &adm, CostMode::Generation, false, Vec::new()).with_dc(dc.clone());
    let mut x0 = vec![0.0; lay.dim()];
    for i in 0..lay.nb {
        x0[lay.v(i)] = 1.0;
    }
    for (g, gen) in net.generators.iter().enumerate() {
        x0[lay.pg(g)] = gen.p_init.clamp(gen.p_min, gen.p_max);
    }
    let rep = solve_ipm(&det, &x0, None, config.ipm)?;
    if !rep.converged {
        return Err(Error::Solver(format!("angle-only dispatch did not converge in {} iterations", rep.iterations)));
    }
    let base = strategy_from_x(&lay, &rep.x);
    let start = OperatingStrategy::from_state(net, &base.state(), base.pg.clone(), base.qg.clone());
    let dc_cfg = SolveConfig { method: Method::Dc, ..config.clone() };
    let mut ctx = ChanceContext::new(net, samples, &dc_cfg, dc_quantities(net, &adm, &dc)?, "dc")?;
    let prepare_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let out = enforce(net, &adm, &mut ctx, Some(&dc), x_from_strategy(&lay, &start))?;
    let enforce_s = t1.elapsed().as_secs_f64();
    let strategy = ac_completion(net, &adm, &strategy_from_x(&lay, &out.x))?;
    Ok(finish(net, &ctx, Method::Dc, strategy, out, Timings { prepare_s, enforce_s, total_s: t0.elapsed().as_secs_f64() }))
}
