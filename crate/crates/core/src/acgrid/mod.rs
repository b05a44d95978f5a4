//! Exact AC power flow in polar coordinates and the AGC/AVR system response.

use crate::case_io::{AdmittanceSet, BusPartition, Network};
use crate::error::{Error, Result};
use crate::linalg::{norm_inf, DenseLu, Matrix};
use crate::opfcore::OperatingStrategy;
use faer::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl SystemState {
    pub fn flat(n: usize) -> Self {
        Self { theta: vec![0.0; n], v: vec![1.0; n] }
    }

    /// Start point with generator voltage setpoints at generator buses.
    pub fn flat_with_setpoints(net: &Network) -> Self {
        let mut s = Self::flat(net.n_buses());
        for g in &net.generators {
            s.v[g.bus] = g.v_set;
        }
        s
    }
}

/// Specified net injections and voltage setpoints for one power flow solve.
#[derive(Debug, Clone)]
pub struct DispatchContext {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Voltage magnitude per bus; only entries at the reference and PV buses are used.
    pub v_set: Vec<f64>,
    pub partition: BusPartition,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub state: SystemState,
    pub iterations: usize,
    /// Mismatch infinity norm before each iteration and at exit.
    pub mismatch_history: Vec<f64>,
}

/// Net injections `P`, `Q` at every bus for a given state.
pub fn injections(state: &SystemState, adm: &AdmittanceSet) -> (Vec<f64>, Vec<f64>) {
    let n = state.v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (vi, ti) = (state.v[i], state.theta[i]);
        let (mut pi, mut qi) = (0.0, 0.0);
        for &(j, g, b) in &adm.rows[i] {
            let (s, c) = (ti - state.theta[j]).sin_cos();
            let w = vi * state.v[j];
            pi += w * (g * c + b * s);
            qi += w * (g * s - b * c);
        }
        p[i] = pi;
        q[i] = qi;
    }
    (p, q)
}

/// Dense Jacobian blocks `(dP/dθ, dP/dv, dQ/dθ, dQ/dv)`.
pub fn power_flow_jacobian(state: &SystemState, adm: &AdmittanceSet) -> (Matrix, Matrix, Matrix, Matrix) {
    let n = state.v.len();
    let (p, q) = injections(state, adm);
    let mut pt = Mat::<f64>::zeros(n, n);
    let mut pv = Mat::<f64>::zeros(n, n);
    let mut qt = Mat::<f64>::zeros(n, n);
    let mut qv = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        let vi = state.v[i];
        for &(j, g, b) in &adm.rows[i] {
            if j == i {
                pt[(i, i)] = -q[i] - b * vi * vi;
                pv[(i, i)] = p[i] / vi + g * vi;
                qt[(i, i)] = p[i] - g * vi * vi;
                qv[(i, i)] = q[i] / vi - b * vi;
                continue;
            }
            let vj = state.v[j];
            let (s, c) = (state.theta[i] - state.theta[j]).sin_cos();
            pt[(i, j)] = vi * vj * (g * s - b * c);
            pv[(i, j)] = vi * (g * c + b * s);
            qt[(i, j)] = -vi * vj * (g * c + b * s);
            qv[(i, j)] = vi * (g * s - b * c);
        }
    }
    (pt, pv, qt, qv)
}

/// From-end active power flow of every branch (zero for out-of-service ones).
pub fn branch_flows(state: &SystemState, adm: &AdmittanceSet) -> Vec<f64> {
    adm.branches
        .iter()
        .zip(&adm.branch_ends)
        .map(|(c, &(i, j))| {
            let (s, co) = (state.theta[i] - state.theta[j]).sin_cos();
            let (vi, vj) = (state.v[i], state.v[j]);
            vi * vi * c.gff + vi * vj * (c.gft * co + c.bft * s)
        })
        .collect()
}

/// Jacobian of the from-end flows, `(dF/dθ, dF/dv)`.
pub fn flow_jacobian(state: &SystemState, adm: &AdmittanceSet) -> (Matrix, Matrix) {
    let nl = adm.branches.len();
    let n = state.v.len();
    let mut ft = Mat::<f64>::zeros(nl, n);
    let mut fv = Mat::<f64>::zeros(nl, n);
    for (k, (c, &(i, j))) in adm.branches.iter().zip(&adm.branch_ends).enumerate() {
        let (s, co) = (state.theta[i] - state.theta[j]).sin_cos();
        let (vi, vj) = (state.v[i], state.v[j]);
        let dth = vi * vj * (-c.gft * s + c.bft * co);
        ft[(k, i)] += dth;
        ft[(k, j)] -= dth;
        fv[(k, i)] += 2.0 * vi * c.gff + vj * (c.gft * co + c.bft * s);
        fv[(k, j)] += vi * (c.gft * co + c.bft * s);
    }
    (ft, fv)
}

/// Index bookkeeping for the reduced Newton system: angles at every
/// non-reference bus, magnitudes at PQ buses.
struct Reduced {
    angle: Vec<usize>,
    volt: Vec<usize>,
}

impl Reduced {
    fn new(part: &BusPartition, n: usize) -> Self {
        Self { angle: (0..n).filter(|&i| i != part.reference).collect(), volt: part.pq.clone() }
    }

    fn dim(&self) -> usize {
        self.angle.len() + self.volt.len()
    }

    fn mismatch(&self, state: &SystemState, adm: &AdmittanceSet, ctx: &DispatchContext) -> Vec<f64> {
        let (p, q) = injections(state, adm);
        let mut f = Vec::with_capacity(self.dim());
        f.extend(self.angle.iter().map(|&i| p[i] - ctx.p[i]));
        f.extend(self.volt.iter().map(|&i| q[i] - ctx.q[i]));
        f
    }

    fn jacobian(&self, state: &SystemState, adm: &AdmittanceSet) -> Matrix {
        let (pt, pv, qt, qv) = power_flow_jacobian(state, adm);
        let na = self.angle.len();
        let d = self.dim();
        Mat::from_fn(d, d, |r, c| {
            let (blk_r, ir) = if r < na { (0, self.angle[r]) } else { (1, self.volt[r - na]) };
            let (blk_c, ic) = if c < na { (0, self.angle[c]) } else { (1, self.volt[c - na]) };
            match (blk_r, blk_c) {
                (0, 0) => pt[(ir, ic)],
                (0, _) => pv[(ir, ic)],
                (_, 0) => qt[(ir, ic)],
                _ => qv[(ir, ic)],
            }
        })
    }

    fn apply(&self, state: &mut SystemState, dx: &[f64]) {
        let na = self.angle.len();
        for (k, &i) in self.angle.iter().enumerate() {
            state.theta[i] -= dx[k];
        }
        for (k, &i) in self.volt.iter().enumerate() {
            state.v[i] -= dx[na + k];
        }
    }
}

fn impose_setpoints(ctx: &DispatchContext, state: &mut SystemState) {
    state.theta[ctx.partition.reference] = 0.0;
    state.v[ctx.partition.reference] = ctx.v_set[ctx.partition.reference];
    for &i in &ctx.partition.pv {
        state.v[i] = ctx.v_set[i];
    }
}

/// Full Newton-Raphson power flow.
pub fn solve_newton(
    ctx: &DispatchContext,
    adm: &AdmittanceSet,
    init: &SystemState,
    opts: NewtonOptions,
) -> Result<NewtonReport> {
    let red = Reduced::new(&ctx.partition, init.v.len());
    let mut state = init.clone();
    impose_setpoints(ctx, &mut state);
    let mut history = Vec::new();
    for it in 0..=opts.max_iter {
        let f = red.mismatch(&state, adm, ctx);
        let norm = norm_inf(&f);
        history.push(norm);
        if !norm.is_finite() {
            break;
        }
        if norm < opts.tol {
            return Ok(NewtonReport { state, iterations: it, mismatch_history: history });
        }
        if it == opts.max_iter {
            break;
        }
        let lu = DenseLu::factor(&red.jacobian(&state, adm), "power flow Jacobian")?;
        red.apply(&mut state, &lu.solve_vec(&f));
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, mismatch: *history.last().unwrap_or(&f64::NAN) })
}

/// Realized operating quantities after a disturbance.
#[derive(Debug, Clone)]
pub struct ResponseOutcome {
    pub state: SystemState,
    /// Generator active outputs; the first reference-bus unit carries the residual.
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    /// From-end branch active flows.
    pub flows: Vec<f64>,
    pub iterations: usize,
}

/// Injection specification after AGC redispatch for forecast errors `zeta`.
pub fn response_context(net: &Network, strategy: &OperatingStrategy, zeta: &[f64]) -> DispatchContext {
    let omega: f64 = zeta.iter().sum();
    let n = net.n_buses();
    let mut p: Vec<f64> = net.buses.iter().map(|b| -b.p_load).collect();
    let mut q: Vec<f64> = net.buses.iter().map(|b| -b.q_load).collect();
    for (g, gen) in net.generators.iter().enumerate() {
        p[gen.bus] += strategy.pg[g] - omega * strategy.alpha[g];
    }
    for (w, farm) in net.wind_farms.iter().enumerate() {
        let out = farm.forecast + zeta[w];
        p[farm.bus] += out;
        q[farm.bus] += out * net.wind_q_ratio(w);
    }
    debug_assert_eq!(p.len(), n);
    DispatchContext { p, q, v_set: strategy.v.clone(), partition: net.partition.clone() }
}

/// Generator outputs, reactive outputs and flows implied by a solved state.
pub fn realize(
    net: &Network,
    adm: &AdmittanceSet,
    strategy: &OperatingStrategy,
    zeta: &[f64],
    state: SystemState,
    iterations: usize,
) -> ResponseOutcome {
    let omega: f64 = zeta.iter().sum();
    let (p, q) = injections(&state, adm);
    let at_bus = net.generators_at_bus();
    let reference = net.partition.reference;
    let mut pg: Vec<f64> = (0..net.n_generators()).map(|g| strategy.pg[g] - omega * strategy.alpha[g]).collect();

    let mut wind_p = vec![0.0; net.n_buses()];
    let mut wind_q = vec![0.0; net.n_buses()];
    for (w, farm) in net.wind_farms.iter().enumerate() {
        let out = farm.forecast + zeta[w];
        wind_p[farm.bus] += out;
        wind_q[farm.bus] += out * net.wind_q_ratio(w);
    }
    let lead = at_bus[reference][0];
    let others: f64 = at_bus[reference][1..].iter().map(|&g| pg[g]).sum();
    pg[lead] = p[reference] + net.buses[reference].p_load - wind_p[reference] - others;

    let mut qg = strategy.qg.clone();
    for i in net.partition.generator_buses() {
        let units = &at_bus[i];
        let q_bus = q[i] + net.buses[i].q_load - wind_q[i];
        let nominal: f64 = units.iter().map(|&g| strategy.qg[g]).sum();
        let share = (q_bus - nominal) / units.len() as f64;
        for &g in units {
            qg[g] = strategy.qg[g] + share;
        }
    }
    let flows = branch_flows(&state, adm);
    ResponseOutcome { state, pg, qg, flows, iterations }
}

/// Exact AGC/AVR response: units follow `p - (1'ζ)α`, the reference bus
/// absorbs the remaining mismatch and generator-bus voltages stay at setpoint.
pub fn agc_avr_response(
    net: &Network,
    adm: &AdmittanceSet,
    strategy: &OperatingStrategy,
    zeta: &[f64],
    opts: NewtonOptions,
) -> Result<ResponseOutcome> {
    let ctx = response_context(net, strategy, zeta);
    let report = solve_newton(&ctx, adm, &strategy.state(), opts)?;
    Ok(realize(net, adm, strategy, zeta, report.state, report.iterations))
}

/// Response solver for repeated disturbances around one strategy. Uses chord
/// iterations with the Jacobian factored at the nominal state, falling back to
/// full Newton when they stall.
pub struct ResponseSolver<'a> {
    net: &'a Network,
    adm: &'a AdmittanceSet,
    strategy: &'a OperatingStrategy,
    red: Reduced,
    lu: DenseLu,
    opts: NewtonOptions,
}

impl<'a> ResponseSolver<'a> {
    pub fn new(net: &'a Network, adm: &'a AdmittanceSet, strategy: &'a OperatingStrategy, opts: NewtonOptions) -> Result<Self> {
        let red = Reduced::new(&net.partition, net.n_buses());
        let lu = DenseLu::factor(&red.jacobian(&strategy.state(), adm), "nominal power flow Jacobian")?;
        Ok(Self { net, adm, strategy, red, lu, opts })
    }

    pub fn solve(&self, zeta: &[f64]) -> Result<ResponseOutcome> {
        let ctx = response_context(self.net, self.strategy, zeta);
        let mut state = self.strategy.state();
        impose_setpoints(&ctx, &mut state);
        let mut prev = f64::INFINITY;
        for it in 0..60 {
            let f = self.red.mismatch(&state, self.adm, &ctx);
            let norm = norm_inf(&f);
            if norm < self.opts.tol {
                return Ok(realize(self.net, self.adm, self.strategy, zeta, state, it));
            }
            if !norm.is_finite() || norm > 0.9 * prev && it > 3 {
                break;
            }
            prev = norm;
            self.red.apply(&mut state, &self.lu.solve_vec(&f));
        }
        let report = solve_newton(&ctx, self.adm, &self.strategy.state(), self.opts)?;
        Ok(realize(self.net, self.adm, self.strategy, zeta, report.state, report.iterations))
    }
}

/// Power flow of the case's own generator setpoints, used for warm starts.
pub fn case_power_flow(net: &Network, adm: &AdmittanceSet) -> Result<(SystemState, Vec<f64>, Vec<f64>)> {
    let mut p: Vec<f64> = net.buses.iter().map(|b| -b.p_load).collect();
    let mut q: Vec<f64> = net.buses.iter().map(|b| -b.q_load).collect();
    let (pw, qw) = net.wind_forecast_injection();
    for i in 0..net.n_buses() {
        p[i] += pw[i];
        q[i] += qw[i];
    }
    let mut pg: Vec<f64> = net.generators.iter().map(|g| g.p_init).collect();
    // Scale units to cover load minus wind so the reference bus is not overloaded.
    let need = net.total_load() - pw.iter().sum::<f64>();
    let have: f64 = pg.iter().sum();
    if have > 0.0 {
        for x in &mut pg {
            *x *= need / have;
        }
    }
    for (g, gen) in net.generators.iter().enumerate() {
        p[gen.bus] += pg[g];
    }
    let mut v_set = vec![1.0; net.n_buses()];
    for g in &net.generators {
        v_set[g.bus] = g.v_set;
    }
    let ctx = DispatchContext { p, q, v_set, partition: net.partition.clone() };
    let init = SystemState::flat_with_setpoints(net);
    let report = solve_newton(&ctx, adm, &init, NewtonOptions::default())?;
    let strategy = OperatingStrategy::from_state(net, &report.state, pg, vec![0.0; net.n_generators()]);
    let out = realize(net, adm, &strategy, &vec![0.0; net.n_wind()], report.state.clone(), 0);
    Ok((report.state, out.pg, out.qg))
}
