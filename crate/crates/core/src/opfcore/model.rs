//! The dispatch problem as a smooth NLP: nominal AC balance, operating limits,
//! reserve availability, the worst-case cost multiplier rows and the linear
//! robust records emitted for the chance constraints.

use super::ipm::{Nlp, SparseRows};
use crate::case_io::{AdmittanceSet, Network};
use crate::chance::{LinearRecord, Quantity, Sense};
use crate::linalg::Matrix;
use faer::Mat;

/// Position of every block in the decision vector
/// `x = [θ, v, p^g, q^g, α, r_up, r_dn, λ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub nb: usize,
    pub ng: usize,
}

impl VarLayout {
    pub fn new(net: &Network) -> Self {
        Self { nb: net.n_buses(), ng: net.n_generators() }
    }
    pub fn theta(&self, i: usize) -> usize {
        i
    }
    pub fn v(&self, i: usize) -> usize {
        self.nb + i
    }
    pub fn pg(&self, g: usize) -> usize {
        2 * self.nb + g
    }
    pub fn qg(&self, g: usize) -> usize {
        2 * self.nb + self.ng + g
    }
    pub fn alpha(&self, g: usize) -> usize {
        2 * self.nb + 2 * self.ng + g
    }
    pub fn r_up(&self, g: usize) -> usize {
        2 * self.nb + 3 * self.ng + g
    }
    pub fn r_dn(&self, g: usize) -> usize {
        2 * self.nb + 4 * self.ng + g
    }
    pub fn lambda(&self) -> usize {
        2 * self.nb + 5 * self.ng
    }
    pub fn dim(&self) -> usize {
        2 * self.nb + 5 * self.ng + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostMode {
    /// `Σ f_g(p_g)` only.
    Generation,
    /// Sample average of the realized cost plus reserve cost.
    SampleAverage { m1: f64, m2: f64 },
    /// Upper bound of the worst-case expectation: `λ ε + average` with `λ`
    /// above the slope of the cost at both support ends.
    Wasserstein { m1: f64, m2: f64, epsilon: f64, lower: f64, upper: f64 },
}

impl CostMode {
    fn moments(&self) -> Option<(f64, f64)> {
        match *self {
            CostMode::Generation => None,
            CostMode::SampleAverage { m1, m2 } | CostMode::Wasserstein { m1, m2, .. } => Some((m1, m2)),
        }
    }
}

/// Accumulates `w * φ(θ_i - θ_j) v_i v_j` second derivatives, where `val`,
/// `d1` are `φ` and `φ'` at the current angle difference (`φ'' = -φ`).
#[allow(clippy::too_many_arguments)]
fn add_pair_hessian(h: &mut Matrix, lay: &VarLayout, i: usize, j: usize, vi: f64, vj: f64, val: f64, d1: f64, w: f64) {
    let (ti, tj, ui, uj) = (lay.theta(i), lay.theta(j), lay.v(i), lay.v(j));
    let d2 = -val;
    let tt = w * vi * vj * d2;
    h[(ti, ti)] += tt;
    h[(tj, tj)] += tt;
    h[(ti, tj)] -= tt;
    h[(tj, ti)] -= tt;
    let mut sym = |a: usize, b: usize, x: f64| {
        h[(a, b)] += x;
        h[(b, a)] += x;
    };
    sym(ti, ui, w * vj * d1);
    sym(ti, uj, w * vi * d1);
    sym(tj, ui, -w * vj * d1);
    sym(tj, uj, -w * vi * d1);
    sym(ui, uj, w * val);
}

#[derive(Debug, Clone)]
pub struct OpfModel<'a> {
    pub net: &'a Network,
    pub adm: &'a AdmittanceSet,
    pub lay: VarLayout,
    pub cost: CostMode,
    /// Whether participation factors, reserves and `λ` are decisions.
    pub stochastic: bool,
    wind_p: Vec<f64>,
    wind_q: Vec<f64>,
    /// Nominal flow limits `(branch, rate)`.
    flow_limits: Vec<(usize, f64)>,
    /// Soft rows: reserve and robust records.
    pub records: Vec<LinearRecord>,
    /// Scaling of the cost-multiplier rows.
    cost_scale: f64,
    /// Phase-one mode: minimize one common violation of the soft rows.
    pub elastic: bool,
    at_bus: Vec<Vec<usize>>,
    /// Lossless angle-only physics when present.
    dc: Option<DcPhysics>,
}

/// Angle-only network data: bus Laplacian rows and branch susceptances `1/(x·tap)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcPhysics {
    pub bus_rows: Vec<Vec<(usize, f64)>>,
    pub branch_b: Vec<f64>,
}

impl DcPhysics {
    pub fn new(net: &Network, adm: &AdmittanceSet) -> Self {
        let n = net.n_buses();
        let mut dense = vec![std::collections::BTreeMap::<usize, f64>::new(); n];
        let mut branch_b = vec![0.0; net.branches.len()];
        for (k, br) in net.branches.iter().enumerate() {
            if !br.in_service {
                continue;
            }
            let b = 1.0 / (br.x * br.tap);
            branch_b[k] = b;
            let (i, j) = adm.branch_ends[k];
            *dense[i].entry(i).or_default() += b;
            *dense[j].entry(j).or_default() += b;
            *dense[i].entry(j).or_default() -= b;
            *dense[j].entry(i).or_default() -= b;
        }
        Self { bus_rows: dense.into_iter().map(|m| m.into_iter().collect()).collect(), branch_b }
    }
}

impl<'a> OpfModel<'a> {
    pub fn new(net: &'a Network, adm: &'a AdmittanceSet, cost: CostMode, stochastic: bool, records: Vec<LinearRecord>) -> Self {
        let (wind_p, wind_q) = net.wind_forecast_injection();
        let flow_limits = net.limited_branches().into_iter().map(|k| (k, net.branches[k].rate.unwrap())).collect();
        let cost_scale = net
            .generators
            .iter()
            .map(|g| g.cost.derivative(g.p_max.abs()).abs())
            .fold(1.0, f64::max);
        Self {
            net,
            adm,
            lay: VarLayout::new(net),
            cost,
            stochastic,
            wind_p,
            wind_q,
            flow_limits,
            records,
            cost_scale,
            elastic: false,
            at_bus: net.generators_at_bus(),
            dc: None,
        }
    }

    /// Replace the AC equations by the lossless angle-only model; voltages
    /// are pinned at 1 and reactive outputs at 0.
    pub fn with_dc(mut self, dc: DcPhysics) -> Self {
        self.dc = Some(dc);
        self
    }

    pub fn is_dc(&self) -> bool {
        self.dc.is_some()
    }

    pub fn elastic(mut self) -> Self {
        self.elastic = true;
        self
    }

    fn slack_index(&self) -> usize {
        self.lay.dim()
    }

    fn flow_value(&self, x: &[f64], k: usize) -> (f64, [(usize, f64); 4]) {
        let c = &self.adm.branches[k];
        let (i, j) = self.adm.branch_ends[k];
        let l = &self.lay;
        if let Some(dc) = &self.dc {
            let b = dc.branch_b[k];
            return (b * (x[l.theta(i)] - x[l.theta(j)]), [(l.theta(i), b), (l.theta(j), -b), (l.v(i), 0.0), (l.v(j), 0.0)]);
        }
        let (vi, vj) = (x[l.v(i)], x[l.v(j)]);
        let (s, co) = (x[l.theta(i)] - x[l.theta(j)]).sin_cos();
        let psi = c.gft * co + c.bft * s;
        let dpsi = -c.gft * s + c.bft * co;
        let f = vi * vi * c.gff + vi * vj * psi;
        let grad = [
            (l.theta(i), vi * vj * dpsi),
            (l.theta(j), -vi * vj * dpsi),
            (l.v(i), 2.0 * vi * c.gff + vj * psi),
            (l.v(j), vi * psi),
        ];
        (f, grad)
    }

    fn flow_hessian(&self, x: &[f64], k: usize, w: f64, h: &mut Matrix) {
        if w == 0.0 || self.dc.is_some() {
            return;
        }
        let c = &self.adm.branches[k];
        let (i, j) = self.adm.branch_ends[k];
        let l = &self.lay;
        let (vi, vj) = (x[l.v(i)], x[l.v(j)]);
        let (s, co) = (x[l.theta(i)] - x[l.theta(j)]).sin_cos();
        let psi = c.gft * co + c.bft * s;
        let dpsi = -c.gft * s + c.bft * co;
        add_pair_hessian(h, l, i, j, vi, vj, psi, dpsi, w);
        h[(l.v(i), l.v(i))] += 2.0 * w * c.gff;
    }

    /// Nominal part of a record: value and gradient.
    fn record_nominal(&self, x: &[f64], q: Quantity) -> (f64, Vec<(usize, f64)>) {
        let l = &self.lay;
        match q {
            Quantity::ReserveDown(g) => (-x[l.r_dn(g)], vec![(l.r_dn(g), -1.0)]),
            Quantity::ReserveUp(g) => (-x[l.r_up(g)], vec![(l.r_up(g), -1.0)]),
            Quantity::Voltage(b) => (x[l.v(b)], vec![(l.v(b), 1.0)]),
            Quantity::Reactive(b) => {
                let units = &self.at_bus[b];
                (units.iter().map(|&g| x[l.qg(g)]).sum(), units.iter().map(|&g| (l.qg(g), 1.0)).collect())
            }
            Quantity::Flow(k) => {
                let (f, grad) = self.flow_value(x, k);
                (f, grad.to_vec())
            }
        }
    }

    pub fn n_hard_rows(&self) -> usize {
        2 * self.flow_limits.len() + if self.stochastic { 2 * self.lay.ng } else { 0 } + self.n_lambda_rows()
    }

    fn n_lambda_rows(&self) -> usize {
        if matches!(self.cost, CostMode::Wasserstein { .. }) && self.stochastic && !self.elastic {
            2
        } else {
            0
        }
    }

    /// The two slope rows `(2c₂ω̄ − c₁ − λ)/s` and `(c₁ − 2c₂ω̲ − λ)/s`.
    fn lambda_rows(&self, x: &[f64]) -> [(f64, Vec<(usize, f64)>); 2] {
        let CostMode::Wasserstein { lower, upper, .. } = self.cost else { unreachable!() };
        let l = &self.lay;
        let s = self.cost_scale;
        let (mut v1, mut v2) = (-x[l.lambda()], -x[l.lambda()]);
        let mut g1 = vec![(l.lambda(), -1.0 / s)];
        let mut g2 = vec![(l.lambda(), -1.0 / s)];
        for (g, gen) in self.net.generators.iter().enumerate() {
            let (c2, c1) = (gen.cost.c2, gen.cost.c1);
            let (a, p) = (x[l.alpha(g)], x[l.pg(g)]);
            v1 += 2.0 * c2 * a * a * upper - 2.0 * c2 * p * a - c1 * a;
            v2 += 2.0 * c2 * p * a + c1 * a - 2.0 * c2 * a * a * lower;
            g1.push((l.alpha(g), (4.0 * c2 * a * upper - 2.0 * c2 * p - c1) / s));
            g1.push((l.pg(g), -2.0 * c2 * a / s));
            g2.push((l.alpha(g), (2.0 * c2 * p + c1 - 4.0 * c2 * a * lower) / s));
            g2.push((l.pg(g), 2.0 * c2 * a / s));
        }
        [(v1 / s, g1), (v2 / s, g2)]
    }

    /// Infinity-norm residual of the nominal power balance at `x`.
    pub fn balance_residual(&self, x: &[f64]) -> f64 {
        let (g, _) = self.equalities(x);
        let rows = if self.dc.is_some() { self.lay.nb } else { 2 * self.lay.nb };
        crate::linalg::norm_inf(&g[..rows])
    }

    /// Nominal value of a monitored quantity at `x`.
    pub fn nominal(&self, x: &[f64], q: Quantity) -> f64 {
        self.record_nominal(x, q).0
    }

    fn dc_equalities(&self, dc: &DcPhysics, x: &[f64]) -> (Vec<f64>, SparseRows) {
        let l = &self.lay;
        let mut g = Vec::with_capacity(l.nb + 1);
        let mut rows: SparseRows = Vec::with_capacity(l.nb + 1);
        for i in 0..l.nb {
            let mut row: Vec<(usize, f64)> = dc.bus_rows[i].iter().map(|&(j, b)| (l.theta(j), b)).collect();
            let mut val: f64 = dc.bus_rows[i].iter().map(|&(j, b)| b * x[l.theta(j)]).sum();
            val += self.net.buses[i].p_load - self.wind_p[i];
            for &u in &self.at_bus[i] {
                val -= x[l.pg(u)];
                row.push((l.pg(u), -1.0));
            }
            g.push(val);
            rows.push(row);
        }
        (g, rows)
    }
}

impl Nlp for OpfModel<'_> {
    fn dim(&self) -> usize {
        self.lay.dim() + usize::from(self.elastic)
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let l = &self.lay;
        let n = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        let r = self.net.partition.reference;
        lo[l.theta(r)] = 0.0;
        hi[l.theta(r)] = 0.0;
        for (i, b) in self.net.buses.iter().enumerate() {
            (lo[l.v(i)], hi[l.v(i)]) = if self.dc.is_some() { (1.0, 1.0) } else { (b.v_min, b.v_max) };
        }
        for (g, gen) in self.net.generators.iter().enumerate() {
            lo[l.pg(g)] = gen.p_min;
            hi[l.pg(g)] = gen.p_max;
            (lo[l.qg(g)], hi[l.qg(g)]) = if self.dc.is_some() { (0.0, 0.0) } else { (gen.q_min, gen.q_max) };
            let live = self.stochastic && !gen.is_degenerate();
            lo[l.alpha(g)] = 0.0;
            hi[l.alpha(g)] = if live { 1.0 } else { 0.0 };
            lo[l.r_up(g)] = 0.0;
            hi[l.r_up(g)] = if live { f64::INFINITY } else { 0.0 };
            lo[l.r_dn(g)] = 0.0;
            hi[l.r_dn(g)] = if live { f64::INFINITY } else { 0.0 };
        }
        lo[l.lambda()] = 0.0;
        hi[l.lambda()] = if self.n_lambda_rows() > 0 { f64::INFINITY } else { 0.0 };
        if self.elastic {
            lo[self.slack_index()] = 0.0;
        }
        (lo, hi)
    }

    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let l = &self.lay;
        let mut grad = vec![0.0; self.dim()];
        if self.elastic {
            grad[self.slack_index()] = 1.0;
            return (x[self.slack_index()], grad);
        }
        let mut f = 0.0;
        for (g, gen) in self.net.generators.iter().enumerate() {
            let c = gen.cost;
            let p = x[l.pg(g)];
            f += c.eval(p);
            grad[l.pg(g)] += c.derivative(p);
            if let Some((m1, m2)) = self.cost.moments() {
                let a = x[l.alpha(g)];
                f += c.c2 * a * a * m2 - (2.0 * c.c2 * p * a + c.c1 * a) * m1;
                grad[l.alpha(g)] += 2.0 * c.c2 * a * m2 - (2.0 * c.c2 * p + c.c1) * m1;
                grad[l.pg(g)] += -2.0 * c.c2 * a * m1;
                f += gen.reserve_up_price * x[l.r_up(g)] + gen.reserve_down_price * x[l.r_dn(g)];
                grad[l.r_up(g)] += gen.reserve_up_price;
                grad[l.r_dn(g)] += gen.reserve_down_price;
            }
        }
        if let CostMode::Wasserstein { epsilon, .. } = self.cost {
            f += x[l.lambda()] * epsilon;
            grad[l.lambda()] += epsilon;
        }
        (f, grad)
    }

    fn equalities(&self, x: &[f64]) -> (Vec<f64>, SparseRows) {
        let l = &self.lay;
        let (mut g, mut rows) = if let Some(dc) = &self.dc {
            self.dc_equalities(dc, x)
        } else {
            self.ac_equalities(x)
        };
        if self.stochastic {
            let live: Vec<usize> = (0..l.ng).filter(|&u| !self.net.generators[u].is_degenerate()).collect();
            g.push(live.iter().map(|&u| x[l.alpha(u)]).sum::<f64>() - 1.0);
            rows.push(live.iter().map(|&u| (l.alpha(u), 1.0)).collect());
        }
        (g, rows)
    }

    fn inequalities(&self, x: &[f64]) -> (Vec<f64>, SparseRows) {
        self.inequality_rows(x)
    }

    fn hessian(&self, x: &[f64], cost_mult: f64, lam: &[f64], mu: &[f64]) -> Matrix {
        self.hessian_matrix(x, cost_mult, lam, mu)
    }
}

impl OpfModel<'_> {
    fn ac_equalities(&self, x: &[f64]) -> (Vec<f64>, SparseRows) {
        let l = &self.lay;
        let nb = l.nb;
        let mut g = vec![0.0; 2 * nb];
        let mut rows: SparseRows = vec![Vec::new(); 2 * nb];
        for i in 0..nb {
            let (vi, ti) = (x[l.v(i)], x[l.theta(i)]);
            let (mut p, mut q) = (0.0, 0.0);
            let (mut gii, mut bii) = (0.0, 0.0);
            for &(j, gg, bb) in &self.adm.rows[i] {
                let vj = x[l.v(j)];
                let (s, c) = (ti - x[l.theta(j)]).sin_cos();
                p += vi * vj * (gg * c + bb * s);
                q += vi * vj * (gg * s - bb * c);
                if j == i {
                    gii = gg;
                    bii = bb;
                } else {
                    rows[i].push((l.theta(j), vi * vj * (gg * s - bb * c)));
                    rows[i].push((l.v(j), vi * (gg * c + bb * s)));
                    rows[nb + i].push((l.theta(j), -vi * vj * (gg * c + bb * s)));
                    rows[nb + i].push((l.v(j), vi * (gg * s - bb * c)));
                }
            }
            rows[i].push((l.theta(i), -q - bii * vi * vi));
            rows[i].push((l.v(i), p / vi + gii * vi));
            rows[nb + i].push((l.theta(i), p - gii * vi * vi));
            rows[nb + i].push((l.v(i), q / vi - bii * vi));
            let bus = &self.net.buses[i];
            g[i] = p + bus.p_load - self.wind_p[i];
            g[nb + i] = q + bus.q_load - self.wind_q[i];
            for &u in &self.at_bus[i] {
                g[i] -= x[l.pg(u)];
                g[nb + i] -= x[l.qg(u)];
                rows[i].push((l.pg(u), -1.0));
                rows[nb + i].push((l.qg(u), -1.0));
            }
        }
        (g, rows)
    }

    fn inequality_rows(&self, x: &[f64]) -> (Vec<f64>, SparseRows) {
        let l = &self.lay;
        let mut h = Vec::new();
        let mut rows: SparseRows = Vec::new();
        for &(k, rate) in &self.flow_limits {
            let (f, grad) = self.flow_value(x, k);
            h.push(f - rate);
            rows.push(grad.to_vec());
            h.push(-f - rate);
            rows.push(grad.iter().map(|&(j, v)| (j, -v)).collect());
        }
        if self.stochastic {
            for (g, gen) in self.net.generators.iter().enumerate() {
                h.push(x[l.pg(g)] + x[l.r_up(g)] - gen.p_max);
                rows.push(vec![(l.pg(g), 1.0), (l.r_up(g), 1.0)]);
                h.push(gen.p_min - x[l.pg(g)] + x[l.r_dn(g)]);
                rows.push(vec![(l.pg(g), -1.0), (l.r_dn(g), 1.0)]);
            }
        }
        if self.n_lambda_rows() > 0 {
            for (v, grad) in self.lambda_rows(x) {
                h.push(v);
                rows.push(grad);
            }
        }
        for rec in &self.records {
            let (nom, ngrad) = self.record_nominal(x, rec.quantity);
            let lin: f64 = rec.alpha_coeff.iter().enumerate().map(|(g, c)| c * x[l.alpha(g)]).sum();
            let sign = match rec.sense {
                Sense::Le => 1.0,
                Sense::Ge => -1.0,
            };
            let mut row: Vec<(usize, f64)> = ngrad.into_iter().map(|(j, v)| (j, sign * v)).collect();
            row.extend(rec.alpha_coeff.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(g, c)| (l.alpha(g), sign * c)));
            let mut val = sign * (nom + lin + rec.offset - rec.bound);
            if self.elastic {
                val -= x[self.slack_index()];
                row.push((self.slack_index(), -1.0));
            }
            h.push(val);
            rows.push(row);
        }
        (h, rows)
    }

    fn hessian_matrix(&self, x: &[f64], cost_mult: f64, lam: &[f64], mu: &[f64]) -> Matrix {
        let l = &self.lay;
        let n = self.dim();
        let mut h = Mat::<f64>::zeros(n, n);
        if !self.elastic {
            for (g, gen) in self.net.generators.iter().enumerate() {
                let c2 = gen.cost.c2;
                h[(l.pg(g), l.pg(g))] += cost_mult * 2.0 * c2;
                if let Some((m1, m2)) = self.cost.moments() {
                    h[(l.alpha(g), l.alpha(g))] += cost_mult * 2.0 * c2 * m2;
                    h[(l.pg(g), l.alpha(g))] += -cost_mult * 2.0 * c2 * m1;
                    h[(l.alpha(g), l.pg(g))] += -cost_mult * 2.0 * c2 * m1;
                }
            }
        }
        // Power balance.
        let nb = if self.dc.is_some() { 0 } else { l.nb };
        for i in 0..nb {
            let (a, b) = (lam[i], lam[nb + i]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let vi = x[l.v(i)];
            for &(j, gg, bb) in &self.adm.rows[i] {
                if j == i {
                    h[(l.v(i), l.v(i))] += 2.0 * (a * gg - b * bb);
                    continue;
                }
                let vj = x[l.v(j)];
                let (s, c) = (x[l.theta(i)] - x[l.theta(j)]).sin_cos();
                let val = a * (gg * c + bb * s) + b * (gg * s - bb * c);
                let d1 = a * (-gg * s + bb * c) + b * (gg * c + bb * s);
                add_pair_hessian(&mut h, l, i, j, vi, vj, val, d1, 1.0);
            }
        }
        let mut r = 0;
        for &(k, _) in &self.flow_limits {
            self.flow_hessian(x, k, mu[r] - mu[r + 1], &mut h);
            r += 2;
        }
        if self.stochastic {
            r += 2 * l.ng;
        }
        if self.n_lambda_rows() > 0 {
            let CostMode::Wasserstein { lower, upper, .. } = self.cost else { unreachable!() };
            let (w1, w2) = (mu[r] / self.cost_scale, mu[r + 1] / self.cost_scale);
            for (g, gen) in self.net.generators.iter().enumerate() {
                let c2 = gen.cost.c2;
                h[(l.alpha(g), l.alpha(g))] += 4.0 * c2 * (w1 * upper - w2 * lower);
                let cross = 2.0 * c2 * (w2 - w1);
                h[(l.alpha(g), l.pg(g))] += cross;
                h[(l.pg(g), l.alpha(g))] += cross;
            }
            r += 2;
        }
        for rec in &self.records {
            if let Quantity::Flow(k) = rec.quantity {
                let sign = match rec.sense {
                    Sense::Le => 1.0,
                    Sense::Ge => -1.0,
                };
                self.flow_hessian(x, k, sign * mu[r], &mut h);
            }
            r += 1;
        }
        h
    }
}
