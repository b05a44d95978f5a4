//! Synthetic forecast-error data and out-of-sample Monte Carlo evaluation of
//! operating strategies under several response models.

use crate::acgrid::{agc_avr_response, injections, response_context, NewtonOptions, ResponseSolver};
use crate::case_io::{build_admittance, AdmittanceSet, Network};
use crate::error::{Error, Result};
use crate::linalg::{mat_vec, KahanSum, Matrix};
use crate::linresponse::{build_response, lpf_flows, lpf_solve, NominalQuantities, Partition, Prediction, ResponseBasis, ResponseMatrices};
use crate::opfcore::{DcPhysics, OperatingStrategy};
use crate::rivals::dc_ptdf;
use crate::wasserstein::ForecastErrors;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::{Read, Write};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Laplace with scale `b`; standard deviation `b√2`.
    Laplace,
    /// Normal with standard deviation equal to the scale.
    Gaussian,
    /// Zero-mean scale mixture: `N(0, (s/2)²)` w.p. 0.8 and `N(0, (2s)²)` w.p. 0.2.
    Mixture,
}

/// Cross-farm dependence through a Gaussian copula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Correlation {
    /// Equal correlation between every pair of farms.
    Uniform(f64),
    /// Full correlation matrix (farm order of the case).
    Matrix(Vec<Vec<f64>>),
}

/// Recipe for synthetic forecast errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngProtocol {
    pub distribution: Distribution,
    /// Per-farm scale as a fraction of farm capacity.
    #[serde(default = "default_scale")]
    pub scale_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub correlation: Option<Correlation>,
}

fn default_scale() -> f64 {
    0.1
}

impl Default for RngProtocol {
    fn default() -> Self {
        Self { distribution: Distribution::Laplace, scale_fraction: default_scale(), seed: 0, correlation: None }
    }
}

impl RngProtocol {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        if !(p.scale_fraction.is_finite() && p.scale_fraction >= 0.0) {
            return Err(Error::Input(format!("scale fraction must be non-negative, got {}", p.scale_fraction)));
        }
        Ok(p)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Lower-triangular factor of the copula correlation for `n` farms.
    fn copula_factor(&self, n: usize) -> Result<Option<Vec<Vec<f64>>>> {
        let corr = match &self.correlation {
            None => return Ok(None),
            Some(Correlation::Uniform(r)) => {
                if !(-1.0 / (n.max(2) - 1) as f64..=1.0).contains(r) {
                    return Err(Error::Input(format!("uniform correlation {r} is not a valid correlation for {n} farms")));
                }
                (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { *r }).collect()).collect::<Vec<Vec<f64>>>()
            }
            Some(Correlation::Matrix(m)) => {
                if m.len() != n || m.iter().any(|r| r.len() != n) {
                    return Err(Error::Input(format!("correlation matrix must be {n} x {n}")));
                }
                m.clone()
            }
        };
        // Cholesky with a tiny jitter so perfectly correlated farms still factor.
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let d = corr[i][i] + 1e-12 - s;
                    if d <= 0.0 {
                        return Err(Error::Input("correlation matrix is not positive semidefinite".into()));
                    }
                    l[i][i] = d.sqrt();
                } else {
                    if (corr[i][j] - corr[j][i]).abs() > 1e-12 {
                        return Err(Error::Input("correlation matrix is not symmetric".into()));
                    }
                    l[i][j] = (corr[i][j] - s) / l[j][j];
                }
            }
        }
        Ok(Some(l))
    }
}

/// Draws `n` error vectors for the case's wind farms. Each error is clamped so
/// the realized output stays within `[0, capacity]`.
pub fn generate_samples(protocol: &RngProtocol, net: &Network, n: usize) -> Result<ForecastErrors> {
    let nw = net.n_wind();
    let factor = protocol.copula_factor(nw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let scales: Vec<f64> = net.wind_farms.iter().map(|w| protocol.scale_fraction * w.capacity).collect();
    let mut data = Vec::with_capacity(n * nw);
    let mut e = vec![0.0; nw];
    for _ in 0..n {
        for x in e.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let z: Vec<f64> = match &factor {
            None => e.clone(),
            Some(l) => (0..nw).map(|i| (0..=i).map(|k| l[i][k] * e[k]).sum()).collect(),
        };
        for (w, farm) in net.wind_farms.iter().enumerate() {
            let s = scales[w];
            let x = match protocol.distribution {
                // Inverse Laplace CDF through the normal tail, accurate far out.
                Distribution::Laplace => {
                    let tail = normal.cdf(-z[w].abs());
                    -z[w].signum() * s * (2.0 * tail).ln()
                }
                Distribution::Gaussian => s * z[w],
                Distribution::Mixture => {
                    let wide = rng.gen::<f64>() < 0.2;
                    s * z[w] * if wide { 2.0 } else { 0.5 }
                }
            };
            data.push(x.clamp(-farm.forecast, farm.capacity - farm.forecast));
        }
    }
    ForecastErrors::new(nw, data)
}

/// Writes samples as CSV in per-unit, one column per farm headed by its bus id.
/// Values use the shortest exact representation, so a round trip keeps the
/// sample hash.
pub fn write_samples_csv<W: Write>(out: W, samples: &ForecastErrors, net: &Network) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(net.wind_farms.iter().map(|f| net.buses[f.bus].id.to_string()))?;
    for k in 0..samples.len() {
        w.write_record(samples.row(k).iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads per-unit samples whose header names each column's bus id. Columns
/// may come in any order; several farms on one bus are matched in case order.
pub fn read_samples_csv<R: Read>(input: R, net: &Network) -> Result<ForecastErrors> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    let nw = net.n_wind();
    if header.len() != nw {
        return Err(Error::Input(format!("sample file has {} columns but the case has {nw} wind farms", header.len())));
    }
    let mut farm_of = Vec::with_capacity(nw);
    let mut used = vec![false; nw];
    for name in header.iter() {
        let id: usize = name.parse().map_err(|_| Error::Parse { line: 1, message: format!("column '{name}' is not a bus id") })?;
        let w = (0..nw)
            .find(|&w| !used[w] && net.buses[net.wind_farms[w].bus].id == id)
            .ok_or_else(|| Error::Input(format!("sample column for bus {id} matches no wind farm of the case")))?;
        used[w] = true;
        farm_of.push(w);
    }
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut row = vec![0.0; nw];
        for (field, &w) in rec.iter().zip(&farm_of) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line: line + 2, message: format!("'{field}' is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: line + 2, message: "non-finite sample".into() });
            }
            row[w] = v;
        }
        data.extend(row);
    }
    ForecastErrors::new(nw, data)
}

/// Response model used to evaluate a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalModel {
    /// Exact AC power flow with AGC and AVR.
    FullAc,
    /// Linear response around the strategy's own AC point.
    Approx,
    /// Constant linear power flow model.
    Lpf,
    /// Lossless angle-only flows; voltages and reactive outputs are not modelled.
    Dc,
}

impl EvalModel {
    pub const ALL: [EvalModel; 4] = [EvalModel::FullAc, EvalModel::Approx, EvalModel::Lpf, EvalModel::Dc];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalModel::FullAc => "full-ac",
            EvalModel::Approx => "approx",
            EvalModel::Lpf => "lpf",
            EvalModel::Dc => "dc",
        }
    }
}

impl FromStr for EvalModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EvalModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Input(format!("unknown evaluation model '{s}' (expected full-ac, approx, lpf or dc)")))
    }
}

/// Quantities of one trial under some model.
#[derive(Debug, Clone, PartialEq)]
pub struct Realized {
    /// Voltages at PQ buses (empty for the angle-only model).
    pub v_l: Vec<f64>,
    /// Reactive output per generator bus (empty for the angle-only model).
    pub q_rs: Vec<f64>,
    /// From-end active flow of every branch.
    pub f: Vec<f64>,
    /// Active output of every unit.
    pub pg: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Reserve,
    Voltage,
    Reactive,
    Flow,
}

/// A two-sided security check `lower <= value <= upper`.
#[derive(Debug, Clone, PartialEq)]
struct Check {
    key: String,
    family: Family,
    index: usize,
    lower: f64,
    upper: f64,
}

fn security_checks(net: &Network, part: &Partition, strategy: &OperatingStrategy, model: EvalModel) -> Vec<Check> {
    let mut out = Vec::new();
    for g in 0..net.n_generators() {
        out.push(Check { key: format!("reserve:{g}"), family: Family::Reserve, index: g, lower: -strategy.r_up[g], upper: strategy.r_dn[g] });
    }
    if model != EvalModel::Dc {
        for (k, &b) in part.pq.iter().enumerate() {
            let bus = &net.buses[b];
            out.push(Check { key: format!("voltage:{b}"), family: Family::Voltage, index: k, lower: bus.v_min, upper: bus.v_max });
        }
        let at_bus = net.generators_at_bus();
        for (k, &b) in part.generator_buses().iter().enumerate() {
            let lower = at_bus[b].iter().map(|&g| net.generators[g].q_min).sum();
            let upper = at_bus[b].iter().map(|&g| net.generators[g].q_max).sum();
            out.push(Check { key: format!("reactive:{b}"), family: Family::Reactive, index: k, lower, upper });
        }
    }
    for k in net.limited_branches() {
        let rate = net.branches[k].rate.unwrap();
        out.push(Check { key: format!("flow:{k}"), family: Family::Flow, index: k, lower: -rate, upper: rate });
    }
    out
}

/// Absolute slack allowed on every security check (per-unit).
const CHECK_TOL: f64 = 1e-7;

/// Precomputed pieces of a response model for one strategy.
pub struct Evaluator<'a> {
    pub net: &'a Network,
    pub strategy: &'a OperatingStrategy,
    pub model: EvalModel,
    adm: AdmittanceSet,
    part: Partition,
    linear: Option<LinearModel>,
    ptdf: Option<Vec<Vec<f64>>>,
    checks: Vec<Check>,
    newton: NewtonOptions,
}

impl<'a> Evaluator<'a> {
    pub fn new(net: &'a Network, strategy: &'a OperatingStrategy, model: EvalModel) -> Result<Self> {
        if strategy.v.len() != net.n_buses() || strategy.pg.len() != net.n_generators() {
            return Err(Error::Input("strategy dimensions do not match the case".into()));
        }
        let adm = build_admittance(net);
        let part = Partition::from_network(net);
        let mut linear = None;
        let mut ptdf = None;
        match model {
            EvalModel::FullAc => {}
            EvalModel::Approx => {
                let rm = build_response(net, &adm, &ResponseBasis::OperatingPoint(strategy.state()))?;
                let nom = NominalQuantities::from_strategy(net, &adm, strategy);
                let p_ref = injections(&strategy.state(), &adm).0[part.reference];
                linear = Some(LinearModel::new(rm, nom, p_ref, &strategy.alpha));
            }
            EvalModel::Lpf => {
                // The linear power flow is affine in the injections, so its
                // solution at any error is the ζ = 0 solution plus the constant
                // response matrices.
                let rm = build_response(net, &adm, &ResponseBasis::Lpf)?;
                let zero = vec![0.0; net.n_wind()];
                let ctx = response_context(net, strategy, &zero);
                let state = lpf_solve(net, &adm, &ctx.p, &ctx.q, &ctx.v_set)?;
                let (p, q) = lpf_injections(&adm, &state);
                let q_bus = bus_generator_q(net, &q, &zero);
                let nom = NominalQuantities {
                    v_l: part.pq.iter().map(|&i| state.v[i]).collect(),
                    q_rs: part.generator_buses().iter().map(|&i| q_bus[i]).collect(),
                    f: lpf_flows(&adm, &state),
                };
                linear = Some(LinearModel::new(rm, nom, p[part.reference], &strategy.alpha));
            }
            EvalModel::Dc => {
                ptdf = Some(dc_ptdf(net, &adm, &DcPhysics::new(net, &adm))?);
            }
        }
        let checks = security_checks(net, &part, strategy, model);
        Ok(Self { net, strategy, model, adm, part, linear, ptdf, checks, newton: NewtonOptions::default() })
    }

    /// Keys of the security checks, in report order.
    pub fn check_keys(&self) -> Vec<String> {
        self.checks.iter().map(|c| c.key.clone()).collect()
    }

    /// Unit outputs under the affine policy with the first reference unit
    /// covering the change `dp_ref` of the reference injection.
    fn affine_outputs(&self, zeta: &[f64], dp_ref: Option<f64>) -> Vec<f64> {
        let net = self.net;
        let s = self.strategy;
        let omega: f64 = zeta.iter().sum();
        let mut pg: Vec<f64> = (0..net.n_generators()).map(|g| s.pg[g] - omega * s.alpha[g]).collect();
        let r = self.part.reference;
        let at_ref: Vec<usize> = (0..net.n_generators()).filter(|&g| net.generators[g].bus == r).collect();
        let wind_ref: f64 = net.wind_farms.iter().zip(zeta).filter(|(w, _)| w.bus == r).map(|(_, z)| z).sum();
        let lead = at_ref[0];
        let others: f64 = at_ref[1..].iter().map(|&g| omega * s.alpha[g]).sum();
        pg[lead] = match dp_ref {
            Some(dp) => s.pg[lead] + dp - wind_ref + others,
            // Lossless balance.
            None => {
                let rest: f64 = (0..net.n_generators()).filter(|&g| g != lead).map(|g| pg[g]).sum();
                net.total_load() - net.wind_farms.iter().zip(zeta).map(|(w, z)| w.forecast + z).sum::<f64>() - rest
            }
        };
        pg
    }

    /// One trial; `solver` is used by the full AC model.
    pub fn realize(&self, zeta: &[f64], solver: Option<&ResponseSolver>) -> Result<Realized> {
        match self.model {
            EvalModel::FullAc => {
                let out = match solver {
                    Some(s) => s.solve(zeta)?,
                    None => agc_avr_response(self.net, &self.adm, self.strategy, zeta, self.newton)?,
                };
                let mut q_bus = vec![0.0; self.net.n_buses()];
                for (g, gen) in self.net.generators.iter().enumerate() {
                    q_bus[gen.bus] += out.qg[g];
                }
                Ok(Realized {
                    v_l: self.part.pq.iter().map(|&i| out.state.v[i]).collect(),
                    q_rs: self.part.generator_buses().iter().map(|&i| q_bus[i]).collect(),
                    f: out.flows,
                    pg: out.pg,
                })
            }
            EvalModel::Approx | EvalModel::Lpf => {
                let pred = self.linear.as_ref().expect("linear model prepared").predict(zeta);
                let pg = self.affine_outputs(zeta, Some(pred.dp_ref + self.lpf_anchor_offset()));
                Ok(Realized { v_l: pred.v_l, q_rs: pred.q_rs, f: pred.f, pg })
            }
            EvalModel::Dc => {
                let ptdf = self.ptdf.as_ref().expect("angle-only model prepared");
                let pg = self.affine_outputs(zeta, None);
                let mut p: Vec<f64> = self.net.buses.iter().map(|b| -b.p_load).collect();
                for (g, gen) in self.net.generators.iter().enumerate() {
                    p[gen.bus] += pg[g];
                }
                for (w, farm) in self.net.wind_farms.iter().enumerate() {
                    p[farm.bus] += farm.forecast + zeta[w];
                }
                let f = ptdf.iter().map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum()).collect();
                Ok(Realized { v_l: Vec::new(), q_rs: Vec::new(), f, pg })
            }
        }
    }

    /// The LPF anchor injection differs from the strategy's own; its lead
    /// unit output shifts by the difference.
    fn lpf_anchor_offset(&self) -> f64 {
        match (&self.linear, self.model) {
            (Some(lin), EvalModel::Lpf) => lin.p_ref - injections(&self.strategy.state(), &self.adm).0[self.part.reference],
            _ => 0.0,
        }
    }

    pub fn cost(&self, pg: &[f64]) -> f64 {
        let mut c = 0.0;
        for (g, gen) in self.net.generators.iter().enumerate() {
            c += gen.cost.eval(pg[g]) + gen.reserve_up_price * self.strategy.r_up[g] + gen.reserve_down_price * self.strategy.r_dn[g];
        }
        c
    }

    fn satisfied(&self, r: &Realized, omega: f64) -> impl Iterator<Item = bool> + '_ {
        let deploy: Vec<f64> = self.strategy.alpha.iter().map(|a| omega * a).collect();
        let values: Vec<f64> = self
            .checks
            .iter()
            .map(|c| match c.family {
                Family::Reserve => deploy[c.index],
                Family::Voltage => r.v_l[c.index],
                Family::Reactive => r.q_rs[c.index],
                Family::Flow => r.f[c.index],
            })
            .collect();
        self.checks.iter().zip(values).map(|(c, v)| v >= c.lower - CHECK_TOL && v <= c.upper + CHECK_TOL)
    }
}

/// Linear response `x = x0 + ω Aα + Bζ` with `Aα` fixed for the strategy.
struct LinearModel {
    rm: ResponseMatrices,
    nominal: NominalQuantities,
    /// `Aα` for each quantity family and the reference injection.
    drift: Prediction,
    /// Reference-bus injection at the anchor point.
    p_ref: f64,
}

impl LinearModel {
    fn new(rm: ResponseMatrices, nominal: NominalQuantities, p_ref: f64, alpha: &[f64]) -> Self {
        let drift = Prediction {
            v_l: mat_vec(&rm.av, alpha),
            q_rs: mat_vec(&rm.aq, alpha),
            f: mat_vec(&rm.af, alpha),
            dp_ref: mat_vec(&rm.ap, alpha)[0],
        };
        Self { rm, nominal, drift, p_ref }
    }

    fn predict(&self, zeta: &[f64]) -> Prediction {
        let omega: f64 = zeta.iter().sum();
        let comb = |nom: &[f64], drift: &[f64], b: &Matrix| -> Vec<f64> {
            let bz = mat_vec(b, zeta);
            nom.iter().zip(drift.iter().zip(&bz)).map(|(x, (d, t))| x + omega * d + t).collect()
        };
        Prediction {
            v_l: comb(&self.nominal.v_l, &self.drift.v_l, &self.rm.bv),
            q_rs: comb(&self.nominal.q_rs, &self.drift.q_rs, &self.rm.bq),
            f: comb(&self.nominal.f, &self.drift.f, &self.rm.bf),
            dp_ref: omega * self.drift.dp_ref + mat_vec(&self.rm.bp, zeta)[0],
        }
    }
}

/// Lossless-style linear injections `p = -(B'θ) + G v`, `q = -(Gθ + B v)`.
fn lpf_injections(adm: &AdmittanceSet, state: &crate::acgrid::SystemState) -> (Vec<f64>, Vec<f64>) {
    let bt = mat_vec(&adm.b_prime, &state.theta);
    let gv = mat_vec(&adm.g, &state.v);
    let gt = mat_vec(&adm.g, &state.theta);
    let bv = mat_vec(&adm.b, &state.v);
    let p = bt.iter().zip(&gv).map(|(a, b)| -a + b).collect();
    let q = gt.iter().zip(&bv).map(|(a, b)| -a - b).collect();
    (p, q)
}

/// Reactive output demanded from the generators at each bus.
fn bus_generator_q(net: &Network, q_inj: &[f64], zeta: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = net.buses.iter().zip(q_inj).map(|(b, q)| q + b.q_load).collect();
    for (w, farm) in net.wind_farms.iter().enumerate() {
        q[farm.bus] -= (farm.forecast + zeta[w]) * net.wind_q_ratio(w);
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStat {
    pub key: String,
    pub satisfied: u64,
    pub trials: u64,
    pub reliability: f64,
}

/// Histogram of the system regulation `-1'ζ` (positive = upward), per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    fn new(lower: f64, upper: f64, bins: usize) -> Self {
        Self { lower, upper, counts: vec![0; bins], underflow: 0, overflow: 0 }
    }

    fn add(&mut self, x: f64) {
        if x < self.lower {
            self.underflow += 1;
        } else if x >= self.upper {
            self.overflow += 1;
        } else {
            let n = self.counts.len();
            let k = (((x - self.lower) / (self.upper - self.lower)) * n as f64) as usize;
            self.counts[k.min(n - 1)] += 1;
        }
    }

    fn merge(&mut self, o: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.underflow += o.underflow;
        self.overflow += o.overflow;
    }

    pub fn to_csv(&self, base_mva: f64) -> String {
        let n = self.counts.len();
        let w = (self.upper - self.lower) / n as f64;
        let mut s = String::from("bin_low_mw,bin_high_mw,count\n");
        s.push_str(&format!("-inf,{},{}\n", self.lower * base_mva, self.underflow));
        for (k, c) in self.counts.iter().enumerate() {
            let lo = self.lower + k as f64 * w;
            s.push_str(&format!("{},{},{}\n", lo * base_mva, (lo + w) * base_mva, c));
        }
        s.push_str(&format!("{},inf,{}\n", self.upper * base_mva, self.overflow));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: EvalModel,
    pub trials: u64,
    /// Trials whose response could not be computed; they count as violations
    /// of every check and are left out of the cost statistics.
    pub failed: u64,
    pub constraints: Vec<ConstraintStat>,
    pub lowest_key: Option<String>,
    pub lowest_reliability: f64,
    pub mean_cost: f64,
    pub cost_std_error: f64,
    pub reserve_up_total: f64,
    pub reserve_down_total: f64,
    pub regulation: Histogram,
}

impl EvaluationReport {
    pub fn reliability(&self, key: &str) -> Option<f64> {
        self.constraints.iter().find(|c| c.key == key).map(|c| c.reliability)
    }

    /// Binomial standard error of the lowest reliability.
    pub fn lowest_std_error(&self) -> f64 {
        let p = self.lowest_reliability;
        (p * (1.0 - p) / self.trials.max(1) as f64).sqrt()
    }

    pub fn constraints_csv(&self) -> String {
        let mut s = String::from("constraint,satisfied,trials,reliability\n");
        for c in &self.constraints {
            s.push_str(&format!("{},{},{},{}\n", c.key, c.satisfied, c.trials, c.reliability));
        }
        s
    }
}

#[derive(Clone)]
struct Partial {
    satisfied: Vec<u64>,
    cost: KahanSum,
    cost_sq: KahanSum,
    ok: u64,
    failed: u64,
    hist: Histogram,
}

impl Partial {
    fn merge(&mut self, o: &Partial) {
        for (a, b) in self.satisfied.iter_mut().zip(&o.satisfied) {
            *a += b;
        }
        self.cost.merge(&o.cost);
        self.cost_sq.merge(&o.cost_sq);
        self.ok += o.ok;
        self.failed += o.failed;
        self.hist.merge(&o.hist);
    }
}

/// Trials per parallel work unit; fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 2048;
const HIST_BINS: usize = 40;

/// Monte Carlo evaluation of a strategy over the rows of `samples`.
pub fn evaluate_strategy(net: &Network, strategy: &OperatingStrategy, samples: &ForecastErrors, model: EvalModel) -> Result<EvaluationReport> {
    if samples.n_farms() != net.n_wind() {
        return Err(Error::Input(format!("samples have {} columns but the case has {} wind farms", samples.n_farms(), net.n_wind())));
    }
    let ev = Evaluator::new(net, strategy, model)?;
    let up: f64 = strategy.r_up.iter().sum();
    let dn: f64 = strategy.r_dn.iter().sum();
    let span = 1.5 * up.max(dn).max(1e-6);
    let empty = Partial {
        satisfied: vec![0; ev.checks.len()],
        cost: KahanSum::default(),
        cost_sq: KahanSum::default(),
        ok: 0,
        failed: 0,
        hist: Histogram::new(-span, span, HIST_BINS),
    };
    let n = samples.len();
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Result<Partial>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut part = empty.clone();
            let solver = match model {
                EvalModel::FullAc => Some(ResponseSolver::new(net, &ev.adm, strategy, ev.newton)?),
                _ => None,
            };
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let zeta = samples.row(k);
                let omega: f64 = zeta.iter().sum();
                part.hist.add(-omega);
                match ev.realize(zeta, solver.as_ref()) {
                    Ok(r) => {
                        for (i, ok) in ev.satisfied(&r, omega).enumerate() {
                            part.satisfied[i] += u64::from(ok);
                        }
                        let cost = ev.cost(&r.pg);
                        part.cost.add(cost);
                        part.cost_sq.add(cost * cost);
                        part.ok += 1;
                    }
                    Err(Error::NoConvergence { .. }) | Err(Error::Singular(_)) => part.failed += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok(part)
        })
        .collect();
    let mut total = empty;
    for p in partials {
        total.merge(&p?);
    }
    let trials = n as u64;
    let constraints: Vec<ConstraintStat> = ev
        .checks
        .iter()
        .zip(&total.satisfied)
        .map(|(c, &s)| ConstraintStat { key: c.key.clone(), satisfied: s, trials, reliability: if trials > 0 { s as f64 / trials as f64 } else { 1.0 } })
        .collect();
    let lowest = constraints.iter().min_by(|a, b| a.reliability.total_cmp(&b.reliability));
    let ok = total.ok.max(1) as f64;
    let mean = total.cost.value() / ok;
    let var = (total.cost_sq.value() / ok - mean * mean).max(0.0) * ok / (ok - 1.0).max(1.0);
    Ok(EvaluationReport {
        model,
        trials,
        failed: total.failed,
        lowest_key: lowest.map(|c| c.key.clone()),
        lowest_reliability: lowest.map_or(1.0, |c| c.reliability),
        constraints,
        mean_cost: if total.ok > 0 { mean } else { f64::NAN },
        cost_std_error: (var / ok).sqrt(),
        reserve_up_total: up,
        reserve_down_total: dn,
        regulation: total.hist,
    })
}

/// One row of the model comparison at a given total forecast error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// Total forecast error, split evenly over the farms (per-unit).
    pub level: f64,
    pub cost_ac: f64,
    pub cost_approx: f64,
    pub cost_lpf: f64,
    pub cost_dc: f64,
    /// Relative cost errors against the full AC model.
    pub cost_err_approx: f64,
    pub cost_err_lpf: f64,
    pub cost_err_dc: f64,
    /// Largest absolute errors over PQ-bus voltages, generator-bus reactive
    /// outputs and branch flows.
    pub v_err_approx: f64,
    pub v_err_lpf: f64,
    pub q_err_approx: f64,
    pub q_err_lpf: f64,
    pub f_err_approx: f64,
    pub f_err_lpf: f64,
    pub f_err_dc: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares the approximate, LPF and angle-only models with the exact AC
/// response at each total error level.
pub fn model_accuracy_report(net: &Network, strategy: &OperatingStrategy, levels: &[f64]) -> Result<Vec<AccuracyRow>> {
    let evs: Vec<Evaluator> = EvalModel::ALL.iter().map(|&m| Evaluator::new(net, strategy, m)).collect::<Result<_>>()?;
    let nw = net.n_wind().max(1);
    levels
        .iter()
        .map(|&level| {
            let zeta = vec![level / nw as f64; net.n_wind()];
            let r: Vec<Realized> = evs.iter().map(|e| e.realize(&zeta, None)).collect::<Result<_>>()?;
            let costs: Vec<f64> = evs.iter().zip(&r).map(|(e, r)| e.cost(&r.pg)).collect();
            let rel = |c: f64| (c - costs[0]).abs() / costs[0].abs();
            Ok(AccuracyRow {
                level,
                cost_ac: costs[0],
                cost_approx: costs[1],
                cost_lpf: costs[2],
                cost_dc: costs[3],
                cost_err_approx: rel(costs[1]),
                cost_err_lpf: rel(costs[2]),
                cost_err_dc: rel(costs[3]),
                v_err_approx: max_abs_diff(&r[1].v_l, &r[0].v_l),
                v_err_lpf: max_abs_diff(&r[2].v_l, &r[0].v_l),
                q_err_approx: max_abs_diff(&r[1].q_rs, &r[0].q_rs),
                q_err_lpf: max_abs_diff(&r[2].q_rs, &r[0].q_rs),
                f_err_approx: max_abs_diff(&r[1].f, &r[0].f),
                f_err_lpf: max_abs_diff(&r[2].f, &r[0].f),
                f_err_dc: max_abs_diff(&r[3].f, &r[0].f),
            })
        })
        .collect()
}

pub fn accuracy_csv(rows: &[AccuracyRow], base_mva: f64) -> String {
    let mut s = String::from(
        "level_mw,cost_ac,cost_approx,cost_lpf,cost_dc,cost_err_approx,cost_err_lpf,cost_err_dc,\
v_err_approx,v_err_lpf,q_err_approx,q_err_lpf,f_err_approx,f_err_lpf,f_err_dc\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.level * base_mva,
            r.cost_ac,
            r.cost_approx,
            r.cost_lpf,
            r.cost_dc,
            r.cost_err_approx,
            r.cost_err_lpf,
            r.cost_err_dc,
            r.v_err_approx,
            r.v_err_lpf,
            r.q_err_approx,
            r.q_err_lpf,
            r.f_err_approx,
            r.f_err_lpf,
            r.f_err_dc
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_matpower;
    use crate::opfcore::{deterministic_opf, IpmOptions};
    use proptest::prelude::*;

    fn ieee14_wind() -> Network {
        parse_matpower(include_str!("../data/ieee14_wind.m")).unwrap()
    }

    /// Farms far from both output limits so clamping never binds.
    fn roomy(net: &Network) -> Network {
        let mut n = net.clone();
        for w in &mut n.wind_farms {
            w.capacity = 10.0;
            w.forecast = 5.0;
        }
        n
    }

    fn strategy(net: &Network) -> OperatingStrategy {
        let adm = build_admittance(net);
        let mut s = deterministic_opf(net, &adm, IpmOptions { cost_mult: 1e-4, ..IpmOptions::default() }).unwrap().strategy;
        // Give the strategy some reserve so the reserve checks are non-trivial.
        for g in 0..net.n_generators() {
            s.r_up[g] = 0.05 * s.alpha[g];
            s.r_dn[g] = 0.05 * s.alpha[g];
        }
        s
    }

    fn column_std(s: &ForecastErrors, w: usize) -> f64 {
        let n = s.len() as f64;
        let mean = (0..s.len()).map(|k| s.row(k)[w]).sum::<f64>() / n;
        ((0..s.len()).map(|k| (s.row(k)[w] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn laplace_sample_std_matches_scale() {
        let net = roomy(&ieee14_wind());
        let p = RngProtocol { distribution: Distribution::Laplace, scale_fraction: 0.01, seed: 7, correlation: None };
        let s = generate_samples(&p, &net, 100_000).unwrap();
        let b = 0.01 * 10.0;
        for w in 0..net.n_wind() {
            let sd = column_std(&s, w);
            assert!((sd / (b * 2f64.sqrt()) - 1.0).abs() < 0.03, "farm {w}: {sd}");
        }
    }

    #[test]
    fn mixture_and_gaussian_have_unit_scale_std() {
        let net = roomy(&ieee14_wind());
        for d in [Distribution::Gaussian, Distribution::Mixture] {
            let p = RngProtocol { distribution: d, scale_fraction: 0.01, seed: 3, correlation: None };
            let s = generate_samples(&p, &net, 100_000).unwrap();
            let sd = column_std(&s, 0);
            assert!((sd / 0.1 - 1.0).abs() < 0.03, "{d:?}: {sd}");
        }
    }

    #[test]
    fn uniform_correlation_is_reproduced() {
        let net = roomy(&ieee14_wind());
        let p = RngProtocol { distribution: Distribution::Gaussian, scale_fraction: 0.01, seed: 11, correlation: Some(Correlation::Uniform(0.6)) };
        let s = generate_samples(&p, &net, 50_000).unwrap();
        let c = s.covariance();
        let r = c[0][1] / (c[0][0] * c[1][1]).sqrt();
        assert!((r - 0.6).abs() < 0.02, "{r}");
    }

    #[test]
    fn invalid_correlation_is_rejected() {
        let net = ieee14_wind();
        let bad = RngProtocol { correlation: Some(Correlation::Matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]])), ..RngProtocol::default() };
        assert!(matches!(generate_samples(&bad, &net, 10), Err(Error::Input(_))));
        let not_psd = RngProtocol { correlation: Some(Correlation::Uniform(-0.9)), ..RngProtocol::default() };
        assert!(generate_samples(&not_psd, &net, 10).is_err());
    }

    #[test]
    fn protocol_json_defaults() {
        let p = RngProtocol::from_json(r#"{"distribution":"mixture","seed":5,"correlation":0.3}"#).unwrap();
        assert_eq!(p.scale_fraction, 0.1);
        assert_eq!(p.correlation, Some(Correlation::Uniform(0.3)));
        assert!(RngProtocol::from_json(r#"{"distribution":"cauchy"}"#).is_err());
        assert!(RngProtocol::from_json(r#"{"distribution":"laplace","scale_fraction":-1}"#).is_err());
    }

    #[test]
    fn fixed_seed_gives_identical_csv() {
        let net = ieee14_wind();
        let p = RngProtocol { seed: 42, ..RngProtocol::default() };
        let write = |p: &RngProtocol| {
            let mut buf = Vec::new();
            write_samples_csv(&mut buf, &generate_samples(p, &net, 500).unwrap(), &net).unwrap();
            buf
        };
        assert_eq!(write(&p), write(&p));
        assert_ne!(write(&p), write(&p.with_seed(43)));
    }

    #[test]
    fn csv_round_trip() {
        let net = ieee14_wind();
        let s = generate_samples(&RngProtocol::default(), &net, 200).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &s, &net).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("11,12,13,14\n"));
        let back = read_samples_csv(buf.as_slice(), &net).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash_hex(), s.hash_hex());
        // Columns are matched by bus id, not position.
        let swapped = read_samples_csv("12,11,13,14\n0.1,0.2,0.3,0.4\n".as_bytes(), &net).unwrap();
        assert_eq!(swapped.row(0), &[0.2, 0.1, 0.3, 0.4]);
        assert!(read_samples_csv("11,12\n1,2\n".as_bytes(), &net).is_err());
        assert!(matches!(read_samples_csv("11,12,13,99\n1,2,3,4\n".as_bytes(), &net), Err(Error::Input(_))));
        assert!(matches!(read_samples_csv("a,b,c,d\n1,2,3,4\n".as_bytes(), &net), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_samples_csv("11,12,13,14\n1,2,x,4\n".as_bytes(), &net), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn samples_stay_within_farm_output_range(seed in any::<u64>(), frac in 0.0f64..1.0, which in 0usize..3) {
            let net = ieee14_wind();
            let distribution = [Distribution::Laplace, Distribution::Gaussian, Distribution::Mixture][which];
            let s = generate_samples(&RngProtocol { distribution, scale_fraction: frac, seed, correlation: None }, &net, 200).unwrap();
            for k in 0..s.len() {
                for (w, farm) in net.wind_farms.iter().enumerate() {
                    let out = farm.forecast + s.row(k)[w];
                    prop_assert!(out >= -1e-15 && out <= farm.capacity + 1e-15);
                }
            }
        }
    }

    #[test]
    fn eval_model_names() {
        for m in EvalModel::ALL {
            assert_eq!(m.as_str().parse::<EvalModel>().unwrap(), m);
        }
        assert!("exact".parse::<EvalModel>().is_err());
    }

    #[test]
    fn approx_matches_full_ac_without_errors() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let zero = vec![0.0; net.n_wind()];
        let ac = Evaluator::new(&net, &s, EvalModel::FullAc).unwrap().realize(&zero, None).unwrap();
        let ap = Evaluator::new(&net, &s, EvalModel::Approx).unwrap().realize(&zero, None).unwrap();
        assert!(max_abs_diff(&ac.v_l, &ap.v_l) < 1e-7);
        assert!(max_abs_diff(&ac.q_rs, &ap.q_rs) < 1e-6);
        assert!(max_abs_diff(&ac.f, &ap.f) < 1e-7);
        assert!(max_abs_diff(&ac.pg, &ap.pg) < 1e-6);
    }

    #[test]
    fn fixed_drift_prediction_matches_response_formula() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let adm = build_admittance(&net);
        let rm = build_response(&net, &adm, &ResponseBasis::OperatingPoint(s.state())).unwrap();
        let nom = NominalQuantities::from_strategy(&net, &adm, &s);
        let lin = LinearModel::new(rm.clone(), nom.clone(), 0.0, &s.alpha);
        let zeta = [0.02, -0.05, 0.01, 0.03];
        let a = lin.predict(&zeta);
        let b = crate::linresponse::predict_response(&rm, &nom, &s.alpha, &zeta);
        assert!(max_abs_diff(&a.v_l, &b.v_l) < 1e-14 && max_abs_diff(&a.q_rs, &b.q_rs) < 1e-13);
        assert!(max_abs_diff(&a.f, &b.f) < 1e-13 && (a.dp_ref - b.dp_ref).abs() < 1e-13);
    }

    #[test]
    fn angle_only_model_balances_without_losses() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let ev = Evaluator::new(&net, &s, EvalModel::Dc).unwrap();
        let zeta = [0.03, -0.01, 0.02, 0.0];
        let r = ev.realize(&zeta, None).unwrap();
        let wind: f64 = net.wind_farms.iter().zip(&zeta).map(|(w, z)| w.forecast + z).sum();
        assert!((r.pg.iter().sum::<f64>() + wind - net.total_load()).abs() < 1e-12);
        assert!(r.v_l.is_empty());
        // Non-lead units follow the affine policy.
        let omega: f64 = zeta.iter().sum();
        assert!((r.pg[1] - (s.pg[1] - omega * s.alpha[1])).abs() < 1e-12);
    }

    #[test]
    fn accuracy_report_shape_and_zero_level() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let rows = model_accuracy_report(&net, &s, &[-0.1, 0.0, 0.1]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].cost_err_approx < 1e-9);
        assert!(rows[1].v_err_approx < 1e-7);
        // Away from the anchor the exact-Jacobian model beats the LPF on voltages.
        assert!(rows[2].v_err_approx < rows[2].v_err_lpf);
        let csv = accuracy_csv(&rows, net.base_mva);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("0,"));
    }

    #[test]
    fn evaluation_counts_and_costs() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let samples = generate_samples(&RngProtocol { seed: 9, ..RngProtocol::default() }, &net, 3000).unwrap();
        let rep = evaluate_strategy(&net, &s, &samples, EvalModel::Approx).unwrap();
        assert_eq!(rep.trials, 3000);
        assert_eq!(rep.failed, 0);
        let h = &rep.regulation;
        assert_eq!(h.counts.iter().sum::<u64>() + h.underflow + h.overflow, 3000);
        let lowest = rep.constraints.iter().map(|c| c.reliability).fold(1.0, f64::min);
        assert_eq!(rep.lowest_reliability, lowest);
        assert!(rep.constraints.iter().all(|c| c.satisfied <= c.trials));

        // Independent recomputation of the mean cost and one reliability.
        let ev = Evaluator::new(&net, &s, EvalModel::Approx).unwrap();
        let mut total = 0.0;
        let mut ok = 0u64;
        for k in 0..samples.len() {
            let z = samples.row(k);
            let r = ev.realize(z, None).unwrap();
            total += ev.cost(&r.pg);
            let omega: f64 = z.iter().sum();
            ok += u64::from((omega * s.alpha[0]).abs() <= 0.05 * s.alpha[0] + 1e-7);
        }
        assert!((rep.mean_cost - total / 3000.0).abs() < 1e-9 * total.abs());
        assert_eq!(rep.constraints[0].satisfied, ok);
        assert!(rep.constraints_csv().starts_with("constraint,satisfied,trials,reliability\nreserve:0,"));
    }

    #[test]
    fn evaluation_does_not_depend_on_thread_count() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let samples = generate_samples(&RngProtocol { seed: 1, ..RngProtocol::default() }, &net, 5000).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| evaluate_strategy(&net, &s, &samples, EvalModel::FullAc).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn full_ac_reliability_close_to_approx() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let samples = generate_samples(&RngProtocol { seed: 2, scale_fraction: 0.05, ..RngProtocol::default() }, &net, 2000).unwrap();
        let ac = evaluate_strategy(&net, &s, &samples, EvalModel::FullAc).unwrap();
        let ap = evaluate_strategy(&net, &s, &samples, EvalModel::Approx).unwrap();
        assert!((ac.lowest_reliability - ap.lowest_reliability).abs() < 0.02);
        assert!((ac.mean_cost / ap.mean_cost - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mismatched_samples_are_rejected() {
        let net = ieee14_wind();
        let s = strategy(&net);
        let bad = ForecastErrors::zeros(2, 10);
        assert!(matches!(evaluate_strategy(&net, &s, &bad, EvalModel::Approx), Err(Error::Input(_))));
    }
}
