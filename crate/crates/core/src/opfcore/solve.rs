//! Deterministic OPF and the successive constraint-enforcement loop shared by
//! every chance-constrained formulation.
//!
//! The loop solves a relaxation holding only the reserve records and the
//! records of quantities found violated so far, then scans the remaining
//! monitored quantities at the new point. Quantities that cannot bind even
//! over the whole support box are screened out without sizing their sets.

use super::ipm::{solve_ipm, IpmOptions, IpmReport, Nlp};
use super::model::{CostMode, DcPhysics, OpfModel, VarLayout};
use super::strategy::OperatingStrategy;
use crate::acgrid::{case_power_flow, SystemState};
use crate::case_io::{build_admittance, network_to_json, AdmittanceSet, Network};
use crate::chance::{build_uncertainty_set, emit_reserve_constraints, emit_robust_constraints, min_sigma, LinearRecord, Quantity, Sense, UncertaintySet};
use crate::costdro::{cost_coeffs, sample_average, worst_case_cost_exact, worst_case_cost_ub, OmegaSamples};
use crate::error::{Error, Result};
use crate::linalg::{dot, row};
use crate::linresponse::{build_response, ResponseBasis, ResponseMatrices};
use crate::rivals;
use crate::wasserstein::{AmbiguitySpec, ForecastErrors, SampleSet};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// Chance-constraint formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Wasserstein ball around the samples.
    Wdro,
    /// Robust over the whole support box.
    Ro,
    /// Moment-based ambiguity (one-sided Chebyshev margin).
    Mdro,
    /// Gaussian chance constraints.
    Gsp,
    /// Wasserstein formulation on the lossless angle-only network.
    Dc,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Wdro, Method::Ro, Method::Mdro, Method::Gsp, Method::Dc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wdro => "wdro",
            Method::Ro => "ro",
            Method::Mdro => "mdro",
            Method::Gsp => "gsp",
            Method::Dc => "dc",
        }
    }

    fn uses_cuts(&self) -> bool {
        matches!(self, Method::Mdro | Method::Gsp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown method '{s}' (expected wdro, ro, mdro, gsp or dc)")))
    }
}

/// Where the response sensitivities are linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Exact AC Jacobian at the deterministic optimum.
    OperatingPoint,
    /// Constant linear power flow matrices.
    Lpf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub method: Method,
    /// Violation levels for reserves, voltages, reactive outputs and flows.
    pub rho: [f64; 4],
    pub beta: f64,
    pub sigma_max: f64,
    pub basis: BasisKind,
    /// Enforcement rounds; `None` uses 20 (50 for cutting-plane methods).
    pub max_rounds: Option<usize>,
    /// Record violation tolerance (per-unit).
    pub tolerance: f64,
    pub ipm: IpmOptions,
    pub cache_dir: Option<PathBuf>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::Wdro,
            rho: [0.05; 4],
            beta: 0.9,
            sigma_max: 10.0,
            basis: BasisKind::OperatingPoint,
            max_rounds: None,
            tolerance: 1e-6,
            ipm: IpmOptions { cost_mult: 1e-4, ..IpmOptions::default() },
            cache_dir: None,
        }
    }
}

/// The hashed part of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub method: Method,
    pub rho: [f64; 4],
    pub beta: f64,
    pub sigma_max: f64,
    pub basis: BasisKind,
    pub max_rounds: usize,
    pub tolerance: f64,
}

impl SolveConfig {
    pub fn rounds(&self) -> usize {
        self.max_rounds.unwrap_or(if self.method.uses_cuts() { 50 } else { 20 })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::Input(format!("violation levels must lie in (0, 1), got {r}")));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Input(format!("confidence level must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.sigma_max.is_finite() && self.sigma_max > 0.0) {
            return Err(Error::Input(format!("support half-width must be positive, got {}", self.sigma_max)));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Input("tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn record(&self) -> ConfigRecord {
        ConfigRecord {
            method: self.method,
            rho: self.rho,
            beta: self.beta,
            sigma_max: self.sigma_max,
            basis: self.basis,
            max_rounds: self.rounds(),
            tolerance: self.tolerance,
        }
    }

    pub fn hash_hex(&self) -> String {
        sha256_hex(serde_json::to_string(&self.record()).expect("config serializes").as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a network (canonical JSON form).
pub fn case_hash(net: &Network) -> String {
    sha256_hex(network_to_json(net).expect("network serializes").as_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_s: f64,
    pub enforce_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    /// False when the round limit was reached with violations left.
    pub converged: bool,
    /// Objective of the final relaxation.
    pub objective: f64,
    /// Worst-case expected cost with the multiplier at the Lipschitz constant.
    pub worst_case_bound: f64,
    pub worst_case_exact: f64,
    pub sample_average: f64,
    /// `Σ f_g(p_g)` at the nominal setpoints.
    pub generation_cost: f64,
    pub reserve_cost: f64,
    /// Radius and support of the total-error ball.
    pub epsilon: f64,
    pub omega_support: [f64; 2],
    pub rounds: usize,
    pub active: Vec<String>,
    pub n_records: usize,
    pub ipm_iterations: usize,
    pub kkt_residual: f64,
    pub balance_residual: f64,
    pub sizing_computed: usize,
    pub sizing_cached: usize,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub strategy: OperatingStrategy,
    pub report: SolveReport,
    pub records: Vec<LinearRecord>,
}

/// On-disk strategy: per-unit values plus the hashes that tie it to its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFile {
    pub format: u32,
    pub case_name: String,
    pub case_hash: String,
    pub sample_hash: String,
    pub config_hash: String,
    pub base_mva: f64,
    pub config: ConfigRecord,
    pub strategy: OperatingStrategy,
    pub report: SolveReport,
}

impl StrategyFile {
    pub fn new(net: &Network, samples: &ForecastErrors, config: &SolveConfig, solution: &Solution) -> Self {
        Self {
            format: 1,
            case_name: net.name.clone(),
            case_hash: case_hash(net),
            sample_hash: samples.hash_hex(),
            config_hash: config.hash_hex(),
            base_mva: net.base_mva,
            config: config.record(),
            strategy: solution.strategy.clone(),
            report: solution.report.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The strategy, after checking it was computed for this network.
    pub fn strategy_for(&self, net: &Network) -> Result<OperatingStrategy> {
        let h = case_hash(net);
        if h != self.case_hash {
            return Err(Error::Input(format!(
                "strategy was computed for case '{}' ({}...), not for the given case ({}...)",
                self.case_name,
                &self.case_hash[..12.min(self.case_hash.len())],
                &h[..12]
            )));
        }
        if sha256_hex(serde_json::to_string(&self.config)?.as_bytes()) != self.config_hash {
            return Err(Error::Input("strategy file config hash does not match its recorded configuration".into()));
        }
        let s = &self.strategy;
        if s.v.len() != net.n_buses() || s.pg.len() != net.n_generators() {
            return Err(Error::Input("strategy dimensions do not match the case".into()));
        }
        Ok(s.clone())
    }
}

pub(crate) fn strategy_from_x(lay: &VarLayout, x: &[f64]) -> OperatingStrategy {
    let slice = |a: usize, n: usize| x[a..a + n].to_vec();
    OperatingStrategy {
        theta: slice(lay.theta(0), lay.nb),
        v: slice(lay.v(0), lay.nb),
        pg: slice(lay.pg(0), lay.ng),
        qg: slice(lay.qg(0), lay.ng),
        alpha: slice(lay.alpha(0), lay.ng),
        r_up: slice(lay.r_up(0), lay.ng),
        r_dn: slice(lay.r_dn(0), lay.ng),
        lambda: x[lay.lambda()],
    }
}

pub(crate) fn x_from_strategy(lay: &VarLayout, s: &OperatingStrategy) -> Vec<f64> {
    let mut x = Vec::with_capacity(lay.dim());
    for part in [&s.theta, &s.v, &s.pg, &s.qg, &s.alpha, &s.r_up, &s.r_dn] {
        x.extend_from_slice(part);
    }
    x.push(s.lambda);
    x
}

#[derive(Debug, Clone)]
pub struct DeterministicSolution {
    pub strategy: OperatingStrategy,
    /// `Σ f_g(p_g)` in the case's cost units.
    pub objective: f64,
    pub report: IpmReport,
}

/// Cost-minimal dispatch at the wind forecast, without uncertainty.
pub fn deterministic_opf(net: &Network, adm: &AdmittanceSet, ipm: IpmOptions) -> Result<DeterministicSolution> {
    let start = match case_power_flow(net, adm) {
        Ok((state, pg, qg)) => OperatingStrategy::from_state(net, &state, pg, qg),
        Err(e) => {
            debug!("case power flow failed ({e}); starting the OPF from a flat point");
            let pg = net.generators.iter().map(|g| g.p_init).collect();
            OperatingStrategy::from_state(net, &SystemState::flat_with_setpoints(net), pg, vec![0.0; net.n_generators()])
        }
    };
    let model = OpfModel::new(net, adm, CostMode::Generation, false, Vec::new());
    let x0 = x_from_strategy(&model.lay, &start);
    let report = solve_or_restart(&model, &x0, ipm)?;
    Ok(DeterministicSolution { strategy: strategy_from_x(&model.lay, &report.x), objective: report.objective, report })
}

/// Distinguishes an empty feasible set from a numerical failure after the
/// interior-point method stops without converging. Phase one starts from the
/// point the failed solve started from, then from where it stopped. A feasible
/// phase-one point is returned for a restart.
fn diagnose_failure(model: &OpfModel, report: &IpmReport, start: &[f64], ipm: IpmOptions) -> std::result::Result<Vec<f64>, Error> {
    let msg = format!(
        "interior point stopped after {} iterations (feasibility {:.2e}, gradient {:.2e})",
        report.iterations, report.last.feascond, report.last.gradcond
    );
    if model.records.is_empty() {
        return Err(Error::Solver(msg));
    }
    let elastic = model.clone().elastic();
    let mut last_err = None;
    for from in [start, &report.x] {
        let mut x = from[..model.lay.dim()].to_vec();
        // Enough slack to satisfy every relaxed row.
        x.push(0.0);
        let (h, _) = Nlp::inequalities(&elastic, &x);
        *x.last_mut().unwrap() = h.iter().copied().fold(0.0, f64::max) + 1.0;
        match solve_ipm(&elastic, &x, None, IpmOptions { cost_mult: 1.0, ..ipm }) {
            Ok(er) if er.converged => {
                let slack = er.x[model.lay.dim()];
                return if slack > 1e-6 {
                    Err(Error::Infeasible(format!("the robust constraints cannot hold together; the smallest common violation is {slack:.3e}")))
                } else {
                    Ok(er.x[..model.lay.dim()].to_vec())
                };
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    Err(match last_err {
        Some(e) => Error::Solver(format!("{msg}; phase one: {e}")),
        None => Error::Solver(format!("{msg}; phase-one problem did not converge either")),
    })
}

/// Solves `model` from `x0`, restarting once from a phase-one point when the
/// first attempt stalls.
fn solve_or_restart(model: &OpfModel, x0: &[f64], ipm: IpmOptions) -> Result<IpmReport> {
    let report = solve_ipm(model, x0, None, ipm)?;
    if report.converged {
        return Ok(report);
    }
    let x1 = diagnose_failure(model, &report, x0, ipm)?;
    let retry = solve_ipm(model, &x1, None, ipm)?;
    if retry.converged {
        return Ok(retry);
    }
    Err(Error::Solver(format!(
        "interior point stopped after {} iterations (feasibility {:.2e}, gradient {:.2e}) although the constraints are feasible",
        retry.iterations, retry.last.feascond, retry.last.gradcond
    )))
}

/// A chance-constrained quantity with random part `ω (a'α) + b'ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoredQuantity {
    pub quantity: Quantity,
    pub a_row: Vec<f64>,
    pub b_row: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl MonitoredQuantity {
    fn scalar(&self) -> bool {
        self.b_row.iter().all(|b| b.abs() < 1e-12)
    }
}

/// Voltages at PQ buses, reactive outputs at generator buses and limited flows.
pub fn ac_quantities(net: &Network, rm: &ResponseMatrices) -> Vec<MonitoredQuantity> {
    let mut out = Vec::new();
    for (k, &b) in rm.partition.pq.iter().enumerate() {
        let bus = &net.buses[b];
        out.push(MonitoredQuantity { quantity: Quantity::Voltage(b), a_row: row(&rm.av, k), b_row: row(&rm.bv, k), lower: bus.v_min, upper: bus.v_max });
    }
    let at_bus = net.generators_at_bus();
    for (k, &b) in rm.partition.generator_buses().iter().enumerate() {
        let lower = at_bus[b].iter().map(|&g| net.generators[g].q_min).sum();
        let upper = at_bus[b].iter().map(|&g| net.generators[g].q_max).sum();
        out.push(MonitoredQuantity { quantity: Quantity::Reactive(b), a_row: row(&rm.aq, k), b_row: row(&rm.bq, k), lower, upper });
    }
    for k in net.limited_branches() {
        let rate = net.branches[k].rate.unwrap();
        out.push(MonitoredQuantity { quantity: Quantity::Flow(k), a_row: row(&rm.af, k), b_row: row(&rm.bf, k), lower: -rate, upper: rate });
    }
    out
}

/// One sized hypercube, as stored in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    /// `None` when even the largest admissible box violates the level.
    pub sigma: Option<f64>,
    pub vertices: Vec<[f64; 2]>,
    pub epsilon: f64,
    pub rho: f64,
    pub sample_hash: String,
    pub lambda: f64,
    pub level: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: BTreeMap<String, CacheEntry>,
}

/// Sizing results keyed by quantity, persisted as one JSON file per
/// (case, samples, levels, support, model) combination.
#[derive(Debug, Default)]
pub(crate) struct SizingCache {
    path: Option<PathBuf>,
    sample_hash: String,
    file: CacheFile,
    dirty: bool,
    pub computed: usize,
    pub cached: usize,
}

impl SizingCache {
    fn open(dir: Option<&Path>, key: &str, sample_hash: &str) -> Self {
        let path = dir.map(|d| d.join(format!("{key}.json")));
        let mut file = CacheFile::default();
        if let Some(p) = &path {
            if let Ok(text) = std::fs::read_to_string(p) {
                match serde_json::from_str::<CacheFile>(&text) {
                    Ok(f) => file = f,
                    Err(e) => warn!("ignoring unreadable sizing cache {}: {e}", p.display()),
                }
            }
        }
        file.entries.retain(|_, e| e.sample_hash == sample_hash);
        if !file.entries.is_empty() {
            info!("cache hit: skipping hypercube sizing for {} stored quantities", file.entries.len());
        }
        Self { path, sample_hash: sample_hash.to_string(), file, dirty: false, computed: 0, cached: 0 }
    }

    fn get_or_insert(&mut self, key: &str, compute: impl FnOnce() -> Result<CacheEntry>) -> Result<CacheEntry> {
        if let Some(e) = self.file.entries.get(key) {
            self.cached += 1;
            return Ok(e.clone());
        }
        let e = compute()?;
        self.computed += 1;
        self.file.entries.insert(key.to_string(), e.clone());
        self.dirty = true;
        Ok(e)
    }

    fn save(&mut self) {
        let (Some(p), true) = (&self.path, self.dirty) else { return };
        let write = || -> Result<()> {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            let tmp = p.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_string(&self.file)?)?;
            std::fs::rename(&tmp, p)?;
            Ok(())
        };
        match write() {
            Ok(()) => self.dirty = false,
            Err(e) => warn!("could not write sizing cache {}: {e}", p.display()),
        }
        debug!("sizing cache {} holds {} entries ({})", p.display(), self.file.entries.len(), self.sample_hash);
    }
}

/// Everything that depends on the samples and the configuration but not on
/// the decision.
pub(crate) struct ChanceContext<'a> {
    pub config: &'a SolveConfig,
    pub samples: &'a ForecastErrors,
    pub quantities: Vec<MonitoredQuantity>,
    pub omega: OmegaSamples,
    omega_set: SampleSet,
    zeta_mean: Vec<f64>,
    zeta_cov: Vec<Vec<f64>>,
    pub cache: SizingCache,
}

impl<'a> ChanceContext<'a> {
    pub fn new(
        net: &Network,
        samples: &'a ForecastErrors,
        config: &'a SolveConfig,
        quantities: Vec<MonitoredQuantity>,
        model_tag: &str,
    ) -> Result<Self> {
        let sample_hash = samples.hash_hex();
        let key = sha256_hex(
            format!(
                "{}|{}|{:?}|{}|{}|{}",
                case_hash(net),
                sample_hash,
                config.rho,
                config.beta,
                config.sigma_max,
                model_tag
            )
            .as_bytes(),
        );
        let cache = SizingCache::open(config.cache_dir.as_deref(), &key, &sample_hash);
        let totals = samples.totals();
        let omega_set = SampleSet::new(vec![totals.clone()])?;
        let mut ctx = Self {
            config,
            samples,
            quantities,
            omega: OmegaSamples::new(Vec::new(), 0.0, 0.0, 0.0),
            omega_set,
            zeta_mean: samples.mean(),
            zeta_cov: samples.covariance(),
            cache,
        };
        // The total-error radius comes from the same sizing entry as the reserves.
        let entry = ctx.sized(Sizing::Reserve, config.rho[0])?;
        let verts = ctx.omega_set.estimate_support(config.sigma_max).vertices();
        let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ctx.omega = OmegaSamples::new(totals, verts[0][0].min(min), verts[1][0].max(max), entry.epsilon);
        Ok(ctx)
    }

    /// Mean and covariance of `(ω, b'ζ)`.
    fn projection_moments(&self, b: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
        let nw = self.zeta_mean.len();
        let ones = vec![1.0; nw];
        let quad = |x: &[f64], y: &[f64]| -> f64 { (0..nw).map(|i| x[i] * dot(&self.zeta_cov[i], y)).sum() };
        let mean = [self.zeta_mean.iter().sum(), dot(b, &self.zeta_mean)];
        let c01 = quad(&ones, b);
        (mean, [[quad(&ones, &ones), c01], [c01, quad(b, b)]])
    }

    fn projection(&self, mq: Option<&MonitoredQuantity>) -> Result<SampleSet> {
        match mq {
            Some(q) if !q.scalar() => SampleSet::new(vec![self.omega_set.columns[0].clone(), self.samples.project(&q.b_row)]),
            _ => Ok(self.omega_set.clone()),
        }
    }

    /// The Wasserstein-sized set for a quantity, from the cache when possible.
    fn sized(&mut self, which: Sizing, rho: f64) -> Result<CacheEntry> {
        let key = self.key_of(which);
        let set = if self.cache.file.entries.contains_key(&key) { None } else { Some(self.projection(self.monitored(which))?) };
        let (beta, sigma_max) = (self.config.beta, self.config.sigma_max);
        let sample_hash = self.cache.sample_hash.clone();
        let label = key.clone();
        self.cache.get_or_insert(&key, move || {
            let set = set.expect("projection built for uncached entries");
            let spec = AmbiguitySpec::from_samples(&set, beta, sigma_max)?;
            let dim = set.dim();
            let entry = match min_sigma(&set.d, spec.epsilon, rho, sigma_max) {
                Ok(h) => CacheEntry {
                    sigma: Some(h.sigma),
                    vertices: build_uncertainty_set(h.sigma, dim, &set.mean, &set.sqrt_cov).vertices,
                    epsilon: spec.epsilon,
                    rho,
                    sample_hash,
                    lambda: h.lambda,
                    level: h.level,
                    dim,
                },
                Err(e) if e.is_infeasible() => CacheEntry { sigma: None, vertices: Vec::new(), epsilon: spec.epsilon, rho, sample_hash, lambda: 0.0, level: 1.0, dim },
                Err(e) => return Err(e),
            };
            debug!("sized {label}: sigma {:?}, radius {:.4e}", entry.sigma, entry.epsilon);
            Ok(entry)
        })
    }

    fn wdro_set(&mut self, which: Sizing, rho: f64) -> Result<UncertaintySet> {
        let key = self.key_of(which);
        let e = self.sized(which, rho)?;
        match e.sigma {
            Some(_) => Ok(UncertaintySet { dim: e.dim, vertices: e.vertices }),
            None => Err(Error::Infeasible(format!(
                "no hypercube within {} standard deviations meets violation level {rho} for {key}",
                self.config.sigma_max
            ))),
        }
    }

    fn ro_set(&self, mq: Option<&MonitoredQuantity>) -> Result<UncertaintySet> {
        Ok(rivals::ro_vertices(&self.projection(mq)?, self.config.sigma_max))
    }

    /// Reserve records for the configured method.
    fn reserve_records(&mut self, n_gen: usize) -> Result<Vec<LinearRecord>> {
        let set = match self.config.method {
            Method::Wdro | Method::Dc => self.wdro_set(Sizing::Reserve, self.config.rho[0])?,
            Method::Ro => self.ro_set(None)?,
            Method::Mdro | Method::Gsp => {
                let k = rivals::moment_margin(self.config.method, self.config.rho[0])?;
                let (m, cov) = self.projection_moments(&vec![0.0; self.zeta_mean.len()]);
                let sd = cov[0][0].max(0.0).sqrt();
                UncertaintySet { dim: 1, vertices: vec![[m[0] - k * sd, 0.0], [m[0] + k * sd, 0.0]] }
            }
        };
        Ok(emit_reserve_constraints(n_gen, &set))
    }

    /// Records to add for a quantity at the current point, empty when it is
    /// satisfied within tolerance.
    fn check(&mut self, idx: usize, nominal: f64, alpha: &[f64]) -> Result<Vec<LinearRecord>> {
        let mq = self.quantities[idx].clone();
        let tol = self.config.tolerance;
        let s = dot(&mq.a_row, alpha);
        let (mean, cov) = self.projection_moments(&mq.b_row);
        let c = [s, 1.0];
        let centre = nominal + c[0] * mean[0] + c[1] * mean[1];
        let sc = [cov[0][0] * c[0] + cov[0][1] * c[1], cov[1][0] * c[0] + cov[1][1] * c[1]];
        let sd = (c[0] * sc[0] + c[1] * sc[1]).max(0.0).sqrt();
        let rho = self.config.rho[mq.quantity.family()];
        match self.config.method {
            Method::Wdro | Method::Dc | Method::Ro => {
                // The σ_max box lies inside this slab, and every sized set lies
                // inside the box.
                let dim = if mq.scalar() { 1.0 } else { 2.0 };
                let reach = self.config.sigma_max * f64::sqrt(dim) * sd * (1.0 + 1e-6) + 1e-10;
                if centre + reach <= mq.upper + tol && centre - reach >= mq.lower - tol {
                    return Ok(Vec::new());
                }
                let set = if self.config.method == Method::Ro {
                    self.ro_set(Some(&mq))?
                } else {
                    self.wdro_set(Sizing::Quantity(idx), rho)?
                };
                let recs = emit_robust_constraints(mq.quantity, &mq.a_row, &set, mq.lower, mq.upper);
                let worst = recs.iter().map(|r| r.violation(nominal, alpha)).fold(f64::NEG_INFINITY, f64::max);
                Ok(if worst > tol { recs } else { Vec::new() })
            }
            Method::Mdro | Method::Gsp => {
                let k = rivals::moment_margin(self.config.method, rho)?;
                let mut out = Vec::new();
                for (sense, sign, bound) in [(Sense::Le, 1.0, mq.upper), (Sense::Ge, -1.0, mq.lower)] {
                    let edge = centre + sign * k * sd;
                    let viol = if sense == Sense::Le { edge - bound } else { bound - edge };
                    if bound.is_finite() && viol > tol {
                        let u = rivals::cut_point(&mean, &sc, sd, sign * k);
                        let coeff = mq.a_row.iter().map(|a| u[0] * a).collect();
                        out.push(LinearRecord { quantity: mq.quantity, alpha_coeff: coeff, offset: u[1], bound, sense });
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Sizing {
    Reserve,
    Quantity(usize),
}

impl ChanceContext<'_> {
    fn monitored(&self, which: Sizing) -> Option<&MonitoredQuantity> {
        match which {
            Sizing::Reserve => None,
            Sizing::Quantity(i) => self.quantities.get(i),
        }
    }

    /// Cache key: quantities without a farm-specific part share the scalar
    /// sizing of their family.
    fn key_of(&self, which: Sizing) -> String {
        match self.monitored(which) {
            Some(q) if q.scalar() => format!("omega:{}", q.quantity.family()),
            Some(q) => q.quantity.key(),
            None => "omega:reserve".into(),
        }
    }
}

/// Outcome of the enforcement loop.
pub(crate) struct Enforced {
    pub x: Vec<f64>,
    pub report: IpmReport,
    pub records: Vec<LinearRecord>,
    pub active: BTreeSet<String>,
    pub rounds: usize,
    pub converged: bool,
    pub balance_residual: f64,
}

/// Runs the successive enforcement for the configured method on the AC or
/// the angle-only model.
pub(crate) fn enforce(
    net: &Network,
    adm: &AdmittanceSet,
    ctx: &mut ChanceContext,
    dc: Option<&DcPhysics>,
    x0: Vec<f64>,
) -> Result<Enforced> {
    let config = ctx.config;
    let cost = match config.method {
        Method::Wdro | Method::Dc => CostMode::Wasserstein {
            m1: ctx.omega.m1,
            m2: ctx.omega.m2,
            epsilon: ctx.omega.epsilon,
            lower: ctx.omega.lower,
            upper: ctx.omega.upper,
        },
        _ => CostMode::SampleAverage { m1: ctx.omega.m1, m2: ctx.omega.m2 },
    };
    let mut records = ctx.reserve_records(net.n_generators())?;
    let mut active = BTreeSet::new();
    let mut x = x0;
    let mut rounds = 0;
    let mut converged = false;
    let mut last = None;
    while rounds < config.rounds() {
        rounds += 1;
        let mut model = OpfModel::new(net, adm, cost, true, records.clone());
        if let Some(d) = dc {
            model = model.with_dc(d.clone());
        }
        if rounds == 1 {
            seed_lambda(&model, &mut x);
        }
        let report = solve_or_restart(&model, &x, config.ipm)?;
        x = report.x.clone();
        let alpha = x[model.lay.alpha(0)..model.lay.alpha(0) + model.lay.ng].to_vec();
        let mut added = 0;
        for idx in 0..ctx.quantities.len() {
            let q = ctx.quantities[idx].quantity;
            if !config.method.uses_cuts() && active.contains(&q.key()) {
                continue;
            }
            let new = ctx.check(idx, model.nominal(&x, q), &alpha)?;
            if !new.is_empty() {
                added += new.len();
                active.insert(q.key());
                records.extend(new);
            }
        }
        let balance = model.balance_residual(&x);
        debug!("round {rounds}: objective {:.6}, {} records, {added} added", report.objective, records.len());
        last = Some((report, balance));
        if added == 0 {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("enforcement stopped after {rounds} rounds with violated quantities left");
    }
    ctx.cache.save();
    let (report, balance_residual) = last.expect("at least one round");
    Ok(Enforced { x, report, records, active, rounds, converged, balance_residual })
}

/// Starts the cost multiplier on its slope rows.
fn seed_lambda(model: &OpfModel, x: &mut [f64]) {
    if let CostMode::Wasserstein { lower, upper, .. } = model.cost {
        let l = &model.lay;
        let slope = model
            .net
            .generators
            .iter()
            .map(|g| g.cost.c1.abs() + 2.0 * g.cost.c2 * lower.abs().max(upper.abs()))
            .fold(0.0, f64::max);
        x[l.lambda()] = slope.max(1.0);
    }
}

/// Fills the cost figures of a report for a finished strategy.
pub(crate) fn cost_report(net: &Network, omega: &OmegaSamples, strategy: &OperatingStrategy) -> (f64, f64, f64, f64, f64) {
    let agg = cost_coeffs(net, strategy);
    let generation: f64 = net.generators.iter().zip(&strategy.pg).map(|(g, &p)| g.cost.eval(p)).sum();
    let reserve: f64 = net
        .generators
        .iter()
        .enumerate()
        .map(|(g, gen)| gen.reserve_up_price * strategy.r_up[g] + gen.reserve_down_price * strategy.r_dn[g])
        .sum();
    (worst_case_cost_ub(&agg, omega).0, worst_case_cost_exact(&agg, omega), sample_average(&agg, omega), generation, reserve)
}

/// Solves the chance-constrained dispatch for the configured method.
pub fn solve_with_enforcement(net: &Network, samples: &ForecastErrors, config: &SolveConfig) -> Result<Solution> {
    config.validate()?;
    if samples.n_farms() != net.n_wind() {
        return Err(Error::Input(format!("samples have {} columns but the case has {} wind farms", samples.n_farms(), net.n_wind())));
    }
    if samples.len() < 2 {
        return Err(Error::Input("at least two forecast-error samples are required".into()));
    }
    if config.method == Method::Dc {
        return rivals::dc_opf(net, samples, config);
    }
    let t0 = Instant::now();
    let adm = build_admittance(net);
    let det = deterministic_opf(net, &adm, config.ipm)?;
    let basis = match config.basis {
        BasisKind::OperatingPoint => ResponseBasis::OperatingPoint(det.strategy.state()),
        BasisKind::Lpf => ResponseBasis::Lpf,
    };
    let rm = build_response(net, &adm, &basis)?;
    let tag = format!("ac:{:?}", config.basis);
    let mut ctx = ChanceContext::new(net, samples, config, ac_quantities(net, &rm), &tag)?;
    let prepare_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let lay = VarLayout::new(net);
    let start = OperatingStrategy::from_state(net, &det.strategy.state(), det.strategy.pg.clone(), det.strategy.qg.clone());
    let out = enforce(net, &adm, &mut ctx, None, x_from_strategy(&lay, &start))?;
    let enforce_s = t1.elapsed().as_secs_f64();
    let strategy = strategy_from_x(&lay, &out.x);
    Ok(finish(net, &ctx, config.method, strategy, out, Timings { prepare_s, enforce_s, total_s: t0.elapsed().as_secs_f64() }))
}

pub(crate) fn finish(net: &Network, ctx: &ChanceContext, method: Method, strategy: OperatingStrategy, out: Enforced, timings: Timings) -> Solution {
    let (bound, exact, avg, generation, reserve) = cost_report(net, &ctx.omega, &strategy);
    let report = SolveReport {
        method,
        converged: out.converged,
        objective: out.report.objective,
        worst_case_bound: bound,
        worst_case_exact: exact,
        sample_average: avg,
        generation_cost: generation,
        reserve_cost: reserve,
        epsilon: ctx.omega.epsilon,
        omega_support: [ctx.omega.lower, ctx.omega.upper],
        rounds: out.rounds,
        active: out.active.into_iter().collect(),
        n_records: out.records.len(),
        ipm_iterations: out.report.iterations,
        kkt_residual: out.report.kkt_residual(),
        balance_residual: out.balance_residual,
        sizing_computed: ctx.cache.computed,
        sizing_cached: ctx.cache.cached,
        timings,
    };
    info!(
        "{method}: objective {:.4}, worst case {:.4}, {} rounds, {} active quantities",
        report.objective,
        report.worst_case_exact,
        report.rounds,
        report.active.len()
    );
    Solution { strategy, report, records: out.records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_matpower;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ieee14() -> Network {
        parse_matpower(include_str!("../../data/ieee14.m")).unwrap()
    }

    fn ieee14_wind() -> Network {
        parse_matpower(include_str!("../../data/ieee14_wind.m")).unwrap()
    }

    fn gaussian_errors(n_farms: usize, n: usize, sd: f64, seed: u64) -> ForecastErrors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        ForecastErrors::new(n_farms, (0..n * n_farms).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn deterministic_14_bus_cost() {
        let net = ieee14();
        let adm = build_admittance(&net);
        let det = deterministic_opf(&net, &adm, IpmOptions { cost_mult: 1e-4, ..IpmOptions::default() }).unwrap();
        let expect = 8081.526392989471;
        assert!((det.objective - expect).abs() / expect < 1e-3, "{}", det.objective);
        let model = OpfModel::new(&net, &adm, CostMode::Generation, false, Vec::new());
        assert!(model.balance_residual(&det.report.x) < 1e-6);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("socp".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SolveConfig { rho: [0.05, 0.0, 0.05, 0.05], ..SolveConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Input(_))));
        assert!(SolveConfig { beta: 1.0, ..SolveConfig::default() }.validate().is_err());
        assert!(SolveConfig::default().validate().is_ok());
        assert_ne!(SolveConfig::default().hash_hex(), SolveConfig { beta: 0.95, ..SolveConfig::default() }.hash_hex());
    }

    #[test]
    fn wdro_reports_ordered_costs() {
        let net = ieee14_wind();
        let samples = gaussian_errors(net.n_wind(), 400, 0.02, 3);
        let sol = solve_with_enforcement(&net, &samples, &SolveConfig::default()).unwrap();
        let r = &sol.report;
        assert!(r.converged);
        assert!((sol.strategy.alpha_sum() - 1.0).abs() < 1e-8);
        assert!(r.objective >= r.worst_case_bound - 1e-6 * r.objective.abs());
        assert!(r.worst_case_bound >= r.worst_case_exact - 1e-9);
        assert!(r.worst_case_exact >= r.sample_average - 1e-9);
        assert!(r.balance_residual < 1e-6);
        for (g, gen) in net.generators.iter().enumerate() {
            let s = &sol.strategy;
            assert!(s.pg[g] + s.r_up[g] <= gen.p_max + 1e-7);
            assert!(s.pg[g] - s.r_dn[g] >= gen.p_min - 1e-7);
        }
    }

    #[test]
    fn zero_errors_reduce_to_deterministic() {
        let net = ieee14_wind();
        let adm = build_admittance(&net);
        let det = deterministic_opf(&net, &adm, SolveConfig::default().ipm).unwrap();
        // Tiny errors: every set collapses onto the nominal point.
        let samples = gaussian_errors(net.n_wind(), 200, 1e-9, 4);
        let sol = solve_with_enforcement(&net, &samples, &SolveConfig::default()).unwrap();
        let rel = (sol.report.generation_cost - det.objective).abs() / det.objective;
        assert!(rel < 1e-5, "{} vs {}", sol.report.generation_cost, det.objective);
    }

    #[test]
    fn cache_round_trip_matches() {
        let net = ieee14_wind();
        let samples = gaussian_errors(net.n_wind(), 300, 0.03, 5);
        let dir = tempfile::tempdir().unwrap();
        let cfg = SolveConfig { cache_dir: Some(dir.path().to_path_buf()), ..SolveConfig::default() };
        let a = solve_with_enforcement(&net, &samples, &cfg).unwrap();
        let b = solve_with_enforcement(&net, &samples, &cfg).unwrap();
        assert!(a.report.sizing_computed > 0);
        assert_eq!(b.report.sizing_computed, 0);
        assert!(b.report.sizing_cached > 0);
        assert!((a.report.objective - b.report.objective).abs() <= 1e-9 * a.report.objective.abs());
    }

    #[test]
    fn strategy_file_checks_case() {
        let net = ieee14_wind();
        let samples = gaussian_errors(net.n_wind(), 200, 0.02, 6);
        let cfg = SolveConfig::default();
        let sol = solve_with_enforcement(&net, &samples, &cfg).unwrap();
        let file = StrategyFile::new(&net, &samples, &cfg, &sol);
        let back = StrategyFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back.strategy_for(&net).unwrap(), sol.strategy);
        let other = net.with_wind_scale(2.0);
        assert!(matches!(back.strategy_for(&other), Err(Error::Input(_))));
    }
}
