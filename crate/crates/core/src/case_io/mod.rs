//! Network case model, parsers and admittance assembly.
//!
//! All quantities inside [`Network`] are per-unit on `base_mva`, angles in
//! radians and cost coefficients expressed for per-unit power. Buses,
//! generators and wind farms refer to each other by internal index; the
//! external bus number is kept in [`Bus::id`].

mod admittance;
mod json;
mod matpower;

pub use admittance::{build_admittance, AdmittanceSet, BranchCoefficients};
pub use json::{network_from_json, network_to_json, CaseFile};
pub use matpower::parse_matpower;

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// Bus type code as written in the case file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusType {
    Pq,
    Pv,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusType,
    pub p_load: f64,
    pub q_load: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage magnitude and angle found in the file, used as a warm start.
    pub v_init: f64,
    pub theta_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b: f64,
    /// MW flow limit; `None` when the line is unconstrained.
    pub rate: Option<f64>,
    /// Off-nominal tap ratio (1.0 for lines).
    pub tap: f64,
    pub in_service: bool,
}

/// Quadratic cost `c2 p^2 + c1 p + c0` with `p` in per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl QuadCost {
    pub fn eval(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    pub fn derivative(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_set: f64,
    pub p_init: f64,
    pub q_init: f64,
    pub cost: QuadCost,
    /// Price of upward / downward regulating reserve per per-unit.
    pub reserve_up_price: f64,
    pub reserve_down_price: f64,
}

impl Generator {
    /// A unit with no regulation headroom.
    pub fn is_degenerate(&self) -> bool {
        self.p_max - self.p_min <= 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindFarm {
    pub bus: usize,
    pub capacity: f64,
    pub forecast: f64,
    pub power_factor: f64,
}

impl WindFarm {
    /// Ratio of reactive to active output at the fixed power factor.
    pub fn q_ratio(&self) -> f64 {
        let c = self.power_factor;
        (1.0 - c * c).max(0.0).sqrt() / c
    }
}

/// Reference, PV and PQ index sets. PV buses are the non-reference buses
/// hosting at least one generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BusPartition {
    pub reference: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
}

impl BusPartition {
    /// Reference bus followed by PV buses.
    pub fn generator_buses(&self) -> Vec<usize> {
        let mut v = vec![self.reference];
        v.extend_from_slice(&self.pv);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub wind_farms: Vec<WindFarm>,
    pub partition: BusPartition,
}

/// Input format of a case file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    MatpowerM,
    NativeJson,
}

impl CaseFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => CaseFormat::NativeJson,
            _ => CaseFormat::MatpowerM,
        }
    }
}

pub fn parse_case(text: &str, format: CaseFormat) -> Result<Network> {
    match format {
        CaseFormat::MatpowerM => parse_matpower(text),
        CaseFormat::NativeJson => network_from_json(text),
    }
}

pub fn load_case(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text, CaseFormat::from_path(path))
}

pub fn to_pu(value: f64, base: f64) -> f64 {
    value / base
}

pub fn from_pu(value: f64, base: f64) -> f64 {
    value * base
}

/// Raw records shared by both parsers, in engineering units, before validation.
#[derive(Debug, Clone, Default)]
pub(crate) struct RawCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<RawBus>,
    pub branches: Vec<RawBranch>,
    pub generators: Vec<RawGenerator>,
    pub wind: Vec<RawWind>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawBus {
    pub id: usize,
    pub kind: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    pub va_deg: f64,
    pub vmax: f64,
    pub vmin: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct RawBranch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub rate_mw: f64,
    pub tap: f64,
    pub shift_deg: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct RawGenerator {
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub pmax: f64,
    pub pmin: f64,
    pub in_service: bool,
    /// Cost per hour as `c2 P^2 + c1 P + c0` with `P` in MW.
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    /// Reserve prices per MW; `None` defaults to half the linear coefficient.
    pub reserve: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawWind {
    pub bus: usize,
    pub capacity_mw: f64,
    pub forecast_mw: f64,
    pub power_factor: f64,
}

impl RawCase {
    /// Convert to per-unit and validate every invariant of [`Network`].
    pub fn into_network(self) -> Result<Network> {
        let base = self.base_mva;
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Validation(format!("baseMVA must be positive, got {base}")));
        }
        let mut index = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", b.id)));
            }
        }
        let lookup = |id: usize, what: &str| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{what} references unknown bus {id}")))
        };

        let mut buses = Vec::with_capacity(self.buses.len());
        for b in &self.buses {
            if !(b.vmin > 0.0 && b.vmin <= b.vmax) {
                return Err(Error::Validation(format!(
                    "bus {}: voltage bounds must satisfy 0 < vmin <= vmax (got {}, {})",
                    b.id, b.vmin, b.vmax
                )));
            }
            buses.push(Bus {
                id: b.id,
                kind: b.kind,
                p_load: to_pu(b.pd, base),
                q_load: to_pu(b.qd, base),
                g_shunt: to_pu(b.gs, base),
                b_shunt: to_pu(b.bs, base),
                v_min: b.vmin,
                v_max: b.vmax,
                v_init: b.vm,
                theta_init: b.va_deg.to_radians(),
            });
        }

        let mut branches = Vec::with_capacity(self.branches.len());
        for (k, br) in self.branches.iter().enumerate() {
            let from = lookup(br.from, &format!("branch {}", k + 1))?;
            let to = lookup(br.to, &format!("branch {}", k + 1))?;
            if br.x == 0.0 {
                return Err(Error::Validation(format!("branch {} ({}-{}): zero reactance", k + 1, br.from, br.to)));
            }
            if br.shift_deg != 0.0 {
                return Err(Error::Validation(format!(
                    "branch {} ({}-{}): phase shifters are not supported",
                    k + 1,
                    br.from,
                    br.to
                )));
            }
            if br.rate_mw < 0.0 {
                return Err(Error::Validation(format!("branch {}: negative flow limit", k + 1)));
            }
            if from == to {
                return Err(Error::Validation(format!("branch {}: both ends at bus {}", k + 1, br.from)));
            }
            branches.push(Branch {
                from,
                to,
                r: br.r,
                x: br.x,
                b: br.b,
                rate: if br.rate_mw > 0.0 { Some(to_pu(br.rate_mw, base)) } else { None },
                tap: if br.tap == 0.0 { 1.0 } else { br.tap },
                in_service: br.in_service,
            });
        }

        let mut generators = Vec::new();
        for (g, r) in self.generators.iter().enumerate() {
            if !r.in_service {
                continue;
            }
            let bus = lookup(r.bus, &format!("generator {}", g + 1))?;
            if r.c2 < 0.0 || r.c1 < 0.0 || r.c0 < 0.0 {
                return Err(Error::Validation(format!(
                    "generator {} at bus {}: cost coefficients must be non-negative",
                    g + 1,
                    r.bus
                )));
            }
            if r.pmin > r.pmax || r.qmin > r.qmax {
                return Err(Error::Validation(format!("generator {} at bus {}: lower limit above upper limit", g + 1, r.bus)));
            }
            let (up, dn) = r.reserve.unwrap_or((0.5 * r.c1, 0.5 * r.c1));
            if up < 0.0 || dn < 0.0 {
                return Err(Error::Validation(format!("generator {}: negative reserve price", g + 1)));
            }
            generators.push(Generator {
                bus,
                p_min: to_pu(r.pmin, base),
                p_max: to_pu(r.pmax, base),
                q_min: to_pu(r.qmin, base),
                q_max: to_pu(r.qmax, base),
                v_set: r.vg,
                p_init: to_pu(r.pg, base),
                q_init: to_pu(r.qg, base),
                cost: QuadCost { c2: r.c2 * base * base, c1: r.c1 * base, c0: r.c0 },
                reserve_up_price: up * base,
                reserve_down_price: dn * base,
            });
        }

        let mut wind_farms = Vec::new();
        for (w, r) in self.wind.iter().enumerate() {
            let bus = lookup(r.bus, &format!("wind farm {}", w + 1))?;
            if !(r.forecast_mw >= 0.0 && r.forecast_mw <= r.capacity_mw) {
                return Err(Error::Validation(format!(
                    "wind farm {} at bus {}: forecast must lie in [0, capacity]",
                    w + 1,
                    r.bus
                )));
            }
            if !(r.power_factor > 0.0 && r.power_factor <= 1.0) {
                return Err(Error::Validation(format!("wind farm {} at bus {}: power factor must lie in (0, 1]", w + 1, r.bus)));
            }
            wind_farms.push(WindFarm {
                bus,
                capacity: to_pu(r.capacity_mw, base),
                forecast: to_pu(r.forecast_mw, base),
                power_factor: r.power_factor,
            });
        }

        let partition = build_partition(&buses, &generators)?;
        let net = Network { name: self.name, base_mva: base, buses, branches, generators, wind_farms, partition };
        check_connected(&net)?;
        Ok(net)
    }
}

fn build_partition(buses: &[Bus], generators: &[Generator]) -> Result<BusPartition> {
    let refs: Vec<usize> = buses.iter().enumerate().filter(|(_, b)| b.kind == BusType::Reference).map(|(i, _)| i).collect();
    if refs.len() != 1 {
        return Err(Error::Validation(format!("exactly one reference bus required, found {}", refs.len())));
    }
    let reference = refs[0];
    let mut has_gen = vec![false; buses.len()];
    for g in generators {
        has_gen[g.bus] = true;
    }
    if !has_gen[reference] {
        return Err(Error::Validation(format!("reference bus {} hosts no generator", buses[reference].id)));
    }
    let pv = (0..buses.len()).filter(|&i| i != reference && has_gen[i]).collect();
    let pq = (0..buses.len()).filter(|&i| !has_gen[i]).collect();
    Ok(BusPartition { reference, pv, pq })
}

fn check_connected(net: &Network) -> Result<()> {
    let n = net.buses.len();
    let mut adj = vec![Vec::new(); n];
    for br in net.branches.iter().filter(|b| b.in_service) {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![net.partition.reference];
    seen[net.partition.reference] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("network is not connected: bus {} is islanded", net.buses[i].id)));
    }
    Ok(())
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_wind(&self) -> usize {
        self.wind_farms.len()
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Generators connected to each bus.
    pub fn generators_at_bus(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_buses()];
        for (g, gen) in self.generators.iter().enumerate() {
            out[gen.bus].push(g);
        }
        out
    }

    pub fn is_pq(&self, bus: usize) -> bool {
        self.partition.pq.binary_search(&bus).is_ok()
    }

    /// Reactive/active ratio applied to a farm's output: its power-factor
    /// ratio at PQ buses and zero at generator buses, where the AVR absorbs it.
    pub fn wind_q_ratio(&self, w: usize) -> f64 {
        let farm = &self.wind_farms[w];
        if self.is_pq(farm.bus) {
            farm.q_ratio()
        } else {
            0.0
        }
    }

    /// Per-bus forecast wind injection (active, reactive).
    pub fn wind_forecast_injection(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.n_buses()];
        let mut q = vec![0.0; self.n_buses()];
        for (w, farm) in self.wind_farms.iter().enumerate() {
            p[farm.bus] += farm.forecast;
            q[farm.bus] += farm.forecast * self.wind_q_ratio(w);
        }
        (p, q)
    }

    /// Copy with every wind farm's capacity and forecast multiplied by `factor`.
    pub fn with_wind_scale(&self, factor: f64) -> Network {
        let mut net = self.clone();
        for w in &mut net.wind_farms {
            w.capacity *= factor;
            w.forecast *= factor;
        }
        net
    }

    /// Copy without wind farms.
    pub fn without_wind(&self) -> Network {
        let mut net = self.clone();
        net.wind_farms.clear();
        net
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load).sum()
    }

    /// Monitored branches: in service with a finite limit.
    pub fn limited_branches(&self) -> Vec<usize> {
        self.branches.iter().enumerate().filter(|(_, b)| b.in_service && b.rate.is_some()).map(|(k, _)| k).collect()
    }
}
