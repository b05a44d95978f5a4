//! Native JSON case schema. Values are in engineering units (MW, MVAr, degrees,
//! $/MWh) so that files stay readable; conversion to per-unit happens on load.

use super::{from_pu, BusType, Network, RawBranch, RawBus, RawCase, RawGenerator, RawWind};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorRecord>,
    #[serde(default)]
    pub wind_farms: Vec<WindFarmRecord>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BusKindRecord {
    Ref,
    Pv,
    Pq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    #[serde(rename = "type")]
    pub kind: BusKindRecord,
    #[serde(default)]
    pub pd_mw: f64,
    #[serde(default)]
    pub qd_mvar: f64,
    #[serde(default)]
    pub gs_mw: f64,
    #[serde(default)]
    pub bs_mvar: f64,
    pub vm_min: f64,
    pub vm_max: f64,
    #[serde(default = "one")]
    pub vm: f64,
    #[serde(default)]
    pub va_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    /// MW limit, 0 for unconstrained.
    #[serde(default)]
    pub rate_mw: f64,
    #[serde(default = "one")]
    pub tap: f64,
    #[serde(default)]
    pub shift_deg: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRecord {
    pub c2: f64,
    pub c1: f64,
    #[serde(default)]
    pub c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub bus: usize,
    pub pmin_mw: f64,
    pub pmax_mw: f64,
    pub qmin_mvar: f64,
    pub qmax_mvar: f64,
    #[serde(default = "one")]
    pub vg: f64,
    #[serde(default)]
    pub pg_mw: f64,
    #[serde(default)]
    pub qg_mvar: f64,
    /// $/h with output in MW.
    pub cost: CostRecord,
    /// $/MW; defaults to half the linear cost coefficient.
    #[serde(default)]
    pub reserve_up_price: Option<f64>,
    #[serde(default)]
    pub reserve_down_price: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindFarmRecord {
    pub bus: usize,
    pub capacity_mw: f64,
    pub forecast_mw: f64,
    #[serde(default = "one")]
    pub power_factor: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl CaseFile {
    pub fn from_network(net: &Network) -> Self {
        let base = net.base_mva;
        let id = |i: usize| net.buses[i].id;
        CaseFile {
            name: net.name.clone(),
            base_mva: base,
            buses: net
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: match b.kind {
                        BusType::Reference => BusKindRecord::Ref,
                        BusType::Pv => BusKindRecord::Pv,
                        BusType::Pq => BusKindRecord::Pq,
                    },
                    pd_mw: from_pu(b.p_load, base),
                    qd_mvar: from_pu(b.q_load, base),
                    gs_mw: from_pu(b.g_shunt, base),
                    bs_mvar: from_pu(b.b_shunt, base),
                    vm_min: b.v_min,
                    vm_max: b.v_max,
                    vm: b.v_init,
                    va_deg: b.theta_init.to_degrees(),
                })
                .collect(),
            branches: net
                .branches
                .iter()
                .map(|br| BranchRecord {
                    from: id(br.from),
                    to: id(br.to),
                    r: br.r,
                    x: br.x,
                    b: br.b,
                    rate_mw: br.rate.map(|r| from_pu(r, base)).unwrap_or(0.0),
                    tap: br.tap,
                    shift_deg: 0.0,
                    in_service: br.in_service,
                })
                .collect(),
            generators: net
                .generators
                .iter()
                .map(|g| GeneratorRecord {
                    bus: id(g.bus),
                    pmin_mw: from_pu(g.p_min, base),
                    pmax_mw: from_pu(g.p_max, base),
                    qmin_mvar: from_pu(g.q_min, base),
                    qmax_mvar: from_pu(g.q_max, base),
                    vg: g.v_set,
                    pg_mw: from_pu(g.p_init, base),
                    qg_mvar: from_pu(g.q_init, base),
                    cost: CostRecord { c2: g.cost.c2 / (base * base), c1: g.cost.c1 / base, c0: g.cost.c0 },
                    reserve_up_price: Some(g.reserve_up_price / base),
                    reserve_down_price: Some(g.reserve_down_price / base),
                })
                .collect(),
            wind_farms: net
                .wind_farms
                .iter()
                .map(|w| WindFarmRecord {
                    bus: id(w.bus),
                    capacity_mw: from_pu(w.capacity, base),
                    forecast_mw: from_pu(w.forecast, base),
                    power_factor: w.power_factor,
                })
                .collect(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        let raw = RawCase {
            name: self.name,
            base_mva: self.base_mva,
            buses: self
                .buses
                .into_iter()
                .map(|b| RawBus {
                    id: b.id,
                    kind: match b.kind {
                        BusKindRecord::Ref => BusType::Reference,
                        BusKindRecord::Pv => BusType::Pv,
                        BusKindRecord::Pq => BusType::Pq,
                    },
                    pd: b.pd_mw,
                    qd: b.qd_mvar,
                    gs: b.gs_mw,
                    bs: b.bs_mvar,
                    vm: b.vm,
                    va_deg: b.va_deg,
                    vmax: b.vm_max,
                    vmin: b.vm_min,
                })
                .collect(),
            branches: self
                .branches
                .into_iter()
                .map(|b| RawBranch {
                    from: b.from,
                    to: b.to,
                    r: b.r,
                    x: b.x,
                    b: b.b,
                    rate_mw: b.rate_mw,
                    tap: b.tap,
                    shift_deg: b.shift_deg,
                    in_service: b.in_service,
                })
                .collect(),
            generators: self
                .generators
                .into_iter()
                .map(|g| {
                    let half = 0.5 * g.cost.c1;
                    RawGenerator {
                        bus: g.bus,
                        pg: g.pg_mw,
                        qg: g.qg_mvar,
                        qmax: g.qmax_mvar,
                        qmin: g.qmin_mvar,
                        vg: g.vg,
                        pmax: g.pmax_mw,
                        pmin: g.pmin_mw,
                        in_service: true,
                        c2: g.cost.c2,
                        c1: g.cost.c1,
                        c0: g.cost.c0,
                        reserve: Some((g.reserve_up_price.unwrap_or(half), g.reserve_down_price.unwrap_or(half))),
                    }
                })
                .collect(),
            wind: self
                .wind_farms
                .into_iter()
                .map(|w| RawWind {
                    bus: w.bus,
                    capacity_mw: w.capacity_mw,
                    forecast_mw: w.forecast_mw,
                    power_factor: w.power_factor,
                })
                .collect(),
        };
        raw.into_network()
    }
}

pub fn network_to_json(net: &Network) -> Result<String> {
    Ok(serde_json::to_string_pretty(&CaseFile::from_network(net))?)
}

pub fn network_from_json(text: &str) -> Result<Network> {
    let file: CaseFile = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), message: format!("case json: {e}") })?;
    file.into_network()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_matpower;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    /// Field-by-field comparison with a relative tolerance for the unit conversions.
    pub fn assert_same_network(a: &Network, b: &Network) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.base_mva, b.base_mva);
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.buses.len(), b.buses.len());
        for (x, y) in a.buses.iter().zip(&b.buses) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.kind, y.kind);
            for (p, q) in [
                (x.p_load, y.p_load),
                (x.q_load, y.q_load),
                (x.g_shunt, y.g_shunt),
                (x.b_shunt, y.b_shunt),
                (x.v_min, y.v_min),
                (x.v_max, y.v_max),
                (x.v_init, y.v_init),
                (x.theta_init, y.theta_init),
            ] {
                assert!(close(p, q), "bus {}: {p} vs {q}", x.id);
            }
        }
        assert_eq!(a.branches.len(), b.branches.len());
        for (x, y) in a.branches.iter().zip(&b.branches) {
            assert_eq!((x.from, x.to, x.in_service), (y.from, y.to, y.in_service));
            assert!(close(x.r, y.r) && close(x.x, y.x) && close(x.b, y.b) && close(x.tap, y.tap));
            assert_eq!(x.rate.is_some(), y.rate.is_some());
            if let (Some(p), Some(q)) = (x.rate, y.rate) {
                assert!(close(p, q));
            }
        }
        assert_eq!(a.generators.len(), b.generators.len());
        for (x, y) in a.generators.iter().zip(&b.generators) {
            assert_eq!(x.bus, y.bus);
            for (p, q) in [
                (x.p_min, y.p_min),
                (x.p_max, y.p_max),
                (x.q_min, y.q_min),
                (x.q_max, y.q_max),
                (x.v_set, y.v_set),
                (x.p_init, y.p_init),
                (x.q_init, y.q_init),
                (x.cost.c2, y.cost.c2),
                (x.cost.c1, y.cost.c1),
                (x.cost.c0, y.cost.c0),
                (x.reserve_up_price, y.reserve_up_price),
                (x.reserve_down_price, y.reserve_down_price),
            ] {
                assert!(close(p, q), "generator at {}: {p} vs {q}", x.bus);
            }
        }
        assert_eq!(a.wind_farms.len(), b.wind_farms.len());
        for (x, y) in a.wind_farms.iter().zip(&b.wind_farms) {
            assert_eq!(x.bus, y.bus);
            assert!(close(x.capacity, y.capacity) && close(x.forecast, y.forecast) && close(x.power_factor, y.power_factor));
        }
    }

    #[test]
    fn round_trip_ieee14_wind() {
        let net = parse_matpower(include_str!("../../data/ieee14_wind.m")).unwrap();
        let text = network_to_json(&net).unwrap();
        let back = network_from_json(&text).unwrap();
        assert_same_network(&net, &back);
        // A second pass through JSON is stable.
        let again = network_from_json(&network_to_json(&back).unwrap()).unwrap();
        assert_same_network(&back, &again);
    }

    #[test]
    fn round_trip_ieee118() {
        let net = parse_matpower(include_str!("../../data/ieee118_wind.m")).unwrap();
        let back = network_from_json(&network_to_json(&net).unwrap()).unwrap();
        assert_same_network(&net, &back);
    }

    #[test]
    fn wind_record_fields() {
        let net = parse_matpower(include_str!("../../data/ieee14_wind.m")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&network_to_json(&net).unwrap()).unwrap();
        let w = &v["wind_farms"][0];
        assert_eq!(w["bus"], 11);
        assert_eq!(w["capacity_mw"], 36.0);
        assert_eq!(w["forecast_mw"], 18.0);
        assert_eq!(w["power_factor"], 1.0);
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(network_from_json("{\"base_mva\": 100,"), Err(Error::Parse { .. })));
    }
}
