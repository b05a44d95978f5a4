use crate::acgrid::SystemState;
use crate::case_io::Network;
use serde::{Deserialize, Serialize};

/// Decision vector of the dispatch problem: nominal bus voltages, generator
/// setpoints, AGC participation factors and reserves (all per-unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingStrategy {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub alpha: Vec<f64>,
    pub r_up: Vec<f64>,
    pub r_dn: Vec<f64>,
    /// Worst-case cost multiplier; zero for methods without one.
    pub lambda: f64,
}

impl OperatingStrategy {
    pub fn state(&self) -> SystemState {
        SystemState { theta: self.theta.clone(), v: self.v.clone() }
    }

    /// Total reactive output per bus.
    pub fn bus_q(&self, net: &Network) -> Vec<f64> {
        let mut q = vec![0.0; net.n_buses()];
        for (g, gen) in net.generators.iter().enumerate() {
            q[gen.bus] += self.qg[g];
        }
        q
    }

    /// Strategy built from a solved state with equal participation over the
    /// units that have regulation headroom and no reserves.
    pub fn from_state(net: &Network, state: &SystemState, pg: Vec<f64>, qg: Vec<f64>) -> Self {
        let ng = net.n_generators();
        let live: Vec<usize> = (0..ng).filter(|&g| !net.generators[g].is_degenerate()).collect();
        let mut alpha = vec![0.0; ng];
        for &g in &live {
            alpha[g] = 1.0 / live.len() as f64;
        }
        Self {
            theta: state.theta.clone(),
            v: state.v.clone(),
            pg,
            qg,
            alpha,
            r_up: vec![0.0; ng],
            r_dn: vec![0.0; ng],
            lambda: 0.0,
        }
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}
