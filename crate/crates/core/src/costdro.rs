//! Worst-case expected dispatch cost over the Wasserstein ball of the total
//! forecast error `ω = 1'ζ`.
//!
//! Under the affine policy the cost is the quadratic `η(ω) = c₂ω² − c₁ω + c₀`.
//! The exact worst case is a one-dimensional convex minimization over the
//! dual multiplier; the upper bound fixes that multiplier at the Lipschitz
//! constant of `η` on the support.

use crate::case_io::Network;
use crate::error::Result;
use crate::opfcore::OperatingStrategy;
use crate::wasserstein::{golden_section, AmbiguitySpec, SampleSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostAggregate {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostAggregate {
    pub fn eta(&self, omega: f64) -> f64 {
        (self.c2 * omega - self.c1) * omega + self.c0
    }

    pub fn eta_derivative(&self, omega: f64) -> f64 {
        2.0 * self.c2 * omega - self.c1
    }
}

/// Scalar total-error samples with their support and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSamples {
    pub values: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub epsilon: f64,
    pub m1: f64,
    pub m2: f64,
}

impl OmegaSamples {
    pub fn new(values: Vec<f64>, lower: f64, upper: f64, epsilon: f64) -> Self {
        let n = values.len().max(1) as f64;
        let m1 = values.iter().sum::<f64>() / n;
        let m2 = values.iter().map(|w| w * w).sum::<f64>() / n;
        Self { values, lower, upper, epsilon, m1, m2 }
    }

    /// Support from the `sigma_max` box of the samples and radius from their
    /// estimated constant.
    pub fn from_values(values: Vec<f64>, beta: f64, sigma_max: f64) -> Result<Self> {
        let set = SampleSet::new(vec![values.clone()])?;
        let spec = AmbiguitySpec::from_samples(&set, beta, sigma_max)?;
        let verts = set.estimate_support(sigma_max).vertices();
        let (lo, hi) = (verts[0][0], verts[1][0]);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::new(values, lo.min(min), hi.max(max), spec.epsilon))
    }
}

/// Aggregate coefficients of the realized cost as a function of `ω`.
pub fn cost_coeffs(net: &Network, strategy: &OperatingStrategy) -> CostAggregate {
    let mut agg = CostAggregate { c2: 0.0, c1: 0.0, c0: 0.0 };
    for (g, gen) in net.generators.iter().enumerate() {
        let (a, p) = (strategy.alpha[g], strategy.pg[g]);
        let c = gen.cost;
        agg.c2 += c.c2 * a * a;
        agg.c1 += 2.0 * c.c2 * p * a + c.c1 * a;
        agg.c0 += c.eval(p) + gen.reserve_up_price * strategy.r_up[g] + gen.reserve_down_price * strategy.r_dn[g];
    }
    agg
}

/// `(1/N) Σ η(ω̂_k)` through the cached moments.
pub fn sample_average(agg: &CostAggregate, samples: &OmegaSamples) -> f64 {
    agg.c2 * samples.m2 - agg.c1 * samples.m1 + agg.c0
}

/// Dual objective of the exact worst case at multiplier `lambda`.
pub fn exact_dual(agg: &CostAggregate, samples: &OmegaSamples, lambda: f64) -> f64 {
    let (lo, hi) = (samples.lower, samples.upper);
    let (elo, ehi) = (agg.eta(lo), agg.eta(hi));
    let n = samples.values.len().max(1) as f64;
    let total: f64 = samples
        .values
        .iter()
        .map(|&w| agg.eta(w).max(elo - lambda * (w - lo)).max(ehi - lambda * (hi - w)))
        .sum();
    lambda * samples.epsilon + total / n
}

fn lipschitz(agg: &CostAggregate, samples: &OmegaSamples) -> f64 {
    agg.eta_derivative(samples.upper).max(-agg.eta_derivative(samples.lower))
}

/// Exact worst-case expected cost.
pub fn worst_case_cost_exact(agg: &CostAggregate, samples: &OmegaSamples) -> f64 {
    // Beyond the Lipschitz bound every sample term equals η(ω̂_k), so the
    // objective only grows there.
    let ub = lipschitz(agg, samples).max(0.0);
    if ub == 0.0 {
        return exact_dual(agg, samples, 0.0);
    }
    let f = |l: f64| exact_dual(agg, samples, l);
    let (_, best) = golden_section(f, 0.0, ub, 1e-12 * ub.max(1.0), 400);
    best.min(f(0.0)).min(f(ub))
}

/// Upper bound with the multiplier fixed at the Lipschitz constant of `η`.
pub fn worst_case_cost_ub(agg: &CostAggregate, samples: &OmegaSamples) -> (f64, f64) {
    let lambda = lipschitz(agg, samples);
    (lambda * samples.epsilon + sample_average(agg, samples), lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_matpower;
    use crate::case_io::tests::two_bus_text;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_oracle(agg: &CostAggregate, s: &OmegaSamples, lmax: f64, step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut k = 0u64;
        loop {
            let l = k as f64 * step;
            if l > lmax {
                break;
            }
            let inner: f64 = s
                .values
                .iter()
                .map(|&w| {
                    let a = agg.eta(s.lower) + l * (s.lower - w);
                    let b = agg.eta(s.upper) - l * (s.upper - w);
                    a.max(b).max(agg.eta(w))
                })
                .sum::<f64>()
                / s.values.len() as f64;
            best = best.min(l * s.epsilon + inner);
            k += 1;
        }
        best
    }

    #[test]
    fn single_unit_algebra() {
        let net = parse_matpower(two_bus_text()).unwrap();
        let mut net = net;
        net.generators[0].cost = crate::case_io::QuadCost { c2: 1.0, c1: 0.0, c0: 0.0 };
        let st = OperatingStrategy {
            theta: vec![0.0; 2],
            v: vec![1.0; 2],
            pg: vec![2.0],
            qg: vec![0.0],
            alpha: vec![1.0],
            r_up: vec![0.0],
            r_dn: vec![0.0],
            lambda: 0.0,
        };
        let agg = cost_coeffs(&net, &st);
        assert_eq!((agg.c2, agg.c1, agg.c0), (1.0, 4.0, 4.0));
        for w in [-1.0, 0.0, 0.5, 3.0] {
            assert!((agg.eta(w) - (2.0f64 - w).powi(2)).abs() < 1e-12);
        }
        let flat = OperatingStrategy { alpha: vec![0.0], ..st };
        assert_eq!(cost_coeffs(&net, &flat).c2, 0.0);
    }

    #[test]
    fn zero_radius_is_sample_average() {
        let agg = CostAggregate { c2: 3.0, c1: 1.0, c0: 2.0 };
        let s = OmegaSamples::new(vec![-0.5, 0.1, 0.7], -2.0, 2.0, 0.0);
        let avg = sample_average(&agg, &s);
        let direct = s.values.iter().map(|&w| agg.eta(w)).sum::<f64>() / 3.0;
        assert!((avg - direct).abs() < 1e-12);
        assert!((worst_case_cost_exact(&agg, &s) - avg).abs() < 1e-9);
        assert!((worst_case_cost_ub(&agg, &s).0 - avg).abs() < 1e-12);
    }

    #[test]
    fn square_cost_grid_example() {
        let agg = CostAggregate { c2: 1.0, c1: 0.0, c0: 0.0 };
        let s = OmegaSamples::new(vec![-1.0, 1.0], -2.0, 2.0, 0.5);
        let exact = worst_case_cost_exact(&agg, &s);
        let oracle = grid_oracle(&agg, &s, 40.0, 1e-5);
        assert!((exact - oracle).abs() < 1e-6, "{exact} vs {oracle}");
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (CostAggregate, OmegaSamples) {
        let agg = CostAggregate { c2: rng.gen_range(0.0..5.0), c1: rng.gen_range(-3.0..3.0), c0: rng.gen_range(0.0..10.0) };
        let n = rng.gen_range(1..40);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = OmegaSamples::new(values, -1.5, 1.5, rng.gen_range(0.0..0.5));
        (agg, s)
    }

    #[test]
    fn bound_dominates_exact_dominates_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (agg, s) = random_case(&mut rng);
            let exact = worst_case_cost_exact(&agg, &s);
            let (ub, lambda) = worst_case_cost_ub(&agg, &s);
            assert!(ub >= exact - 1e-9);
            assert!(exact >= sample_average(&agg, &s) - 1e-9);
            let d_hi = agg.eta_derivative(s.upper);
            let d_lo = -agg.eta_derivative(s.lower);
            assert!(lambda >= d_hi && lambda >= d_lo);
            assert!(lambda == d_hi || lambda == d_lo);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_radius(c2 in 0.0f64..4.0, c1 in -2.0f64..2.0,
                              values in proptest::collection::vec(-1.0f64..1.0, 1..30),
                              e1 in 0.0f64..0.5, de in 0.0f64..0.5) {
            let agg = CostAggregate { c2, c1, c0: 1.0 };
            let a = worst_case_cost_exact(&agg, &OmegaSamples::new(values.clone(), -1.2, 1.2, e1));
            let b = worst_case_cost_exact(&agg, &OmegaSamples::new(values, -1.2, 1.2, e1 + de));
            prop_assert!(b >= a - 1e-9);
        }

        #[test]
        fn permutation_invariant(values in proptest::collection::vec(-1.0f64..1.0, 2..30), eps in 0.0f64..0.5) {
            let agg = CostAggregate { c2: 1.3, c1: 0.4, c0: 0.0 };
            let mut rev = values.clone();
            rev.reverse();
            let a = worst_case_cost_exact(&agg, &OmegaSamples::new(values, -1.2, 1.2, eps));
            let b = worst_case_cost_exact(&agg, &OmegaSamples::new(rev, -1.2, 1.2, eps));
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
