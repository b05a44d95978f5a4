//! Safe robust counterparts of distributionally robust chance constraints.
//!
//! For standardized samples with infinity norms `d_k`, the worst-case
//! probability (over the Wasserstein ball of radius `ε`) of leaving the
//! standardized box of half-side `σ` is
//!
//! ```text
//! inf_{λ>=0}  λε + (1/N) Σ_k (1 - λ (σ - d_k)^+)^+
//! ```
//!
//! The smallest `σ` keeping this below `ρ` is found by nested bisection; the
//! box is then mapped back to original coordinates and its vertices give a
//! finite set of linear constraints.

use crate::error::{Error, Result};
use crate::wasserstein::{box_vertices, golden_section, Mat2};
use serde::{Deserialize, Serialize};

/// Sorted copy of the distances with prefix sums, giving `O(log N)` evaluation
/// of the inner objective.
#[derive(Debug, Clone)]
pub struct SortedDistances {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl SortedDistances {
    pub fn new(d: &[f64]) -> Self {
        let mut sorted = d.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &x in &sorted {
            acc += x;
            prefix.push(acc);
        }
        Self { sorted, prefix }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `h(σ, λ) = λε + (1/N) Σ_k (1 - λ(σ - d_k)^+)^+`.
    pub fn h(&self, sigma: f64, lambda: f64, eps: f64) -> f64 {
        let n = self.sorted.len();
        let hi = self.sorted.partition_point(|&x| x < sigma);
        let mut total = (n - hi) as f64;
        if lambda <= 0.0 {
            return lambda * eps + if lambda == 0.0 { 1.0 } else { total / n as f64 };
        }
        // Terms with σ - 1/λ < d_k < σ contribute 1 - λσ + λ d_k.
        let cut = sigma - 1.0 / lambda;
        let lo = self.sorted.partition_point(|&x| x <= cut);
        if lo < hi {
            let cnt = (hi - lo) as f64;
            let sum = self.prefix[hi] - self.prefix[lo];
            total += (1.0 - lambda * sigma) * cnt + lambda * sum;
        }
        lambda * eps + total / n as f64
    }

    /// Worst-case violation level and the minimizing multiplier.
    pub fn violation(&self, sigma: f64, eps: f64) -> (f64, f64) {
        if self.sorted.is_empty() {
            return (0.0, 0.0);
        }
        let f = |l: f64| self.h(sigma, l, eps);
        // Bracket [0, b]; extend by doubling while the objective keeps falling.
        let mut b = 100.0;
        let mut fb = f(b);
        while b < 1e12 {
            let f2 = f(2.0 * b);
            if f2 < fb {
                b *= 2.0;
                fb = f2;
            } else {
                break;
            }
        }
        let upper = if b > 100.0 { 2.0 * b } else { b };
        let (mut lam, mut val) = golden_section(f, 0.0, upper, 1e-13, 300);
        for cand in [0.0, b, upper] {
            let v = self.h(sigma, cand, eps);
            if v < val {
                val = v;
                lam = cand;
            }
        }
        // The objective is piecewise linear with kinks at λ = 1/(σ - d_k):
        // polish by checking the kinks adjacent to the golden-section point.
        if lam > 0.0 {
            let cut = sigma - 1.0 / lam;
            let k = self.sorted.partition_point(|&x| x <= cut);
            for j in [k.wrapping_sub(2), k.wrapping_sub(1), k, k + 1] {
                if let Some(&dk) = self.sorted.get(j) {
                    if dk < sigma {
                        let cand = 1.0 / (sigma - dk);
                        let v = self.h(sigma, cand, eps);
                        if v < val {
                            val = v;
                            lam = cand;
                        }
                    }
                }
            }
        }
        (val.clamp(0.0, 1.0), lam)
    }
}

/// Worst-case probability of leaving the standardized box of half-side `sigma`.
pub fn worst_case_violation(sigma: f64, d: &[f64], eps: f64) -> f64 {
    SortedDistances::new(d).violation(sigma, eps).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypercubeResult {
    pub sigma: f64,
    pub lambda: f64,
    pub level: f64,
}

/// Smallest box half-side with worst-case violation at most `rho`, to 1e-4.
pub fn min_sigma_sorted(d: &SortedDistances, eps: f64, rho: f64, sigma_max: f64) -> Result<HypercubeResult> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Input(format!("violation level must lie in (0, 1], got {rho}")));
    }
    let (level0, lambda0) = d.violation(0.0, eps);
    if level0 <= rho {
        return Ok(HypercubeResult { sigma: 0.0, lambda: lambda0, level: level0 });
    }
    let (level_max, lambda_max) = d.violation(sigma_max, eps);
    if level_max > rho {
        return Err(Error::Infeasible(format!(
            "worst-case violation {level_max:.4} at the support bound exceeds {rho}"
        )));
    }
    let (mut lo, mut hi) = (0.0, sigma_max);
    let mut best = (level_max, lambda_max);
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        let (level, lambda) = d.violation(mid, eps);
        if level > rho {
            lo = mid;
        } else {
            hi = mid;
            best = (level, lambda);
        }
    }
    Ok(HypercubeResult { sigma: hi, lambda: best.1, level: best.0 })
}

pub fn min_sigma(d: &[f64], eps: f64, rho: f64, sigma_max: f64) -> Result<HypercubeResult> {
    min_sigma_sorted(&SortedDistances::new(d), eps, rho, sigma_max)
}

/// Vertices of an uncertainty set in original coordinates. One-dimensional
/// sets use the first coordinate only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub dim: usize,
    pub vertices: Vec<[f64; 2]>,
}

impl UncertaintySet {
    /// The single point `{0}`: no uncertainty.
    pub fn origin(dim: usize) -> Self {
        Self { dim, vertices: vec![[0.0, 0.0]] }
    }
}

pub fn build_uncertainty_set(sigma: f64, dim: usize, mean: &[f64; 2], sqrt_cov: &Mat2) -> UncertaintySet {
    UncertaintySet { dim, vertices: box_vertices(dim, mean, sqrt_cov, sigma) }
}

/// A monitored quantity subject to a chance constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    /// Downward reserve of a unit: `ω α_g <= r_dn_g`.
    ReserveDown(usize),
    /// Upward reserve of a unit: `-ω α_g <= r_up_g`.
    ReserveUp(usize),
    /// Voltage magnitude at a PQ bus.
    Voltage(usize),
    /// Total reactive output at a generator bus.
    Reactive(usize),
    /// From-end active flow on a branch.
    Flow(usize),
}

impl Quantity {
    pub fn key(&self) -> String {
        match self {
            Quantity::ReserveDown(g) => format!("reserve_down:{g}"),
            Quantity::ReserveUp(g) => format!("reserve_up:{g}"),
            Quantity::Voltage(b) => format!("voltage:{b}"),
            Quantity::Reactive(b) => format!("reactive:{b}"),
            Quantity::Flow(k) => format!("flow:{k}"),
        }
    }

    /// Chance-constraint family index: 0 reserves, 1 voltages, 2 reactive, 3 flows.
    pub fn family(&self) -> usize {
        match self {
            Quantity::ReserveDown(_) | Quantity::ReserveUp(_) => 0,
            Quantity::Voltage(_) => 1,
            Quantity::Reactive(_) => 2,
            Quantity::Flow(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
}

/// `nominal(x) + alpha_coeff' α + offset  (<= | >=)  bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecord {
    pub quantity: Quantity,
    pub alpha_coeff: Vec<f64>,
    pub offset: f64,
    pub bound: f64,
    pub sense: Sense,
}

impl LinearRecord {
    /// Amount by which the record is violated for a given nominal value and α.
    pub fn violation(&self, nominal: f64, alpha: &[f64]) -> f64 {
        let lhs = nominal + crate::linalg::dot(&self.alpha_coeff, alpha) + self.offset;
        match self.sense {
            Sense::Le => lhs - self.bound,
            Sense::Ge => self.bound - lhs,
        }
    }
}

/// Vertex constraints `lower <= nominal + ω_v (a'α) + t_v <= upper` for a
/// quantity whose random part is `ω a'α + t`.
pub fn emit_robust_constraints(
    quantity: Quantity,
    a_row: &[f64],
    set: &UncertaintySet,
    lower: f64,
    upper: f64,
) -> Vec<LinearRecord> {
    let mut out = Vec::with_capacity(2 * set.vertices.len());
    for v in &set.vertices {
        let coeff: Vec<f64> = a_row.iter().map(|a| v[0] * a).collect();
        for (bound, sense) in [(upper, Sense::Le), (lower, Sense::Ge)] {
            if bound.is_finite() {
                out.push(LinearRecord { quantity, alpha_coeff: coeff.clone(), offset: v[1], bound, sense });
            }
        }
    }
    out
}

/// Reserve records from the 1-D set of total errors:
/// `ω_v α_g - r_dn_g <= 0` and `-ω_v α_g - r_up_g <= 0` for every vertex.
/// The nominal part of each record is `-r_dn_g` or `-r_up_g`.
pub fn emit_reserve_constraints(n_gen: usize, set: &UncertaintySet) -> Vec<LinearRecord> {
    let mut out = Vec::new();
    for g in 0..n_gen {
        for v in &set.vertices {
            let mut down = vec![0.0; n_gen];
            down[g] = v[0];
            out.push(LinearRecord { quantity: Quantity::ReserveDown(g), alpha_coeff: down, offset: 0.0, bound: 0.0, sense: Sense::Le });
            let mut up = vec![0.0; n_gen];
            up[g] = -v[0];
            out.push(LinearRecord { quantity: Quantity::ReserveUp(g), alpha_coeff: up, offset: 0.0, bound: 0.0, sense: Sense::Le });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasserstein::sqrt_2x2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N) evaluation of the inner objective.
    fn h_direct(sigma: f64, lambda: f64, eps: f64, d: &[f64]) -> f64 {
        lambda * eps + d.iter().map(|&dk| (1.0 - lambda * (sigma - dk).max(0.0)).max(0.0)).sum::<f64>() / d.len() as f64
    }

    #[test]
    fn zero_radius_is_empirical_frequency() {
        let d = [0.5, 1.5];
        assert!((worst_case_violation(1.0, &d, 0.0) - 0.5).abs() < 1e-8);
        assert!(worst_case_violation(2.0, &d, 0.0).abs() < 1e-8);
    }

    #[test]
    fn fast_evaluation_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..4.0)).collect();
        let s = SortedDistances::new(&d);
        for _ in 0..500 {
            let sigma = rng.gen_range(0.0..5.0);
            let lambda = rng.gen_range(0.0..50.0);
            let eps = rng.gen_range(0.0..0.5);
            assert!((s.h(sigma, lambda, eps) - h_direct(sigma, lambda, eps, &d)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_oracle_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..3.0)).collect();
        let got = worst_case_violation(1.7, &d, 0.1);
        let mut best = f64::INFINITY;
        let mut l = 0.0;
        while l <= 100.0 {
            best = best.min(h_direct(1.7, l, 0.1, &d));
            l += 1e-4;
        }
        assert!((got - best).abs() < 1e-6, "{got} vs {best}");
    }

    #[test]
    fn trivial_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..3.0f64).abs()).collect();
        assert_eq!(min_sigma(&d, 0.3, 1.0, 10.0).unwrap().sigma, 0.0);
        assert!(min_sigma(&d, 1.5, 0.05, 10.0).unwrap_err().is_infeasible());
    }

    #[test]
    fn zero_radius_order_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..3.0)).collect();
        let r = min_sigma(&d, 0.0, 0.05, 10.0).unwrap();
        let mut s = d.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let q = s[(0.95 * 1000.0f64).ceil() as usize - 1];
        assert!((r.sigma - q).abs() < 1e-3, "{} vs {q}", r.sigma);
    }

    #[test]
    fn uncertainty_set_examples() {
        let one = build_uncertainty_set(2.0, 1, &[0.0, 0.0], &[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(one.vertices, vec![[-2.0, 0.0], [2.0, 0.0]]);
        let two = build_uncertainty_set(1.0, 2, &[1.0, 0.0], &[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(two.vertices, vec![[0.0, -1.0], [0.0, 1.0], [2.0, -1.0], [2.0, 1.0]]);
        let cov = [[2.0, 0.6], [0.6, 0.5]];
        let (sq, isq) = sqrt_2x2(&cov);
        let mu = [0.3, -0.2];
        for v in build_uncertainty_set(1.7, 2, &mu, &sq).vertices {
            let x = [v[0] - mu[0], v[1] - mu[1]];
            let z = [isq[0][0] * x[0] + isq[0][1] * x[1], isq[1][0] * x[0] + isq[1][1] * x[1]];
            assert!((z[0].abs().max(z[1].abs()) - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn records_collapse_without_uncertainty() {
        let recs = emit_robust_constraints(Quantity::Voltage(3), &[0.1, 0.2], &UncertaintySet::origin(2), 0.94, 1.06);
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.offset, 0.0);
            assert!(r.alpha_coeff.iter().all(|&c| c == 0.0));
        }
        assert!(recs[0].violation(1.0, &[0.5, 0.5]) < 0.0);
        assert!(recs[1].violation(0.9, &[0.5, 0.5]) > 0.0);
    }

    #[test]
    fn symmetric_reserve_records() {
        let set = UncertaintySet { dim: 1, vertices: vec![[-0.3, 0.0], [0.3, 0.0]] };
        let recs = emit_reserve_constraints(2, &set);
        // With a = 0.3 the binding records read 0.3 α_g <= r_dn and 0.3 α_g <= r_up.
        let alpha = [0.4, 0.6];
        let worst_dn = recs
            .iter()
            .filter(|r| r.quantity == Quantity::ReserveDown(1))
            .map(|r| r.violation(0.0, &alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((worst_dn - 0.18).abs() < 1e-15);
        let worst_up = recs
            .iter()
            .filter(|r| r.quantity == Quantity::ReserveUp(0))
            .map(|r| r.violation(0.0, &alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((worst_up - 0.12).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn convex_in_lambda(d in proptest::collection::vec(0.0f64..4.0, 1..80),
                            sigma in 0.0f64..5.0, eps in 0.0f64..0.5,
                            l1 in 0.0f64..30.0, l2 in 0.0f64..30.0, t in 0.0f64..1.0) {
            let s = SortedDistances::new(&d);
            let mid = t * l1 + (1.0 - t) * l2;
            prop_assert!(s.h(sigma, mid, eps) <= t * s.h(sigma, l1, eps) + (1.0 - t) * s.h(sigma, l2, eps) + 1e-12);
        }

        #[test]
        fn monotone_in_sigma_and_eps(d in proptest::collection::vec(0.0f64..4.0, 1..80),
                                     sigma in 0.0f64..4.0, ds in 0.0f64..1.0,
                                     eps in 0.0f64..0.3, de in 0.0f64..0.3) {
            let s = SortedDistances::new(&d);
            let base = s.violation(sigma, eps).0;
            prop_assert!(s.violation(sigma + ds, eps).0 <= base + 1e-9);
            prop_assert!(s.violation(sigma, eps + de).0 >= base - 1e-9);
        }

        #[test]
        fn certified_side(d in proptest::collection::vec(0.0f64..4.0, 20..200),
                          eps in 0.0f64..0.1, rho in 0.02f64..0.3) {
            if let Ok(r) = min_sigma(&d, eps, rho, 10.0) {
                let s = SortedDistances::new(&d);
                prop_assert!(s.violation(r.sigma, eps).0 <= rho + 1e-9);
                if r.sigma > 0.0 {
                    prop_assert!(s.violation((r.sigma - 2e-4).max(0.0), eps).0 > rho);
                }
            }
        }
    }
}
