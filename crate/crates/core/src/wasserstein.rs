//! Empirical ambiguity sets: sample standardization, support estimation, the
//! light-tail constant `C` and the Wasserstein radius.
//!
//! Sample sets here have dimension one or two: the total forecast error, or
//! the total error paired with one monitored quantity's direct response.

use crate::error::{Error, Result};

/// 2x2 matrix (only the leading `m x m` block is used).
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone)]
pub struct SampleSet {
    /// `m` columns of `N` values each.
    pub columns: Vec<Vec<f64>>,
    pub mean: [f64; 2],
    /// Regularized sample covariance.
    pub cov: Mat2,
    pub sqrt_cov: Mat2,
    pub inv_sqrt_cov: Mat2,
    /// `d_k = ||Σ^{-1/2}(ξ_k - μ)||_∞`.
    pub d: Vec<f64>,
}

/// Eigen-decomposition based square root and inverse square root of a
/// symmetric positive definite 2x2 matrix.
pub fn sqrt_2x2(a: &Mat2) -> (Mat2, Mat2) {
    let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
    let mid = 0.5 * (p + r);
    let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    let (l1, l2) = (mid + rad, (mid - rad).max(0.0));
    // Unit eigenvector of l1.
    let (c, s) = if q.abs() > 1e-300 {
        let (x, y) = (l1 - r, q);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if p >= r {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let build = |f1: f64, f2: f64| -> Mat2 {
        [
            [f1 * c * c + f2 * s * s, (f1 - f2) * c * s],
            [(f1 - f2) * c * s, f1 * s * s + f2 * c * c],
        ]
    };
    let inv = |l: f64| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 };
    (build(l1.sqrt(), l2.sqrt()), build(inv(l1), inv(l2)))
}

fn apply(m: &Mat2, x: &[f64; 2], dim: usize) -> [f64; 2] {
    if dim == 1 {
        [m[0][0] * x[0], 0.0]
    } else {
        [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]]
    }
}

impl SampleSet {
    /// Build from one or two columns of equal length `N >= 2`.
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let m = columns.len();
        if !(1..=2).contains(&m) {
            return Err(Error::Input(format!("sample sets must be 1- or 2-dimensional, got {m}")));
        }
        let n = columns[0].len();
        if n < 2 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::Input("sample set needs at least two samples of equal length".into()));
        }
        let mut mean = [0.0; 2];
        for (a, col) in columns.iter().enumerate() {
            mean[a] = col.iter().sum::<f64>() / n as f64;
        }
        let mut cov = [[0.0; 2]; 2];
        for a in 0..m {
            for b in a..m {
                let s: f64 = columns[a].iter().zip(&columns[b]).map(|(x, y)| (x - mean[a]) * (y - mean[b])).sum();
                cov[a][b] = s / (n - 1) as f64;
                cov[b][a] = cov[a][b];
            }
        }
        if m == 1 {
            cov[1][1] = 1.0;
        }
        let trace: f64 = (0..m).map(|a| cov[a][a]).sum();
        let delta = if trace > 0.0 { 1e-8 * trace / m as f64 } else { 1e-12 };
        // Only near-singular covariances are shifted, so well-conditioned sets
        // standardize exactly.
        let min_eig = if m == 1 {
            cov[0][0]
        } else {
            let half = 0.5 * (cov[0][0] - cov[1][1]);
            0.5 * (cov[0][0] + cov[1][1]) - (half * half + cov[0][1] * cov[0][1]).sqrt()
        };
        if min_eig < delta {
            for a in 0..m {
                cov[a][a] += delta;
            }
        }
        let (sqrt_cov, inv_sqrt_cov) = if m == 1 {
            let s = cov[0][0].sqrt();
            ([[s, 0.0], [0.0, 1.0]], [[1.0 / s, 0.0], [0.0, 1.0]])
        } else {
            sqrt_2x2(&cov)
        };
        let mut d = Vec::with_capacity(n);
        for k in 0..n {
            let x = [columns[0][k] - mean[0], if m == 2 { columns[1][k] - mean[1] } else { 0.0 }];
            let z = apply(&inv_sqrt_cov, &x, m);
            d.push(if m == 1 { z[0].abs() } else { z[0].abs().max(z[1].abs()) });
        }
        Ok(Self { columns, mean, cov, sqrt_cov, inv_sqrt_cov, d })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, k: usize) -> [f64; 2] {
        [self.columns[0][k], if self.dim() == 2 { self.columns[1][k] } else { 0.0 }]
    }

    /// Standardized sample `Σ^{-1/2}(ξ_k - μ)`.
    pub fn standardized(&self, k: usize) -> [f64; 2] {
        let x = self.sample(k);
        apply(&self.inv_sqrt_cov, &[x[0] - self.mean[0], x[1] - self.mean[1]], self.dim())
    }

    /// Map a standardized point back to original coordinates.
    pub fn destandardize(&self, z: &[f64; 2]) -> [f64; 2] {
        let y = apply(&self.sqrt_cov, z, self.dim());
        [y[0] + self.mean[0], if self.dim() == 2 { y[1] + self.mean[1] } else { 0.0 }]
    }

    /// Support box of half-side `sigma_max` in standardized coordinates.
    pub fn estimate_support(&self, sigma_max: f64) -> BoxSupport {
        BoxSupport { dim: self.dim(), mean: self.mean, sqrt_cov: self.sqrt_cov, inv_sqrt_cov: self.inv_sqrt_cov, sigma_max }
    }

    /// ℓ1 diameter of the sample points.
    pub fn l1_diameter(&self) -> f64 {
        let range = |f: &dyn Fn(usize) -> f64| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..self.len() {
                let v = f(k);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        };
        if self.dim() == 1 {
            range(&|k| self.columns[0][k])
        } else {
            // In the plane ||a||_1 = max(|a1 + a2|, |a1 - a2|).
            let c = &self.columns;
            range(&|k| c[0][k] + c[1][k]).max(range(&|k| c[0][k] - c[1][k]))
        }
    }
}

/// Box `{ξ : |Σ^{-1/2}(ξ - μ)|_∞ <= σ_max}`.
#[derive(Debug, Clone)]
pub struct BoxSupport {
    pub dim: usize,
    pub mean: [f64; 2],
    pub sqrt_cov: Mat2,
    pub inv_sqrt_cov: Mat2,
    pub sigma_max: f64,
}

impl BoxSupport {
    /// Corners in original coordinates.
    pub fn vertices(&self) -> Vec<[f64; 2]> {
        box_vertices(self.dim, &self.mean, &self.sqrt_cov, self.sigma_max)
    }

    pub fn contains(&self, x: &[f64; 2], tol: f64) -> bool {
        let z = apply(&self.inv_sqrt_cov, &[x[0] - self.mean[0], x[1] - self.mean[1]], self.dim);
        (0..self.dim).all(|a| z[a].abs() <= self.sigma_max + tol)
    }
}

/// Vertices `Σ^{1/2} v + μ` of the standardized box of half-side `sigma`.
pub fn box_vertices(dim: usize, mean: &[f64; 2], sqrt_cov: &Mat2, sigma: f64) -> Vec<[f64; 2]> {
    let signs: &[[f64; 2]] = if dim == 1 {
        &[[-1.0, 0.0], [1.0, 0.0]]
    } else {
        &[[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]
    };
    signs
        .iter()
        .map(|s| {
            let y = apply(sqrt_cov, &[s[0] * sigma, s[1] * sigma], dim);
            [y[0] + mean[0], if dim == 2 { y[1] + mean[1] } else { 0.0 }]
        })
        .collect()
}

/// Objective of the constant's scalar minimization for squared distances `s`
/// (already divided by their scale), as a function of `ln α`.
fn c_objective(s: &[f64], log_alpha: f64) -> f64 {
    let alpha = log_alpha.exp();
    let max = s.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(alpha * x));
    let sum: f64 = s.iter().map(|&x| (alpha * x - max).exp()).sum();
    let log_mean = max + (sum / s.len() as f64).ln();
    (1.0 + log_mean) / (2.0 * alpha)
}

/// `C = 2 inf_α sqrt((1/(2α))(1 + ln mean_k exp(α ||ξ_k - μ||_1^2)))`.
pub fn estimate_c(samples: &SampleSet) -> f64 {
    let n = samples.len();
    let m = samples.dim();
    let mut s: Vec<f64> = (0..n)
        .map(|k| {
            let x = samples.sample(k);
            let l1: f64 = (0..m).map(|a| (x[a] - samples.mean[a]).abs()).sum();
            l1 * l1
        })
        .collect();
    let scale = s.iter().sum::<f64>() / n as f64;
    if !(scale > 0.0) {
        return 1e-12;
    }
    for x in &mut s {
        *x /= scale;
    }
    // Coarse scan on ln α, then golden-section refinement around the best point.
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let steps = 60;
    let h = (hi - lo) / steps as f64;
    let mut best = 0usize;
    let mut best_val = f64::INFINITY;
    for i in 0..=steps {
        let v = c_objective(&s, lo + h * i as f64);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let a = lo + h * best.saturating_sub(1) as f64;
    let b = (lo + h * (best + 1) as f64).min(hi);
    let (_, v) = golden_section(|t| c_objective(&s, t), a, b, 1e-10, 200);
    let val = v.min(best_val);
    (2.0 * val.sqrt() * scale.sqrt()).max(1e-12)
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
/// Returns the best point seen and its value.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc < fd { (c, fc) } else { (d, fd) };
    for _ in 0..max_iter {
        if (b - a).abs() <= tol * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("confidence level must lie in (0, 1), got {beta}")))
    }
}

/// `ε = C sqrt(ln(1/(1-β)) / N)`.
pub fn radius(n: usize, beta: f64, c: f64) -> Result<f64> {
    check_beta(beta)?;
    if n == 0 {
        return Err(Error::Input("radius needs at least one sample".into()));
    }
    Ok(c * ((1.0 / (1.0 - beta)).ln() / n as f64).sqrt())
}

/// Diameter-based radius `ε = D sqrt(2 ln(1/(1-β)) / N)`.
pub fn radius_from_diameter(n: usize, beta: f64, diameter: f64) -> Result<f64> {
    check_beta(beta)?;
    if n == 0 {
        return Err(Error::Input("radius needs at least one sample".into()));
    }
    Ok(diameter * (2.0 * (1.0 / (1.0 - beta)).ln() / n as f64).sqrt())
}

/// Wasserstein ball parameters for one projected sample set (ℓ1 transport cost).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AmbiguitySpec {
    pub epsilon: f64,
    pub beta: f64,
    pub c: f64,
    pub sigma_max: f64,
}

impl AmbiguitySpec {
    pub fn from_samples(samples: &SampleSet, beta: f64, sigma_max: f64) -> Result<Self> {
        let c = estimate_c(samples);
        Ok(Self { epsilon: radius(samples.len(), beta, c)?, beta, c, sigma_max })
    }
}

/// Historical forecast-error vectors, one row per observation and one column
/// per wind farm (per-unit).
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrors {
    n_farms: usize,
    n_rows: usize,
    data: Vec<f64>,
}

impl ForecastErrors {
    pub fn new(n_farms: usize, data: Vec<f64>) -> Result<Self> {
        if n_farms == 0 {
            if !data.is_empty() {
                return Err(Error::Input("error samples given for a network without wind farms".into()));
            }
            return Ok(Self { n_farms, n_rows: 0, data });
        }
        if data.len() % n_farms != 0 {
            return Err(Error::Input(format!("{} values do not split into rows of {n_farms}", data.len())));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite forecast error at row {}", bad / n_farms)));
        }
        Ok(Self { n_farms, n_rows: data.len() / n_farms, data })
    }

    /// `n` all-zero observations (used for networks without wind).
    pub fn zeros(n_farms: usize, n: usize) -> Self {
        Self { n_farms, n_rows: n, data: vec![0.0; n_farms * n] }
    }

    pub fn from_rows(n_farms: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(k) = rows.iter().position(|r| r.len() != n_farms) {
            return Err(Error::Input(format!("row {k} has {} values, expected {n_farms}", rows[k].len())));
        }
        let mut s = Self::new(n_farms, rows.concat())?;
        s.n_rows = rows.len();
        Ok(s)
    }

    pub fn n_farms(&self) -> usize {
        self.n_farms
    }

    pub fn len(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_farms..(k + 1) * self.n_farms]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First `n` observations.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.n_rows);
        Self { n_farms: self.n_farms, n_rows: n, data: self.data[..n * self.n_farms].to_vec() }
    }

    /// Total error `1'ζ` of every observation.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.n_rows).map(|k| self.row(k).iter().sum()).collect()
    }

    /// `b'ζ` of every observation.
    pub fn project(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|k| self.row(k).iter().zip(b).map(|(z, c)| z * c).sum()).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_farms];
        for k in 0..self.n_rows {
            for (a, z) in m.iter_mut().zip(self.row(k)) {
                *a += z;
            }
        }
        let n = self.n_rows.max(1) as f64;
        m.iter().map(|a| a / n).collect()
    }

    /// Sample covariance with the `N - 1` denominator.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let m = self.mean();
        let w = self.n_farms;
        let mut c = vec![vec![0.0; w]; w];
        for k in 0..self.n_rows {
            let r = self.row(k);
            for a in 0..w {
                let da = r[a] - m[a];
                for b in a..w {
                    c[a][b] += da * (r[b] - m[b]);
                }
            }
        }
        let den = (self.n_rows.max(2) - 1) as f64;
        for a in 0..w {
            for b in a..w {
                c[a][b] /= den;
                c[b][a] = c[a][b];
            }
        }
        c
    }

    /// Hex SHA-256 of the shape and the little-endian bytes of every value.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.n_farms as u64).to_le_bytes());
        h.update((self.n_rows as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_2d(n: usize, rho: f64, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let x: f64 = nd.sample(&mut rng);
            let y: f64 = nd.sample(&mut rng);
            a.push(2.0 * x + 1.0);
            b.push(0.5 * (rho * x + (1.0 - rho * rho).sqrt() * y) - 3.0);
        }
        SampleSet::new(vec![a, b]).unwrap()
    }

    #[test]
    fn identity_standardization_support() {
        let mut col = vec![0.0; 1000];
        for (k, v) in col.iter_mut().enumerate() {
            *v = if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        // Unit sample variance up to the N/(N-1) factor.
        let n = col.len() as f64;
        let scale = ((n - 1.0) / n).sqrt();
        let col: Vec<f64> = col.iter().map(|x| x * scale).collect();
        let s = SampleSet::new(vec![col]).unwrap();
        let v = s.estimate_support(10.0).vertices();
        assert!((v[0][0] + 10.0).abs() < 1e-6 && (v[1][0] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn samples_inside_support_box() {
        let s = gaussian_2d(2000, 0.9, 1);
        let sup = s.estimate_support(10.0);
        for k in 0..s.len() {
            assert!(sup.contains(&s.sample(k), 1e-9));
        }
        let degenerate = s.estimate_support(0.0);
        for v in degenerate.vertices() {
            assert!((v[0] - s.mean[0]).abs() < 1e-15 && (v[1] - s.mean[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn standardized_moments() {
        let s = gaussian_2d(5000, 0.95, 2);
        let n = s.len();
        let z: Vec<[f64; 2]> = (0..n).map(|k| s.standardized(k)).collect();
        for a in 0..2 {
            let mean: f64 = z.iter().map(|v| v[a]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-8);
            for b in 0..2 {
                let c: f64 = z.iter().map(|v| v[a] * v[b]).sum::<f64>() / (n - 1) as f64;
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((c - target).abs() < 1e-8, "{a}{b}: {c}");
            }
        }
        for k in 0..n {
            let back = s.destandardize(&z[k]);
            let orig = s.sample(k);
            assert!((back[0] - orig[0]).abs() < 1e-10 && (back[1] - orig[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn two_point_constant() {
        let s = SampleSet::new(vec![vec![-1.0, 1.0]]).unwrap();
        let c = estimate_c(&s);
        assert!((c - 2f64.sqrt()).abs() / 2f64.sqrt() < 1e-6, "{c}");
    }

    #[test]
    fn constant_is_homogeneous_and_bounded_by_diameter() {
        let s = gaussian_2d(500, 0.3, 3);
        let c = estimate_c(&s);
        let scaled = SampleSet::new(s.columns.iter().map(|col| col.iter().map(|x| 3.5 * x).collect()).collect()).unwrap();
        assert!((estimate_c(&scaled) - 3.5 * c).abs() < 1e-6 * c);
        assert!(c <= 2f64.sqrt() * s.l1_diameter() + 1e-9);
    }

    #[test]
    fn radius_formulas() {
        assert!(radius(100, 1e-12, 2.0).unwrap() < 1e-5);
        let beta = 1.0 - (-1.0f64).exp();
        assert!((radius(100, beta, 2.0).unwrap() - 0.2).abs() < 1e-14);
        let r1 = radius(1000, 0.9, 1.7).unwrap();
        let r4 = radius(4000, 0.9, 1.7).unwrap();
        assert!((r4 - r1 / 2.0).abs() < 1e-15);
        assert!(radius(10, 1.0, 1.0).is_err());
        assert!(radius(10, 0.0, 1.0).is_err());
        assert!((radius_from_diameter(50, 0.9, 3.0).unwrap() - 3.0 * (2.0 * 10f64.ln() / 50.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn sqrt_of_diagonal_and_rotated() {
        let (r, ri) = sqrt_2x2(&[[4.0, 0.0], [0.0, 9.0]]);
        assert!((r[0][0] - 2.0).abs() < 1e-15 && (r[1][1] - 3.0).abs() < 1e-15 && r[0][1].abs() < 1e-15);
        assert!((ri[1][1] - 1.0 / 3.0).abs() < 1e-15);
        let a = [[2.0, 0.7], [0.7, 1.0]];
        let (r, _) = sqrt_2x2(&a);
        for i in 0..2 {
            for j in 0..2 {
                let v = r[i][0] * r[0][j] + r[i][1] * r[1][j];
                assert!((v - a[i][j]).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn radius_monotone(n in 1usize..10_000, beta in 0.01f64..0.98, c in 0.01f64..10.0) {
            let e = radius(n, beta, c).unwrap();
            prop_assert!(radius(n + 1, beta, c).unwrap() < e);
            prop_assert!(radius(n, beta + 0.01, c).unwrap() > e);
            prop_assert!(e >= 0.0);
        }

        #[test]
        fn constant_below_diameter_bound(vals in proptest::collection::vec(-5.0f64..5.0, 3..60)) {
            let s = SampleSet::new(vec![vals]).unwrap();
            if s.l1_diameter() > 1e-9 {
                prop_assert!(estimate_c(&s) <= 2f64.sqrt() * s.l1_diameter() + 1e-9);
            }
        }
    }

    #[test]
    fn forecast_error_moments_and_hash() {
        let rows = vec![vec![0.1, -0.2], vec![0.3, 0.0], vec![-0.1, 0.5]];
        let e = ForecastErrors::from_rows(2, &rows).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e.totals(), vec![0.1 - 0.2, 0.3, -0.1 + 0.5]);
        let m = e.mean();
        assert!((m[0] - 0.1).abs() < 1e-15);
        let c = e.covariance();
        let direct: f64 = rows.iter().map(|r| (r[0] - m[0]) * (r[1] - m[1])).sum::<f64>() / 2.0;
        assert!((c[0][1] - direct).abs() < 1e-15);
        assert_eq!(e.hash_hex(), ForecastErrors::from_rows(2, &rows).unwrap().hash_hex());
        assert_ne!(e.hash_hex(), e.head(2).hash_hex());
        assert!(ForecastErrors::new(2, vec![0.0; 3]).is_err());
    }
}
