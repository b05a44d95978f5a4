//! Linear response of voltages, generator reactive outputs and line flows to
//! forecast errors under the affine AGC policy.
//!
//! Quantities are stacked as: state `s = (θ_S, θ_L, v_L)`, fixed values
//! `(θ_R, v_R, v_S)` and specified injections `y = (p_S, p_L, q_L)`. With the
//! injection sensitivities written as `Δy = -N Δs - H Δfixed` and
//! `Δq_RS = -L Δs - M Δfixed`, the response to a total error `ω = 1'ζ` is
//!
//! ```text
//! Δs    = ω N⁻¹ E α − N⁻¹ W ζ
//! Δq_RS = −L Δs
//! Δf    = J_f Δs
//! ```
//!
//! where `E` places each unit on its bus row and `W` places each farm's
//! active (and, at PQ buses, reactive) injection. The blocks come either from
//! the constant linear power flow model or from the exact AC Jacobian at a
//! reference operating point.

use crate::acgrid::{branch_flows, flow_jacobian, power_flow_jacobian, SystemState};
use crate::case_io::{AdmittanceSet, Network};
use crate::error::{Error, Result};
use crate::linalg::{mat_vec, DenseLu, Matrix};
use crate::opfcore::OperatingStrategy;
use faer::Mat;

/// Bus ordering `(R, S, L)` and its permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub reference: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
    /// `order[k]` is the bus at stacked position `k`.
    pub order: Vec<usize>,
}

impl Partition {
    pub fn from_network(net: &Network) -> Self {
        let p = &net.partition;
        let mut order = vec![p.reference];
        order.extend(&p.pv);
        order.extend(&p.pq);
        Self { reference: p.reference, pv: p.pv.clone(), pq: p.pq.clone(), order }
    }

    /// Inverse permutation: stacked position of every bus.
    pub fn position(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (k, &b) in self.order.iter().enumerate() {
            pos[b] = k;
        }
        pos
    }

    pub fn generator_buses(&self) -> Vec<usize> {
        self.order[..1 + self.pv.len()].to_vec()
    }
}

/// Where the injection sensitivities are taken.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseBasis {
    /// Exact AC Jacobian at the given state.
    OperatingPoint(SystemState),
    /// Constant linear power flow model.
    Lpf,
}

#[derive(Debug, Clone)]
pub struct ResponseMatrices {
    /// `|L| x n_g` and `|L| x n_w`.
    pub av: Matrix,
    pub bv: Matrix,
    /// `|R ∪ S| x n_g` and `|R ∪ S| x n_w`, rows ordered as [`Partition::generator_buses`].
    pub aq: Matrix,
    pub bq: Matrix,
    /// `n_l x n_g` and `n_l x n_w`.
    pub af: Matrix,
    pub bf: Matrix,
    /// `1 x n_g` and `1 x n_w`: active injection at the reference bus.
    pub ap: Matrix,
    pub bp: Matrix,
    pub n: Matrix,
    pub h: Matrix,
    pub l: Matrix,
    pub m: Matrix,
    pub partition: Partition,
    pub lpf_basis: bool,
}

/// Injection and flow sensitivities `(Pθ, Pv, Qθ, Qv, Fθ, Fv)`.
type Blocks = (Matrix, Matrix, Matrix, Matrix, Matrix, Matrix);

fn basis_blocks(adm: &AdmittanceSet, basis: &ResponseBasis) -> Blocks {
    match basis {
        ResponseBasis::OperatingPoint(state) => {
            let (pt, pv, qt, qv) = power_flow_jacobian(state, adm);
            let (ft, fv) = flow_jacobian(state, adm);
            (pt, pv, qt, qv, ft, fv)
        }
        ResponseBasis::Lpf => (
            -&adm.b_prime,
            adm.g.clone(),
            -&adm.g,
            -&adm.b,
            adm.bl.clone(),
            -&adm.gl,
        ),
    }
}

#[derive(Clone, Copy)]
enum Var {
    Theta(usize),
    Volt(usize),
}

#[derive(Clone, Copy)]
enum Inj {
    P(usize),
    Q(usize),
}

struct Layout {
    state: Vec<Var>,
    fixed: Vec<Var>,
    rows: Vec<Inj>,
}

impl Layout {
    fn new(part: &Partition) -> Self {
        let mut state: Vec<Var> = part.pv.iter().map(|&i| Var::Theta(i)).collect();
        state.extend(part.pq.iter().map(|&i| Var::Theta(i)));
        state.extend(part.pq.iter().map(|&i| Var::Volt(i)));
        let mut fixed = vec![Var::Theta(part.reference), Var::Volt(part.reference)];
        fixed.extend(part.pv.iter().map(|&i| Var::Volt(i)));
        let mut rows: Vec<Inj> = part.pv.iter().map(|&i| Inj::P(i)).collect();
        rows.extend(part.pq.iter().map(|&i| Inj::P(i)));
        rows.extend(part.pq.iter().map(|&i| Inj::Q(i)));
        Self { state, fixed, rows }
    }
}

fn entry(b: &Blocks, row: Inj, col: Var) -> f64 {
    match (row, col) {
        (Inj::P(i), Var::Theta(j)) => b.0[(i, j)],
        (Inj::P(i), Var::Volt(j)) => b.1[(i, j)],
        (Inj::Q(i), Var::Theta(j)) => b.2[(i, j)],
        (Inj::Q(i), Var::Volt(j)) => b.3[(i, j)],
    }
}

fn neg_block(b: &Blocks, rows: &[Inj], cols: &[Var]) -> Matrix {
    Mat::from_fn(rows.len(), cols.len(), |r, c| -entry(b, rows[r], cols[c]))
}

/// Solve the linear power flow `[p; q] = -[B' -G; G B][θ; v]` for the angles
/// at non-reference buses and magnitudes at PQ buses, with the reference angle
/// at zero and generator-bus magnitudes at `v_set`.
pub fn lpf_solve(net: &Network, adm: &AdmittanceSet, p: &[f64], q: &[f64], v_set: &[f64]) -> Result<SystemState> {
    let part = Partition::from_network(net);
    let lay = Layout::new(&part);
    let blocks = basis_blocks(adm, &ResponseBasis::Lpf);
    let n_mat = neg_block(&blocks, &lay.rows, &lay.state);
    let h_mat = neg_block(&blocks, &lay.rows, &lay.fixed);
    let lu = DenseLu::factor(&n_mat, "LPF matrix N").map_err(|e| singular_partition(e, &part, net))?;
    let fixed: Vec<f64> = lay
        .fixed
        .iter()
        .map(|v| match *v {
            Var::Theta(_) => 0.0,
            Var::Volt(i) => v_set[i],
        })
        .collect();
    let hf = mat_vec(&h_mat, &fixed);
    // y = -N s - H f  =>  s = N⁻¹(-y - H f)
    let rhs: Vec<f64> = lay
        .rows
        .iter()
        .zip(&hf)
        .map(|(r, h)| {
            let y = match *r {
                Inj::P(i) => p[i],
                Inj::Q(i) => q[i],
            };
            -y - h
        })
        .collect();
    let s = lu.solve_vec(&rhs);
    let mut state = SystemState::flat(net.n_buses());
    for v in &lay.fixed {
        if let Var::Volt(i) = *v {
            state.v[i] = v_set[i];
        }
    }
    for (k, v) in lay.state.iter().enumerate() {
        match *v {
            Var::Theta(i) => state.theta[i] = s[k],
            Var::Volt(i) => state.v[i] = s[k],
        }
    }
    Ok(state)
}

fn singular_partition(e: Error, part: &Partition, net: &Network) -> Error {
    match e {
        Error::Singular(msg) => Error::Singular(format!(
            "{msg}; partition R={{{}}}, |S|={}, |L|={}",
            net.buses[part.reference].id,
            part.pv.len(),
            part.pq.len()
        )),
        other => other,
    }
}

/// Compose the response matrices for the network's generators and wind farms.
pub fn build_response(net: &Network, adm: &AdmittanceSet, basis: &ResponseBasis) -> Result<ResponseMatrices> {
    let part = Partition::from_network(net);
    let lay = Layout::new(&part);
    let blocks = basis_blocks(adm, basis);
    let ns = lay.state.len();
    let n_mat = neg_block(&blocks, &lay.rows, &lay.state);
    let h_mat = neg_block(&blocks, &lay.rows, &lay.fixed);
    let gen_buses = part.generator_buses();
    let q_rows: Vec<Inj> = gen_buses.iter().map(|&i| Inj::Q(i)).collect();
    let l_mat = neg_block(&blocks, &q_rows, &lay.state);
    let m_mat = neg_block(&blocks, &q_rows, &lay.fixed);
    let lu = DenseLu::factor(&n_mat, "response matrix N").map_err(|e| singular_partition(e, &part, net))?;

    let mut row_of_p = vec![usize::MAX; net.n_buses()];
    let mut row_of_q = vec![usize::MAX; net.n_buses()];
    for (r, inj) in lay.rows.iter().enumerate() {
        match *inj {
            Inj::P(i) => row_of_p[i] = r,
            Inj::Q(i) => row_of_q[i] = r,
        }
    }
    let ng = net.n_generators();
    let nw = net.n_wind();
    let mut e = Mat::<f64>::zeros(ns, ng);
    for (g, gen) in net.generators.iter().enumerate() {
        if row_of_p[gen.bus] != usize::MAX {
            e[(row_of_p[gen.bus], g)] = 1.0;
        }
    }
    let mut w = Mat::<f64>::zeros(ns, nw);
    for (k, farm) in net.wind_farms.iter().enumerate() {
        if row_of_p[farm.bus] != usize::MAX {
            w[(row_of_p[farm.bus], k)] = -1.0;
        }
        if row_of_q[farm.bus] != usize::MAX {
            w[(row_of_q[farm.bus], k)] = -net.wind_q_ratio(k);
        }
    }
    // A_s = N⁻¹E, B_s = -N⁻¹W (the sign is folded into `w` above).
    let a_s = lu.solve_mat(&e);
    let b_s = lu.solve_mat(&w);

    let v_rows: Vec<usize> = (0..ns).filter(|&k| matches!(lay.state[k], Var::Volt(_))).collect();
    let pick = |m: &Matrix| Mat::from_fn(v_rows.len(), m.ncols(), |r, c| m[(v_rows[r], c)]);
    let aq = -(&l_mat * &a_s);
    let bq = -(&l_mat * &b_s);
    let nl = net.branches.len();
    let jf = Mat::from_fn(nl, ns, |k, c| match lay.state[c] {
        Var::Theta(j) => blocks.4[(k, j)],
        Var::Volt(j) => blocks.5[(k, j)],
    });
    let af = &jf * &a_s;
    let bf = &jf * &b_s;
    let jp = Mat::from_fn(1, ns, |_, c| entry(&blocks, Inj::P(part.reference), lay.state[c]));
    let ap = &jp * &a_s;
    let bp = &jp * &b_s;
    Ok(ResponseMatrices {
        av: pick(&a_s),
        bv: pick(&b_s),
        aq,
        bq,
        af,
        bf,
        ap,
        bp,
        n: n_mat,
        h: h_mat,
        l: l_mat,
        m: m_mat,
        partition: part,
        lpf_basis: matches!(basis, ResponseBasis::Lpf),
    })
}

/// Nominal values of the monitored quantities at a strategy (ζ = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct NominalQuantities {
    pub v_l: Vec<f64>,
    pub q_rs: Vec<f64>,
    pub f: Vec<f64>,
}

impl NominalQuantities {
    /// Voltages and reactive outputs from the strategy, flows from the exact AC map.
    pub fn from_strategy(net: &Network, adm: &AdmittanceSet, strategy: &OperatingStrategy) -> Self {
        let part = Partition::from_network(net);
        let q_bus = strategy.bus_q(net);
        Self {
            v_l: part.pq.iter().map(|&i| strategy.v[i]).collect(),
            q_rs: part.generator_buses().iter().map(|&i| q_bus[i]).collect(),
            f: branch_flows(&strategy.state(), adm),
        }
    }
}

/// Flows of the linear map `f = B^l θ - G^l v` (oriented from → to).
pub fn lpf_flows(adm: &AdmittanceSet, state: &SystemState) -> Vec<f64> {
    let a = mat_vec(&adm.bl, &state.theta);
    let b = mat_vec(&adm.gl, &state.v);
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub v_l: Vec<f64>,
    pub q_rs: Vec<f64>,
    pub f: Vec<f64>,
    /// Change of the active injection at the reference bus.
    pub dp_ref: f64,
}

/// Approximate quantities `x̃ = x + (1'ζ) A α + B ζ`.
pub fn predict_response(rm: &ResponseMatrices, nominal: &NominalQuantities, alpha: &[f64], zeta: &[f64]) -> Prediction {
    let omega: f64 = zeta.iter().sum();
    let comb = |nom: &[f64], a: &Matrix, b: &Matrix| -> Vec<f64> {
        let aa = mat_vec(a, alpha);
        let bz = mat_vec(b, zeta);
        nom.iter().zip(aa.iter().zip(&bz)).map(|(x, (p, q))| x + omega * p + q).collect()
    };
    Prediction {
        v_l: comb(&nominal.v_l, &rm.av, &rm.bv),
        q_rs: comb(&nominal.q_rs, &rm.aq, &rm.bq),
        f: comb(&nominal.f, &rm.af, &rm.bf),
        dp_ref: comb(&[0.0], &rm.ap, &rm.bp)[0],
    }
}

impl ResponseMatrices {
    /// CSV dump of one named matrix (`av`, `bv`, `aq`, `bq`, `af`, `bf`).
    pub fn to_csv(&self, which: &str) -> Option<String> {
        let m = match which {
            "av" => &self.av,
            "bv" => &self.bv,
            "aq" => &self.aq,
            "bq" => &self.bq,
            "af" => &self.af,
            "bf" => &self.bf,
            _ => return None,
        };
        let mut out = String::new();
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.12e}", m[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acgrid::{agc_avr_response, case_power_flow, NewtonOptions};
    use crate::case_io::{build_admittance, parse_matpower};
    use crate::linalg::submatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Network, AdmittanceSet, OperatingStrategy) {
        let net = parse_matpower(include_str!("../data/ieee14_wind.m")).unwrap();
        let adm = build_admittance(&net);
        let (state, pg, qg) = case_power_flow(&net, &adm).unwrap();
        let s = OperatingStrategy::from_state(&net, &state, pg, qg);
        (net, adm, s)
    }

    #[test]
    fn partition_permutation_is_bijection() {
        let (net, _, _) = setup();
        let p = Partition::from_network(&net);
        let pos = p.position();
        let mut seen = vec![false; net.n_buses()];
        for (k, &b) in p.order.iter().enumerate() {
            assert!(!seen[b]);
            seen[b] = true;
            assert_eq!(pos[b], k);
        }
    }

    #[test]
    fn lpf_null_input() {
        let text = crate::case_io::tests::two_bus_text().replace("2 1 50 10", "2 1 0 0");
        let net = parse_matpower(&text).unwrap();
        let adm = build_admittance(&net);
        let s = lpf_solve(&net, &adm, &[0.0; 2], &[0.0; 2], &[1.0; 2]).unwrap();
        assert_eq!(s, SystemState::flat(2));
    }

    #[test]
    fn lpf_matches_dense_oracle() {
        let (net, adm, _) = setup();
        let n = net.n_buses();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let vset: Vec<f64> = (0..n).map(|_| rng.gen_range(0.98..1.04)).collect();
        let s = lpf_solve(&net, &adm, &p, &q, &vset).unwrap();
        // Independent check: plug the solution into the full 2n x 2n linear model.
        for i in 0..n {
            let mut pi = 0.0;
            let mut qi = 0.0;
            for j in 0..n {
                pi += -adm.b_prime[(i, j)] * s.theta[j] + adm.g[(i, j)] * s.v[j];
                qi += -adm.g[(i, j)] * s.theta[j] - adm.b[(i, j)] * s.v[j];
            }
            if i != net.partition.reference {
                assert!((pi - p[i]).abs() < 1e-10);
            }
            if net.is_pq(i) {
                assert!((qi - q[i]).abs() < 1e-10);
            } else {
                assert_eq!(s.v[i], vset[i]);
            }
        }
    }

    #[test]
    fn lpf_nominal_voltages_close_to_newton() {
        let (net, adm, strategy) = setup();
        let ctx = crate::acgrid::response_context(&net, &strategy, &[0.0; 4]);
        let s = lpf_solve(&net, &adm, &ctx.p, &ctx.q, &strategy.v).unwrap();
        for &i in &net.partition.pq {
            assert!((s.v[i] - strategy.v[i]).abs() < 0.03, "bus {}", net.buses[i].id);
        }
    }

    #[test]
    fn lpf_blocks_reproduce_constant_matrices() {
        let (net, adm, _) = setup();
        let rm = build_response(&net, &adm, &ResponseBasis::Lpf).unwrap();
        let p = &rm.partition;
        let bp_ss = submatrix(&adm.b_prime, &p.pv, &p.pv);
        for i in 0..p.pv.len() {
            for j in 0..p.pv.len() {
                assert_eq!(rm.n[(i, j)], bp_ss[(i, j)]);
            }
        }
        let nl = p.pq.len();
        let ns = p.pv.len();
        // Lower-right block of N is B_LL.
        for i in 0..nl {
            for j in 0..nl {
                assert_eq!(rm.n[(ns + nl + i, ns + nl + j)], adm.b[(p.pq[i], p.pq[j])]);
            }
        }
    }

    #[test]
    fn zero_total_error_leaves_only_direct_term() {
        let (net, adm, strategy) = setup();
        let rm = build_response(&net, &adm, &ResponseBasis::OperatingPoint(strategy.state())).unwrap();
        let nom = NominalQuantities::from_strategy(&net, &adm, &strategy);
        let zeta = [0.05, -0.05, 0.0, 0.0];
        let pred = predict_response(&rm, &nom, &strategy.alpha, &zeta);
        let bz = mat_vec(&rm.bv, &zeta);
        for i in 0..bz.len() {
            assert!((pred.v_l[i] - nom.v_l[i] - bz[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn response_is_linear_and_alpha_split_exact() {
        let (net, adm, strategy) = setup();
        let rm = build_response(&net, &adm, &ResponseBasis::Lpf).unwrap();
        let nom = NominalQuantities::from_strategy(&net, &adm, &strategy);
        let zero = NominalQuantities { v_l: vec![0.0; nom.v_l.len()], q_rs: vec![0.0; nom.q_rs.len()], f: vec![0.0; nom.f.len()] };
        let z1 = [0.01, 0.0, 0.0, 0.0];
        let z2 = [0.02, 0.0, 0.0, 0.0];
        let a = predict_response(&rm, &zero, &strategy.alpha, &z1);
        let b = predict_response(&rm, &zero, &strategy.alpha, &z2);
        for (x, y) in a.f.iter().zip(&b.f) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        let mut alt = vec![0.0; net.n_generators()];
        alt[1] = 1.0;
        let zeta = [0.03, -0.01, 0.02, 0.01];
        let p1 = predict_response(&rm, &nom, &strategy.alpha, &zeta);
        let p2 = predict_response(&rm, &nom, &alt, &zeta);
        let omega: f64 = zeta.iter().sum();
        let diff: Vec<f64> = strategy.alpha.iter().zip(&alt).map(|(a, b)| a - b).collect();
        let expect = mat_vec(&rm.aq, &diff);
        for i in 0..expect.len() {
            assert!((p1.q_rs[i] - p2.q_rs[i] - omega * expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_error_is_second_order() {
        let (net, adm, strategy) = setup();
        let rm = build_response(&net, &adm, &ResponseBasis::OperatingPoint(strategy.state())).unwrap();
        let nom = NominalQuantities::from_strategy(&net, &adm, &strategy);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let dir: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = |scale: f64| {
                let zeta: Vec<f64> = dir.iter().map(|d| d * scale).collect();
                let exact = agc_avr_response(&net, &adm, &strategy, &zeta, NewtonOptions { tol: 1e-12, max_iter: 30 }).unwrap();
                let pred = predict_response(&rm, &nom, &strategy.alpha, &zeta);
                let mut e = 0.0f64;
                for (k, &i) in rm.partition.pq.iter().enumerate() {
                    e = e.max((pred.v_l[k] - exact.state.v[i]).abs());
                }
                e
            };
            let ratio = err(0.08) / err(0.04);
            assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn reference_injection_tracks_exact_response() {
        let (net, adm, strategy) = setup();
        let rm = build_response(&net, &adm, &ResponseBasis::OperatingPoint(strategy.state())).unwrap();
        let nom = NominalQuantities::from_strategy(&net, &adm, &strategy);
        let r = net.partition.reference;
        let p0 = crate::acgrid::injections(&strategy.state(), &adm).0[r];
        let err = |scale: f64| {
            let zeta = vec![scale, -0.5 * scale, 0.3 * scale, scale];
            let exact = agc_avr_response(&net, &adm, &strategy, &zeta, NewtonOptions { tol: 1e-12, max_iter: 30 }).unwrap();
            let dp = crate::acgrid::injections(&exact.state, &adm).0[r] - p0;
            (predict_response(&rm, &nom, &strategy.alpha, &zeta).dp_ref - dp).abs()
        };
        let ratio = err(0.08) / err(0.04);
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }
}
