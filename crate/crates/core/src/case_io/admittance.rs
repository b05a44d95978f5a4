use super::Network;
use crate::linalg::Matrix;
use faer::Mat;

/// Two-port π-model admittances of one branch, real and imaginary parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchCoefficients {
    pub gff: f64,
    pub bff: f64,
    pub gft: f64,
    pub bft: f64,
    pub gtf: f64,
    pub btf: f64,
    pub gtt: f64,
    pub btt: f64,
}

/// Bus admittance matrix and the derived structures used by the flow models.
#[derive(Debug, Clone)]
pub struct AdmittanceSet {
    pub g: Matrix,
    pub b: Matrix,
    /// Susceptance of the series elements only: no charging, no shunts, unit taps.
    pub b_prime: Matrix,
    /// Line-incidence weighted conductance/susceptance, one row per branch.
    pub gl: Matrix,
    pub bl: Matrix,
    pub branches: Vec<BranchCoefficients>,
    pub branch_ends: Vec<(usize, usize)>,
    /// Sparse rows of `Y`: for each bus the list `(j, G_ij, B_ij)` including `j = i`.
    pub rows: Vec<Vec<(usize, f64, f64)>>,
}

fn series(r: f64, x: f64) -> (f64, f64) {
    let d = r * r + x * x;
    (r / d, -x / d)
}

pub fn build_admittance(net: &Network) -> AdmittanceSet {
    let n = net.n_buses();
    let nl = net.branches.len();
    let mut g = Mat::<f64>::zeros(n, n);
    let mut b = Mat::<f64>::zeros(n, n);
    let mut bp = Mat::<f64>::zeros(n, n);
    let mut gl = Mat::<f64>::zeros(nl, n);
    let mut bl = Mat::<f64>::zeros(nl, n);
    let mut coeffs = Vec::with_capacity(nl);

    for (k, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            coeffs.push(BranchCoefficients::default());
            continue;
        }
        let (gs, bs) = series(br.r, br.x);
        let t = br.tap;
        let c = BranchCoefficients {
            gff: gs / (t * t),
            bff: (bs + 0.5 * br.b) / (t * t),
            gft: -gs / t,
            bft: -bs / t,
            gtf: -gs / t,
            btf: -bs / t,
            gtt: gs,
            btt: bs + 0.5 * br.b,
        };
        let (i, j) = (br.from, br.to);
        g[(i, i)] += c.gff;
        b[(i, i)] += c.bff;
        g[(i, j)] += c.gft;
        b[(i, j)] += c.bft;
        g[(j, i)] += c.gtf;
        b[(j, i)] += c.btf;
        g[(j, j)] += c.gtt;
        b[(j, j)] += c.btt;

        bp[(i, i)] += bs;
        bp[(j, j)] += bs;
        bp[(i, j)] -= bs;
        bp[(j, i)] -= bs;

        gl[(k, i)] = c.gft;
        gl[(k, j)] = -c.gft;
        bl[(k, i)] = c.bft;
        bl[(k, j)] = -c.bft;
        coeffs.push(c);
    }
    for (i, bus) in net.buses.iter().enumerate() {
        g[(i, i)] += bus.g_shunt;
        b[(i, i)] += bus.b_shunt;
    }

    let mut rows = vec![Vec::new(); n];
    for (i, row) in rows.iter_mut().enumerate() {
        for j in 0..n {
            if j == i || g[(i, j)] != 0.0 || b[(i, j)] != 0.0 {
                row.push((j, g[(i, j)], b[(i, j)]));
            }
        }
    }
    AdmittanceSet {
        g,
        b,
        b_prime: bp,
        gl,
        bl,
        branches: coeffs,
        branch_ends: net.branches.iter().map(|br| (br.from, br.to)).collect(),
        rows,
    }
}
