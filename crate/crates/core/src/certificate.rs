//! Pairwise sufficient stability conditions and the Lyapunov construction behind them.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GridError, Result};
use crate::network_model::RealMatrixSet;
use crate::reduced_model::StateSpace;

/// Relative tolerance of definiteness tests.
pub const PSD_REL_TOL: f64 = 1e-9;
/// Off-diagonal entries below this fraction of the largest one do not make neighbors.
pub const NEIGHBOR_REL_TOL: f64 = 1e-12;
pub const CONDITION_NAMES: [&str; 6] = ["C1", "C2", "C3", "C4", "C5", "C6"];

/// Smallest eigenvalue test. `tol` is absolute.
pub fn psd_check(m: &DMatrix<f64>, strict: bool, tol: f64) -> Result<(bool, f64)> {
    if !m.is_square() {
        return Err(GridError::Domain("definiteness test needs a square matrix".into()));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * m.norm().max(f64::MIN_POSITIVE) {
        return Err(GridError::Domain(format!("matrix is not symmetric (defect {asym:.3e})")));
    }
    let lmin = ((m + m.transpose()) * 0.5).symmetric_eigenvalues().min();
    let ok = if strict { lmin > tol } else { lmin >= -tol };
    Ok((ok, lmin))
}

fn min_eig2(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let h = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    h - r
}

fn norm2(m: &Matrix2<f64>) -> f64 {
    m.norm()
}

/// Neighbor lists of the inverter graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Topology {
    pub neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Nonzero off-diagonal entries of any network matrix make two inverters neighbors.
    pub fn from_matrix_set(ms: &RealMatrixSet) -> Self {
        let n = ms.n();
        let mats = [&ms.b, &ms.g, &ms.bprime, &ms.gprime];
        let scale: Vec<f64> = mats.iter().map(|m| m.amax()).collect();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&k| {
                        k != i && mats.iter().zip(&scale).any(|(m, s)| m[(i, k)].abs() > NEIGHBOR_REL_TOL * s)
                    })
                    .collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, k) in edges {
            if !neighbors[i].contains(&k) {
                neighbors[i].push(k);
                neighbors[k].push(i);
            }
        }
        neighbors.iter_mut().for_each(|v| v.sort_unstable());
        Self { neighbors }
    }

    /// Each unordered neighboring pair once, `i < k`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &k in nb {
                if i < k {
                    out.push((i, k));
                }
            }
        }
        out
    }

    pub fn are_neighbors(&self, i: usize, k: usize) -> bool {
        self.neighbors.get(i).is_some_and(|v| v.contains(&k))
    }
}

/// The 2x2 share of `X` assigned to the pair `(i, k)`.
pub fn pair_partition(x: &DMatrix<f64>, i: usize, k: usize, topo: &Topology) -> Result<Matrix2<f64>> {
    if !topo.are_neighbors(i, k) {
        return Err(GridError::Domain(format!("buses {i} and {k} are not neighbors")));
    }
    let side = |a: usize, b: usize| {
        let nb = &topo.neighbors[a];
        let s: f64 = nb.iter().map(|&j| x[(a, j)]).sum();
        (x[(a, a)] + s) / nb.len() as f64 - x[(a, b)]
    };
    Ok(Matrix2::new(side(i, k), x[(i, k)], x[(k, i)], side(k, i)))
}

/// `[X]_ik` placed at rows and columns `i, k` of an `n x n` zero matrix.
pub fn embed_pair(p: &Matrix2<f64>, i: usize, k: usize, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, i)] = p[(0, 0)];
    m[(i, k)] = p[(0, 1)];
    m[(k, i)] = p[(1, 0)];
    m[(k, k)] = p[(1, 1)];
    m
}

/// All eight partitions of one pair.
#[derive(Clone, Debug)]
pub struct PairPartition {
    pub i: usize,
    pub k: usize,
    pub n_i: usize,
    pub n_k: usize,
    pub lambda_p: Matrix2<f64>,
    pub lambda_q: Matrix2<f64>,
    pub b: Matrix2<f64>,
    pub g: Matrix2<f64>,
    pub btilde: Matrix2<f64>,
    pub gtilde: Matrix2<f64>,
    pub bprime: Matrix2<f64>,
    pub gprime: Matrix2<f64>,
}

impl PairPartition {
    pub fn new(ms: &RealMatrixSet, topo: &Topology, i: usize, k: usize) -> Result<Self> {
        let p = |x: &DMatrix<f64>| pair_partition(x, i, k, topo);
        Ok(Self {
            i,
            k,
            n_i: topo.neighbors[i].len(),
            n_k: topo.neighbors[k].len(),
            lambda_p: p(&ms.lambda_p)?,
            lambda_q: p(&ms.lambda_q)?,
            b: p(&ms.b)?,
            g: p(&ms.g)?,
            btilde: p(&ms.btilde)?,
            gtilde: p(&ms.gtilde)?,
            bprime: p(&ms.bprime)?,
            gprime: p(&ms.gprime)?,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionResult {
    pub name: String,
    pub strict: bool,
    /// Smallest eigenvalue of the tested 2x2 matrix.
    pub slack: f64,
    pub tol: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairCertificate {
    pub pair: (usize, usize),
    pub ids: (String, String),
    /// C1..C6 in order; C5 uses `B'`.
    pub conditions: Vec<ConditionResult>,
    /// C5 with `B` in place of `B'`, as it appears in the theorem statement.
    pub c5_with_b: ConditionResult,
    pub c5_forms_disagree: bool,
    pub satisfied: bool,
}

impl PairCertificate {
    pub fn min_slack(&self) -> f64 {
        self.conditions.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn first_violated(&self) -> Option<&str> {
        self.conditions.iter().find(|c| !c.holds).map(|c| c.name.as_str())
    }
}

fn cond(name: &str, m: &Matrix2<f64>, strict: bool, scale: f64) -> ConditionResult {
    let slack = min_eig2(m);
    let tol = PSD_REL_TOL * scale.max(norm2(m));
    let holds = if strict { slack > tol } else { slack >= -tol };
    ConditionResult {
        name: name.into(),
        strict,
        slack,
        tol,
        holds,
    }
}

/// Evaluate the six pairwise conditions for neighbors `(i, k)`.
pub fn check_pair(ms: &RealMatrixSet, topo: &Topology, i: usize, k: usize, ids: (String, String)) -> Result<PairCertificate> {
    let p = PairPartition::new(ms, topo, i, k)?;
    let tau = ms.tau;
    let n = |ms: &[&Matrix2<f64>]| ms.iter().map(|m| m.norm()).sum::<f64>();

    let m1 = p.g + p.gtilde + p.gprime / (2.0 * tau);
    let c1 = cond("C1", &m1, false, n(&[&p.g, &p.gtilde, &(p.gprime / (2.0 * tau))]));

    let m2 = p.lambda_p / 2.0 - p.bprime + p.b * (2.0 * tau);
    let c2 = cond("C2", &m2, true, n(&[&(p.lambda_p / 2.0), &p.bprime, &(p.b * (2.0 * tau))]));

    let m3 = p.lambda_p - p.bprime * 2.0 - p.gprime / 2.0 - p.g * tau - p.gtilde * tau;
    let c3 = cond("C3", &m3, false, n(&[&p.lambda_p, &(p.bprime * 2.0), &(p.gprime / 2.0), &(p.g * tau), &(p.gtilde * tau)]));

    let m4 = p.lambda_q + p.b + p.btilde - p.gtilde * 1.5 - p.gprime / (2.0 * tau) - p.g;
    let c4 = cond("C4", &m4, false, n(&[&p.lambda_q, &p.b, &p.btilde, &(p.gtilde * 1.5), &(p.gprime / (2.0 * tau)), &p.g]));

    let pivot = p.lambda_q - p.bprime / tau;
    let c5 = cond("C5", &pivot, true, n(&[&p.lambda_q, &(p.bprime / tau)]));
    let m5b = p.lambda_q - p.b / tau;
    let c5b = cond("C5", &m5b, true, n(&[&p.lambda_q, &(p.b / tau)]));

    let h = p.g + p.gprime / (2.0 * tau);
    let c6 = match pivot.try_inverse() {
        Some(inv) if c5.holds => {
            let schur = h * inv * h;
            let m6 = p.b * 2.0 - p.gtilde - schur;
            cond("C6", &m6, false, n(&[&(p.b * 2.0), &p.gtilde, &schur]))
        }
        _ => ConditionResult {
            name: "C6".into(),
            strict: false,
            slack: f64::NEG_INFINITY,
            tol: 0.0,
            holds: false,
        },
    };
    let conditions = vec![c1, c2, c3, c4, c5.clone(), c6];
    let satisfied = conditions.iter().all(|c| c.holds);
    Ok(PairCertificate {
        pair: (i, k),
        ids,
        c5_forms_disagree: c5.holds != c5b.holds,
        c5_with_b: c5b,
        conditions,
        satisfied,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateReport {
    pub pairs: Vec<PairCertificate>,
    pub certified: bool,
    pub violated: Vec<(String, String)>,
    pub min_slack: f64,
}

/// Check every neighboring pair.
pub fn check_network(ms: &RealMatrixSet, ids: &[String]) -> Result<CertificateReport> {
    let topo = Topology::from_matrix_set(ms);
    check_network_with(ms, &topo, ids)
}

pub fn check_network_with(ms: &RealMatrixSet, topo: &Topology, ids: &[String]) -> Result<CertificateReport> {
    let id = |i: usize| ids.get(i).cloned().unwrap_or_else(|| i.to_string());
    let pairs: Vec<PairCertificate> = topo
        .pairs()
        .into_par_iter()
        .map(|(i, k)| check_pair(ms, topo, i, k, (id(i), id(k))))
        .collect::<Result<_>>()?;
    let violated: Vec<_> = pairs.iter().filter(|p| !p.satisfied).map(|p| p.ids.clone()).collect();
    Ok(CertificateReport {
        certified: !pairs.is_empty() && violated.is_empty(),
        min_slack: pairs.iter().map(|p| p.min_slack()).fold(f64::INFINITY, f64::min),
        violated,
        pairs,
    })
}

/// Transformations and quadratic forms of the Lyapunov argument.
#[derive(Clone, Debug)]
pub struct LyapunovBundle {
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub pihat: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

fn blocks(rows: &[&[&DMatrix<f64>]], n: usize) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows[0].len();
    let mut m = DMatrix::zeros(r * n, c * n);
    for (bi, row) in rows.iter().enumerate() {
        for (bj, blk) in row.iter().enumerate() {
            m.view_mut((bi * n, bj * n), (n, n)).copy_from(*blk);
        }
    }
    m
}

/// `y = T1 x = [phi; rho; phi + 2 tau phi_dot]` and
/// `z = T2 x = [phi; tau rho_dot; rho; tau phi_dot]`.
pub fn build_lyapunov(ms: &RealMatrixSet) -> Result<LyapunovBundle> {
    let n = ms.n();
    let tau = ms.tau;
    let i = DMatrix::<f64>::identity(n, n);
    let z = DMatrix::<f64>::zeros(n, n);
    let gamma = (&ms.bprime / tau - &ms.lambda_q)
        .lu()
        .try_inverse()
        .ok_or_else(|| GridError::ModelRegime("B'/tau - Lambda_q is singular".into()))?;

    let t1 = blocks(&[&[&i, &z, &z], &[&z, &i, &z], &[&i, &z, &(&i * (2.0 * tau))]], n);
    let row2 = [
        -(&gamma * &ms.g),
        &gamma * (&ms.lambda_q + &ms.b + &ms.btilde),
        &gamma * &ms.gprime,
    ];
    let t2 = blocks(&[&[&i, &z, &z], &[&row2[0], &row2[1], &row2[2]], &[&z, &i, &z], &[&z, &z, &(&i * tau)]], n);

    let psi11 = &ms.lambda_p / 2.0 - &ms.bprime + &ms.b * (2.0 * tau);
    let psi22 = &ms.lambda_q * (3.0 * tau) - &ms.bprime + (&ms.b + &ms.btilde) * (2.0 * tau);
    let psi33 = &ms.lambda_p / 2.0;
    let psi = blocks(&[&[&psi11, &z, &z], &[&z, &psi22, &z], &[&z, &z, &psi33]], n);

    let p11 = ms.b.clone();
    let p12 = -(&ms.g + &ms.gprime / (2.0 * tau));
    let p13 = &ms.gtilde / 2.0;
    let p22 = &ms.lambda_q * 2.0 - &ms.bprime * (2.0 / tau);
    let p33 = &ms.lambda_q + &ms.b + &ms.btilde;
    let p34 = &ms.gprime / (2.0 * tau) + &ms.g + &ms.gtilde;
    let p44 = (&ms.lambda_p - &ms.bprime * 2.0) / tau;
    let pihat = blocks(
        &[&[&p11, &p12, &p13, &z], &[&p12, &p22, &z, &z], &[&p13, &z, &p33, &p34], &[&z, &z, &p34, &p44]],
        n,
    );
    let pi = blocks(
        &[
            &[&(&p11 - &p13), &p12, &z, &z],
            &[&p12, &p22, &z, &z],
            &[&z, &z, &(&p33 - &p13 - &p34), &z],
            &[&z, &z, &z, &(&p44 - &p34)],
        ],
        n,
    );
    Ok(LyapunovBundle { t1, t2, psi, pihat, pi, gamma })
}

/// Largest relative mismatch between `d/dt (y' Psi y)` along `x_dot = A x`
/// and `-2 z' Pihat z` over random states.
pub fn verify_lyapunov_identity<R: Rng>(ss: &StateSpace, lb: &LyapunovBundle, samples: usize, rng: &mut R) -> f64 {
    let dim = ss.a.nrows();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        worst = worst.max(lyapunov_residual(ss, lb, &x));
    }
    worst
}

pub fn lyapunov_residual(ss: &StateSpace, lb: &LyapunovBundle, x: &DVector<f64>) -> f64 {
    let y = &lb.t1 * x;
    let ydot = &lb.t1 * (&ss.a * x);
    let z = &lb.t2 * x;
    let lhs = 2.0 * y.dot(&(&lb.psi * &ydot));
    let rhs = -2.0 * z.dot(&(&lb.pihat * &z));
    let scale = 2.0 * y.norm() * lb.psi.norm() * ydot.norm() + 2.0 * z.norm_squared() * lb.pihat.norm();
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network_model::DroopConversion;
    use crate::reduced_model::assemble_state_space;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lap(y: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[y, -y, -y, y])
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn set(g: f64, gt: f64, gp: f64) -> RealMatrixSet {
        RealMatrixSet {
            b: lap(40.0),
            g: lap(g),
            btilde: diag(&[0.0, 0.0]),
            gtilde: diag(&[gt, gt]),
            bprime: lap(0.02),
            gprime: lap(gp),
            lambda_p: diag(&[10.0, 10.0]),
            lambda_q: diag(&[30.0, 30.0]),
            tau: 0.05,
            droop: DroopConversion {
                omega0: 1.0,
                s_base: vec![1.0; 2],
                v_nom: vec![1.0; 2],
            },
            warnings: vec![],
        }
    }

    #[test]
    fn psd_examples() {
        assert_eq!(psd_check(&DMatrix::identity(2, 2), false, 1e-12).unwrap(), (true, 1.0));
        let (ok, s) = psd_check(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), false, 1e-12).unwrap();
        assert!(!ok && (s + 1.0).abs() < 1e-12);
        assert!(psd_check(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), false, 1e-12).is_err());
    }

    #[test]
    fn partition_of_diagonal_two_bus() {
        let t = Topology::from_edges(2, &[(0, 1)]);
        let p = pair_partition(&diag(&[3.0, 5.0]), 0, 1, &t).unwrap();
        assert_eq!(p, Matrix2::new(3.0, 0.0, 0.0, 5.0));
    }

    #[test]
    fn partition_of_two_bus_laplacian() {
        let t = Topology::from_edges(2, &[(0, 1)]);
        let p = pair_partition(&lap(2.0), 0, 1, &t).unwrap();
        // (y + (-y))/1 - (-y) = y on the diagonal
        assert_eq!(p, Matrix2::new(2.0, -2.0, -2.0, 2.0));
    }

    #[test]
    fn non_neighbors_are_rejected() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]);
        assert!(pair_partition(&DMatrix::zeros(3, 3), 0, 2, &t).is_err());
    }

    #[test]
    fn star_partition_reconstructs() {
        let t = Topology::from_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        let x = DMatrix::from_row_slice(4, 4, &[4.0, -1.0, -2.0, 0.5, -1.0, 3.0, 0.0, 0.0, -2.0, 0.0, 7.0, 0.0, 0.5, 0.0, 0.0, 1.0]);
        let mut sum = DMatrix::zeros(4, 4);
        for (i, k) in t.pairs() {
            sum += embed_pair(&pair_partition(&x, i, k, &t).unwrap(), i, k, 4);
        }
        assert!((sum - x).norm() < 1e-14);
    }

    #[test]
    fn lossless_unloaded_pair_holds() {
        let ms = set(0.0, 0.0, 0.0);
        let t = Topology::from_matrix_set(&ms);
        let c = check_pair(&ms, &t, 0, 1, ("a".into(), "b".into())).unwrap();
        assert!(c.satisfied, "{:?}", c.conditions);
    }

    #[test]
    fn resistive_load_breaks_c6() {
        let ms = set(5.0, 1.0, 0.01);
        let t = Topology::from_matrix_set(&ms);
        let c = check_pair(&ms, &t, 0, 1, ("a".into(), "b".into())).unwrap();
        assert!(!c.conditions[5].holds);
    }

    #[test]
    fn lyapunov_identity_on_two_bus() {
        let ms = set(5.0, 1.0, 0.01);
        let ss = assemble_state_space(&ms).unwrap();
        let lb = build_lyapunov(&ms).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(verify_lyapunov_identity(&ss, &lb, 50, &mut rng) < 1e-10);
        assert_eq!(lyapunov_residual(&ss, &lb, &DVector::zeros(6)), 0.0);
    }
}
