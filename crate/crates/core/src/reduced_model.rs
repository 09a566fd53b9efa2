//! Linearized state space over `x = [phi; rho; phi_dot]` and the eigenvalue oracle.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{GridError, Result};
use crate::network_model::RealMatrixSet;

/// Spectral abscissa must be below `-MARGIN_TOL` for a stable verdict.
pub const MARGIN_TOL: f64 = 1e-6;
/// Relative size below which an eigenvalue counts as the rotational zero mode.
pub const ZERO_MODE_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub n: usize,
    /// Condition number of `tau Lambda_q - B'`.
    pub pivot_condition: f64,
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let (mx, mn) = (sv.max(), sv.min());
    if mn == 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

/// Solve the voltage equation for `rho_dot` and substitute it into the angle equation.
pub fn assemble_state_space(ms: &RealMatrixSet) -> Result<StateSpace> {
    let n = ms.n();
    let tau = ms.tau;
    let pivot = &ms.lambda_q * tau - &ms.bprime;
    let cond = condition(&pivot);
    let mq = pivot.clone().lu().try_inverse().filter(|_| cond < 1e14).ok_or_else(|| {
        GridError::ModelRegime(format!(
            "tau*Lambda_q - B' is singular (condition {cond:.3e}); increase Lambda_q (smaller Q-V droop)"
        ))
    })?;
    let r_phi = &mq * &ms.g;
    let r_rho = -(&mq * (&ms.lambda_q + &ms.b + &ms.btilde));
    let r_dot = -(&mq * &ms.gprime);

    let mp = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / (tau * ms.lambda_p[(i, i)]) } else { 0.0 });
    let d_phi = -(&mp * (&ms.b - &ms.gprime * &r_phi));
    let d_rho = -(&mp * (&ms.g + &ms.gtilde - &ms.gprime * &r_rho));
    let d_dot = -(&mp * (&ms.lambda_p - &ms.bprime - &ms.gprime * &r_dot));

    let mut a = DMatrix::zeros(3 * n, 3 * n);
    a.view_mut((0, 2 * n), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (n, n)).copy_from(&r_phi);
    a.view_mut((n, n), (n, n)).copy_from(&r_rho);
    a.view_mut((n, 2 * n), (n, n)).copy_from(&r_dot);
    a.view_mut((2 * n, 0), (n, n)).copy_from(&d_phi);
    a.view_mut((2 * n, n), (n, n)).copy_from(&d_rho);
    a.view_mut((2 * n, 2 * n), (n, n)).copy_from(&d_dot);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GridError::Numerical("non-finite entry in state matrix".into()));
    }
    Ok(StateSpace {
        a,
        n,
        pivot_condition: cond,
    })
}

/// State space with the first-order network terms removed.
pub fn zeroth_order_state_space(ms: &RealMatrixSet) -> Result<StateSpace> {
    assemble_state_space(&ms.zeroth_order())
}

/// Residuals of both linearized equations for a state `x` and its derivative.
pub fn model_residual(ms: &RealMatrixSet, x: &DVector<f64>, xdot: &DVector<f64>) -> (f64, f64) {
    let n = ms.n();
    let phi = x.rows(0, n);
    let rho = x.rows(n, n);
    let phid = x.rows(2 * n, n);
    let rhod = xdot.rows(n, n);
    let phidd = xdot.rows(2 * n, n);
    let tau = ms.tau;
    let r1 = &ms.lambda_p * phidd * tau + (&ms.lambda_p - &ms.bprime) * phid + &ms.b * phi + (&ms.g + &ms.gtilde) * rho
        - &ms.gprime * rhod;
    let r2 = (&ms.lambda_q * tau - &ms.bprime) * rhod + (&ms.lambda_q + &ms.b + &ms.btilde) * rho - &ms.g * phi
        + &ms.gprime * phid;
    (r1.norm(), r2.norm())
}

#[derive(Clone, Debug, Serialize)]
pub struct EigReport {
    /// Sorted by decreasing real part.
    #[serde(serialize_with = "ser_complex")]
    pub eigenvalues: Vec<C64>,
    pub spectral_abscissa: f64,
    pub stable: bool,
    /// `-spectral_abscissa`.
    pub margin: f64,
    pub zero_mode_excluded: bool,
}

fn ser_complex<S: serde::Serializer>(v: &[C64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for z in v {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

/// Eigenvalues of an arbitrary real matrix, with no zero-mode handling.
pub fn eigenvalues_of(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    let n = a.nrows();
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 200 * n.max(10))
        .ok_or_else(|| GridError::Numerical(format!("Schur iteration did not converge ({} iterations, n = {n})", 200 * n.max(10))))?;
    let mut ev: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    Ok(ev)
}

/// Stability report for a state space. A uniform angle shift `[1; 0; 0]` is
/// an exact null vector whenever `B 1 = G 1 = 0`; one eigenvalue is then dropped.
pub fn eigenvalues(ss: &StateSpace) -> Result<EigReport> {
    let ev = eigenvalues_of(&ss.a)?;
    let n = ss.n;
    let mut e = DVector::zeros(3 * n);
    e.rows_mut(0, n).fill(1.0 / (n as f64).sqrt());
    let anorm = ss.a.norm().max(1.0);
    let is_null = (&ss.a * &e).norm() <= ZERO_MODE_TOL * anorm;
    let mut kept = ev.clone();
    let mut excluded = false;
    if is_null {
        if let Some((k, z)) = ev.iter().enumerate().min_by(|x, y| x.1.norm().total_cmp(&y.1.norm())) {
            if z.norm() < ZERO_MODE_TOL * anorm {
                kept.remove(k);
                excluded = true;
            }
        }
    }
    let abscissa = kept.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(EigReport {
        eigenvalues: ev,
        spectral_abscissa: abscissa,
        stable: abscissa < -MARGIN_TOL,
        margin: -abscissa,
        zero_mode_excluded: excluded,
    })
}

/// Eigenvalue verdict straight from a matrix set.
pub fn eig_report(ms: &RealMatrixSet) -> Result<EigReport> {
    eigenvalues(&assemble_state_space(ms)?)
}

/// `||A v - lambda v|| / ||A||` for an eigenvector found by inverse iteration.
pub fn eigen_residual(a: &DMatrix<f64>, lambda: C64) -> f64 {
    let n = a.nrows();
    let ac = a.map(|v| C64::new(v, 0.0));
    let shift = lambda + C64::new(1e-10 * a.norm().max(1.0), 1e-10 * a.norm().max(1.0));
    let m = &ac - DMatrix::<C64>::identity(n, n) * shift;
    let lu = m.lu();
    let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + i as f64 * 0.1, 0.3));
    for _ in 0..3 {
        if let Some(w) = lu.solve(&v) {
            let nrm = w.norm();
            v = w / C64::new(nrm, 0.0);
        }
    }
    (&ac * &v - &v * lambda).norm() / a.norm().max(f64::MIN_POSITIVE)
}

/// First- and zeroth-order verdicts side by side.
#[derive(Clone, Debug, Serialize)]
pub struct OrderComparison {
    pub first_order_stable: bool,
    pub zeroth_order_stable: bool,
    pub first_order_abscissa: f64,
    pub zeroth_order_abscissa: f64,
    /// The two verdicts disagree.
    pub discrepancy: bool,
}

pub fn compare_orders(ms: &RealMatrixSet) -> Result<OrderComparison> {
    let f = eig_report(ms)?;
    let z = eigenvalues(&zeroth_order_state_space(ms)?)?;
    Ok(OrderComparison {
        first_order_stable: f.stable,
        zeroth_order_stable: z.stable,
        first_order_abscissa: f.spectral_abscissa,
        zeroth_order_abscissa: z.spectral_abscissa,
        discrepancy: f.stable != z.stable,
    })
}
