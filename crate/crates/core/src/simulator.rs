//! Time-domain simulation of the full dynamic-phasor microgrid: inverter
//! angle, frequency and voltage states plus every line and load current.
//!
//! Branch currents obey `L dI/dt = A^T V - (R + j w0 L) I` in a frame rotating
//! at `w0`. Passive-node voltages are never formed: currents are kept in the
//! null space of the passive-node incidence rows (Kirchhoff's current law),
//! which removes those voltages from the projected equations. Directions with
//! no inductance (purely resistive loads) are solved algebraically.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::network_model::{load_to_impedance, rotation, BusKind, DroopConversion, NetworkModel};
use crate::sweep::{boundary, BoundaryResult, Method, Problem, SimSetup, SweepAxis};

/// Droop percentages per inverter, in inverter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Droops {
    pub mp_percent: Vec<f64>,
    pub mq_percent: Vec<f64>,
}

impl Droops {
    pub fn from_model(model: &NetworkModel) -> Self {
        Self {
            mp_percent: model.mp_percent(),
            mq_percent: model.mq_percent(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "P_set")]
    PSet,
    #[serde(rename = "Q_set")]
    QSet,
    #[serde(rename = "load-scale")]
    LoadScale,
}

/// A step change. For setpoints `delta` is in per unit of the inverter
/// rating; for `load-scale` it is the fractional change of every load admittance at the bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub bus: String,
    pub quantity: Quantity,
    pub delta: f64,
    pub time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisturbanceScript {
    pub schema_version: u32,
    #[serde(default)]
    pub horizon: Option<f64>,
    pub disturbances: Vec<Disturbance>,
}

impl DisturbanceScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let d: Self = serde_json::from_str(&s).map_err(|e| GridError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        if d.schema_version != 1 {
            return Err(GridError::Validation(format!("unsupported disturbance schema {}", d.schema_version)));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimOptions {
    pub rtol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
    /// Minimum spacing of recorded samples; 0 records every accepted step.
    pub record_interval: f64,
    pub record_currents: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            h_init: 1e-5,
            h_max: 5e-3,
            h_min: 1e-12,
            max_steps: 2_000_000,
            record_interval: 0.0,
            record_currents: false,
        }
    }
}

/// Recorded simulation output. Per-inverter series are sample-major.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub inverter_ids: Vec<String>,
    pub omega0: f64,
    pub t: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    #[serde(skip)]
    pub currents: Vec<Vec<C64>>,
    pub diverged: bool,
    pub message: Option<String>,
    pub last_disturbance: f64,
    pub steps: usize,
    pub rejected: usize,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for q in ["delta", "omega", "v", "P", "Q"] {
            for id in &self.inverter_ids {
                header.push(format!("{q}_{id}"));
            }
        }
        let io = |e: csv::Error| GridError::Numerical(format!("csv: {e}"));
        out.write_record(&header).map_err(io)?;
        for (s, t) in self.t.iter().enumerate() {
            let mut row = vec![format!("{t:.9e}")];
            for series in [&self.delta, &self.omega, &self.v, &self.p, &self.q] {
                row.extend(series[s].iter().map(|x| format!("{x:.12e}")));
            }
            out.write_record(&row).map_err(io)?;
        }
        out.flush().map_err(|e| GridError::Numerical(format!("csv: {e}")))?;
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().unwrap_or(&0.0)
    }
}

/// Runs leaving these bands (per unit of nominal) are flagged as diverged.
pub const FREQUENCY_BAND: f64 = 0.05;
pub const VOLTAGE_BAND: (f64, f64) = (0.5, 1.5);

// ---------------------------------------------------------------------------
// Network structure
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct LoadBranch {
    bus: usize,
    branch: usize,
    r: f64,
    l: f64,
}

#[derive(Clone, Debug)]
struct Structure {
    n_inv: usize,
    n_br: usize,
    /// Inverter-node incidence transposed, `n_br x 3N`.
    e: DMatrix<C64>,
    r: DMatrix<f64>,
    l: DMatrix<f64>,
    /// Orthonormal basis of currents satisfying KCL at passive nodes.
    null: DMatrix<f64>,
    loads: Vec<LoadBranch>,
}

impl Structure {
    fn new(model: &NetworkModel) -> Result<Self> {
        let n_inv = model.n_inverters();
        let nb = model.buses.len();
        let mut node: Vec<[Option<usize>; 3]> = vec![[None; 3]; nb];
        for (k, iv) in model.inverters.iter().enumerate() {
            node[iv.bus] = [Some(3 * k), Some(3 * k + 1), Some(3 * k + 2)];
        }
        let mut n_nodes = 3 * n_inv;
        let mut touch = |bus: usize, p: usize, node: &mut Vec<[Option<usize>; 3]>| {
            if node[bus][p].is_none() {
                node[bus][p] = Some(n_nodes);
                n_nodes += 1;
            }
        };
        for line in &model.lines {
            for p in (0..3).filter(|&p| line.phases[p]) {
                touch(line.from, p, &mut node);
                touch(line.to, p, &mut node);
            }
        }
        for ld in &model.loads {
            for p in (0..3).filter(|&p| ld.phases[p].is_some()) {
                touch(ld.bus, p, &mut node);
            }
        }
        let n_br: usize = model.lines.iter().map(|l| l.phases.iter().filter(|&&p| p).count()).sum::<usize>()
            + model.loads.iter().map(|l| l.phases.iter().filter(|p| p.is_some()).count()).sum::<usize>();
        let mut a = DMatrix::<f64>::zeros(n_nodes, n_br);
        let mut r = DMatrix::zeros(n_br, n_br);
        let mut l = DMatrix::zeros(n_br, n_br);
        let mut br = 0;
        for line in &model.lines {
            let pp: Vec<usize> = (0..3).filter(|&p| line.phases[p]).collect();
            for (u, &pu) in pp.iter().enumerate() {
                a[(node[line.from][pu].unwrap(), br + u)] = 1.0;
                a[(node[line.to][pu].unwrap(), br + u)] = -1.0;
                for (w, &pw) in pp.iter().enumerate() {
                    r[(br + u, br + w)] = line.r[(pu, pw)];
                    l[(br + u, br + w)] = line.l[(pu, pw)];
                }
            }
            br += pp.len();
        }
        let mut loads = Vec::new();
        for ld in &model.loads {
            let z = load_to_impedance(ld, model.buses[ld.bus].nominal_voltage, model.omega0)?;
            for p in (0..3).filter(|&p| z.phases[p]) {
                a[(node[ld.bus][p].unwrap(), br)] = 1.0;
                r[(br, br)] = z.r[(p, p)];
                l[(br, br)] = z.l[(p, p)];
                loads.push(LoadBranch {
                    bus: ld.bus,
                    branch: br,
                    r: z.r[(p, p)],
                    l: z.l[(p, p)],
                });
                br += 1;
            }
        }
        let e = a.rows(0, 3 * n_inv).transpose().map(|v| C64::new(v, 0.0));
        let n_pass = n_nodes - 3 * n_inv;
        let null = if n_pass == 0 {
            DMatrix::identity(n_br, n_br)
        } else {
            let ap = a.rows(3 * n_inv, n_pass).into_owned();
            let gram = ap.transpose() * &ap;
            let eig = gram.symmetric_eigen();
            let cols: Vec<usize> = (0..n_br).filter(|&k| eig.eigenvalues[k].abs() < 1e-9).collect();
            if cols.is_empty() {
                return Err(GridError::Assembly("no current can flow from the inverters".into()));
            }
            eig.eigenvectors.select_columns(&cols)
        };
        debug_assert!(model.buses.iter().all(|b| b.kind == BusKind::Passive || node[model.buses.iter().position(|x| x.id == b.id).unwrap()][0].is_some()));
        Ok(Self {
            n_inv,
            n_br,
            e,
            r,
            l,
            null,
            loads,
        })
    }
}

/// Projected current equations for one set of branch impedances.
#[derive(Clone, Debug)]
struct Projection {
    wd: DMatrix<C64>,
    wa: DMatrix<C64>,
    /// `diag(1/mu) Wd^T E` and `diag(1/mu) Wd^T Z`.
    dd_e: DMatrix<C64>,
    dd_z: DMatrix<C64>,
    /// Algebraic part: `c_a = pa V - qa c_d`.
    pa: DMatrix<C64>,
    qa: DMatrix<C64>,
    z: DMatrix<C64>,
}

impl Projection {
    fn new(st: &Structure, r: &DMatrix<f64>, l: &DMatrix<f64>, omega0: f64) -> Result<Self> {
        let n = &st.null;
        let m = n.transpose() * l * n;
        let dim_m = m.nrows();
        let eig = m.symmetric_eigen();
        let mmax = eig.eigenvalues.amax();
        let thr = 1e-12 * mmax.max(f64::MIN_POSITIVE);
        if eig.eigenvalues.iter().any(|&mu| mu < -thr) {
            return Err(GridError::ModelRegime(
                "negative equivalent inductance (capacitive load) is not supported by the simulator".into(),
            ));
        }
        let dcols: Vec<usize> = (0..dim_m).filter(|&k| eig.eigenvalues[k] > thr).collect();
        let acols: Vec<usize> = (0..dim_m).filter(|&k| eig.eigenvalues[k] <= thr).collect();
        let to_c = |x: &DMatrix<f64>| x.map(|v| C64::new(v, 0.0));
        let wd = to_c(&(n * eig.eigenvectors.select_columns(&dcols)));
        let wa = to_c(&(n * eig.eigenvectors.select_columns(&acols)));
        let z = DMatrix::from_fn(st.n_br, st.n_br, |i, j| C64::new(r[(i, j)], omega0 * l[(i, j)]));
        let inv_mu = DMatrix::from_fn(dcols.len(), dcols.len(), |i, j| {
            if i == j {
                C64::new(1.0 / eig.eigenvalues[dcols[i]], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let wdt = wd.transpose();
        let dd_e = &inv_mu * &wdt * &st.e;
        let dd_z = &inv_mu * &wdt * &z;
        let (pa, qa) = if acols.is_empty() {
            (DMatrix::zeros(0, st.e.ncols()), DMatrix::zeros(0, dcols.len()))
        } else {
            let wat = wa.transpose();
            let s = (&wat * &z * &wa)
                .try_inverse()
                .ok_or_else(|| GridError::Assembly("algebraic current block is singular".into()))?;
            (&s * &wat * &st.e, &s * &wat * &z * &wd)
        };
        Ok(Self { wd, wa, dd_e, dd_z, pa, qa, z })
    }

    fn nd(&self) -> usize {
        self.wd.ncols()
    }
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Params {
    omega0: f64,
    tau: Vec<f64>,
    mp: Vec<f64>,
    mq: Vec<f64>,
    p_set: Vec<f64>,
    q_set: Vec<f64>,
    v_set: Vec<f64>,
}

/// A ready-to-integrate full model. States are
/// `[delta (N); omega (N); v (N); Re c; Im c]` with `c` the projected currents.
#[derive(Clone, Debug)]
pub struct Simulator {
    st: Structure,
    proj: Projection,
    params: Params,
    v_nom: Vec<f64>,
    ratings: Vec<f64>,
    inverter_bus: Vec<usize>,
    inverter_ids: Vec<String>,
    load_scale: Vec<f64>,
    n_buses: usize,
}

pub struct Outputs {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub currents: DVector<C64>,
}

impl Simulator {
    /// Builds the model and picks the flat operating point (all angles zero,
    /// nominal voltages) as equilibrium: unspecified `P_set` equals the power
    /// drawn there, unspecified `V_set` absorbs the reactive droop offset.
    pub fn new(model: &NetworkModel, droops: &Droops) -> Result<Self> {
        let n = model.n_inverters();
        if droops.mp_percent.len() != n || droops.mq_percent.len() != n {
            return Err(GridError::Domain("droop vector length differs from inverter count".into()));
        }
        let st = Structure::new(model)?;
        let proj = Projection::new(&st, &st.r, &st.l, model.omega0)?;
        let conv = DroopConversion::from_model(model);
        let v_nom = conv.v_nom.clone();
        let params = Params {
            omega0: model.omega0,
            tau: model.inverters.iter().map(|iv| iv.tau).collect(),
            mp: (0..n).map(|k| conv.mp_si(k, droops.mp_percent[k])).collect(),
            mq: (0..n).map(|k| conv.mq_si(k, droops.mq_percent[k])).collect(),
            p_set: vec![0.0; n],
            q_set: model.inverters.iter().map(|iv| iv.q_set).collect(),
            v_set: v_nom.clone(),
        };
        let mut sim = Self {
            st,
            proj,
            params,
            v_nom,
            ratings: model.inverters.iter().map(|iv| iv.rating).collect(),
            inverter_bus: model.inverters.iter().map(|iv| iv.bus).collect(),
            inverter_ids: model.inverter_ids(),
            load_scale: vec![1.0; model.buses.len()],
            n_buses: model.buses.len(),
        };
        let x0 = sim.flat_state();
        let out = sim.outputs(&x0);
        for (k, iv) in model.inverters.iter().enumerate() {
            sim.params.p_set[k] = iv.p_set.unwrap_or(out.p[k]);
            sim.params.v_set[k] = iv.v_set.unwrap_or(sim.v_nom[k] + sim.params.mq[k] * (out.q[k] - iv.q_set));
        }
        Ok(sim)
    }

    pub fn n_inverters(&self) -> usize {
        self.st.n_inv
    }

    pub fn dim(&self) -> usize {
        3 * self.st.n_inv + 2 * self.proj.nd()
    }

    pub fn inverter_ids(&self) -> &[String] {
        &self.inverter_ids
    }

    pub fn omega0(&self) -> f64 {
        self.params.omega0
    }

    pub fn v_nom(&self) -> &[f64] {
        &self.v_nom
    }

    fn voltages(&self, delta: &[f64], v: &[f64]) -> DVector<C64> {
        let t = rotation();
        let a = [C64::new(1.0, 0.0), t, t * t];
        DVector::from_fn(3 * self.st.n_inv, |i, _| C64::from_polar(v[i / 3], delta[i / 3]) * a[i % 3])
    }

    /// Quasi-static branch currents for given inverter voltages.
    fn steady_currents(&self, vv: &DVector<C64>) -> DVector<C64> {
        let n = self.st.null.map(|x| C64::new(x, 0.0));
        let nt = n.transpose();
        let lhs = &nt * &self.proj.z * &n;
        let c = lhs.lu().solve(&(&nt * (&self.st.e * vv))).expect("network impedance is nonsingular");
        n * c
    }

    fn state_from(&self, delta: &[f64], omega: &[f64], v: &[f64], currents: &DVector<C64>) -> DVector<f64> {
        let n = self.st.n_inv;
        let cd = self.proj.wd.transpose() * currents;
        let nd = cd.len();
        let mut x = DVector::zeros(3 * n + 2 * nd);
        for k in 0..n {
            x[k] = delta[k];
            x[n + k] = omega[k];
            x[2 * n + k] = v[k];
        }
        for j in 0..nd {
            x[3 * n + j] = cd[j].re;
            x[3 * n + nd + j] = cd[j].im;
        }
        x
    }

    /// All angles zero, nominal voltages and frequency, steady currents.
    pub fn flat_state(&self) -> DVector<f64> {
        let n = self.st.n_inv;
        let delta = vec![0.0; n];
        let vv = self.voltages(&delta, &self.v_nom);
        let cur = self.steady_currents(&vv);
        self.state_from(&delta, &vec![self.params.omega0; n], &self.v_nom, &cur)
    }

    /// Flat point shifted by angle `dphi` (rad), relative voltage `drho` and
    /// frequency `domega` (rad/s); currents start at their quasi-static value.
    pub fn perturbed_state(&self, dphi: &[f64], drho: &[f64], domega: &[f64]) -> DVector<f64> {
        let n = self.st.n_inv;
        let v: Vec<f64> = (0..n).map(|k| self.v_nom[k] * (1.0 + drho[k])).collect();
        let omega: Vec<f64> = (0..n).map(|k| self.params.omega0 + domega[k]).collect();
        let vv = self.voltages(dphi, &v);
        let cur = self.steady_currents(&vv);
        self.state_from(dphi, &omega, &v, &cur)
    }

    fn split<'a>(&self, x: &'a DVector<f64>) -> (&'a [f64], &'a [f64], &'a [f64], DVector<C64>) {
        let n = self.st.n_inv;
        let nd = self.proj.nd();
        let s = x.as_slice();
        let cd = DVector::from_fn(nd, |j, _| C64::new(s[3 * n + j], s[3 * n + nd + j]));
        (&s[0..n], &s[n..2 * n], &s[2 * n..3 * n], cd)
    }

    fn currents(&self, vv: &DVector<C64>, cd: &DVector<C64>) -> DVector<C64> {
        let mut i = &self.proj.wd * cd;
        if self.proj.wa.ncols() > 0 {
            let ca = &self.proj.pa * vv - &self.proj.qa * cd;
            i += &self.proj.wa * ca;
        }
        i
    }

    fn powers(&self, vv: &DVector<C64>, i: &DVector<C64>) -> (Vec<f64>, Vec<f64>) {
        let inj = self.st.e.transpose() * i;
        let n = self.st.n_inv;
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for r in 0..3 * n {
            let s = vv[r] * inj[r].conj();
            p[r / 3] += s.re;
            q[r / 3] += s.im;
        }
        (p, q)
    }

    pub fn outputs(&self, x: &DVector<f64>) -> Outputs {
        let (delta, _, v, cd) = self.split(x);
        let vv = self.voltages(delta, v);
        let i = self.currents(&vv, &cd);
        let (p, q) = self.powers(&vv, &i);
        Outputs { p, q, currents: i }
    }

    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.st.n_inv;
        let nd = self.proj.nd();
        let (delta, omega, v, cd) = self.split(x);
        let vv = self.voltages(delta, v);
        let i = self.currents(&vv, &cd);
        let cdot = &self.proj.dd_e * &vv - &self.proj.dd_z * &i;
        let (p, q) = self.powers(&vv, &i);
        let pr = &self.params;
        let mut dx = DVector::zeros(x.len());
        for k in 0..n {
            dx[k] = omega[k] - pr.omega0;
            dx[n + k] = (pr.omega0 - omega[k] + pr.mp[k] * (pr.p_set[k] - p[k])) / pr.tau[k];
            dx[2 * n + k] = (pr.v_set[k] - v[k] + pr.mq[k] * (pr.q_set[k] - q[k])) / pr.tau[k];
        }
        for j in 0..nd {
            dx[3 * n + j] = cdot[j].re;
            dx[3 * n + nd + j] = cdot[j].im;
        }
        dx
    }

    /// Error-weight scales: the response of each state group to a 1 p.u. setpoint step.
    fn scales(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.st.n_inv;
        let pr = &self.params;
        let s_w = (0..n).map(|k| pr.mp[k] * self.ratings[k]).fold(0.0, f64::max);
        let s_v = (0..n).map(|k| pr.mq[k] * self.ratings[k]).fold(0.0, f64::max);
        let vmax = self.v_nom.iter().copied().fold(0.0, f64::max);
        let ibase = self.ratings.iter().zip(&self.v_nom).map(|(s, v)| s / (3.0 * v)).fold(0.0, f64::max);
        let cs = ibase * (s_v / vmax).max(s_w / pr.omega0);
        DVector::from_fn(x.len(), |j, _| {
            if j < 2 * n {
                s_w
            } else if j < 3 * n {
                s_v
            } else {
                cs
            }
        })
    }

    fn apply(&mut self, d: &Disturbance, x: &DVector<f64>, bus_ids: &[String]) -> Result<DVector<f64>> {
        let bus = bus_ids
            .iter()
            .position(|b| *b == d.bus)
            .ok_or_else(|| GridError::Config(format!("disturbance names unknown bus '{}'", d.bus)))?;
        match d.quantity {
            Quantity::PSet | Quantity::QSet => {
                let k = self
                    .inverter_bus
                    .iter()
                    .position(|&b| b == bus)
                    .ok_or_else(|| GridError::Config(format!("bus '{}' has no inverter", d.bus)))?;
                let dv = d.delta * self.ratings[k];
                if d.quantity == Quantity::PSet {
                    self.params.p_set[k] += dv;
                } else {
                    self.params.q_set[k] += dv;
                }
                Ok(x.clone())
            }
            Quantity::LoadScale => {
                if !self.st.loads.iter().any(|lb| lb.bus == bus) {
                    return Err(GridError::Config(format!("bus '{}' has no load", d.bus)));
                }
                let (delta, omega, v, cd) = self.split(x);
                let vv = self.voltages(delta, v);
                let i = self.currents(&vv, &cd);
                let (delta, omega, v) = (delta.to_vec(), omega.to_vec(), v.to_vec());
                self.load_scale[bus] *= 1.0 + d.delta;
                let mut r = self.st.r.clone();
                let mut l = self.st.l.clone();
                for lb in &self.st.loads {
                    let s = self.load_scale[lb.bus];
                    r[(lb.branch, lb.branch)] = lb.r / s;
                    l[(lb.branch, lb.branch)] = lb.l / s;
                }
                self.proj = Projection::new(&self.st, &r, &l, self.params.omega0)?;
                Ok(self.state_from(&delta, &omega, &v, &i))
            }
        }
    }

    /// Integrate from `x0` at `t = 0` to `horizon`, applying `disturbances` at their times.
    pub fn run(&mut self, x0: DVector<f64>, disturbances: &[Disturbance], horizon: f64, bus_ids: &[String], opts: &SimOptions) -> Result<Trajectory> {
        if !(horizon > 0.0) {
            return Err(GridError::Domain("horizon must be positive".into()));
        }
        let mut events: Vec<Disturbance> = disturbances.to_vec();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(d) = events.iter().find(|d| d.time < 0.0 || d.time >= horizon) {
            return Err(GridError::Domain(format!("disturbance at t = {} is outside (0, {horizon})", d.time)));
        }
        let n = self.st.n_inv;
        let mut traj = Trajectory {
            inverter_ids: self.inverter_ids.clone(),
            omega0: self.params.omega0,
            t: Vec::new(),
            delta: Vec::new(),
            omega: Vec::new(),
            v: Vec::new(),
            p: Vec::new(),
            q: Vec::new(),
            currents: Vec::new(),
            diverged: false,
            message: None,
            last_disturbance: events.last().map_or(0.0, |d| d.time),
            steps: 0,
            rejected: 0,
        };
        let record = |sim: &Simulator, t: f64, x: &DVector<f64>, traj: &mut Trajectory, force: bool| {
            if !force && opts.record_interval > 0.0 {
                if let Some(&last) = traj.t.last() {
                    if t - last < opts.record_interval {
                        return;
                    }
                }
            }
            let o = sim.outputs(x);
            traj.t.push(t);
            traj.delta.push(x.rows(0, n).iter().copied().collect());
            traj.omega.push(x.rows(n, n).iter().copied().collect());
            traj.v.push(x.rows(2 * n, n).iter().copied().collect());
            traj.p.push(o.p);
            traj.q.push(o.q);
            if opts.record_currents {
                traj.currents.push(o.currents.iter().copied().collect());
            }
        };
        let mut x = x0;
        let mut t = 0.0;
        let mut h = opts.h_init;
        record(self, t, &x, &mut traj, true);
        let mut bounds: Vec<f64> = events.iter().map(|d| d.time).collect();
        bounds.push(horizon);
        let mut ev = 0;
        for &t_next in &bounds {
            if t_next > t {
                let mut integ = TrBdf2::new(opts, self.scales(&x)).with_origin(x.clone());
                let sys = &*self;
                let mut rec_buf = Vec::new();
                let res = integ.integrate(
                    |y: &DVector<f64>| sys.rhs(y),
                    t,
                    t_next,
                    x.clone(),
                    h,
                    |tt, y| {
                        rec_buf.push((tt, y.clone()));
                        let s = y.as_slice();
                        s.iter().all(|v| v.is_finite())
                            && s[2 * n..3 * n].iter().zip(&sys.v_nom).all(|(&v, &vn)| v > VOLTAGE_BAND.0 * vn && v < VOLTAGE_BAND.1 * vn)
                            && s[n..2 * n].iter().all(|&w| (w - sys.params.omega0).abs() < FREQUENCY_BAND * sys.params.omega0)
                    },
                );
                traj.steps += integ.steps;
                traj.rejected += integ.rejected;
                for (tt, y) in &rec_buf {
                    record(self, *tt, y, &mut traj, false);
                }
                match res {
                    Ok((xe, hl)) => {
                        x = xe;
                        h = hl;
                        t = t_next;
                    }
                    Err(reason) => {
                        traj.diverged = true;
                        traj.message = Some(reason);
                        return Ok(traj);
                    }
                }
            }
            while ev < events.len() && events[ev].time <= t_next && t_next < horizon {
                let ids: Vec<String> = bus_ids.to_vec();
                x = self.apply(&events[ev], &x, &ids)?;
                ev += 1;
            }
            h = h.min(opts.h_init.max(1e-4));
        }
        if traj.t.last() != Some(&t) {
            record(self, t, &x, &mut traj, true);
        }
        Ok(traj)
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }
}

/// Simulate `model` from its flat equilibrium.
pub fn simulate(model: &NetworkModel, droops: &Droops, disturbances: &[Disturbance], horizon: f64, opts: &SimOptions) -> Result<Trajectory> {
    let mut sim = Simulator::new(model, droops)?;
    let x0 = sim.flat_state();
    let ids: Vec<String> = model.buses.iter().map(|b| b.id.clone()).collect();
    sim.run(x0, disturbances, horizon, &ids, opts)
}

/// Stability boundary along `axis` found by classifying simulations.
/// Marginal runs are repeated once with twice the horizon.
pub fn sim_boundary(model: &NetworkModel, axis: &SweepAxis, tol: f64, setup: &SimSetup) -> Result<BoundaryResult> {
    let p = Problem::new(model.clone())?.with_sim(setup.clone());
    boundary(&p, axis, Method::Sim, tol)
}

// ---------------------------------------------------------------------------
// Integrator
// ---------------------------------------------------------------------------

/// TR-BDF2: a trapezoidal stage followed by BDF2, L-stable and stiffly
/// accurate, with the embedded error estimate filtered through the Newton matrix.
pub struct TrBdf2<'o> {
    opts: &'o SimOptions,
    scale: DVector<f64>,
    /// Errors are weighted against the distance from this state.
    origin: Option<DVector<f64>>,
    pub steps: usize,
    pub rejected: usize,
}

const GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

impl<'o> TrBdf2<'o> {
    pub fn new(opts: &'o SimOptions, scale: DVector<f64>) -> Self {
        Self {
            opts,
            scale,
            origin: None,
            steps: 0,
            rejected: 0,
        }
    }

    pub fn with_origin(mut self, origin: DVector<f64>) -> Self {
        self.origin = Some(origin);
        self
    }

    fn size(&self, x: &DVector<f64>, i: usize) -> f64 {
        match &self.origin {
            Some(o) => (x[i] - o[i]).abs(),
            None => x[i].abs(),
        }
    }

    fn wrms(&self, e: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let n = e.len() as f64;
        let s: f64 = (0..e.len())
            .map(|i| {
                let (ei, si) = (e[i], self.scale[i]);
                let w = self.opts.rtol * (self.size(x, i) + si);
                (ei / w).powi(2)
            })
            .sum();
        (s / n).sqrt()
    }

    fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(&self, f: &F, x: &DVector<f64>, fx: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for c in 0..n {
            let eps = 1e-7 * (self.size(x, c) + self.scale[c]) + 1e-9 * x[c].abs();
            xp[c] = x[c] + eps;
            let fp = f(&xp);
            j.column_mut(c).copy_from(&((fp - fx) / eps));
            xp[c] = x[c];
        }
        j
    }

    /// Advance from `t0` to `t1`. `accept` sees each accepted step and may stop
    /// the run by returning false. Returns the end state and last step size.
    pub fn integrate<F, A>(&mut self, f: F, t0: f64, t1: f64, x0: DVector<f64>, h0: f64, mut accept: A) -> std::result::Result<(DVector<f64>, f64), String>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
        A: FnMut(f64, &DVector<f64>) -> bool,
    {
        let d = GAMMA / 2.0;
        let c_g = 1.0 / (GAMMA * (2.0 - GAMMA));
        let c_n = (1.0 - GAMMA) * (1.0 - GAMMA) / (GAMMA * (2.0 - GAMMA));
        let k_err = (-3.0 * GAMMA * GAMMA + 4.0 * GAMMA - 2.0) / (12.0 * (2.0 - GAMMA));
        let dim = x0.len();
        let eye = DMatrix::<f64>::identity(dim, dim);

        let mut t = t0;
        let mut x = x0;
        let mut fx = f(&x);
        let mut h = h0.min(self.opts.h_max).min(t1 - t0);
        let mut jac = self.jacobian(&f, &x, &fx);
        let mut jac_fresh = true;
        let mut lu_h = f64::NAN;
        let mut lu = (&eye - &jac * (d * h)).lu();
        let mut just_rejected = false;

        while t < t1 {
            if self.steps + self.rejected > self.opts.max_steps {
                return Err(format!("step budget exhausted at t = {t:.6}"));
            }
            let last = t + h >= t1 * (1.0 - 1e-14) - 1e-300;
            if last {
                h = t1 - t;
            }
            if h < self.opts.h_min {
                return Err(format!("step size underflow at t = {t:.6}"));
            }
            if lu_h != h {
                lu = (&eye - &jac * (d * h)).lu();
                lu_h = h;
            }
            // Newton solve of y - d h f(y) = rhs
            let newton = |rhs: &DVector<f64>, guess: DVector<f64>, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>| -> Option<(DVector<f64>, DVector<f64>)> {
                let mut y = guess;
                let mut prev = f64::INFINITY;
                for it in 0..10 {
                    let fy = f(&y);
                    let res = rhs - (&y - &fy * (d * h));
                    let dy = lu.solve(&res)?;
                    y += &dy;
                    let nrm = self.wrms(&dy, &y);
                    if !nrm.is_finite() {
                        return None;
                    }
                    if nrm < 1e-3 || (it > 0 && nrm < 1e-2 && nrm / prev < 0.5) {
                        let fy = f(&y);
                        return Some((y, fy));
                    }
                    if it > 1 && nrm > 0.9 * prev {
                        return None;
                    }
                    prev = nrm;
                }
                None
            };
            let rhs1 = &x + &fx * (d * h);
            let stage1 = newton(&rhs1, &x + &fx * (GAMMA * h), &lu);
            let stage2 = stage1.and_then(|(yg, fg)| {
                let rhs2 = &yg * c_g - &x * c_n;
                let guess = &x + &fx * h;
                newton(&rhs2, guess, &lu).map(|(yn, fn_)| (yg, fg, yn, fn_))
            });
            let Some((_yg, fg, yn, fn_)) = stage2 else {
                self.rejected += 1;
                if !jac_fresh {
                    jac = self.jacobian(&f, &x, &fx);
                    jac_fresh = true;
                } else {
                    h *= 0.25;
                }
                lu_h = f64::NAN;
                continue;
            };
            let est = (&fx / GAMMA - &fg / (GAMMA * (1.0 - GAMMA)) + &fn_ / (1.0 - GAMMA)) * (2.0 * k_err * h);
            let err = lu.solve(&est).unwrap_or(est);
            let en = self.wrms(&err, &yn).max(1e-10);
            let factor = (0.8 * en.powf(-1.0 / 3.0)).clamp(0.2, 5.0);
            if en <= 1.0 {
                t = if last { t1 } else { t + h };
                x = yn;
                fx = fn_;
                self.steps += 1;
                jac_fresh = false;
                if !accept(t, &x) {
                    return Err(format!("state left the valid region at t = {t:.6}"));
                }
                if self.steps % 50 == 0 {
                    jac = self.jacobian(&f, &x, &fx);
                    jac_fresh = true;
                    lu_h = f64::NAN;
                }
                let grow = if just_rejected { factor.min(1.0) } else { factor };
                just_rejected = false;
                let hn = (h * grow).min(self.opts.h_max);
                if (hn / h - 1.0).abs() > 0.2 {
                    h = hn;
                }
            } else {
                self.rejected += 1;
                just_rejected = true;
                h *= factor.min(0.9);
            }
        }
        Ok((x, h))
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifyOptions {
    /// Fraction of the post-disturbance span inspected at the end.
    pub window_fraction: f64,
    /// Relative envelope change separating growth from decay.
    pub threshold: f64,
    pub hysteresis: f64,
    /// Deviations below this (rad/s) count as settled.
    pub floor: f64,
    pub min_span: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            window_fraction: 0.4,
            threshold: 0.02,
            hysteresis: 0.005,
            floor: 1e-7,
            min_span: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    pub verdict: Stability,
    /// Envelope of the second half of the window over the first.
    pub ratio: f64,
    pub early_envelope: f64,
    pub late_envelope: f64,
}

/// Envelope trend of frequency deviations over the end of the run.
pub fn classify(traj: &Trajectory, opts: &ClassifyOptions) -> Result<Classification> {
    if traj.diverged {
        return Ok(Classification {
            verdict: Stability::Unstable,
            ratio: f64::INFINITY,
            early_envelope: f64::NAN,
            late_envelope: f64::INFINITY,
        });
    }
    let t_end = traj.t_end();
    let span = t_end - traj.last_disturbance;
    if span < opts.min_span {
        return Err(GridError::Domain(format!(
            "classification needs {} s after the last disturbance, trajectory has {span:.3} s",
            opts.min_span
        )));
    }
    let w0 = t_end - opts.window_fraction * span;
    let mid = 0.5 * (w0 + t_end);
    let idx: Vec<usize> = (0..traj.t.len()).filter(|&s| traj.t[s] >= w0).collect();
    if idx.len() < 4 {
        return Err(GridError::Domain("too few samples in the classification window".into()));
    }
    let n = traj.inverter_ids.len();
    // time-weighted mean per inverter
    let mut mean = vec![0.0; n];
    let mut total = 0.0;
    for w in idx.windows(2) {
        let dt = traj.t[w[1]] - traj.t[w[0]];
        total += dt;
        for k in 0..n {
            mean[k] += 0.5 * dt * (traj.omega[w[0]][k] + traj.omega[w[1]][k]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= total.max(f64::MIN_POSITIVE));
    let dev = |s: usize| (0..n).map(|k| (traj.omega[s][k] - mean[k]).abs()).fold(0.0, f64::max);
    let early = idx.iter().filter(|&&s| traj.t[s] < mid).map(|&s| dev(s)).fold(0.0, f64::max);
    let late = idx.iter().filter(|&&s| traj.t[s] >= mid).map(|&s| dev(s)).fold(0.0, f64::max);
    let ratio = if early > 0.0 { late / early } else if late > 0.0 { f64::INFINITY } else { 0.0 };
    let verdict = if early.max(late) < opts.floor {
        Stability::Stable
    } else if ratio < 1.0 - opts.threshold - opts.hysteresis {
        Stability::Stable
    } else if ratio > 1.0 + opts.threshold + opts.hysteresis {
        Stability::Unstable
    } else {
        Stability::Marginal
    };
    Ok(Classification {
        verdict,
        ratio,
        early_envelope: early,
        late_envelope: late,
    })
}
