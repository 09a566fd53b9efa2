//! Network descriptions, equivalent load impedances, three-phase admittance
//! pencils and their compression to one complex entry per inverter.
//!
//! Every admittance is affine in the Laplace variable, `Y(s) = Y0 + s Y1`,
//! obtained from a first-order Taylor expansion of `(R + jw0 L + sL)^-1`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const FEET_PER_MILE: f64 = 5280.0;
const SYM_TOL: f64 = 1e-9;

pub fn default_omega0() -> f64 {
    2.0 * PI * 60.0
}

/// Balanced rotation `t = exp(-j 2 pi / 3)`.
pub fn rotation() -> C64 {
    C64::from_polar(1.0, -2.0 * PI / 3.0)
}

pub type PhaseSet = [bool; 3];
pub const ALL_PHASES: PhaseSet = [true, true, true];

pub fn parse_phases(s: &str) -> Result<PhaseSet> {
    let mut out = [false; 3];
    for ch in s.chars() {
        let k = match ch.to_ascii_lowercase() {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            _ => return Err(GridError::Validation(format!("unknown phase '{ch}' in \"{s}\""))),
        };
        if out[k] {
            return Err(GridError::Validation(format!("phase '{ch}' repeated in \"{s}\"")));
        }
        out[k] = true;
    }
    if !out.iter().any(|&p| p) {
        return Err(GridError::Validation("empty phase set".into()));
    }
    Ok(out)
}

pub fn phases_to_string(p: &PhaseSet) -> String {
    "abc".chars().zip(p.iter()).filter(|(_, &on)| on).map(|(c, _)| c).collect()
}

fn present(p: &PhaseSet) -> Vec<usize> {
    (0..3).filter(|&k| p[k]).collect()
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Inverter,
    Passive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    /// Common apparent-power base for the droop conversion. Absent means
    /// each inverter uses its own rating.
    #[serde(default)]
    pub droop_base_va: Option<f64>,
    pub buses: Vec<BusFile>,
    #[serde(default)]
    pub lines: Vec<LineFile>,
    #[serde(default)]
    pub loads: Vec<LoadFile>,
    pub inverters: Vec<InverterFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BusFile {
    pub id: String,
    pub kind: BusKind,
    /// Line-to-neutral RMS volts.
    pub nominal_voltage: f64,
    #[serde(default = "abc")]
    pub phases: String,
}

fn abc() -> String {
    "abc".into()
}

/// A line is given either by explicit `r`/`l` matrices or by a `conductor`
/// name from the library. With `length_ft`, explicit matrices are per mile.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LineFile {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoadFile {
    pub bus: String,
    pub phases: BTreeMap<String, LoadPhaseFile>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoadPhaseFile {
    Pq {
        p: f64,
        #[serde(default)]
        q: f64,
    },
    Rl {
        r: f64,
        #[serde(default)]
        l: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverterFile {
    pub bus: String,
    pub rating: f64,
    pub mp_percent: f64,
    pub mq_percent: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_set: Option<f64>,
    #[serde(default)]
    pub q_set: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConductorFile {
    #[serde(default)]
    pub description: String,
    #[serde(default = "abc")]
    pub phases: String,
    /// Ohms per mile.
    pub r: [[f64; 3]; 3],
    /// Ohms per mile at the nominal frequency.
    pub x: [[f64; 3]; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConductorLibraryFile {
    pub schema_version: u32,
    #[serde(default)]
    pub units: String,
    pub conductors: BTreeMap<String, ConductorFile>,
}

// ---------------------------------------------------------------------------
// Validated model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BusSpec {
    pub id: String,
    pub kind: BusKind,
    pub nominal_voltage: f64,
    pub phases: PhaseSet,
}

#[derive(Clone, Debug)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    /// Ohms, zero outside `phases`.
    pub r: Matrix3<f64>,
    /// Henries, zero outside `phases`.
    pub l: Matrix3<f64>,
    pub phases: PhaseSet,
    pub conductor: Option<String>,
    pub length_ft: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LoadPhase {
    /// Watts and vars at nominal voltage.
    Pq { p: f64, q: f64 },
    /// Ohms and henries.
    Rl { r: f64, l: f64 },
}

#[derive(Clone, Debug)]
pub struct LoadSpec {
    pub bus: usize,
    pub phases: [Option<LoadPhase>; 3],
}

#[derive(Clone, Debug)]
pub struct InverterSpec {
    pub bus: usize,
    pub rating: f64,
    pub mp_percent: f64,
    pub mq_percent: f64,
    pub tau: f64,
    pub p_set: Option<f64>,
    pub q_set: f64,
    pub v_set: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DroopBase {
    /// Each inverter's own rating.
    OwnRating,
    /// One apparent-power base (VA) for every inverter.
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub name: String,
    pub omega0: f64,
    pub droop_base: DroopBase,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub loads: Vec<LoadSpec>,
    pub inverters: Vec<InverterSpec>,
}

#[derive(Clone, Debug)]
pub struct Conductor {
    pub description: String,
    pub phases: PhaseSet,
    pub r_per_mile: Matrix3<f64>,
    pub x_per_mile: Matrix3<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ConductorLibrary {
    pub conductors: BTreeMap<String, Conductor>,
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GridError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn json_error(path: &str, e: serde_json::Error) -> GridError {
    GridError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

fn mat3(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

fn check_symmetric(m: &Matrix3<f64>, what: &str) -> Result<()> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > SYM_TOL * scale {
        return Err(GridError::Validation(format!("{what} is not symmetric")));
    }
    Ok(())
}

fn mask(m: &Matrix3<f64>, p: &PhaseSet) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| if p[i] && p[j] { m[(i, j)] } else { 0.0 })
}

impl ConductorLibrary {
    pub fn from_json_str(s: &str, origin: &str) -> Result<Self> {
        let f: ConductorLibraryFile = serde_json::from_str(s).map_err(|e| json_error(origin, e))?;
        if f.schema_version != SCHEMA_VERSION {
            return Err(GridError::Validation(format!(
                "{origin}: unsupported conductor schema version {}",
                f.schema_version
            )));
        }
        let mut conductors = BTreeMap::new();
        for (name, c) in f.conductors {
            let r = mat3(&c.r);
            let x = mat3(&c.x);
            check_symmetric(&r, &format!("conductor {name} r"))?;
            check_symmetric(&x, &format!("conductor {name} x"))?;
            conductors.insert(
                name,
                Conductor {
                    description: c.description,
                    phases: parse_phases(&c.phases)?,
                    r_per_mile: r,
                    x_per_mile: x,
                },
            );
        }
        Ok(Self { conductors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json_str(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> Result<&Conductor> {
        self.conductors
            .get(name)
            .ok_or_else(|| GridError::Config(format!("conductor '{name}' not in library")))
    }
}

impl Conductor {
    /// Total R (ohm) and L (H) for a run of `length_ft` feet.
    pub fn line_matrices(&self, length_ft: f64, omega0: f64) -> (Matrix3<f64>, Matrix3<f64>) {
        let miles = length_ft / FEET_PER_MILE;
        (self.r_per_mile * miles, self.x_per_mile * (miles / omega0))
    }
}

/// Parse and validate a network file. `conductors` resolves `conductor`
/// references on lines.
pub fn parse_network(path: impl AsRef<Path>, conductors: Option<&ConductorLibrary>) -> Result<NetworkModel> {
    let path = path.as_ref();
    NetworkModel::from_json_str(&read_to_string(path)?, &path.display().to_string(), conductors)
}

impl NetworkModel {
    pub fn from_json_str(s: &str, origin: &str, conductors: Option<&ConductorLibrary>) -> Result<Self> {
        let f: NetworkFile = serde_json::from_str(s).map_err(|e| json_error(origin, e))?;
        Self::from_file(f, conductors)
    }

    pub fn from_file(f: NetworkFile, conductors: Option<&ConductorLibrary>) -> Result<Self> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(GridError::Validation(format!(
                "unsupported network schema version {} (expected {SCHEMA_VERSION})",
                f.schema_version
            )));
        }
        if !(f.omega0 > 0.0) {
            return Err(GridError::Validation("omega0 must be positive".into()));
        }
        let droop_base = match f.droop_base_va {
            None => DroopBase::OwnRating,
            Some(v) if v > 0.0 => DroopBase::Fixed(v),
            Some(_) => return Err(GridError::Validation("droop_base_va must be positive".into())),
        };
        if f.buses.len() < 2 {
            return Err(GridError::Validation("a network needs at least 2 buses".into()));
        }
        let mut index = HashMap::new();
        let mut buses = Vec::with_capacity(f.buses.len());
        for b in &f.buses {
            if index.insert(b.id.clone(), buses.len()).is_some() {
                return Err(GridError::Validation(format!("duplicate bus id '{}'", b.id)));
            }
            if !(b.nominal_voltage > 0.0) {
                return Err(GridError::Validation(format!("bus '{}' needs a positive nominal voltage", b.id)));
            }
            let phases = parse_phases(&b.phases)?;
            if b.kind == BusKind::Inverter && phases != ALL_PHASES {
                return Err(GridError::Validation(format!("inverter bus '{}' must have phases abc", b.id)));
            }
            buses.push(BusSpec {
                id: b.id.clone(),
                kind: b.kind,
                nominal_voltage: b.nominal_voltage,
                phases,
            });
        }
        let lookup = |id: &str, what: &str| -> Result<usize> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| GridError::Validation(format!("{what} references unknown bus '{id}'")))
        };

        let mut seen = HashSet::new();
        let mut lines = Vec::with_capacity(f.lines.len());
        for lf in &f.lines {
            let name = format!("line {}-{}", lf.from, lf.to);
            let from = lookup(&lf.from, &name)?;
            let to = lookup(&lf.to, &name)?;
            if from == to {
                return Err(GridError::Validation(format!("{name} is a self loop")));
            }
            if !seen.insert((from.min(to), from.max(to))) {
                return Err(GridError::Validation(format!("{name} duplicates another line")));
            }
            let (r, l, mut phases) = match (&lf.conductor, &lf.r, &lf.l) {
                (Some(c), None, None) => {
                    let lib = conductors.ok_or_else(|| {
                        GridError::Config(format!("{name} names conductor '{c}' but no conductor library was given"))
                    })?;
                    let cond = lib.get(c)?;
                    let len = lf
                        .length_ft
                        .ok_or_else(|| GridError::Validation(format!("{name} needs length_ft with a conductor")))?;
                    let (r, l) = cond.line_matrices(len, f.omega0);
                    (r, l, cond.phases)
                }
                (None, Some(r), Some(l)) => {
                    let miles = lf.length_ft.map_or(1.0, |ft| ft / FEET_PER_MILE);
                    let (r, l) = (mat3(r) * miles, mat3(l) * miles);
                    let p = [0, 1, 2].map(|k| r[(k, k)] != 0.0 || l[(k, k)] != 0.0);
                    (r, l, p)
                }
                _ => {
                    return Err(GridError::Validation(format!(
                        "{name} needs either a conductor or both r and l"
                    )))
                }
            };
            if let Some(p) = &lf.phases {
                phases = parse_phases(p)?;
            }
            if let Some(len) = lf.length_ft {
                if !(len > 0.0) {
                    return Err(GridError::Validation(format!("{name} has non-positive length")));
                }
            }
            check_symmetric(&r, &format!("{name} R"))?;
            check_symmetric(&l, &format!("{name} L"))?;
            for k in 0..3 {
                if phases[k] && !(buses[from].phases[k] && buses[to].phases[k]) {
                    return Err(GridError::Validation(format!(
                        "{name} uses phase {} missing at an endpoint",
                        ['a', 'b', 'c'][k]
                    )));
                }
            }
            let spec = LineSpec {
                from,
                to,
                r: mask(&r, &phases),
                l: mask(&l, &phases),
                phases,
                conductor: lf.conductor.clone(),
                length_ft: lf.length_ft,
            };
            spec.admittance(f.omega0)
                .map_err(|_| GridError::Validation(format!("{name} impedance is singular on its phases")))?;
            lines.push(spec);
        }

        let mut loads = Vec::with_capacity(f.loads.len());
        for ld in &f.loads {
            let bus = lookup(&ld.bus, "load")?;
            let mut phases = [None; 3];
            for (ph, v) in &ld.phases {
                let p = parse_phases(ph)?;
                let k = present(&p);
                if k.len() != 1 {
                    return Err(GridError::Validation(format!("load at '{}': key '{ph}' must be one phase", ld.bus)));
                }
                let k = k[0];
                if !buses[bus].phases[k] {
                    return Err(GridError::Validation(format!("load at '{}' on absent phase {ph}", ld.bus)));
                }
                phases[k] = Some(match *v {
                    LoadPhaseFile::Pq { p, q } => LoadPhase::Pq { p, q },
                    LoadPhaseFile::Rl { r, l } => LoadPhase::Rl { r, l },
                });
            }
            let spec = LoadSpec { bus, phases };
            load_to_impedance(&spec, buses[bus].nominal_voltage, f.omega0).map_err(|e| match e {
                GridError::UnsupportedLoad { phase, msg, .. } => GridError::UnsupportedLoad {
                    bus: ld.bus.clone(),
                    phase,
                    msg,
                },
                other => other,
            })?;
            loads.push(spec);
        }

        let mut inverters = Vec::with_capacity(f.inverters.len());
        let mut inv_seen = HashSet::new();
        for iv in &f.inverters {
            let bus = lookup(&iv.bus, "inverter")?;
            if buses[bus].kind != BusKind::Inverter {
                return Err(GridError::Validation(format!("inverter on passive bus '{}'", iv.bus)));
            }
            if !inv_seen.insert(bus) {
                return Err(GridError::Validation(format!("two inverters on bus '{}'", iv.bus)));
            }
            for (v, what) in [
                (iv.rating, "rating"),
                (iv.tau, "tau"),
                (iv.mp_percent, "mp_percent"),
                (iv.mq_percent, "mq_percent"),
            ] {
                if !(v > 0.0) {
                    return Err(GridError::Validation(format!("inverter at '{}': {what} must be positive", iv.bus)));
                }
            }
            inverters.push(InverterSpec {
                bus,
                rating: iv.rating,
                mp_percent: iv.mp_percent,
                mq_percent: iv.mq_percent,
                tau: iv.tau,
                p_set: iv.p_set,
                q_set: iv.q_set,
                v_set: iv.v_set,
            });
        }
        for (k, b) in buses.iter().enumerate() {
            if b.kind == BusKind::Inverter && !inv_seen.contains(&k) {
                return Err(GridError::Validation(format!("inverter bus '{}' has no inverter", b.id)));
            }
        }
        if inverters.is_empty() {
            return Err(GridError::Validation("no inverters".into()));
        }
        let model = NetworkModel {
            name: f.name,
            omega0: f.omega0,
            droop_base,
            buses,
            lines,
            loads,
            inverters,
        };
        model.check_connected()?;
        Ok(model)
    }

    fn check_connected(&self) -> Result<()> {
        let nb = self.buses.len();
        let adj = self.adjacency();
        let mut seen = vec![false; nb];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(GridError::Validation(format!("bus '{}' is not connected", self.buses[k].id)));
        }
        Ok(())
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (n, l) in self.lines.iter().enumerate() {
            adj[l.from].push((l.to, n));
            adj[l.to].push((l.from, n));
        }
        adj
    }

    pub fn to_file(&self) -> NetworkFile {
        let m3 = |m: &Matrix3<f64>| [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]));
        NetworkFile {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            omega0: self.omega0,
            droop_base_va: match self.droop_base {
                DroopBase::OwnRating => None,
                DroopBase::Fixed(v) => Some(v),
            },
            buses: self
                .buses
                .iter()
                .map(|b| BusFile {
                    id: b.id.clone(),
                    kind: b.kind,
                    nominal_voltage: b.nominal_voltage,
                    phases: phases_to_string(&b.phases),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineFile {
                    from: self.buses[l.from].id.clone(),
                    to: self.buses[l.to].id.clone(),
                    r: Some(m3(&l.r)),
                    l: Some(m3(&l.l)),
                    phases: Some(phases_to_string(&l.phases)),
                    ..Default::default()
                })
                .collect(),
            loads: self
                .loads
                .iter()
                .map(|ld| LoadFile {
                    bus: self.buses[ld.bus].id.clone(),
                    phases: (0..3)
                        .filter_map(|k| {
                            ld.phases[k].map(|p| {
                                let v = match p {
                                    LoadPhase::Pq { p, q } => LoadPhaseFile::Pq { p, q },
                                    LoadPhase::Rl { r, l } => LoadPhaseFile::Rl { r, l },
                                };
                                (["a", "b", "c"][k].to_string(), v)
                            })
                        })
                        .collect(),
                })
                .collect(),
            inverters: self
                .inverters
                .iter()
                .map(|iv| InverterFile {
                    bus: self.buses[iv.bus].id.clone(),
                    rating: iv.rating,
                    mp_percent: iv.mp_percent,
                    mq_percent: iv.mq_percent,
                    tau: iv.tau,
                    p_set: iv.p_set,
                    q_set: iv.q_set,
                    v_set: iv.v_set,
                })
                .collect(),
        }
    }

    pub fn n_inverters(&self) -> usize {
        self.inverters.len()
    }

    pub fn bus_index(&self, id: &str) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| GridError::Config(format!("unknown bus '{id}'")))
    }

    /// Position of the inverter at bus `id` in inverter order.
    pub fn inverter_index(&self, id: &str) -> Result<usize> {
        let b = self.bus_index(id)?;
        self.inverters
            .iter()
            .position(|iv| iv.bus == b)
            .ok_or_else(|| GridError::Config(format!("bus '{id}' has no inverter")))
    }

    pub fn inverter_ids(&self) -> Vec<String> {
        self.inverters.iter().map(|iv| self.buses[iv.bus].id.clone()).collect()
    }

    /// Droop base in VA for each inverter.
    pub fn droop_bases(&self) -> Vec<f64> {
        self.inverters
            .iter()
            .map(|iv| match self.droop_base {
                DroopBase::OwnRating => iv.rating,
                DroopBase::Fixed(s) => s,
            })
            .collect()
    }

    pub fn mp_percent(&self) -> Vec<f64> {
        self.inverters.iter().map(|iv| iv.mp_percent).collect()
    }

    pub fn mq_percent(&self) -> Vec<f64> {
        self.inverters.iter().map(|iv| iv.mq_percent).collect()
    }

    /// Common filter time constant; the reduced model has a single one.
    pub fn tau(&self) -> Result<f64> {
        let t0 = self.inverters[0].tau;
        if self.inverters.iter().any(|iv| (iv.tau - t0).abs() > 1e-12 * t0) {
            return Err(GridError::Validation("all inverters must share one tau".into()));
        }
        Ok(t0)
    }

    pub fn without_loads(&self) -> Self {
        let mut m = self.clone();
        m.loads.clear();
        m
    }

    pub fn with_droops(&self, mp: &[f64], mq: &[f64]) -> Self {
        let mut m = self.clone();
        for (k, iv) in m.inverters.iter_mut().enumerate() {
            iv.mp_percent = mp[k];
            iv.mq_percent = mq[k];
        }
        m
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        let mut m = self.clone();
        m.inverters.iter_mut().for_each(|iv| iv.tau = tau);
        m
    }

    /// Every line and load impedance multiplied by `alpha`.
    pub fn scaled_impedances(&self, alpha: f64) -> Self {
        let mut m = self.clone();
        for l in &mut m.lines {
            l.r *= alpha;
            l.l *= alpha;
        }
        for ld in &mut m.loads {
            for p in ld.phases.iter_mut().flatten() {
                *p = match *p {
                    LoadPhase::Pq { p, q } => LoadPhase::Pq { p: p / alpha, q: q / alpha },
                    LoadPhase::Rl { r, l } => LoadPhase::Rl { r: r * alpha, l: l * alpha },
                };
            }
        }
        m
    }

    /// Lines on the unique simple path between two buses (the feeder is radial;
    /// for meshed inputs the breadth-first path is used).
    pub fn path_lines(&self, a: usize, b: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.buses.len()];
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([a]);
        seen[a] = true;
        while let Some(u) = queue.pop_front() {
            if u == b {
                break;
            }
            for &(v, line) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    prev[v] = Some((u, line));
                    queue.push_back(v);
                }
            }
        }
        let mut out = Vec::new();
        let mut cur = b;
        while let Some((p, line)) = prev[cur] {
            out.push(line);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Replace the conductor on every line between inverter buses `a` and `b`.
    pub fn with_conductor_between(&self, a: &str, b: &str, conductor: &Conductor, name: &str) -> Result<Self> {
        let (ia, ib) = (self.bus_index(a)?, self.bus_index(b)?);
        let mut m = self.clone();
        for n in self.path_lines(ia, ib) {
            let line = &mut m.lines[n];
            let len = line.length_ft.ok_or_else(|| {
                GridError::Config(format!(
                    "line {}-{} has no length; cannot swap conductor",
                    self.buses[line.from].id, self.buses[line.to].id
                ))
            })?;
            if !present(&line.phases).iter().all(|&k| conductor.phases[k]) {
                return Err(GridError::Config(format!("conductor {name} lacks phases of the replaced line")));
            }
            let (r, l) = conductor.line_matrices(len, self.omega0);
            line.r = mask(&r, &line.phases);
            line.l = mask(&l, &line.phases);
            line.conductor = Some(name.to_string());
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Element admittances
// ---------------------------------------------------------------------------

/// Per-phase R (ohm) and L (H), zero outside `phases`.
#[derive(Clone, Debug)]
pub struct PhaseImpedance {
    pub r: Matrix3<f64>,
    pub l: Matrix3<f64>,
    pub phases: PhaseSet,
    /// Some phase has a negative equivalent inductance.
    pub capacitive: bool,
}

/// Constant-impedance equivalent of a load at nominal voltage: `Z = V^2 / (P - jQ)`.
pub fn load_to_impedance(load: &LoadSpec, v_nom: f64, omega0: f64) -> Result<PhaseImpedance> {
    let mut r = Matrix3::zeros();
    let mut l = Matrix3::zeros();
    let mut phases = [false; 3];
    let mut capacitive = false;
    for k in 0..3 {
        let Some(p) = load.phases[k] else { continue };
        let z = match p {
            LoadPhase::Pq { p, q } => {
                if !(p > 0.0) {
                    return Err(GridError::UnsupportedLoad {
                        bus: load.bus.to_string(),
                        phase: ['a', 'b', 'c'][k],
                        msg: format!("active power must be positive, got {p}"),
                    });
                }
                C64::new(v_nom * v_nom, 0.0) / C64::new(p, -q)
            }
            LoadPhase::Rl { r, l } => {
                if !(r > 0.0) {
                    return Err(GridError::UnsupportedLoad {
                        bus: load.bus.to_string(),
                        phase: ['a', 'b', 'c'][k],
                        msg: format!("resistance must be positive, got {r}"),
                    });
                }
                C64::new(r, omega0 * l)
            }
        };
        r[(k, k)] = z.re;
        l[(k, k)] = z.im / omega0;
        capacitive |= z.im < 0.0;
        phases[k] = true;
    }
    Ok(PhaseImpedance { r, l, phases, capacitive })
}

/// `Y0 = Z^-1` and `Y1 = -Y0 L Y0` on the present phases, embedded in 3x3.
fn element_pencil(r: &Matrix3<f64>, l: &Matrix3<f64>, phases: &PhaseSet, omega0: f64) -> Option<(DMatrix<C64>, DMatrix<C64>)> {
    let idx = present(phases);
    let n = idx.len();
    let z = DMatrix::from_fn(n, n, |i, j| C64::new(r[(idx[i], idx[j])], omega0 * l[(idx[i], idx[j])]));
    let lm = DMatrix::from_fn(n, n, |i, j| C64::new(l[(idx[i], idx[j])], 0.0));
    let y = z.try_inverse()?;
    let y1 = -(&y * &lm * &y);
    let mut y0_full = DMatrix::zeros(3, 3);
    let mut y1_full = DMatrix::zeros(3, 3);
    for i in 0..n {
        for j in 0..n {
            y0_full[(idx[i], idx[j])] = y[(i, j)];
            y1_full[(idx[i], idx[j])] = y1[(i, j)];
        }
    }
    Some((y0_full, y1_full))
}

impl LineSpec {
    pub fn admittance(&self, omega0: f64) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
        element_pencil(&self.r, &self.l, &self.phases, omega0)
            .ok_or_else(|| GridError::Assembly("singular line impedance".into()))
    }
}

// ---------------------------------------------------------------------------
// Pencils
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AffineAdmittance {
    pub y0: DMatrix<C64>,
    pub y1: DMatrix<C64>,
}

impl AffineAdmittance {
    pub fn zeros(n: usize) -> Self {
        Self {
            y0: DMatrix::zeros(n, n),
            y1: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.y0.nrows()
    }

    pub fn at(&self, s: C64) -> DMatrix<C64> {
        &self.y0 + self.y1.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            y0: &self.y0 + &other.y0,
            y1: &self.y1 + &other.y1,
        }
    }

    /// `||Y - Y^T|| / ||Y||` over both orders.
    pub fn symmetry_defect(&self) -> f64 {
        let d = (&self.y0 - self.y0.transpose()).norm() + (&self.y1 - self.y1.transpose()).norm();
        let s = self.y0.norm() + self.y1.norm();
        if s == 0.0 {
            0.0
        } else {
            d / s
        }
    }

    fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self {
            y0: self.y0.select_rows(rows).select_columns(cols),
            y1: self.y1.select_rows(rows).select_columns(cols),
        }
    }
}

/// Three-phase network and load pencils over every bus, three slots per bus
/// (slot `3*bus + phase`); absent phases are zero rows and columns.
pub fn assemble_phase_admittance(model: &NetworkModel) -> Result<(AffineAdmittance, AffineAdmittance)> {
    let n = 3 * model.buses.len();
    let w0 = model.omega0;
    let mut net = AffineAdmittance::zeros(n);
    let mut load = AffineAdmittance::zeros(n);
    for line in &model.lines {
        let (y0, y1) = element_pencil(&line.r, &line.l, &line.phases, w0).ok_or_else(|| {
            GridError::Assembly(format!(
                "singular impedance on line {}-{}",
                model.buses[line.from].id, model.buses[line.to].id
            ))
        })?;
        for (a, b, sign) in [(line.from, line.from, 1.0), (line.to, line.to, 1.0), (line.from, line.to, -1.0), (line.to, line.from, -1.0)] {
            for i in 0..3 {
                for j in 0..3 {
                    net.y0[(3 * a + i, 3 * b + j)] += y0[(i, j)] * sign;
                    net.y1[(3 * a + i, 3 * b + j)] += y1[(i, j)] * sign;
                }
            }
        }
    }
    for ld in &model.loads {
        let bus = &model.buses[ld.bus];
        let z = load_to_impedance(ld, bus.nominal_voltage, w0)?;
        let (y0, y1) = element_pencil(&z.r, &z.l, &z.phases, w0)
            .ok_or_else(|| GridError::Assembly(format!("singular load impedance at bus {}", bus.id)))?;
        for i in 0..3 {
            for j in 0..3 {
                load.y0[(3 * ld.bus + i, 3 * ld.bus + j)] += y0[(i, j)];
                load.y1[(3 * ld.bus + i, 3 * ld.bus + j)] += y1[(i, j)];
            }
        }
    }
    Ok((net, load))
}

/// Schur complement of a pencil onto `keep`, expanded to first order in `s`:
/// `R0 = Aa - Ab M Ba`, `R1 = A1 - A1b M Ba - Ab M B1a + Ab M B1b M Ba` with `M = Bb^-1`.
pub fn kron_reduce(y: &AffineAdmittance, keep: &[usize], elim: &[usize]) -> Result<AffineAdmittance> {
    if elim.is_empty() {
        return Ok(y.select(keep, keep));
    }
    let aa = y.select(keep, keep);
    let ab = y.select(keep, elim);
    let ba = y.select(elim, keep);
    let bb = y.select(elim, elim);
    let m = bb
        .y0
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| GridError::Assembly("passive-bus block is singular (isolated passive section?)".into()))?;
    let mba = &m * &ba.y0;
    let abm = &ab.y0 * &m;
    let y0 = &aa.y0 - &ab.y0 * &mba;
    let y1 = &aa.y1 - &ab.y1 * &mba - &abm * &ba.y1 + &abm * &bb.y1 * &mba;
    Ok(AffineAdmittance { y0, y1 })
}

/// `Theta^H Y Theta` with `Theta = I_N (x) [1, t, t^2]^T`, then symmetrized.
/// Returns the compressed pencil and the symmetry defect before symmetrizing.
pub fn sequence_reduce(y: &AffineAdmittance) -> Result<(AffineAdmittance, f64)> {
    let n3 = y.dim();
    if n3 % 3 != 0 {
        return Err(GridError::Domain(format!("pencil dimension {n3} is not a multiple of 3")));
    }
    let n = n3 / 3;
    let t = rotation();
    let a = [C64::new(1.0, 0.0), t, t * t];
    let theta = DMatrix::from_fn(n3, n, |r, c| if r / 3 == c { a[r % 3] } else { C64::new(0.0, 0.0) });
    let th = theta.adjoint();
    let raw = AffineAdmittance {
        y0: &th * &y.y0 * &theta,
        y1: &th * &y.y1 * &theta,
    };
    let defect = raw.symmetry_defect();
    let sym = |m: &DMatrix<C64>| (m + m.transpose()).map(|v| v * 0.5);
    Ok((
        AffineAdmittance {
            y0: sym(&raw.y0),
            y1: sym(&raw.y1),
        },
        defect,
    ))
}

/// Network and load pencils seen from the inverter terminals, one entry per inverter.
#[derive(Clone, Debug)]
pub struct ReducedNetwork {
    pub ynet: AffineAdmittance,
    pub yload: AffineAdmittance,
    pub inverter_ids: Vec<String>,
    pub symmetry_defect: f64,
}

/// Assemble, eliminate passive buses, compress and split into a
/// zero-row-sum network part and a diagonal load part.
pub fn reduce_network(model: &NetworkModel) -> Result<ReducedNetwork> {
    let (net, load) = assemble_phase_admittance(model)?;
    let total = net.add(&load);
    let keep: Vec<usize> = model.inverters.iter().flat_map(|iv| (0..3).map(move |k| 3 * iv.bus + k)).collect();
    let inverter_bus: HashSet<usize> = model.inverters.iter().map(|iv| iv.bus).collect();
    let elim: Vec<usize> = (0..model.buses.len())
        .filter(|b| !inverter_bus.contains(b))
        .flat_map(|b| (0..3).map(move |k| 3 * b + k))
        .filter(|&s| total.y0[(s, s)].norm() > 0.0)
        .collect();
    let reduced = kron_reduce(&total, &keep, &elim)?;
    let (comp, defect) = sequence_reduce(&reduced)?;
    let n = comp.dim();
    let diag_rowsum = |m: &DMatrix<C64>| DMatrix::from_fn(n, n, |i, j| if i == j { m.row(i).sum() } else { C64::new(0.0, 0.0) });
    let yload = AffineAdmittance {
        y0: diag_rowsum(&comp.y0),
        y1: diag_rowsum(&comp.y1),
    };
    let ynet = AffineAdmittance {
        y0: &comp.y0 - &yload.y0,
        y1: &comp.y1 - &yload.y1,
    };
    Ok(ReducedNetwork {
        ynet,
        yload,
        inverter_ids: model.inverter_ids(),
        symmetry_defect: defect,
    })
}

// ---------------------------------------------------------------------------
// Real matrix set
// ---------------------------------------------------------------------------

/// Conversion of droop percentages to SI coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DroopConversion {
    pub omega0: f64,
    /// VA base per inverter.
    pub s_base: Vec<f64>,
    /// Nominal line-to-neutral voltage per inverter.
    pub v_nom: Vec<f64>,
}

impl DroopConversion {
    pub fn from_model(model: &NetworkModel) -> Self {
        Self {
            omega0: model.omega0,
            s_base: model.droop_bases(),
            v_nom: model.inverters.iter().map(|iv| model.buses[iv.bus].nominal_voltage).collect(),
        }
    }

    /// `m_p = (mp%/100) w0 / S`, rad/s per watt.
    pub fn mp_si(&self, k: usize, mp_percent: f64) -> f64 {
        mp_percent / 100.0 * self.omega0 / self.s_base[k]
    }

    /// `m_q = (mq%/100) V / S`, volts per var.
    pub fn mq_si(&self, k: usize, mq_percent: f64) -> f64 {
        mq_percent / 100.0 * self.v_nom[k] / self.s_base[k]
    }

    /// Diagonals of `Lambda_p = 1/(m_p V^2)` and `Lambda_q = 1/(m_q V)`.
    pub fn lambdas(&self, mp_percent: &[f64], mq_percent: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.s_base.len();
        let lp = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 / (self.mp_si(i, mp_percent[i]) * self.v_nom[i] * self.v_nom[i])
            } else {
                0.0
            }
        });
        let lq = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 / (self.mq_si(i, mq_percent[i]) * self.v_nom[i])
            } else {
                0.0
            }
        });
        (lp, lq)
    }
}

/// The real coefficient matrices of the linearized microgrid.
#[derive(Clone, Debug)]
pub struct RealMatrixSet {
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub btilde: DMatrix<f64>,
    pub gtilde: DMatrix<f64>,
    pub bprime: DMatrix<f64>,
    pub gprime: DMatrix<f64>,
    pub lambda_p: DMatrix<f64>,
    pub lambda_q: DMatrix<f64>,
    pub tau: f64,
    pub droop: DroopConversion,
    /// Non-fatal definiteness findings.
    pub warnings: Vec<String>,
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Build the six network matrices and the droop diagonals.
pub fn build_matrix_set(ynet: &AffineAdmittance, yload: &AffineAdmittance, inverters: &[InverterSpec], droop: DroopConversion) -> Result<RealMatrixSet> {
    let n = ynet.dim();
    if yload.dim() != n || inverters.len() != n || droop.s_base.len() != n {
        return Err(GridError::Domain("matrix set dimensions disagree".into()));
    }
    let tau = inverters[0].tau;
    if inverters.iter().any(|iv| (iv.tau - tau).abs() > 1e-12 * tau) {
        return Err(GridError::Validation("all inverters must share one tau".into()));
    }
    let y1 = &ynet.y1 + &yload.y1;
    let mp: Vec<f64> = inverters.iter().map(|iv| iv.mp_percent).collect();
    let mq: Vec<f64> = inverters.iter().map(|iv| iv.mq_percent).collect();
    let (lambda_p, lambda_q) = droop.lambdas(&mp, &mq);
    let mut ms = RealMatrixSet {
        b: ynet.y0.map(|v| -v.im),
        g: ynet.y0.map(|v| v.re),
        btilde: yload.y0.map(|v| -2.0 * v.im),
        gtilde: yload.y0.map(|v| 2.0 * v.re),
        bprime: y1.map(|v| v.im),
        gprime: y1.map(|v| -v.re),
        lambda_p,
        lambda_q,
        tau,
        droop,
        warnings: Vec::new(),
    };
    ms.check_invariants()?;
    Ok(ms)
}

/// Full pipeline from a validated model to its matrix set.
pub fn matrix_set_for(model: &NetworkModel) -> Result<RealMatrixSet> {
    let red = reduce_network(model)?;
    let mut ms = build_matrix_set(&red.ynet, &red.yload, &model.inverters, DroopConversion::from_model(model))?;
    if red.symmetry_defect > 1e-6 {
        ms.warnings.push(format!("compressed pencil symmetry defect {:.3e} (unbalanced network)", red.symmetry_defect));
    }
    Ok(ms)
}

impl RealMatrixSet {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    /// Same network with new droop percentages.
    pub fn with_droops(&self, mp_percent: &[f64], mq_percent: &[f64]) -> Self {
        let (lambda_p, lambda_q) = self.droop.lambdas(mp_percent, mq_percent);
        Self {
            lambda_p,
            lambda_q,
            ..self.clone()
        }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self { tau, ..self.clone() }
    }

    /// First-order terms dropped.
    pub fn zeroth_order(&self) -> Self {
        let n = self.n();
        Self {
            bprime: DMatrix::zeros(n, n),
            gprime: DMatrix::zeros(n, n),
            ..self.clone()
        }
    }

    /// The eight matrices that enter the pairwise conditions, with their names.
    pub fn named(&self) -> [(&'static str, &DMatrix<f64>); 8] {
        [
            ("Lambda_p", &self.lambda_p),
            ("Lambda_q", &self.lambda_q),
            ("B", &self.b),
            ("G", &self.g),
            ("Btilde", &self.btilde),
            ("Gtilde", &self.gtilde),
            ("Bprime", &self.bprime),
            ("Gprime", &self.gprime),
        ]
    }

    /// Definiteness checks. Singular-but-semidefinite `B'` (a lossless or
    /// load-free network makes it a Laplacian) is a warning; an indefinite one
    /// is an error.
    pub fn check_invariants(&mut self) -> Result<()> {
        let n = self.n();
        let scale = |m: &DMatrix<f64>| 1e-9 * m.norm().max(f64::MIN_POSITIVE);
        for (name, m) in [("B", &self.b), ("G", &self.g)] {
            let e = min_sym_eig(m);
            if e < -scale(m) {
                self.warnings.push(format!("{name} is not positive semidefinite (min eigenvalue {e:.3e})"));
            }
        }
        for i in 0..n {
            if self.btilde[(i, i)] < 0.0 {
                self.warnings
                    .push(format!("Btilde[{i}] = {:.3e} < 0 (capacitive equivalent load)", self.btilde[(i, i)]));
            }
            if self.gtilde[(i, i)] < 0.0 {
                self.warnings.push(format!("Gtilde[{i}] = {:.3e} < 0", self.gtilde[(i, i)]));
            }
        }
        if (&self.gprime - self.gprime.transpose()).norm() > scale(&self.gprime) {
            self.warnings.push("Gprime is not symmetric".into());
        }
        let e = min_sym_eig(&self.bprime);
        let tol = scale(&self.bprime);
        if e < -tol {
            return Err(GridError::ModelRegime(format!(
                "Bprime must be positive definite, min eigenvalue {e:.3e}"
            )));
        }
        if e <= tol {
            self.warnings.push(format!("Bprime is only semidefinite (min eigenvalue {e:.3e})"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn balanced_two_bus(r: f64, l: f64, load: Option<(f64, f64)>) -> NetworkModel {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let sc = |s: f64| eye.map(|row| row.map(|v| v * s));
        let f = NetworkFile {
            schema_version: 1,
            name: "t".into(),
            omega0: default_omega0(),
            droop_base_va: None,
            buses: ["1", "2"]
                .iter()
                .map(|id| BusFile {
                    id: id.to_string(),
                    kind: BusKind::Inverter,
                    nominal_voltage: 120.0,
                    phases: "abc".into(),
                })
                .collect(),
            lines: vec![LineFile {
                from: "1".into(),
                to: "2".into(),
                r: Some(sc(r)),
                l: Some(sc(l)),
                ..Default::default()
            }],
            loads: load
                .map(|(p, q)| {
                    vec![LoadFile {
                        bus: "2".into(),
                        phases: ["a", "b", "c"].iter().map(|k| (k.to_string(), LoadPhaseFile::Pq { p, q })).collect(),
                    }]
                })
                .unwrap_or_default(),
            inverters: ["1", "2"]
                .iter()
                .map(|b| InverterFile {
                    bus: b.to_string(),
                    rating: 1000.0,
                    mp_percent: 1.0,
                    mq_percent: 1.0,
                    tau: 0.01,
                    p_set: None,
                    q_set: 0.0,
                    v_set: None,
                })
                .collect(),
        };
        NetworkModel::from_file(f, None).unwrap()
    }

    #[test]
    fn resistive_load_impedance() {
        let ld = LoadSpec {
            bus: 0,
            phases: [Some(LoadPhase::Pq { p: 1000.0, q: 0.0 }), None, None],
        };
        let z = load_to_impedance(&ld, 120.0, default_omega0()).unwrap();
        assert!((z.r[(0, 0)] - 14.4).abs() < 1e-12);
        assert_eq!(z.l[(0, 0)], 0.0);
    }

    #[test]
    fn zero_power_load_rejected() {
        let ld = LoadSpec {
            bus: 0,
            phases: [Some(LoadPhase::Pq { p: 0.0, q: 1.0 }), None, None],
        };
        assert!(matches!(
            load_to_impedance(&ld, 120.0, default_omega0()),
            Err(GridError::UnsupportedLoad { .. })
        ));
    }

    #[test]
    fn load_power_round_trip() {
        let w0 = default_omega0();
        let ld = LoadSpec {
            bus: 0,
            phases: [Some(LoadPhase::Pq { p: 1000.0, q: 500.0 }), None, None],
        };
        let z = load_to_impedance(&ld, 120.0, w0).unwrap();
        let zc = c(z.r[(0, 0)], w0 * z.l[(0, 0)]);
        let s = c(120.0 * 120.0, 0.0) / zc.conj();
        assert!((s - c(1000.0, 500.0)).norm() < 1e-9 * 1000.0);
    }

    #[test]
    fn single_line_laplacian_and_inverse() {
        let m = balanced_two_bus(0.5, 1e-3, None);
        let (net, load) = assemble_phase_admittance(&m).unwrap();
        let y = c(1.0, 0.0) / c(0.5, m.omega0 * 1e-3);
        for i in 0..3 {
            assert!((net.y0[(i, i)] - y).norm() < 1e-12);
            assert!((net.y0[(i, 3 + i)] + y).norm() < 1e-12);
        }
        for r in 0..6 {
            assert!(net.y0.row(r).sum().norm() < 1e-12);
            assert!(net.y1.row(r).sum().norm() < 1e-12);
        }
        assert_eq!(load.y0.norm(), 0.0);
    }

    #[test]
    fn identity_compresses_to_three() {
        let y = AffineAdmittance {
            y0: DMatrix::identity(6, 6),
            y1: DMatrix::zeros(6, 6),
        };
        let (r, defect) = sequence_reduce(&y).unwrap();
        assert!((r.y0 - DMatrix::<C64>::identity(2, 2).map(|v| v * 3.0)).norm() < 1e-12);
        assert!(defect < 1e-15);
    }

    #[test]
    fn lossless_line_has_no_conductance() {
        let m = balanced_two_bus(0.0, 2e-3, None);
        let ms = matrix_set_for(&m).unwrap();
        assert!(ms.g.norm() < 1e-12 * ms.b.norm());
        assert_eq!(ms.gtilde.norm(), 0.0);
    }

    #[test]
    fn two_bus_entries_match_scalar_inverse() {
        let m = balanced_two_bus(0.3, 1.5e-3, None);
        let ms = matrix_set_for(&m).unwrap();
        let y = c(1.0, 0.0) / c(0.3, m.omega0 * 1.5e-3);
        assert!((ms.g[(0, 0)] - 3.0 * y.re).abs() < 1e-9 * y.norm());
        assert!((ms.b[(0, 0)] + 3.0 * y.im).abs() < 1e-9 * y.norm());
        assert!((ms.b[(0, 1)] - 3.0 * y.im).abs() < 1e-9 * y.norm());
    }

    #[test]
    fn unknown_bus_is_rejected() {
        let mut f = balanced_two_bus(0.1, 1e-3, None).to_file();
        f.lines[0].to = "9".into();
        let e = NetworkModel::from_file(f, None).unwrap_err();
        assert!(matches!(e, GridError::Validation(ref s) if s.contains("unknown bus '9'")));
    }

    #[test]
    fn duplicate_bus_is_rejected() {
        let mut f = balanced_two_bus(0.1, 1e-3, None).to_file();
        f.buses[1].id = "1".into();
        assert!(matches!(NetworkModel::from_file(f, None), Err(GridError::Validation(_))));
    }

    #[test]
    fn kron_of_series_lines_matches_series_impedance() {
        // inverter - passive - inverter with identical balanced lines equals one line of double impedance
        let eye = |s: f64| [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]];
        let mut f = balanced_two_bus(0.2, 1e-3, None).to_file();
        f.buses.push(BusFile {
            id: "m".into(),
            kind: BusKind::Passive,
            nominal_voltage: 120.0,
            phases: "abc".into(),
        });
        f.lines = vec![
            LineFile { from: "1".into(), to: "m".into(), r: Some(eye(0.2)), l: Some(eye(1e-3)), ..Default::default() },
            LineFile { from: "m".into(), to: "2".into(), r: Some(eye(0.2)), l: Some(eye(1e-3)), ..Default::default() },
        ];
        let m3 = NetworkModel::from_file(f, None).unwrap();
        let direct = balanced_two_bus(0.4, 2e-3, None);
        let a = reduce_network(&m3).unwrap();
        let b = reduce_network(&direct).unwrap();
        assert!((&a.ynet.y0 - &b.ynet.y0).norm() < 1e-9 * b.ynet.y0.norm());
        assert!((&a.ynet.y1 - &b.ynet.y1).norm() < 1e-9 * b.ynet.y1.norm());
    }

    #[test]
    fn droop_conversion() {
        let d = DroopConversion {
            omega0: 100.0,
            s_base: vec![1000.0],
            v_nom: vec![200.0],
        };
        assert!((d.mp_si(0, 1.0) - 1e-3).abs() < 1e-15);
        assert!((d.mq_si(0, 2.0) - 4e-3).abs() < 1e-15);
        let (lp, lq) = d.lambdas(&[1.0], &[2.0]);
        assert!((lp[(0, 0)] - 1.0 / (1e-3 * 4e4)).abs() < 1e-12);
        assert!((lq[(0, 0)] - 1.0 / (4e-3 * 200.0)).abs() < 1e-12);
    }
}
