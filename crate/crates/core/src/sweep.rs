//! Droop-space exploration: verdict grids, boundary bisection per method,
//! conservativeness and heat-map tables.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{check_network_with, Topology};
use crate::error::{GridError, Result};
use crate::network_model::{matrix_set_for, ConductorLibrary, NetworkModel, RealMatrixSet};
use crate::reduced_model::eig_report;
use crate::simulator::{classify, ClassifyOptions, Simulator, Disturbance, Droops, Quantity, SimOptions, Stability};

/// Grid size cap per axis.
pub const GRID_CAP: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cert,
    Eig,
    Sim,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cert => "cert",
            Method::Eig => "eig",
            Method::Sim => "sim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cert" => Ok(Method::Cert),
            "eig" | "eigen" => Ok(Method::Eig),
            "sim" => Ok(Method::Sim),
            o => Err(GridError::Config(format!("unknown method '{o}' (expected cert, eig or sim)"))),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut v: Vec<Method> = s.split(',').filter(|x| !x.trim().is_empty()).map(Method::parse).collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(GridError::Config("empty method list".into()));
        }
        v.dedup();
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisTarget {
    MpPercent,
    MqPercent,
    InverterRating,
    ConductorType,
    LineLength,
}

impl AxisTarget {
    pub fn name(&self) -> &'static str {
        match self {
            AxisTarget::MpPercent => "mp_percent",
            AxisTarget::MqPercent => "mq_percent",
            AxisTarget::InverterRating => "inverter_rating",
            AxisTarget::ConductorType => "conductor_type",
            AxisTarget::LineLength => "line_length",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Bus(String),
    Pair(String, String),
    Global,
}

impl Scope {
    fn label(&self) -> String {
        match self {
            Scope::Bus(b) => b.clone(),
            Scope::Pair(a, b) => format!("{a}-{b}"),
            Scope::Global => "global".into(),
        }
    }
}

/// A droop axis with a bisection bracket.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepAxis {
    pub target: AxisTarget,
    pub scope: Scope,
    pub lo: f64,
    pub hi: f64,
}

impl SweepAxis {
    pub fn new(target: AxisTarget, scope: Scope, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(GridError::Domain(format!("axis range must satisfy 0 < lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { target, scope, lo, hi })
    }

    /// Droops at `value` along this axis, others at `nominal`.
    pub fn droops_at(&self, model: &NetworkModel, nominal: &Droops, value: f64) -> Result<Droops> {
        let mut d = nominal.clone();
        let idx: Vec<usize> = match &self.scope {
            Scope::Global => (0..model.n_inverters()).collect(),
            Scope::Bus(b) => vec![model.inverter_index(b)?],
            Scope::Pair(a, b) => vec![model.inverter_index(a)?, model.inverter_index(b)?],
        };
        let target = match self.target {
            AxisTarget::MpPercent => &mut d.mp_percent,
            AxisTarget::MqPercent => &mut d.mq_percent,
            t => {
                return Err(GridError::Config(format!(
                    "axis target {t:?} is a scenario dimension; only droop axes can be bisected"
                )))
            }
        };
        for k in idx {
            target[k] = value;
        }
        Ok(d)
    }
}

/// Simulation settings used by the `sim` method.
#[derive(Clone, Debug, Serialize)]
pub struct SimSetup {
    pub disturbances: Vec<Disturbance>,
    pub horizon: f64,
    pub options: SimOptions,
    pub classify: ClassifyOptions,
    /// Amplitude of the seeded random angle (rad) and relative voltage offsets
    /// added to the initial state so that every mode is excited.
    pub excitation: f64,
    pub seed: u64,
}

impl SimSetup {
    /// A +0.3 p.u. active power step at the first inverter at 0.5 s.
    pub fn default_for(model: &NetworkModel) -> Self {
        let bus = model.buses[model.inverters[0].bus].id.clone();
        Self {
            disturbances: vec![Disturbance {
                bus,
                quantity: Quantity::PSet,
                delta: 0.3,
                time: 0.5,
            }],
            horizon: 10.0,
            options: SimOptions {
                rtol: 1e-4,
                record_interval: 1e-3,
                ..SimOptions::default()
            },
            classify: ClassifyOptions::default(),
            excitation: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub stable: bool,
    /// Positive inside the stable region: certificate minimum slack, eigenvalue
    /// margin, or one minus the simulated envelope ratio.
    pub score: f64,
    pub note: String,
}

/// Flat equilibrium plus seeded uniform offsets of size `amplitude` in angle and relative voltage.
pub fn excited_state(sim: &Simulator, amplitude: f64, seed: u64) -> DVector<f64> {
    let n = sim.n_inverters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let dphi = draw();
    let drho = draw();
    sim.perturbed_state(&dphi, &drho, &vec![0.0; n])
}

type CacheKey = (Method, Vec<u64>, Vec<u64>);

/// A network with its matrix set, evaluated at arbitrary droops.
pub struct Problem {
    pub model: NetworkModel,
    pub ms: RealMatrixSet,
    pub topology: Topology,
    pub nominal: Droops,
    pub sim: SimSetup,
    cache: Mutex<HashMap<CacheKey, Verdict>>,
}

impl Problem {
    pub fn new(model: NetworkModel) -> Result<Self> {
        let ms = matrix_set_for(&model)?;
        let topology = Topology::from_matrix_set(&ms);
        let nominal = Droops::from_model(&model);
        let sim = SimSetup::default_for(&model);
        Ok(Self {
            model,
            ms,
            topology,
            nominal,
            sim,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_sim(mut self, sim: SimSetup) -> Self {
        self.sim = sim;
        self
    }

    pub fn ids(&self) -> Vec<String> {
        self.model.inverter_ids()
    }

    pub fn evaluate(&self, method: Method, d: &Droops) -> Result<Verdict> {
        let key = (
            method,
            d.mp_percent.iter().map(|x| x.to_bits()).collect(),
            d.mq_percent.iter().map(|x| x.to_bits()).collect(),
        );
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let v = self.evaluate_uncached(method, d)?;
        self.cache.lock().unwrap().insert(key, v.clone());
        Ok(v)
    }

    fn evaluate_uncached(&self, method: Method, d: &Droops) -> Result<Verdict> {
        if d.mp_percent.iter().chain(&d.mq_percent).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(GridError::Domain("droop percentages must be positive".into()));
        }
        match method {
            Method::Cert => {
                let ms = self.ms.with_droops(&d.mp_percent, &d.mq_percent);
                let rep = check_network_with(&ms, &self.topology, &self.ids())?;
                Ok(Verdict {
                    stable: rep.certified,
                    score: rep.min_slack,
                    note: rep.violated.first().map(|(a, b)| format!("{a}-{b}")).unwrap_or_default(),
                })
            }
            Method::Eig => {
                let ms = self.ms.with_droops(&d.mp_percent, &d.mq_percent);
                match eig_report(&ms) {
                    Ok(r) => Ok(Verdict {
                        stable: r.stable,
                        score: r.margin,
                        note: String::new(),
                    }),
                    Err(GridError::ModelRegime(m)) => Ok(Verdict {
                        stable: false,
                        score: f64::NEG_INFINITY,
                        note: m,
                    }),
                    Err(e) => Err(e),
                }
            }
            Method::Sim => {
                let model = self.model.with_droops(&d.mp_percent, &d.mq_percent);
                let ids: Vec<String> = model.buses.iter().map(|b| b.id.clone()).collect();
                let base = Simulator::new(&model, d)?;
                let x0 = excited_state(&base, self.sim.excitation, self.sim.seed);
                let mut horizon = self.sim.horizon;
                for attempt in 0..2 {
                    let tr = base.clone().run(x0.clone(), &self.sim.disturbances, horizon, &ids, &self.sim.options)?;
                    let c = classify(&tr, &self.sim.classify)?;
                    match c.verdict {
                        Stability::Marginal if attempt == 0 => horizon *= 2.0,
                        v => {
                            return Ok(Verdict {
                                stable: v == Stability::Stable,
                                score: 1.0 - c.ratio,
                                note: format!("{v:?} ratio {:.6}", c.ratio).to_lowercase(),
                            })
                        }
                    }
                }
                unreachable!()
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub step: usize,
    pub value: f64,
    pub stable: bool,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundaryResult {
    pub method: Method,
    pub axis: SweepAxis,
    pub tol: f64,
    /// Largest probed value on the stable side.
    pub value: f64,
    pub transcript: Vec<Probe>,
}

/// Bisection of a two-class predicate on `[lo, hi]`. Returns the stable-side
/// end of the final bracket and the probe log (both ends first).
pub fn bisect<F>(lo: f64, hi: f64, tol: f64, mut f: F) -> Result<(f64, Vec<Probe>)>
where
    F: FnMut(f64) -> Result<(bool, f64)>,
{
    if !(tol > 0.0) {
        return Err(GridError::Domain("bisection tolerance must be positive".into()));
    }
    let mut log = Vec::new();
    let (slo, sclo) = f(lo)?;
    log.push(Probe { step: 0, value: lo, stable: slo, score: sclo });
    let (shi, schi) = f(hi)?;
    log.push(Probe { step: 0, value: hi, stable: shi, score: schi });
    if slo == shi {
        return Err(GridError::Bracket {
            lo,
            hi,
            verdict: if slo { "stable".into() } else { "unstable".into() },
        });
    }
    let (mut a, mut b) = (lo, hi);
    let mut step = 0;
    while (b - a).abs() > tol {
        step += 1;
        let m = 0.5 * (a + b);
        let (s, sc) = f(m)?;
        log.push(Probe { step, value: m, stable: s, score: sc });
        if s == slo {
            a = m;
        } else {
            b = m;
        }
    }
    Ok((if slo { a } else { b }, log))
}

/// Bisect `axis` for `method`.
pub fn boundary(p: &Problem, axis: &SweepAxis, method: Method, tol: f64) -> Result<BoundaryResult> {
    let (value, transcript) = bisect(axis.lo, axis.hi, tol, |x| {
        let d = axis.droops_at(&p.model, &p.nominal, x)?;
        let v = p.evaluate(method, &d)?;
        Ok((v.stable, v.score))
    })?;
    Ok(BoundaryResult {
        method,
        axis: axis.clone(),
        tol,
        value,
        transcript,
    })
}

/// Degree of conservativeness, percent.
pub fn conservativeness(est: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(GridError::Domain(format!("reference boundary must be positive, got {reference}")));
    }
    Ok(100.0 * (reference - est) / reference)
}

/// Boundaries must respect `cert <= eig`.
pub fn check_soundness(cert: &BoundaryResult, eig: &BoundaryResult) -> Result<()> {
    if cert.value > eig.value + cert.tol.max(eig.tol) {
        let dump = serde_json::to_string(&(cert, eig)).unwrap_or_default();
        return Err(GridError::Soundness(format!(
            "certified boundary {} exceeds eigenvalue boundary {}: {dump}",
            cert.value, eig.value
        )));
    }
    Ok(())
}

/// A boundary search whose bracket may hold no stable point at all.
#[derive(Clone, Debug, Serialize)]
pub struct BoundaryOutcome {
    pub method: Method,
    pub axis: SweepAxis,
    pub tol: f64,
    pub result: Option<BoundaryResult>,
    pub note: String,
}

/// Like [`boundary`], but a bracket that is unstable at both ends yields an
/// outcome without a result instead of an error.
pub fn boundary_outcome(p: &Problem, axis: &SweepAxis, method: Method, tol: f64) -> Result<BoundaryOutcome> {
    let result = boundary_or_empty(p, axis, method, tol)?;
    Ok(BoundaryOutcome {
        method,
        axis: axis.clone(),
        tol,
        note: if result.is_none() { "no stable point in bracket".into() } else { String::new() },
        result,
    })
}

pub fn write_boundaries_csv<W: Write>(w: W, outcomes: &[BoundaryOutcome]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let e = |e: csv::Error| GridError::Numerical(format!("csv: {e}"));
    out.write_record(["method", "target", "scope", "lo", "hi", "tol", "boundary", "probes", "note"]).map_err(e)?;
    for o in outcomes {
        out.write_record([
            o.method.name().to_string(),
            o.axis.target.name().to_string(),
            o.axis.scope.label(),
            o.axis.lo.to_string(),
            o.axis.hi.to_string(),
            o.tol.to_string(),
            o.result.as_ref().map(|r| format!("{:.10}", r.value)).unwrap_or_default(),
            o.result.as_ref().map_or(0, |r| r.transcript.len()).to_string(),
            o.note.clone(),
        ])
        .map_err(e)?;
    }
    out.flush().map_err(|x| GridError::Numerical(x.to_string()))
}

pub fn write_transcripts_csv<'a, W: Write>(w: W, results: impl IntoIterator<Item = &'a BoundaryResult>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let e = |e: csv::Error| GridError::Numerical(format!("csv: {e}"));
    out.write_record(["method", "scope", "step", "value", "stable", "score"]).map_err(e)?;
    for r in results {
        for p in &r.transcript {
            out.write_record([
                r.method.name().to_string(),
                r.axis.scope.label(),
                p.step.to_string(),
                format!("{:.10}", p.value),
                p.stable.to_string(),
                format!("{:.6e}", p.score),
            ])
            .map_err(e)?;
        }
    }
    out.flush().map_err(|x| GridError::Numerical(x.to_string()))
}

// ---------------------------------------------------------------------------
// Region grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub mp: (f64, f64, usize),
    pub mq: (f64, f64, usize),
    #[serde(default)]
    pub log: bool,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_cap() -> usize {
    GRID_CAP
}

fn axis_points(lo: f64, hi: f64, n: usize, log: bool) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| {
            let s = k as f64 / (n - 1) as f64;
            if log {
                (lo.ln() + s * (hi.ln() - lo.ln())).exp()
            } else {
                lo + s * (hi - lo)
            }
        })
        .collect()
}

/// Uniform-droop verdicts, `cells[method][i_mp][i_mq]`.
#[derive(Clone, Debug, Serialize)]
pub struct RegionGrid {
    pub mp: Vec<f64>,
    pub mq: Vec<f64>,
    pub methods: Vec<Method>,
    pub cells: Vec<Vec<Vec<bool>>>,
}

impl RegionGrid {
    pub fn get(&self, method: Method, i: usize, j: usize) -> Option<bool> {
        self.methods.iter().position(|&m| m == method).map(|k| self.cells[k][i][j])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let e = |e: csv::Error| GridError::Numerical(format!("csv: {e}"));
        let mut header = vec!["mp_percent".to_string(), "mq_percent".to_string()];
        header.extend(self.methods.iter().map(|m| m.name().to_string()));
        out.write_record(&header).map_err(e)?;
        for (i, mp) in self.mp.iter().enumerate() {
            for (j, mq) in self.mq.iter().enumerate() {
                let mut row = vec![format!("{mp:.10}"), format!("{mq:.10}")];
                row.extend(self.cells.iter().map(|c| (c[i][j] as u8).to_string()));
                out.write_record(&row).map_err(e)?;
            }
        }
        out.flush().map_err(|x| GridError::Numerical(x.to_string()))
    }
}

pub fn region_grid(p: &Problem, spec: &GridSpec, methods: &[Method]) -> Result<RegionGrid> {
    let (n1, n2) = (spec.mp.2, spec.mq.2);
    if n1 == 0 || n2 == 0 || n1 > spec.cap || n2 > spec.cap {
        return Err(GridError::Domain(format!("grid {n1}x{n2} outside 1..={} per axis", spec.cap)));
    }
    for (lo, hi) in [(spec.mp.0, spec.mp.1), (spec.mq.0, spec.mq.1)] {
        if !(lo > 0.0 && hi >= lo) {
            return Err(GridError::Domain(format!("grid range [{lo}, {hi}] must be positive and ordered")));
        }
    }
    let mp = axis_points(spec.mp.0, spec.mp.1, n1, spec.log);
    let mq = axis_points(spec.mq.0, spec.mq.1, n2, spec.log);
    let n = p.model.n_inverters();
    let cells: Vec<Vec<Vec<bool>>> = methods
        .iter()
        .map(|&m| {
            let flat: Vec<bool> = (0..n1 * n2)
                .into_par_iter()
                .map(|c| {
                    let d = Droops {
                        mp_percent: vec![mp[c / n2]; n],
                        mq_percent: vec![mq[c % n2]; n],
                    };
                    p.evaluate(m, &d).map(|v| v.stable)
                })
                .collect::<Result<_>>()?;
            Ok(flat.chunks(n2).map(|r| r.to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(RegionGrid {
        mp,
        mq,
        methods: methods.to_vec(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Heat maps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scenario {
    /// Conductor on every line between the pair.
    Conductor { name: String },
    /// Rating of one inverter multiplied by `multiplier`.
    Rating { bus: String, multiplier: f64 },
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Conductor { name } => name.clone(),
            Scenario::Rating { bus, multiplier } => format!("{bus}x{multiplier}"),
        }
    }

    pub fn apply(&self, model: &NetworkModel, pair: &(String, String), lib: Option<&ConductorLibrary>) -> Result<NetworkModel> {
        match self {
            Scenario::Conductor { name } => {
                let lib = lib.ok_or_else(|| GridError::Config("conductor scenarios need a conductor library".into()))?;
                let c = lib.get(name).map_err(|e| GridError::Config(e.to_string()))?;
                model.with_conductor_between(&pair.0, &pair.1, c, name)
            }
            Scenario::Rating { bus, multiplier } => {
                if !(0.8 - 1e-12..=1.2 + 1e-12).contains(multiplier) {
                    return Err(GridError::Config(format!("rating multiplier {multiplier} outside [0.8, 1.2]")));
                }
                let k = model.inverter_index(bus).map_err(|e| GridError::Config(e.to_string()))?;
                let mut m = model.clone();
                m.inverters[k].rating *= multiplier;
                Ok(m)
            }
        }
    }
}

/// Scenario file for the `heatmap` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub pairs: Vec<(String, String)>,
    pub scenarios: Vec<Scenario>,
    pub bracket: (f64, f64),
    #[serde(default = "default_target")]
    pub target: AxisTarget,
    #[serde(default = "default_reference")]
    pub reference: Method,
    #[serde(default)]
    pub global_axis: bool,
}

fn default_target() -> AxisTarget {
    AxisTarget::MpPercent
}

fn default_reference() -> Method {
    Method::Eig
}

impl ScenarioFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let f: Self = serde_json::from_str(&s).map_err(|e| GridError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        if f.schema_version != 1 {
            return Err(GridError::Config(format!("unsupported scenario schema {}", f.schema_version)));
        }
        if f.pairs.is_empty() || f.scenarios.is_empty() {
            return Err(GridError::Config("scenario file needs at least one pair and one scenario".into()));
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapCell {
    pub pair: (String, String),
    pub scenario: String,
    /// Certified boundary; zero when no point of the bracket is certified.
    pub estimate: f64,
    pub reference: Option<f64>,
    pub conservativeness: Option<f64>,
    pub note: String,
    pub transcripts: Vec<BoundaryResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapTable {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub reference: Method,
    pub cells: Vec<Vec<HeatmapCell>>,
}

impl HeatmapTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let e = |e: csv::Error| GridError::Numerical(format!("csv: {e}"));
        out.write_record(["pair", "scenario", "estimate", "reference", "conservativeness_percent", "note"]).map_err(e)?;
        for row in &self.cells {
            for c in row {
                let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.write_record([
                    format!("{}-{}", c.pair.0, c.pair.1),
                    c.scenario.clone(),
                    format!("{:.6}", c.estimate),
                    opt(c.reference),
                    opt(c.conservativeness),
                    c.note.clone(),
                ])
                .map_err(e)?;
            }
        }
        out.flush().map_err(|x| GridError::Numerical(x.to_string()))
    }
}

/// Boundary for `method`, with an empty stable region reported as `Ok(None)`.
fn boundary_or_empty(p: &Problem, axis: &SweepAxis, method: Method, tol: f64) -> Result<Option<BoundaryResult>> {
    match boundary(p, axis, method, tol) {
        Ok(r) => Ok(Some(r)),
        Err(GridError::Bracket { verdict, .. }) if verdict == "unstable" => Ok(None),
        Err(e) => Err(e),
    }
}

/// Conservativeness of the certificate against `reference` for every pair and scenario.
pub fn heatmap(model: &NetworkModel, lib: Option<&ConductorLibrary>, file: &ScenarioFile, tol: f64, sim: Option<&SimSetup>) -> Result<HeatmapTable> {
    let jobs: Vec<(usize, usize)> = (0..file.pairs.len()).flat_map(|r| (0..file.scenarios.len()).map(move |c| (r, c))).collect();
    let cells: Vec<HeatmapCell> = jobs
        .into_par_iter()
        .map(|(r, c)| {
            let pair = &file.pairs[r];
            let sc = &file.scenarios[c];
            let m = sc.apply(model, pair, lib)?;
            let mut p = Problem::new(m)?;
            if let Some(s) = sim {
                p = p.with_sim(s.clone());
            }
            let scope = if file.global_axis {
                Scope::Global
            } else {
                Scope::Pair(pair.0.clone(), pair.1.clone())
            };
            let axis = SweepAxis::new(file.target, scope, file.bracket.0, file.bracket.1)?;
            let est = boundary_or_empty(&p, &axis, Method::Cert, tol)?;
            let rf = boundary_or_empty(&p, &axis, file.reference, tol)?;
            let mut note = String::new();
            if est.is_none() {
                note.push_str("no certified point in bracket; ");
            }
            if rf.is_none() {
                note.push_str("reference unstable over bracket; ");
            }
            if let (Some(e), Some(f)) = (&est, &rf) {
                if file.reference == Method::Eig {
                    check_soundness(e, f)?;
                }
            }
            let estimate = est.as_ref().map_or(0.0, |b| b.value);
            let reference = rf.as_ref().map(|b| b.value);
            let conservativeness = reference.map(|rv| conservativeness(estimate, rv)).transpose()?;
            Ok(HeatmapCell {
                pair: pair.clone(),
                scenario: sc.label(),
                estimate,
                reference,
                conservativeness,
                note: note.trim_end_matches("; ").to_string(),
                transcripts: est.into_iter().chain(rf).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let ncol = file.scenarios.len();
    Ok(HeatmapTable {
        rows: file.pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect(),
        columns: file.scenarios.iter().map(|s| s.label()).collect(),
        reference: file.reference,
        cells: cells.chunks(ncol).map(|r| r.to_vec()).collect(),
    })
}
