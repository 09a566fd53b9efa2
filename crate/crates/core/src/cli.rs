//! The `gridcert` command line: argument grammar, run configuration and report files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::certificate::{build_lyapunov, check_network, verify_lyapunov_identity};
use crate::error::{GridError, Result};
use crate::network_model::{matrix_set_for, parse_network, reduce_network, ConductorLibrary, NetworkModel};
use crate::reduced_model::{assemble_state_space, compare_orders, eigenvalues};
use crate::simulator::{classify, simulate, DisturbanceScript, Droops, SimOptions};
use crate::sweep::{
    boundary_outcome, check_soundness, heatmap, region_grid, write_boundaries_csv, write_transcripts_csv, AxisTarget, GridSpec, Method, Problem,
    ScenarioFile, Scope, SimSetup, SweepAxis, GRID_CAP,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Parser, Debug, Clone, Serialize)]
#[command(name = "gridcert", version, about = "Small-signal stability certificates for droop-controlled inverter microgrids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(clap::Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Network description (JSON).
    #[arg(long, global = true)]
    pub network: Option<PathBuf>,
    /// Conductor library (JSON), needed by networks that name conductors.
    #[arg(long, global = true)]
    pub conductors: Option<PathBuf>,
    /// Scenario file for `heatmap`.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Bisection tolerance (sweep, heatmap) or integrator relative tolerance (simulate).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Comma-separated methods: cert, eig, sim.
    #[arg(long, global = true)]
    pub methods: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Validate a network and write its reduced matrices.
    Build,
    /// Eigenvalues of the linearized model.
    Eig,
    /// Pairwise certificate of every neighboring inverter pair.
    Cert,
    /// Time-domain simulation of the full model.
    Simulate {
        /// Disturbance script (JSON).
        #[arg(long)]
        disturbances: Option<PathBuf>,
        /// Simulated time in seconds.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Stability boundary along a droop axis, or a verdict grid.
    Sweep {
        /// Droop axis: mp or mq.
        #[arg(long, default_value = "mp")]
        axis: String,
        /// Move the droops of this inverter pair together, e.g. 828,830.
        #[arg(long, conflicts_with = "bus")]
        pair: Option<String>,
        /// Move a single inverter's droop.
        #[arg(long)]
        bus: Option<String>,
        /// Bisection bracket in percent, e.g. 1,10.
        #[arg(long, default_value = "1,10")]
        bracket: String,
        /// Verdict grid instead of a boundary: m_p range as lo,hi,n.
        #[arg(long, requires = "mq_range")]
        mp_range: Option<String>,
        /// m_q range as lo,hi,n.
        #[arg(long, requires = "mp_range")]
        mq_range: Option<String>,
        /// Logarithmic grid spacing.
        #[arg(long)]
        log: bool,
        /// Disturbance script used by the sim method.
        #[arg(long)]
        disturbances: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Conservativeness table over pairs and scenarios.
    Heatmap {
        /// Disturbance script used when the reference method is sim.
        #[arg(long)]
        disturbances: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    schema_version: u32,
    config: &'a Cli,
    result: T,
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("gridcert: {e}");
            e.exit_code()
        }
    }
}

/// Run a parsed command; returns the files written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    if let Some(t) = cli.common.tol {
        if !(t > 0.0) {
            return Err(GridError::Config(format!("--tol must be positive, got {t}")));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .map_err(|e| GridError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn read_inputs(c: &Common) -> Result<(NetworkModel, Option<ConductorLibrary>)> {
    let lib = c.conductors.as_ref().map(ConductorLibrary::load).transpose()?;
    let net = c.network.as_ref().ok_or_else(|| GridError::Config("--network is required".into()))?;
    Ok((parse_network(net, lib.as_ref())?, lib))
}

fn write_json<T: Serialize>(cli: &Cli, name: &str, result: T) -> Result<PathBuf> {
    let r = Report {
        tool: "gridcert",
        version: TOOL_VERSION,
        schema_version: REPORT_SCHEMA,
        config: cli,
        result,
    };
    let s = serde_json::to_string_pretty(&r).map_err(|e| GridError::Numerical(format!("serialize: {e}")))?;
    write_file(&cli.common.out, name, s.as_bytes())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let io = |path: &Path, e: std::io::Error| GridError::Io {
        path: path.display().to_string(),
        source: e,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| io(&path, e))?;
    Ok(path)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| GridError::Config(format!("{what}: {e}")))?;
    if v.len() != n {
        return Err(GridError::Config(format!("{what} needs {n} comma-separated numbers")));
    }
    Ok(v)
}

fn parse_range(s: &str, what: &str) -> Result<(f64, f64, usize)> {
    let v = parse_floats(s, 3, what)?;
    if v[2].fract() != 0.0 || v[2] < 1.0 {
        return Err(GridError::Config(format!("{what}: point count must be a positive integer")));
    }
    Ok((v[0], v[1], v[2] as usize))
}

fn sim_setup(model: &NetworkModel, disturbances: &Option<PathBuf>, horizon: Option<f64>, seed: u64) -> Result<SimSetup> {
    let mut s = SimSetup::default_for(model);
    if let Some(p) = disturbances {
        let d = DisturbanceScript::load(p)?;
        s.disturbances = d.disturbances;
        if let Some(h) = d.horizon {
            s.horizon = h;
        }
    }
    if let Some(h) = horizon {
        s.horizon = h;
    }
    s.seed = seed;
    Ok(s)
}

#[derive(Serialize)]
struct BuildSummary {
    name: String,
    buses: usize,
    lines: usize,
    loads: usize,
    inverters: Vec<String>,
    symmetry_defect: f64,
    tau: f64,
    matrices: Vec<(String, Vec<Vec<f64>>)>,
    warnings: Vec<String>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn dispatch(cli: &Cli) -> Result<Vec<PathBuf>> {
    let c = &cli.common;
    let (model, lib) = read_inputs(c)?;
    let ids = model.inverter_ids();
    match &cli.command {
        Command::Build => {
            let red = reduce_network(&model)?;
            let ms = matrix_set_for(&model)?;
            let summary = BuildSummary {
                name: model.name.clone(),
                buses: model.buses.len(),
                lines: model.lines.len(),
                loads: model.loads.len(),
                inverters: ids,
                symmetry_defect: red.symmetry_defect,
                tau: ms.tau,
                matrices: ms.named().iter().map(|(n, m)| (n.to_string(), rows(m))).collect(),
                warnings: ms.warnings.clone(),
            };
            Ok(vec![write_json(cli, "build.json", summary)?])
        }
        Command::Eig => {
            let ms = matrix_set_for(&model)?;
            let ss = assemble_state_space(&ms)?;
            let rep = eigenvalues(&ss)?;
            #[derive(Serialize)]
            struct Out<T, U> {
                report: T,
                orders: U,
                pivot_condition: f64,
                warnings: Vec<String>,
            }
            let out = Out {
                report: rep,
                orders: compare_orders(&ms)?,
                pivot_condition: ss.pivot_condition,
                warnings: ms.warnings.clone(),
            };
            Ok(vec![write_json(cli, "eig.json", out)?])
        }
        Command::Cert => {
            let ms = matrix_set_for(&model)?;
            let rep = check_network(&ms, &ids)?;
            let lyap = match (assemble_state_space(&ms), build_lyapunov(&ms)) {
                (Ok(ss), Ok(lb)) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
                    Some(verify_lyapunov_identity(&ss, &lb, 100, &mut rng))
                }
                _ => None,
            };
            #[derive(Serialize)]
            struct Out<T> {
                report: T,
                lyapunov_identity_residual: Option<f64>,
                warnings: Vec<String>,
            }
            Ok(vec![write_json(
                cli,
                "cert.json",
                Out {
                    report: rep,
                    lyapunov_identity_residual: lyap,
                    warnings: ms.warnings.clone(),
                },
            )?])
        }
        Command::Simulate { disturbances, horizon } => {
            let setup = sim_setup(&model, disturbances, *horizon, c.seed)?;
            let (dist, hz) = if disturbances.is_some() {
                (setup.disturbances.clone(), setup.horizon)
            } else {
                (vec![], horizon.unwrap_or(setup.horizon))
            };
            let opts = SimOptions {
                rtol: c.tol.unwrap_or(1e-6),
                record_interval: 1e-3,
                ..SimOptions::default()
            };
            let tr = simulate(&model, &Droops::from_model(&model), &dist, hz, &opts)?;
            let csv = csv_bytes(|b| tr.write_csv(b))?;
            let f1 = write_file(&c.out, "trajectory.csv", &csv)?;
            let class = classify(&tr, &setup.classify).ok();
            #[derive(Serialize)]
            struct Out<'a, T> {
                horizon: f64,
                disturbances: &'a [crate::simulator::Disturbance],
                samples: usize,
                steps: usize,
                rejected_steps: usize,
                diverged: bool,
                message: Option<String>,
                classification: Option<T>,
            }
            let f2 = write_json(
                cli,
                "simulate.json",
                Out {
                    horizon: hz,
                    disturbances: &dist,
                    samples: tr.t.len(),
                    steps: tr.steps,
                    rejected_steps: tr.rejected,
                    diverged: tr.diverged,
                    message: tr.message.clone(),
                    classification: class,
                },
            )?;
            Ok(vec![f1, f2])
        }
        Command::Sweep {
            axis,
            pair,
            bus,
            bracket,
            mp_range,
            mq_range,
            log,
            disturbances,
            horizon,
        } => {
            let methods = Method::parse_list(c.methods.as_deref().unwrap_or("cert,eig"))?;
            let setup = sim_setup(&model, disturbances, *horizon, c.seed)?;
            let p = Problem::new(model.clone())?.with_sim(setup);
            if let (Some(a), Some(b)) = (mp_range, mq_range) {
                let spec = GridSpec {
                    mp: parse_range(a, "--mp-range")?,
                    mq: parse_range(b, "--mq-range")?,
                    log: *log,
                    cap: GRID_CAP,
                };
                let grid = region_grid(&p, &spec, &methods)?;
                let f1 = write_file(&c.out, "region.csv", &csv_bytes(|w| grid.write_csv(w))?)?;
                #[derive(Serialize)]
                struct Out {
                    cells: usize,
                    stable_counts: Vec<(String, usize)>,
                }
                let counts = grid
                    .methods
                    .iter()
                    .zip(&grid.cells)
                    .map(|(m, cells)| (m.name().to_string(), cells.iter().flatten().filter(|&&x| x).count()))
                    .collect();
                let f2 = write_json(
                    cli,
                    "sweep.json",
                    Out {
                        cells: grid.mp.len() * grid.mq.len(),
                        stable_counts: counts,
                    },
                )?;
                return Ok(vec![f1, f2]);
            }
            let target = match axis.as_str() {
                "mp" | "mp_percent" => AxisTarget::MpPercent,
                "mq" | "mq_percent" => AxisTarget::MqPercent,
                o => return Err(GridError::Config(format!("--axis must be mp or mq, got '{o}'"))),
            };
            let scope = match (pair, bus) {
                (Some(s), _) => {
                    let v: Vec<&str> = s.split(',').map(str::trim).collect();
                    if v.len() != 2 {
                        return Err(GridError::Config("--pair needs two bus ids".into()));
                    }
                    Scope::Pair(v[0].into(), v[1].into())
                }
                (None, Some(b)) => Scope::Bus(b.clone()),
                (None, None) => Scope::Global,
            };
            let br = parse_floats(bracket, 2, "--bracket")?;
            let ax = SweepAxis::new(target, scope, br[0], br[1])?;
            ax.droops_at(&model, &p.nominal, br[0])?;
            let tol = c.tol.unwrap_or(1e-3);
            let outcomes = methods.iter().map(|&m| boundary_outcome(&p, &ax, m, tol)).collect::<Result<Vec<_>>>()?;
            let find = |m: Method| outcomes.iter().find(|o| o.method == m).and_then(|o| o.result.as_ref());
            if let (Some(ce), Some(ei)) = (find(Method::Cert), find(Method::Eig)) {
                check_soundness(ce, ei)?;
            }
            let f1 = write_file(&c.out, "boundaries.csv", &csv_bytes(|w| write_boundaries_csv(w, &outcomes))?)?;
            let f2 = write_file(
                &c.out,
                "transcripts.csv",
                &csv_bytes(|w| write_transcripts_csv(w, outcomes.iter().filter_map(|o| o.result.as_ref())))?,
            )?;
            let f3 = write_json(cli, "sweep.json", &outcomes)?;
            Ok(vec![f1, f2, f3])
        }
        Command::Heatmap { disturbances } => {
            let sf = c.scenario.as_ref().ok_or_else(|| GridError::Config("heatmap needs --scenario".into()))?;
            let file = ScenarioFile::load(sf)?;
            let setup = sim_setup(&model, disturbances, None, c.seed)?;
            let tol = c.tol.unwrap_or(1e-3);
            let table = heatmap(&model, lib.as_ref(), &file, tol, Some(&setup))?;
            let f1 = write_file(&c.out, "heatmap.csv", &csv_bytes(|w| table.write_csv(w))?)?;
            let f2 = write_json(cli, "heatmap.json", &table)?;
            Ok(vec![f1, f2])
        }
    }
}
