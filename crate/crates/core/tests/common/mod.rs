#![allow(dead_code)]

use std::collections::BTreeMap;

use gridcert::network_model::*;
use rand::Rng;

pub const V: f64 = 230.0;
pub const S: f64 = 10e3;

pub fn data(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn two_bus() -> NetworkModel {
    parse_network(data("two_bus.json"), None).unwrap()
}

pub fn ieee34() -> (NetworkModel, ConductorLibrary) {
    let lib = ConductorLibrary::load(data("conductors.json")).unwrap();
    (parse_network(data("ieee34.json"), Some(&lib)).unwrap(), lib)
}

#[derive(Clone, Debug)]
pub struct RandomNet {
    pub n: usize,
    /// Load as a multiple of the inverter rating is drawn from `[0, 1.5] * load_scale`.
    pub load_scale: f64,
    pub rx: (f64, f64),
    pub droop: (f64, f64),
    pub tau: (f64, f64),
    /// Mutual line impedance as a fraction of self impedance.
    pub mutual: f64,
    pub unbalanced_loads: bool,
}

impl Default for RandomNet {
    fn default() -> Self {
        Self {
            n: 3,
            load_scale: 1.0,
            rx: (0.3, 3.0),
            droop: (0.1, 10.0),
            tau: (0.02, 0.3),
            mutual: 0.3,
            unbalanced_loads: true,
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// Random inverter-only network: a random tree, sometimes with one extra edge.
pub fn random_network<R: Rng>(rng: &mut R, spec: &RandomNet) -> NetworkModel {
    let n = spec.n;
    let w0 = default_omega0();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i, rng.gen_range(0..i))).collect();
    if n > 2 && rng.gen_bool(0.5) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && !edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            edges.push((a, b));
        }
    }
    let zb = 3.0 * V * V / S;
    let id = |i: usize| (i + 1).to_string();
    let lines = edges
        .iter()
        .map(|&(a, b)| {
            let x = rng.gen_range(0.01..0.2) * zb;
            let r = x * rng.gen_range(spec.rx.0..=spec.rx.1);
            let m = rng.gen_range(0.0..=spec.mutual);
            let mat = |s: f64| {
                let mut z = [[s * m; 3]; 3];
                (0..3).for_each(|k| z[k][k] = s);
                z
            };
            LineFile {
                from: id(a),
                to: id(b),
                r: Some(mat(r)),
                l: Some(mat(x / w0)),
                ..Default::default()
            }
        })
        .collect();
    let ratings: Vec<f64> = (0..n).map(|_| S * rng.gen_range(0.5..2.0)).collect();
    let mut loads = Vec::new();
    for i in 0..n {
        let f = spec.load_scale * rng.gen_range(0.0..1.5);
        if f > 0.0 {
            let p = f * ratings[i] / 3.0;
            let q = p * rng.gen_range(0.05..0.8);
            let mut phases = BTreeMap::new();
            for ph in ["a", "b", "c"] {
                let u = if spec.unbalanced_loads { rng.gen_range(0.7..1.3) } else { 1.0 };
                phases.insert(ph.to_string(), LoadPhaseFile::Pq { p: p * u, q: q * u });
            }
            loads.push(LoadFile { bus: id(i), phases });
        }
    }
    let tau = rng.gen_range(spec.tau.0..=spec.tau.1);
    let inverters = (0..n)
        .map(|i| InverterFile {
            bus: id(i),
            rating: ratings[i],
            mp_percent: log_uniform(rng, spec.droop),
            mq_percent: log_uniform(rng, spec.droop),
            tau,
            p_set: None,
            q_set: 0.0,
            v_set: None,
        })
        .collect();
    let f = NetworkFile {
        schema_version: 1,
        name: "random".into(),
        omega0: w0,
        droop_base_va: None,
        buses: (0..n)
            .map(|i| BusFile {
                id: id(i),
                kind: BusKind::Inverter,
                nominal_voltage: V,
                phases: "abc".into(),
            })
            .collect(),
        lines,
        loads,
        inverters,
    };
    NetworkModel::from_file(f, None).unwrap()
}
