//! Builds the two-bus fixture in code, writes it as JSON and reads it back.
//!
//!     cargo run --example build_two_bus

use std::collections::BTreeMap;

use gridcert::network_model::*;

fn main() -> gridcert::Result<()> {
    let w0 = default_omega0();
    let (v, s) = (230.0, 10e3);
    let zb = 3.0 * v * v / s;
    let diag = |x: f64| [[x, 0.0, 0.0], [0.0, x, 0.0], [0.0, 0.0, x]];
    let bus = |id: &str| BusFile {
        id: id.into(),
        kind: BusKind::Inverter,
        nominal_voltage: v,
        phases: "abc".into(),
    };
    let load = |id: &str| LoadFile {
        bus: id.into(),
        phases: ["a", "b", "c"]
            .into_iter()
            .map(|p| (p.to_string(), LoadPhaseFile::Pq { p: s / 3.0, q: s / 3.0 }))
            .collect::<BTreeMap<_, _>>(),
    };
    let inverter = |id: &str| InverterFile {
        bus: id.into(),
        rating: s,
        mp_percent: 1.0,
        mq_percent: 1.0,
        tau: 0.005,
        p_set: None,
        q_set: 0.0,
        v_set: None,
    };
    let file = NetworkFile {
        schema_version: SCHEMA_VERSION,
        name: "two_bus".into(),
        omega0: w0,
        droop_base_va: None,
        buses: vec![bus("1"), bus("2")],
        lines: vec![LineFile {
            from: "1".into(),
            to: "2".into(),
            r: Some(diag(0.03 * zb)),
            l: Some(diag(0.1 * zb / w0)),
            ..Default::default()
        }],
        loads: vec![load("1"), load("2")],
        inverters: vec![inverter("1"), inverter("2")],
    };
    let json = serde_json::to_string_pretty(&file).expect("network file serializes");
    let model = NetworkModel::from_json_str(&json, "in-memory", None)?;
    let red = reduce_network(&model)?;
    println!("{json}");
    println!("reduced network admittance (S):\n{:.4}", red.ynet.y0);
    println!("reduced load admittance (S):\n{:.4}", red.yload.y0);
    Ok(())
}
