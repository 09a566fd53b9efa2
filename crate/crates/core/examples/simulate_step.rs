//! Nonlinear response of the two-bus fixture to a +0.1 p.u. setpoint step, written as CSV.
//!
//!     cargo run --release --example simulate_step > step.csv

use gridcert::network_model::*;
use gridcert::simulator::*;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let step = Disturbance {
        bus: "1".into(),
        quantity: Quantity::PSet,
        delta: 0.1,
        time: 0.05,
    };
    let opts = SimOptions {
        record_interval: 1e-3,
        ..SimOptions::default()
    };
    let tr = simulate(&model, &Droops::from_model(&model), &[step], 3.0, &opts)?;
    eprintln!("{} steps, {} rejected, diverged: {}", tr.steps, tr.rejected, tr.diverged);
    let c = classify(&tr, &ClassifyOptions::default())?;
    eprintln!("classified {:?} (envelope ratio {:.3})", c.verdict, c.ratio);
    tr.write_csv(std::io::stdout())
}
