//! Bisection for the global P-droop boundary of the two-bus fixture, by certificate and eigenvalues.
//!
//!     cargo run --example boundary_sweep

use gridcert::network_model::*;
use gridcert::sweep::*;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    for (label, m) in [("loaded", model.clone()), ("load-free", model.without_loads())] {
        let p = Problem::new(m)?;
        let axis = SweepAxis::new(AxisTarget::MpPercent, Scope::Global, 0.05, 50.0)?;
        for method in [Method::Cert, Method::Eig] {
            let out = boundary_outcome(&p, &axis, method, 1e-3)?;
            match &out.result {
                Some(r) => println!("{label:>9} {:>4}: {:.4}% after {} probes", method.name(), r.value, r.transcript.len()),
                None => println!("{label:>9} {:>4}: {}", method.name(), out.note),
            }
        }
    }
    Ok(())
}
