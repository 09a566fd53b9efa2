//! Eigenvalues of the reduced model of the two-bus fixture across a few droop gains.
//!
//!     cargo run --example eigen_report

use gridcert::network_model::*;
use gridcert::reduced_model::*;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let ms = matrix_set_for(&model)?;
    for mp in [0.5, 2.0, 5.0, 10.0, 20.0] {
        let rep = eig_report(&ms.with_droops(&[mp, mp], &[1.0, 1.0]))?;
        println!(
            "mp = {mp:>5.1}%  abscissa {:>10.4}  {}",
            rep.spectral_abscissa,
            if rep.stable { "stable" } else { "unstable" }
        );
        for z in rep.eigenvalues.iter().take(3) {
            println!("    {:>10.4} {:+10.4}i", z.re, z.im);
        }
    }
    Ok(())
}
