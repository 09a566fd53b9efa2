//! Stability region of the two-bus fixture on a coarse log grid, drawn as text.
//!
//!     cargo run --example region_grid

use gridcert::network_model::*;
use gridcert::sweep::*;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let p = Problem::new(model.without_loads())?;
    let spec = GridSpec {
        mp: (0.05, 30.0, 24),
        mq: (0.05, 30.0, 48),
        log: true,
        cap: GRID_CAP,
    };
    let g = region_grid(&p, &spec, &[Method::Cert, Method::Eig])?;
    println!("rows: mp from {:.2}% (top) to {:.2}%; columns: mq; '#' certified, '+' stable, '.' unstable", spec.mp.0, spec.mp.1);
    for i in 0..g.mp.len() {
        let line: String = (0..g.mq.len())
            .map(|j| match (g.get(Method::Cert, i, j), g.get(Method::Eig, i, j)) {
                (Some(true), _) => '#',
                (_, Some(true)) => '+',
                _ => '.',
            })
            .collect();
        println!("{:>7.3} {line}", g.mp[i]);
    }
    Ok(())
}
