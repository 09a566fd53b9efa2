//! Where dropping the first-order network terms changes the stability verdict.
//!
//!     cargo run --example zeroth_vs_first

use gridcert::network_model::*;
use gridcert::reduced_model::*;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let ms = matrix_set_for(&model)?;
    println!("{:>8} {:>12} {:>12}", "mp %", "first", "zeroth");
    for k in 0..20 {
        let mp = 0.5 * 1.25f64.powi(k);
        let c = compare_orders(&ms.with_droops(&[mp, mp], &[1.0, 1.0]))?;
        println!(
            "{mp:>8.3} {:>12.4} {:>12.4}{}",
            c.first_order_abscissa,
            c.zeroth_order_abscissa,
            if c.discrepancy { "  <- verdicts differ" } else { "" }
        );
    }
    Ok(())
}
