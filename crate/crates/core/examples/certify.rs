//! Pairwise certificate on a load-free network, then the same network with its loads.
//!
//!     cargo run --example certify

use gridcert::certificate::*;
use gridcert::network_model::*;

fn show(label: &str, model: &NetworkModel) -> gridcert::Result<()> {
    let ms = matrix_set_for(model)?;
    let rep = check_network(&ms, &model.inverter_ids())?;
    println!("{label}: certified = {}", rep.certified);
    for p in &rep.pairs {
        let slack: Vec<String> = p.conditions.iter().map(|c| format!("{}={:+.3e}", c.name, c.slack)).collect();
        println!("  {}-{}  {}", p.ids.0, p.ids.1, slack.join(" "));
        if let Some(c) = p.first_violated() {
            println!("  first violated: {c}");
        }
    }
    Ok(())
}

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let quiet = model.without_loads().with_tau(0.05).with_droops(&[0.5, 0.5], &[20.0, 20.0]);
    show("without loads", &quiet)?;
    let loaded = model.with_tau(0.05).with_droops(&[0.5, 0.5], &[20.0, 20.0]);
    show("with loads", &loaded)
}
