//! Conservativeness table for the 34-bus feeder under conductor swaps.
//!
//!     cargo run --release --example conductor_heatmap

use gridcert::network_model::*;
use gridcert::sweep::*;

fn main() -> gridcert::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let lib = ConductorLibrary::load(format!("{dir}/conductors.json"))?;
    let model = parse_network(format!("{dir}/ieee34.json"), Some(&lib))?;
    let file = ScenarioFile::load(format!("{dir}/heatmap_conductors.json"))?;
    let table = heatmap(&model, Some(&lib), &file, 1e-2, None)?;
    table.write_csv(std::io::stdout())
}
