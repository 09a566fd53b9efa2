//! Eliminates the passive buses of the 34-bus feeder and prints the inverter-level pencil.
//!
//!     cargo run --example kron_reduce

use gridcert::network_model::*;

fn main() -> gridcert::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let lib = ConductorLibrary::load(format!("{dir}/conductors.json"))?;
    let model = parse_network(format!("{dir}/ieee34.json"), Some(&lib))?;
    let (net, _) = assemble_phase_admittance(&model)?;
    println!("{} buses, phase pencil {}x{}", model.buses.len(), net.dim(), net.dim());
    let red = reduce_network(&model)?;
    println!("inverters {:?}, symmetry defect {:.2e}", red.inverter_ids, red.symmetry_defect);
    println!("Y0 network:\n{:.4}", red.ynet.y0);
    println!("Y1 network:\n{:.3e}", red.ynet.y1);
    println!("Y0 load diagonal: {:.4}", red.yload.y0.diagonal().transpose());
    Ok(())
}
