//! Checks the Lyapunov derivative identity on random states of the two-bus fixture.
//!
//!     cargo run --example lyapunov_identity

use gridcert::certificate::*;
use gridcert::network_model::*;
use gridcert::reduced_model::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gridcert::Result<()> {
    let model = parse_network(concat!(env!("CARGO_MANIFEST_DIR"), "/data/two_bus.json"), None)?;
    let ms = matrix_set_for(&model)?;
    let ss = assemble_state_space(&ms)?;
    let lb = build_lyapunov(&ms)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let worst = verify_lyapunov_identity(&ss, &lb, 1000, &mut rng);
    println!("worst relative residual over 1000 states: {worst:.3e}");
    let e = lb.psi.clone().symmetric_eigenvalues();
    println!("smallest eigenvalue of Psi: {:.4e}", e.min());
    Ok(())
}
