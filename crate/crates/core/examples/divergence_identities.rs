//! Expected divergence computed three ways, plus the per-set coverage
//! ratios behind it.

use soa_lab::divergence::{
    coverage_table, expected_divergence, expected_divergence_closed_form, expected_divergence_direct,
};
use soa_lab::*;

fn main() -> Result<()> {
    let obs = Observation::from_design(0, 0, &[vec![0.9], vec![0.1], vec![-0.4], vec![1.3], vec![-1.0]], 0)?;
    let beta = UtilityParams::new(vec![0.8])?;
    let uniform = Protocol::uniform_wor(3)?;
    let split = expected_divergence(&obs, &uniform, &beta, CorrectionMode::McFadden)?;
    let direct = expected_divergence_direct(&obs, &uniform, &beta, CorrectionMode::McFadden)?;
    let closed = expected_divergence_closed_form(&obs, &uniform, &beta)?;
    println!("uniform_wor(3): split {split:.12} direct {direct:.12} closed form {closed:.12}");

    let importance = Protocol::importance(vec![0.8, 0.6, 0.4, 0.3, 0.2])?;
    for mode in [CorrectionMode::McFadden, CorrectionMode::None] {
        let d = expected_divergence(&obs, &importance, &beta, mode)?;
        println!("importance, {:<8} divergence {d:.6}", mode.as_str());
    }

    println!("coverage r(D) under uniform_wor(3):");
    for entry in coverage_table(&obs, &uniform, &beta)? {
        println!("  {entry:?}");
    }
    Ok(())
}
