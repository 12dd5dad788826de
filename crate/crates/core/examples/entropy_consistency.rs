//! The expected quasi log-likelihood peaks at the true coefficient when
//! corrections are applied, and drifts away under importance sampling
//! without them.

use soa_lab::divergence::expected_quasi_ll;
use soa_lab::*;

fn main() -> Result<()> {
    let design = [
        Observation::from_design(0, 0, &[vec![1.5], vec![0.5], vec![-0.5], vec![-1.5]], 0)?,
        Observation::from_design(1, 1, &[vec![1.0], vec![0.8], vec![-0.2], vec![-2.0]], 0)?,
    ];
    let truth = UtilityParams::new(vec![1.0])?;
    let cases = [
        ("uniform_wor(2) + mcfadden", Protocol::uniform_wor(2)?, CorrectionMode::McFadden),
        ("importance + mcfadden", Protocol::importance(vec![0.9, 0.3, 0.1, 0.05])?, CorrectionMode::McFadden),
        ("importance + none", Protocol::importance(vec![0.9, 0.3, 0.1, 0.05])?, CorrectionMode::None),
    ];
    for (label, protocol, mode) in cases {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for step in 0..=400 {
            let b = -1.0 + 0.01 * step as f64;
            let beta = UtilityParams::new(vec![b])?;
            let mut value = 0.0;
            for obs in &design {
                value += expected_quasi_ll(obs, &protocol, &truth, &beta, mode)?;
            }
            if value > best.0 {
                best = (value, b);
            }
        }
        println!("{label:<26} argmax β = {:.2}", best.1);
    }
    Ok(())
}
