//! Fits an MNL on full and sampled choice sets. Dropping the correction
//! under importance sampling biases the estimate when inclusion
//! probabilities track an attribute.

use soa_lab::mle::{fit_mnl, FitOptions};
use soa_lab::protocols::draw_for_dataset;
use soa_lab::synth::{generate_mnl, CovariateLaw, MnlDgpConfig};
use soa_lab::*;

fn main() -> Result<()> {
    let means = (0..10).map(|j| vec![0.35 * j as f64, 0.0]).collect();
    let data = generate_mnl(&MnlDgpConfig {
        n: 2000,
        j: 10,
        k: 2,
        beta_star: UtilityParams::new(vec![1.0, -0.5])?,
        covariate_law: CovariateLaw::ShiftedNormal(means),
        seed: 2024,
    })?;
    let protocol = Protocol::importance((0..10).map(|j| 0.05 + 0.07 * j as f64).collect())?;
    let sets = draw_for_dataset(&protocol, &data, 77)?;
    let opts = FitOptions::default();
    let init = UtilityParams::zeros(2);
    for (label, cs) in [
        ("full set", ChoiceSets::Full),
        ("importance + mcfadden", ChoiceSets::sampled(&sets, CorrectionMode::McFadden)),
        ("importance + none", ChoiceSets::sampled(&sets, CorrectionMode::None)),
    ] {
        let f = fit_mnl(&data, cs, &init, &opts)?;
        println!("{label:<22} β̂ = {:.3?}  se = {:.3?}", f.estimate, f.std_errors);
    }
    Ok(())
}
