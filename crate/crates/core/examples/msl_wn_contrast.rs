//! Maximum simulated likelihood for a panel mixed logit with the naive
//! (`W_n = 1`) and exact full-set expansion factors.

use nalgebra::DMatrix;
use soa_lab::mle::{fit_mmnl_msl, MslOptions, WnMode};
use soa_lab::protocols::draw_for_dataset;
use soa_lab::synth::{generate_mmnl, CovariateLaw, MmnlDgpConfig};
use soa_lab::*;

fn main() -> Result<()> {
    let panel = generate_mmnl(&MmnlDgpConfig {
        individuals: 200,
        choices_per_individual: 5,
        j: 8,
        k: 2,
        mu_star: vec![1.0, -1.0],
        sigma_star: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        covariate_law: CovariateLaw::StandardNormal,
        seed: 10,
    })?;
    let sets = draw_for_dataset(&Protocol::uniform_wor(4)?, &panel.dataset, 10)?;
    let cs = ChoiceSets::sampled(&sets, CorrectionMode::McFadden);
    let init = [0.0, 0.0, 1.0, 0.0, 1.0];
    for wn_mode in [WnMode::NaiveOne, WnMode::ExactFullSet] {
        let f = fit_mmnl_msl(&panel.dataset, cs, &init, &MslOptions { wn_mode, draws_per_individual: 50, ..Default::default() })?;
        println!("{wn_mode:?}");
        for ((name, e), s) in f.param_names.iter().zip(&f.estimate).zip(&f.std_errors) {
            println!("  {name:<7} {e:+.4} ({s:.4})");
        }
        println!("  loglik {:.3}, converged {}", f.loglik, f.converged);
    }
    Ok(())
}
