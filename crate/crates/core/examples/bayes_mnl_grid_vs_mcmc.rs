//! One-dimensional MNL posterior by quadrature and by random-walk
//! Metropolis.

use nalgebra::DMatrix;
use soa_lab::bayes_mnl::{
    grid_posterior, log_posterior_kernel, posterior_summary, rw_metropolis, GridSpec, MetropolisConfig, Prior,
};
use soa_lab::mle::{fit_mnl, FitOptions};
use soa_lab::protocols::draw_for_dataset;
use soa_lab::synth::{generate_mnl, CovariateLaw, MnlDgpConfig};
use soa_lab::*;

fn main() -> Result<()> {
    let data = generate_mnl(&MnlDgpConfig {
        n: 200,
        j: 5,
        k: 1,
        beta_star: UtilityParams::new(vec![0.8])?,
        covariate_law: CovariateLaw::StandardNormal,
        seed: 8,
    })?;
    let sets = draw_for_dataset(&Protocol::uniform_wor(3)?, &data, 8)?;
    let cs = ChoiceSets::sampled(&sets, CorrectionMode::McFadden);
    let prior = Prior::isotropic(1, 10.0)?;
    let mle = fit_mnl(&data, cs, &UtilityParams::zeros(1), &FitOptions::default())?;

    let grid = grid_posterior(&data, cs, &prior, &GridSpec::around_estimate(&mle, 6.0, 201)?)?;
    println!("grid:  mean {:.4}  log m {:.4}  converged {}", grid.mean()[0], grid.log_marginal, grid.converged);

    let kernel = |b: &[f64]| log_posterior_kernel(&UtilityParams::new(b.to_vec()).unwrap(), &data, cs, &prior).unwrap();
    let cfg = MetropolisConfig {
        scale: 2.4,
        proposal_chol: Some(DMatrix::from_element(1, 1, mle.std_errors[0])),
        seed: 8,
        ..Default::default()
    };
    let draws = rw_metropolis(kernel, &mle.estimate, &cfg)?;
    let s = posterior_summary(&draws)?;
    println!(
        "mcmc:  mean {:.4}  sd {:.4}  95% [{:.4}, {:.4}]  ess {:.0}",
        s.mean[0], s.sd[0], s.quantiles[0][0], s.quantiles[0][2], s.ess[0]
    );
    for (c, chain) in draws.chains.iter().enumerate() {
        println!("chain {c}: acceptance {:.3}", chain.acceptance_rate);
    }
    Ok(())
}
