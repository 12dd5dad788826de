//! Expected posterior KL between full-set and sampled-set posteriors, and a
//! ranking of protocols by information loss.

use soa_lab::bayes_mnl::{GridSpec, Prior};
use soa_lab::divergence::{kl_terms, protocol_comparison};
use soa_lab::*;

fn main() -> Result<()> {
    let design = vec![
        Observation::from_design(0, 0, &[vec![1.2], vec![-0.3], vec![0.4], vec![-1.1]], 0)?,
        Observation::from_design(1, 1, &[vec![0.2], vec![0.9], vec![-1.5], vec![0.6]], 0)?,
    ];
    let prior = Prior::isotropic(1, 1.0)?;
    let grid = GridSpec::around_prior(&prior, 5.0, 51)?;
    let protocols = [
        Protocol::uniform_wor(2)?,
        Protocol::importance(vec![0.6, 0.3, 0.2, 0.3])?,
        Protocol::importance(vec![0.2, 0.5, 0.5, 0.2])?,
    ];
    for p in &protocols {
        let t = kl_terms(&design, p, CorrectionMode::McFadden, &prior, &grid)?;
        println!(
            "{:<28} A {:+.5}  B {:+.5}  KL {:.5}  direct {:.5}  converged {}",
            p.name(),
            t.a,
            t.b,
            t.total,
            t.direct,
            t.converged
        );
    }
    let cmp = protocol_comparison(&[design], &protocols, &prior, &grid)?;
    println!("uniform conditioning attains the largest A: {}", cmp.uniform_attains_max[0]);
    Ok(())
}
