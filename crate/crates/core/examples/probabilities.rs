//! Full-set and sampled-set logit probabilities, with and without the
//! McFadden correction.

use soa_lab::protocols::correction_vector;
use soa_lab::*;

fn main() -> Result<()> {
    let design = vec![vec![1.2, 0.0], vec![0.4, 1.0], vec![-0.3, 0.5], vec![0.0, -1.0]];
    let obs = Observation::from_design(0, 0, &design, 1)?;
    let beta = [0.8, -0.4];
    let v = obs.utilities(&beta);
    println!("utilities        {v:?}");
    println!("P(j|C)           {:?}", mnl_prob_full(&v)?);

    let protocol = Protocol::importance(vec![0.9, 0.8, 0.7, 0.6])?;
    let set = protocol.draw(&obs, &mut streams::derive(1, 0, 0))?;
    let members: Vec<f64> = set.member_ids().iter().map(|&k| v[k]).collect();
    let c = correction_vector(&set, CorrectionMode::McFadden)?;
    println!("sampled D        {:?}", set.member_ids());
    println!("ln π(D|j)        {c:?}");
    println!("P(j|D) corrected {:?}", mnl_prob_sampled_corrected(&members, &c)?);
    println!("P(j|D) plain     {:?}", mnl_prob_sampled_uncorrected(&members)?);
    Ok(())
}
