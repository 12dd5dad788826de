//! Enumerates every feasible set under two protocols and compares the exact
//! `π(D|i)` with draw frequencies.

use std::collections::BTreeMap;

use soa_lab::*;

fn main() -> Result<()> {
    let x: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64]).collect();
    let obs = Observation::from_design(0, 0, &x, 2)?;
    let protocols = [Protocol::uniform_wor(3)?, Protocol::importance(vec![0.7, 0.2, 0.5, 0.4, 0.9])?];
    let draws = 50_000;
    for (p, protocol) in protocols.iter().enumerate() {
        println!("{}", protocol.name());
        let mut rng = streams::derive(3, 0, p as u64);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(protocol.draw(&obs, &mut rng)?.member_ids().to_vec()).or_default() += 1;
        }
        for set in protocol.enumerate_sets(&obs, obs.chosen, DEFAULT_ENUMERATION_CAP)? {
            let freq = *counts.get(&set.member_ids).unwrap_or(&0) as f64 / draws as f64;
            println!("  {:<16} π = {:.4}  freq = {freq:.4}", format!("{:?}", set.member_ids), set.log_prob_given_chosen.exp());
        }
    }
    Ok(())
}
