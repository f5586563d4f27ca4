//! Quenched walks in one fixed environment next to averaged walks.

use std::sync::Arc;

use rwspace::environment::{EnvDistribution, SiteKeyedEnv};
use rwspace::rng;
use rwspace::walk::{quenched_path_prob, simulate_averaged, simulate_quenched};

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let seed = 2024;
    let env = SiteKeyedEnv::new(Arc::new(dist.clone()), rng::environment_seed(seed, 0));

    let quenched = simulate_quenched(&env, 0, &[0, 0, 0], 200, 5000, rng::child_seed(seed, 1))?;
    let averaged = simulate_averaged(&dist, 200, 5000, rng::child_seed(seed, 2))?;
    for (name, ens) in [("quenched", &quenched), ("averaged", &averaged)] {
        let v: Vec<String> = ens
            .mean_velocity()
            .iter()
            .map(|e| format!("{:+.4}±{:.4}", e.mean, e.se))
            .collect();
        println!("{name:>8} velocity: [{}]", v.join(", "));
    }

    let first = &quenched.paths[0];
    println!("first quenched path ends at {:?}", first.end());
    println!("its probability in this environment: {:.3e}", quenched_path_prob(&env, first)?);

    let mut buf = Vec::new();
    quenched.write_jsonl(&mut buf)?;
    println!("{} bytes of JSON lines for {} paths", buf.len(), quenched.len());
    Ok(())
}
