//! Mean and second moment of the harmonic field at the origin over many
//! environments, against the exact second moment.

use rwspace::environment::EnvDistribution;
use rwspace::htransform::{martingale_diagnostics, quenched_rate_convergence};
use rwspace::intersection::second_moment_dp;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let theta = [0.1, 0.0, 0.0];
    let horizons = [2, 4, 8, 16];

    let rep = martingale_diagnostics(&dist, &theta, &horizons, 2000, 11)?;
    let g = second_moment_dp(&dist, &theta, 16)?;
    println!("N   E[u]              E[u^2]            exact E[u^2]");
    for row in &rep.rows {
        println!(
            "{:<3} {:.5}±{:.5}   {:.5}±{:.5}   {:.5}",
            row.horizon, row.mean.mean, row.mean.se, row.second_moment.mean, row.second_moment.se, g[row.horizon - 1]
        );
    }

    let conv = quenched_rate_convergence(&dist, &theta, &[8, 16, 32, 64], 16, 3)?;
    println!("\nmedian |(1/n) log u_n|: {:?}", conv.median_abs);
    println!("decrease factor first to last: {:.2}", conv.median_decrease_factor());
    Ok(())
}
