//! Integrals of cylinder functions under the stationary environment-and-steps
//! law, by exact enumeration and through the harmonic field, with the window,
//! shift, cumulant and Markov checks.

use rwspace::conditioned::{
    markov_structure_check, mu_exact, mu_via_htransform, stationarity_check, welldefined_check, zeta_diagnostic,
    CylinderFunction,
};
use rwspace::environment::EnvDistribution;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let xi = [0.05, 0.0, 0.0];
    let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1)")?;

    let exact = mu_exact(&dist, &xi, &f)?;
    let sampled = mu_via_htransform(&dist, &xi, &f, None, 2000, 9)?;
    println!("{}: exact {:.6}, via field {:.6}±{:.6}", f.describe(), exact.value, sampled.value.value, sampled.value.error);

    let w = welldefined_check(&dist, &xi, &f)?;
    let s = stationarity_check(&dist, &xi, &f)?;
    let z = zeta_diagnostic(&dist, &xi, &f, &[-0.5, 0.0, 0.5])?;
    println!("window deviation {:.1e}, shift deviation {:.1e}", w.max_deviation, s.deviation);
    println!("zeta(0) = {:.1e}, zeta'(0) = {:.1e}", z.zeta_at_zero, z.derivative_at_zero);

    let g = CylinderFunction::parse(3, "step(1,-e2)")?;
    let m = markov_structure_check(&dist, &xi, &f, &g, &[4, 8], 500, 2)?;
    for row in &m.rows {
        println!("Markov form, horizon {}: deviation {:.1e}, z = {:.2}", row.horizon, row.max_pointwise_deviation, row.z_score);
    }
    Ok(())
}
