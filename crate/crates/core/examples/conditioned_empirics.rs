//! Probability that an empirical average along the path deviates from its
//! stationary value, given that the velocity is near `ξ`.

use rwspace::conditioned::{conditioned_empirics, CylinderFunction, EmpiricsSettings, Mode};
use rwspace::environment::EnvDistribution;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let f = CylinderFunction::parse(3, "builtin:step-indicator:+e1")?;
    for mode in [Mode::Averaged, Mode::Quenched] {
        let settings = EmpiricsSettings::new(mode, vec![0.05, 0.0, 0.0], 0.1, 0.05, vec![25, 50, 100], 20_000, 1);
        let rep = conditioned_empirics(&dist, &f, &settings)?;
        println!("{mode:?}: center {:.5}, proposal for A∩D: {}", rep.mu.value, rep.proposal_ad);
        for r in &rep.rows {
            println!(
                "  n={:<4} P(D)={:.3e} P(A|D)={:.3e}±{:.1e} (1/n)log={:.4} hits A+/A-: {}/{}",
                r.n, r.p_d.mean, r.p_a_given_d, r.p_a_given_d_se, r.log_rate, r.a_plus_hits, r.a_minus_hits
            );
        }
        println!("  slope of log P(A|D): {:?}", rep.delta_condition.gamma);
    }
    Ok(())
}
