//! Cylinder functions three ways: the expression format, built-ins, and a
//! closure with a declared window that is then probed for undeclared reads.

use rwspace::conditioned::{mu_exact, probe_measurability, CylinderFunction};
use rwspace::environment::EnvDistribution;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let xi = [0.0, 0.1, 0.0];

    let expr = CylinderFunction::parse(3, "max(cell(0,[0,0,0],+e1), cell(0,[0,0,0],-e1)) - 0.5 * step(2,+e2)")?;
    let builtin = CylinderFunction::parse(3, "builtin:product:builtin:step-indicator:+e2;builtin:cell:+e1")?;
    let closure = CylinderFunction::custom(3, (0, 0, 1), 0, 1.0, "own cell toward the step", |view, steps| {
        view.weight(0, &[0, 0, 0], steps[0] as usize)
    })?;

    for f in [&expr, &builtin, &closure] {
        println!("{:<60} window {:?} mu = {:.6}", f.describe(), f.nmk(), mu_exact(&dist, &xi, f)?.value);
    }
    probe_measurability(&closure, &dist, 200, 3)?;
    println!("closure reads only its declared window");

    let sneaky = CylinderFunction::custom(3, (0, 0, 1), 0, 1.0, "reads a neighbour", |view, _| view.weight(0, &[1, 0, 0], 0))?;
    println!("undeclared read detected: {}", probe_measurability(&sneaky, &dist, 200, 3).is_err());
    Ok(())
}
