//! Velocity rate function of the averaged walk: the tilt dual to a velocity,
//! and a curve along one axis.

use rwspace::cramer::{rate_curve, rate_function, solve_theta};
use rwspace::environment::EnvDistribution;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let q = dist.mean_kernel();

    let sol = solve_theta(&q, &[0.3, -0.1, 0.0])?;
    println!("xi    = {:?}", sol.xi);
    println!("theta = {:?}", sol.theta);
    println!("rate  = {:.6} after {} Newton steps", sol.rate, sol.iterations);

    // on a face of the domain the rate is finite; outside it is infinite
    println!("I(e1)     = {:.6}", rate_function(&q, &[1.0, 0.0, 0.0]));
    println!("I(1.1 e1) = {}", rate_function(&q, &[1.1, 0.0, 0.0]));

    println!("\nxi,theta,rate");
    for p in rate_curve(&q, 0, 11)? {
        println!("{:.2},{:.6},{:.6}", p.xi, p.theta, p.rate);
    }
    Ok(())
}
