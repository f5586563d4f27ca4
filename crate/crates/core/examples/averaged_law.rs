//! Exact law of the averaged walk by convolution, and its moment
//! generating function against `φ(θ)^n`.

use rwspace::cramer::phi;
use rwspace::environment::EnvDistribution;
use rwspace::walk::averaged_marginal;

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let n = 40;
    let law = averaged_marginal(&dist, n)?;
    println!("X_{n}: total mass {:.15}, mean {:?}", law.total(), law.mean());

    let theta = [0.2, -0.1, 0.05];
    let mgf = law.mgf(&theta);
    let exact = phi(&dist.mean_kernel(), &theta).powi(n as i32);
    println!("E exp<θ,X_n> = {mgf:.12e}, φ(θ)^n = {exact:.12e}");

    let near = law.prob_where(|x| x.iter().map(|c| c.abs()).sum::<i64>() <= 4);
    println!("P(|X_n|_1 <= 4) = {near:.6}");
    Ok(())
}
