//! Collision series of two tilted walks sharing an environment, and the
//! radius up to which their total collision weight stays below 1.

use rwspace::environment::EnvDistribution;
use rwspace::intersection::{collision_series, criterion_eta, overlap_potential, recursion_g, CollisionMethod};

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.05, 0.05)?;
    println!("overlap potential max: {:.4}", overlap_potential(&dist).v_bar);

    let theta = [0.05, 0.0, 0.0];
    let exact = collision_series(&dist, &theta, 32, CollisionMethod::ExactDp, 0)?;
    let mc = collision_series(&dist, &theta, 32, CollisionMethod::MonteCarlo { replicas: 20_000 }, 1)?;
    println!("B_1..B_4 exact: {:?}", &exact.b[..4]);
    println!("B_1..B_4 mc:    {:?}", &mc.b[..4]);
    println!("sum B_k <= {:.5} (tail bound {:.2e})", exact.b_upper(), exact.tail_bound);
    println!("G_1..G_6: {:?}", recursion_g(&exact, 6)?);

    let grid: Vec<Vec<f64>> = (0..=8).map(|i| vec![0.05 * i as f64, 0.0, 0.0]).collect();
    let rep = criterion_eta(&dist, &grid, 64)?;
    println!("\ntheta,B_upper,verdict");
    for r in &rep.rows {
        println!("{:.2},{:.5},{:?}", r.theta[0], r.b_upper, r.verdict);
    }
    println!("largest radius with the criterion holding: {:?}", rep.eta_bar);
    Ok(())
}
