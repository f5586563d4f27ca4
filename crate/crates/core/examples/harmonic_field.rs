//! The tilted harmonic field on a cone, its transformed kernel, walks drawn
//! from that kernel, and the binary form of the field.

use std::sync::Arc;

use rwspace::cramer::{grad_log_phi, Tilt};
use rwspace::environment::{EnvDistribution, SiteKeyedEnv};
use rwspace::htransform::{simulate_tilted, HarmonicField, Provenance};

fn main() -> rwspace::Result<()> {
    let dist = EnvDistribution::two_point(3, 0.1, 0.05)?;
    let env_seed = 17;
    let env = SiteKeyedEnv::new(Arc::new(dist.clone()), env_seed);
    let tilt = Tilt::new(&dist.mean_kernel(), &[0.3, 0.0, 0.0])?;

    let field = HarmonicField::cone(&env, &tilt, 32, 0, &[0, 0, 0], 0)?.with_provenance(Provenance {
        env: dist.to_spec(),
        seed: env_seed,
    });
    println!("sites {}, u(0,0) = {:.6}, min u = {:.4}", field.num_sites(), field.u(0, &[0, 0, 0]).unwrap(), field.min_u());
    println!("harmonic residual {:.2e}", field.harmonic_residual(&env)?);

    let kernel = field.doob_kernel(&env);
    println!("kernel row at the origin: {:?}", kernel.row(0, &[0, 0, 0])?);

    let ens = simulate_tilted(&kernel, 0, &[0, 0, 0], 32, 4000, 5)?;
    let v = ens.mean_velocity();
    println!(
        "tilted velocity {:.4}±{:.4}, averaged tilted velocity {:.4}",
        v[0].mean,
        v[0].se,
        grad_log_phi(&dist.mean_kernel(), &tilt.theta)[0]
    );

    let mut bytes = Vec::new();
    field.write_binary(&mut bytes)?;
    let back = HarmonicField::read_binary(bytes.as_slice())?;
    println!("binary form: {} bytes, identical after reading back: {}", bytes.len(), back.u(5, &[1, 0, 0]) == field.u(5, &[1, 0, 0]));
    Ok(())
}
