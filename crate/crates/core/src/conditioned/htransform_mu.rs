//! `∫ f dμ̄_ξ` through the harmonic field: `E[u(ω) E^{θ,ω}[f(T_{N,X_N} ω, (Z_{N+i}))]]`,
//! with the inner expectation under the Doob-transformed kernel.
//!
//! With a horizon `H ≥ N + M + K + 1` the finite-horizon field makes the
//! environment average exactly equal to `∫ f dμ̄_ξ`; only the sampling of
//! environments contributes error.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::{mu_exact, tilt_for, MuMethod, MuValue};
use super::observable::{CellView, CylinderFunction};
use crate::environment::{EnvDistribution, Environment, SiteKeyedEnv};
use crate::error::{Error, Result};
use crate::htransform::{compute_u, HarmonicField, TiltedKernelField};
use crate::lattice::StepSet;
use crate::rng;
use crate::stats::{pairwise_sum, Estimate};

/// Extra horizon beyond `N + M + K + 1` used by default.
pub const DEFAULT_MU_EXTRA_HORIZON: usize = 8;

const KERNEL_PATH_CAP: u128 = 2_000_000;

/// Cells of an environment in the frame of a walker at `(t0, x0)`.
pub(crate) struct EnvView<'a, E: Environment + ?Sized> {
    pub env: &'a E,
    pub t0: i64,
    pub x0: Vec<i64>,
}

impl<E: Environment + ?Sized> CellView for EnvView<'_, E> {
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
        let y: Vec<i64> = x.iter().zip(&self.x0).map(|(a, b)| a + b).collect();
        let mut cell = vec![0.0; 2 * x.len()];
        self.env
            .cell_into(self.t0 + level, &y, &mut cell)
            .expect("environment covers the function's window");
        cell[step]
    }
}

fn path_cap(d: usize, len: usize) -> Result<()> {
    let paths = ((2 * d) as u128).pow(len as u32);
    if paths > KERNEL_PATH_CAP {
        return Err(Error::resource(
            format!("enumeration of {len}-step paths under the transformed kernel"),
            paths,
            KERNEL_PATH_CAP,
        ));
    }
    Ok(())
}

/// `Σ_paths Π π̄^θ(steps) g(steps, positions)` over `len` steps from `(t0, x0)`.
fn kernel_sum<E: Environment + ?Sized>(
    kernel: &TiltedKernelField<'_, E>,
    t0: i64,
    x0: &[i64],
    len: usize,
    g: &mut dyn FnMut(&[u8], &[i64]) -> f64,
) -> Result<f64> {
    fn rec<E: Environment + ?Sized>(
        kernel: &TiltedKernelField<'_, E>,
        t: i64,
        x: &mut Vec<i64>,
        steps: &mut Vec<u8>,
        left: usize,
        g: &mut dyn FnMut(&[u8], &[i64]) -> f64,
    ) -> Result<f64> {
        if left == 0 {
            return Ok(g(steps, x));
        }
        let row = kernel.row(t, x)?;
        let mut total = 0.0;
        for (s, p) in row.iter().enumerate() {
            StepSet::apply(x, s);
            steps.push(s as u8);
            total += p * rec(kernel, t + 1, x, steps, left - 1, g)?;
            steps.pop();
            StepSet::unapply(x, s);
        }
        Ok(total)
    }
    rec(kernel, t0, &mut x0.to_vec(), &mut Vec::with_capacity(len), len, g)
}

fn field_for<E: Environment + ?Sized>(dist: &EnvDistribution, env: &E, xi: &[f64], horizon: usize) -> Result<HarmonicField> {
    let tilt = tilt_for(dist, xi)?;
    compute_u(env, &tilt, horizon as i64, 0, &vec![0; dist.dim()])
}

/// One environment's value of `u(0, 0) E^{θ,ω}[f(T_{N,X_N} ω, ·)]`.
fn quenched_sample<E: Environment + ?Sized>(env: &E, field: &HarmonicField, f: &CylinderFunction) -> Result<f64> {
    let (n, _, k) = f.nmk();
    let d = f.dim();
    let kernel = field.doob_kernel(env);
    let inner = kernel_sum(&kernel, 0, &vec![0; d], n + k, &mut |steps, _| {
        let mut x0 = vec![0; d];
        for &s in &steps[..n] {
            StepSet::apply(&mut x0, s as usize);
        }
        let view = EnvView {
            env,
            t0: n as i64,
            x0,
        };
        f.eval(&view, &steps[n..])
    })?;
    Ok(field.u(0, &vec![0; d]).expect("origin is in the field") * inner)
}

/// Estimate of `∫ f dμ̄_ξ` over `environments` sampled environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuHTransformReport {
    pub value: MuValue,
    pub horizon: usize,
    pub environments: usize,
    pub samples: Vec<f64>,
}

pub fn mu_via_htransform(
    dist: &EnvDistribution,
    xi: &[f64],
    f: &CylinderFunction,
    horizon: Option<usize>,
    environments: usize,
    seed: u64,
) -> Result<MuHTransformReport> {
    let d = dist.dim();
    if f.dim() != d {
        return Err(Error::Dimension { expected: d, got: f.dim() });
    }
    if environments == 0 {
        return Err(Error::config("need at least one environment"));
    }
    let (n, _, k) = f.nmk();
    path_cap(d, n + k)?;
    let horizon = horizon.unwrap_or(f.length() + DEFAULT_MU_EXTRA_HORIZON);
    if horizon < n + k {
        return Err(Error::config(format!("horizon {horizon} is shorter than the {} steps f reads", n + k)));
    }
    let shared = Arc::new(dist.clone());
    let samples = (0..environments)
        .into_par_iter()
        .map(|i| {
            let env = SiteKeyedEnv::new(shared.clone(), rng::environment_seed(seed, i as u64));
            let field = field_for(dist, &env, xi, horizon)?;
            quenched_sample(&env, &field, f)
        })
        .collect::<Result<Vec<_>>>()?;
    let est = Estimate::from_samples(&samples);
    Ok(MuHTransformReport {
        value: MuValue {
            value: est.mean,
            method: MuMethod::HTransform,
            error: est.se,
            bound: f.bound(),
        },
        horizon,
        environments,
        samples,
    })
}

/// Per-horizon comparison of the Markov-composed form with direct enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovRow {
    pub horizon: usize,
    /// Largest `|composed - direct|` over environments.
    pub max_pointwise_deviation: f64,
    pub composed: Estimate,
    /// `|composed mean - exact| / se` (0 when both agree exactly).
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub f: String,
    pub g: String,
    pub exact: f64,
    pub rows: Vec<MarkovRow>,
    pub passed: bool,
}

/// Checks that `∫ f · (g ∘ S̄^K) dμ̄_ξ` equals the form in which `g` is
/// integrated under the transformed kernel started from the walker's position
/// after the `K` steps `f` reads. `f` and `g` must not read past levels.
pub fn markov_structure_check(
    dist: &EnvDistribution,
    xi: &[f64],
    f: &CylinderFunction,
    g: &CylinderFunction,
    horizons: &[usize],
    environments: usize,
    seed: u64,
) -> Result<MarkovReport> {
    let d = dist.dim();
    if f.nmk().0 != 0 || g.nmk().0 != 0 {
        return Err(Error::config("the Markov check takes functions with N = 0"));
    }
    let kf = f.nmk().2;
    let kg = g.nmk().2;
    path_cap(d, kf + kg)?;
    let joint = f.product(&g.shifted(kf));
    let exact = mu_exact(dist, xi, &joint)?.value;
    let tilt = tilt_for(dist, xi)?;
    let factors = tilt.step_log_factors();
    let shared = Arc::new(dist.clone());
    let origin = vec![0; d];
    let mut rows = Vec::new();
    for &h in horizons {
        if h < joint.length() {
            return Err(Error::config(format!(
                "horizon {h} is below the {} steps of the joint function",
                joint.length()
            )));
        }
        let pairs = (0..environments)
            .into_par_iter()
            .map(|i| {
                let env = SiteKeyedEnv::new(shared.clone(), rng::environment_seed(seed, i as u64));
                let field = compute_u(&env, &tilt, h as i64, 0, &origin)?;
                let kernel = field.doob_kernel(&env);
                let u0 = field.u(0, &origin).expect("origin is in the field");
                let mut err = None;
                let composed = u0
                    * kernel_sum(&kernel, 0, &origin, kf, &mut |steps, x| {
                        let fv = f.eval(&EnvView { env: &env, t0: 0, x0: origin.clone() }, steps);
                        if fv == 0.0 {
                            return 0.0;
                        }
                        let inner = kernel_sum(&kernel, kf as i64, x, kg, &mut |tail, _| {
                            g.eval(&EnvView { env: &env, t0: kf as i64, x0: x.to_vec() }, tail)
                        });
                        match inner {
                            Ok(v) => fv * v,
                            Err(e) => {
                                err = Some(e);
                                0.0
                            }
                        }
                    })?;
                if let Some(e) = err {
                    return Err(e);
                }
                let direct = direct_sum(&env, &field, &factors, &joint, kf + kg)?;
                Ok((composed, direct))
            })
            .collect::<Result<Vec<_>>>()?;
        let composed: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let dev = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let est = Estimate::from_samples(&composed);
        let gap = (est.mean - exact).abs();
        let z_score = if gap <= 1e-12 { 0.0 } else { gap / est.se };
        rows.push(MarkovRow {
            horizon: h,
            max_pointwise_deviation: dev,
            composed: est,
            z_score,
        });
    }
    let passed = rows.iter().all(|r| r.max_pointwise_deviation <= 1e-12 && r.z_score <= 3.0);
    Ok(MarkovReport {
        f: f.describe(),
        g: g.describe(),
        exact,
        rows,
        passed,
    })
}

/// `Σ_paths Π π e^{<θ,z> - log φ} u(len, X_len) F(paths)` by direct enumeration.
fn direct_sum<E: Environment + ?Sized>(
    env: &E,
    field: &HarmonicField,
    factors: &[f64],
    joint: &CylinderFunction,
    len: usize,
) -> Result<f64> {
    let d = joint.dim();
    let two_d = 2 * d;
    let mut terms = Vec::with_capacity(two_d.pow(len as u32));
    let mut cell = vec![0.0; two_d];
    for code in 0..two_d.pow(len as u32) {
        let mut c = code;
        let steps: Vec<u8> = (0..len)
            .map(|_| {
                let s = c % two_d;
                c /= two_d;
                s as u8
            })
            .collect();
        let mut x = vec![0; d];
        let mut w = 1.0;
        for (j, &s) in steps.iter().enumerate() {
            env.cell_into(j as i64, &x, &mut cell)?;
            w *= cell[s as usize] * factors[s as usize].exp();
            StepSet::apply(&mut x, s as usize);
        }
        let end = field.log_h(len as i64, &x).exp();
        let value = joint.eval(&EnvView { env, t0: 0, x0: vec![0; d] }, &steps);
        terms.push(w * end * value);
    }
    Ok(pairwise_sum(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    const XI: [f64; 3] = [0.05, 0.0, 0.0];

    #[test]
    fn deterministic_law_gives_the_exact_value() {
        let det = EnvDistribution::uniform(3).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1) + 0.5 * step(2,-e2)").unwrap();
        let exact = mu_exact(&det, &XI, &f).unwrap().value;
        let r = mu_via_htransform(&det, &XI, &f, None, 3, 1).unwrap();
        assert!((r.value.value - exact).abs() < 1e-13);
        assert!(r.value.error < 1e-13);
    }

    #[test]
    fn untilted_value_is_the_plain_average() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1)").unwrap();
        let r = mu_via_htransform(&dist, &[0.0; 3], &f, Some(4), 2000, 5).unwrap();
        // u ≡ 1 at θ = 0, so this is E[π(e1)^2]
        let (a, b) = (1.0 / 6.0 + 0.1, 1.0 / 6.0 - 0.1);
        assert!(r.value.error > 0.0);
        assert!((r.value.value - (a * a + b * b) / 2.0).abs() <= 3.0 * r.value.error);
    }

    #[test]
    fn agrees_with_enumeration() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1)").unwrap();
        let exact = mu_exact(&dist, &XI, &f).unwrap().value;
        let r = mu_via_htransform(&dist, &XI, &f, None, 3000, 11).unwrap();
        assert!((r.value.value - exact).abs() <= 2.0 * r.value.error, "{} vs {exact} ± {}", r.value.value, r.value.error);
    }

    #[test]
    fn markov_structure() {
        let det = EnvDistribution::uniform(3).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1)").unwrap();
        let g = CylinderFunction::parse(3, "step(1,-e2)").unwrap();
        let r = markov_structure_check(&det, &XI, &f, &g, &[4, 8], 2, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.rows.iter().all(|row| (row.composed.mean - r.exact).abs() < 1e-13));
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let fc = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1)").unwrap();
        let r = markov_structure_check(&dist, &XI, &fc, &g, &[4, 8], 400, 2).unwrap();
        assert!(r.passed, "{r:?}");
        let one = CylinderFunction::constant(3, 1.0).unwrap();
        let r = markov_structure_check(&dist, &XI, &fc, &one, &[4], 50, 2).unwrap();
        assert!((r.exact - mu_exact(&dist, &XI, &fc).unwrap().value).abs() < 1e-12);
    }
}
