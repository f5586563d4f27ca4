//! Cramér machinery for the averaged walk: the moment generating function of
//! one step, its Legendre transform, and the velocity/tilt correspondence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::environment::ProbVector;
use crate::error::{Error, Result};
use crate::lattice::StepSet;

/// Newton stops once every gradient component is this close to its target.
pub const SOLVE_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 200;

/// `φ(θ) = Σ_z q(z) e^{<θ,z>}`.
pub fn phi(q: &ProbVector, theta: &[f64]) -> f64 {
    q.weights()
        .iter()
        .enumerate()
        .map(|(s, w)| w * StepSet::dot(theta, s).exp())
        .sum()
}

/// `log φ(θ)`, evaluated with the largest exponent factored out.
pub fn log_phi(q: &ProbVector, theta: &[f64]) -> f64 {
    let m = (0..q.weights().len())
        .map(|s| StepSet::dot(theta, s))
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q
        .weights()
        .iter()
        .enumerate()
        .map(|(s, w)| w * (StepSet::dot(theta, s) - m).exp())
        .sum();
    m + s.ln()
}

/// `q^θ(z) = q(z) e^{<θ,z>} / φ(θ)`.
pub fn tilted_step_law(q: &ProbVector, theta: &[f64]) -> ProbVector {
    let lp = log_phi(q, theta);
    let w: Vec<f64> = q
        .weights()
        .iter()
        .enumerate()
        .map(|(s, w)| w * (StepSet::dot(theta, s) - lp).exp())
        .collect();
    ProbVector::normalized(w).expect("tilted weights are positive")
}

/// `∇ log φ(θ)`, the mean of the tilted step.
pub fn grad_log_phi(q: &ProbVector, theta: &[f64]) -> Vec<f64> {
    tilted_step_law(q, theta).mean_step()
}

/// Hessian of `log φ`, the covariance of the tilted step.
pub fn hess_log_phi(q: &ProbVector, theta: &[f64]) -> DMatrix<f64> {
    let qt = tilted_step_law(q, theta);
    let d = q.dim();
    let m = qt.mean_step();
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        h[(k, k)] = qt.get(2 * k) + qt.get(2 * k + 1);
    }
    h - DMatrix::from_fn(d, d, |i, j| m[i] * m[j])
}

/// An exponential tilt `θ` together with `log φ(θ)` for a fixed step law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub theta: Vec<f64>,
    pub log_phi: f64,
}

impl Tilt {
    pub fn new(q: &ProbVector, theta: &[f64]) -> Result<Self> {
        if theta.len() != q.dim() {
            return Err(Error::Dimension {
                expected: q.dim(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("tilt must be finite"));
        }
        Ok(Tilt {
            theta: theta.to_vec(),
            log_phi: log_phi(q, theta),
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_zero(&self) -> bool {
        self.theta.iter().all(|t| *t == 0.0)
    }

    /// `<θ, z_s> - log φ(θ)` for every step `s`.
    pub fn step_log_factors(&self) -> Vec<f64> {
        (0..2 * self.dim())
            .map(|s| StepSet::dot(&self.theta, s) - self.log_phi)
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// A solved point of the Legendre transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSolution {
    pub xi: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_phi: f64,
    pub rate: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// A finite exponential family `p_λ(i) ∝ b_i e^{<λ, T_i>}`.
#[derive(Debug, Clone)]
pub struct ExpFamily {
    base: Vec<f64>,
    stats: Vec<Vec<f64>>,
    dim: usize,
}

/// Output of [`ExpFamily::solve`].
#[derive(Debug, Clone)]
pub struct FamilyFit {
    pub lambda: Vec<f64>,
    pub log_norm: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl ExpFamily {
    pub fn new(base: Vec<f64>, stats: Vec<Vec<f64>>) -> Result<Self> {
        let dim = stats.first().map_or(0, |t| t.len());
        if base.len() != stats.len() || stats.iter().any(|t| t.len() != dim) || dim == 0 {
            return Err(Error::config("exponential family needs one statistic vector per atom"));
        }
        Ok(ExpFamily { base, stats, dim })
    }

    /// `log Σ b_i e^{<λ,T_i>}`, its gradient and Hessian.
    pub fn moments(&self, lambda: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let expo: Vec<f64> = self
            .stats
            .iter()
            .map(|t| t.iter().zip(lambda).map(|(a, b)| a * b).sum())
            .collect();
        let m = expo
            .iter()
            .zip(&self.base)
            .filter(|(_, b)| **b > 0.0)
            .map(|(e, _)| *e)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = expo
            .iter()
            .zip(&self.base)
            .map(|(e, b)| b * (e - m).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let mut mean = DVector::zeros(self.dim);
        let mut second = DMatrix::zeros(self.dim, self.dim);
        for (t, wi) in self.stats.iter().zip(&w) {
            let p = wi / z;
            for a in 0..self.dim {
                mean[a] += p * t[a];
                for b in 0..self.dim {
                    second[(a, b)] += p * t[a] * t[b];
                }
            }
        }
        let cov = second - &mean * mean.transpose();
        (m + z.ln(), mean, cov)
    }

    /// Solves `E_λ[T] = target` by damped Newton from `λ = 0`; the step is
    /// halved while it fails to shrink the residual.
    pub fn solve(&self, target: &[f64]) -> Result<FamilyFit> {
        let t = DVector::from_column_slice(target);
        let mut lambda = DVector::zeros(self.dim);
        let (mut log_norm, mean, mut cov) = self.moments(lambda.as_slice());
        let mut g = &mean - &t;
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS && g.amax() > SOLVE_TOL * 1e-3 {
            let step = match cov.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    let ridge = cov.clone() + DMatrix::identity(self.dim, self.dim) * 1e-12;
                    ridge.cholesky().map(|c| c.solve(&g)).ok_or(Error::NonConvergence {
                        iterations,
                        residual: g.amax(),
                    })?
                }
            };
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let next = &lambda - &step * scale;
                let (ln, mn, cv) = self.moments(next.as_slice());
                let gn = &mn - &t;
                if gn.norm() < g.norm() {
                    accepted = Some((next, ln, cv, gn));
                    break;
                }
                scale *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((next, ln, cv, gn)) => {
                    lambda = next;
                    log_norm = ln;
                    cov = cv;
                    g = gn;
                }
                // no step improves the residual: we are at rounding level
                None => break,
            }
        }
        let residual = g.amax();
        if residual <= SOLVE_TOL {
            Ok(FamilyFit {
                lambda: lambda.as_slice().to_vec(),
                log_norm,
                iterations,
                residual,
            })
        } else {
            Err(Error::NonConvergence {
                iterations,
                residual,
            })
        }
    }
}

fn step_family(q: &ProbVector) -> ExpFamily {
    let d = q.dim();
    let stats = (0..2 * d)
        .map(|s| {
            let mut v = vec![0.0; d];
            v[StepSet::axis(s)] = StepSet::sign(s) as f64;
            v
        })
        .collect();
    ExpFamily::new(q.weights().to_vec(), stats).expect("step family is well formed")
}

/// The limiting velocity `ξ_o = Σ q(z) z`.
pub fn lln_velocity(q: &ProbVector) -> Vec<f64> {
    q.mean_step()
}

/// Solves `∇ log φ(θ) = ξ` for `ξ` in the interior of `{|ξ|_1 ≤ 1}`.
pub fn solve_theta(q: &ProbVector, xi: &[f64]) -> Result<TiltSolution> {
    if xi.len() != q.dim() {
        return Err(Error::Dimension {
            expected: q.dim(),
            got: xi.len(),
        });
    }
    let norm: f64 = xi.iter().map(|v| v.abs()).sum();
    if !(norm < 1.0) || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain { xi: xi.to_vec() });
    }
    let fit = step_family(q).solve(xi)?;
    let theta = fit.lambda;
    let lp = log_phi(q, &theta);
    let rate = theta.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() - lp;
    Ok(TiltSolution {
        xi: xi.to_vec(),
        theta,
        log_phi: lp,
        rate,
        converged: true,
        iterations: fit.iterations,
    })
}

/// `I_a(ξ)`, `+∞` outside `{|ξ|_1 ≤ 1}`.
///
/// On the boundary only steps `sign(ξ_i) e_i` are possible, in proportions
/// `|ξ_i|`, so the rate is the relative entropy of those proportions against
/// `q`; at a vertex `z` this is `-log q(z)`.
pub fn rate_function(q: &ProbVector, xi: &[f64]) -> f64 {
    if xi.len() != q.dim() || xi.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let norm: f64 = xi.iter().map(|v| v.abs()).sum();
    if norm > 1.0 + 1e-12 {
        return f64::INFINITY;
    }
    if norm >= 1.0 - 1e-12 {
        return xi
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| {
                let s = 2 * i + usize::from(*v < 0.0);
                v.abs() * (v.abs() / q.get(s)).ln()
            })
            .sum();
    }
    match solve_theta(q, xi) {
        Ok(sol) => sol.rate.max(0.0),
        Err(_) => f64::INFINITY,
    }
}

/// One row of a rate curve along a coordinate axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurvePoint {
    pub xi: f64,
    pub theta: f64,
    pub rate: f64,
}

/// `I_a(t e_axis)` for `samples` evenly spaced `t ∈ [-1, 1]`.
pub fn rate_curve(q: &ProbVector, axis: usize, samples: usize) -> Result<Vec<RateCurvePoint>> {
    let d = q.dim();
    if axis >= d {
        return Err(Error::config(format!("axis {} does not exist in d={d}", axis + 1)));
    }
    if samples < 2 {
        return Err(Error::config("a rate curve needs at least two samples"));
    }
    (0..samples)
        .map(|i| {
            let t = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
            let mut xi = vec![0.0; d];
            xi[axis] = t;
            let rate = rate_function(q, &xi);
            let theta = if t.abs() >= 1.0 {
                t.signum() * f64::INFINITY
            } else {
                solve_theta(q, &xi)?.theta[axis]
            };
            Ok(RateCurvePoint { xi: t, theta, rate })
        })
        .collect()
}
