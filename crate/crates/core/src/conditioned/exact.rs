//! Exact values of `∫ f dμ̄_ξ` by enumerating paths and environment atoms.
//!
//! For a cylinder function with window `(N, M, K)` and `L = N + M + K + 1`,
//! `∫ f dμ̄_ξ = E[e^{<θ, X_L> - L log φ(θ)} f(T_{N, X_N} ω, (Z_{N+i}))]`
//! under the averaged law, with `θ` dual to `ξ`. Cells `f` reads are summed
//! over the atoms of a finite-support law, together with any step the path
//! takes through them; every other step sees the mean kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::observable::{CellView, CylinderFunction};
use crate::cramer::{solve_theta, Tilt};
use crate::environment::{EnvDistribution, ProbVector};
use crate::error::{Error, Result};
use crate::lattice::StepSet;
use crate::stats::pairwise_sum;

/// Largest number of (path, atom assignment) pairs an enumeration may visit.
pub const ENUMERATION_CAP: u128 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMethod {
    ExactEnumeration,
    HTransform,
}

/// A value of `∫ f dμ̄_ξ` with its method and error estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuValue {
    pub value: f64,
    pub method: MuMethod,
    /// Standard error; zero for exact methods.
    pub error: f64,
    pub bound: f64,
}

/// A finite-support law as `(atoms, probabilities)`.
pub(crate) fn finite_atoms(dist: &EnvDistribution) -> Result<(Vec<ProbVector>, Vec<f64>)> {
    let atoms = dist
        .atoms()
        .ok_or_else(|| Error::config("exact enumeration needs a finite-support environment law"))?;
    Ok(atoms.into_iter().map(|(v, p)| (v.clone(), p)).unzip())
}

pub(crate) fn tilt_for(dist: &EnvDistribution, xi: &[f64]) -> Result<Tilt> {
    let q = dist.mean_kernel();
    let sol = solve_theta(&q, xi)?;
    Tilt::new(&q, &sol.theta)
}

/// Cells of one atom assignment, addressed in absolute coordinates.
struct Assigned<'a> {
    cells: &'a [(i64, Vec<i64>)],
    choice: &'a [usize],
    atoms: &'a [ProbVector],
    mean: &'a ProbVector,
    // frame of the walker at time N
    t0: i64,
    x0: &'a [i64],
}

impl CellView for Assigned<'_> {
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
        let lv = level + self.t0;
        let pos = self
            .cells
            .iter()
            .position(|(l, y)| *l == lv && y.iter().zip(x).zip(self.x0).all(|((a, b), c)| *a == b + c));
        match pos {
            Some(i) => self.atoms[self.choice[i]].get(step),
            // only reachable for functions that read cells they did not declare
            None => self.mean.get(step),
        }
    }
}

/// `E[e^{<θ, X_L> - L log φ} g(f(...))]` over length-`L` paths.
pub(crate) fn tilted_expectation(
    dist: &EnvDistribution,
    tilt: &Tilt,
    f: &CylinderFunction,
    payload: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<f64> {
    let d = dist.dim();
    if f.dim() != d || tilt.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if f.dim() != d { f.dim() } else { tilt.dim() },
        });
    }
    let (atoms, probs) = finite_atoms(dist)?;
    let mean = dist.mean_kernel();
    let (n, _, _) = f.nmk();
    let len = f.length();
    let two_d = 2 * d;
    let paths = (two_d as u128).pow(len as u32);
    let cells_per_path = match f.referenced_cells(&vec![0; len]) {
        Some(c) => c.len(),
        None => f.window_cells().len(),
    };
    let work = paths.saturating_mul((atoms.len() as u128).saturating_pow(cells_per_path as u32));
    if work > ENUMERATION_CAP {
        return Err(Error::resource(
            format!("enumeration of {paths} paths of length {len} with atom assignments"),
            work,
            ENUMERATION_CAP,
        ));
    }
    let factors = tilt.step_log_factors();
    let blocks = two_d.pow(len.min(2) as u32);
    let per_block = paths as usize / blocks;
    let sums: Vec<f64> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut terms = Vec::with_capacity(per_block);
            let mut steps = vec![0u8; len];
            let mut pos = vec![vec![0i64; d]; len + 1];
            for i in 0..per_block {
                let mut code = b * per_block + i;
                for s in steps.iter_mut() {
                    *s = (code % two_d) as u8;
                    code /= two_d;
                }
                for j in 0..len {
                    let (head, tail) = pos.split_at_mut(j + 1);
                    tail[0].copy_from_slice(&head[j]);
                    StepSet::apply(&mut tail[0], steps[j] as usize);
                }
                terms.push(path_term(&atoms, &probs, &mean, &factors, f, payload, n, &steps, &pos));
            }
            pairwise_sum(&terms)
        })
        .collect();
    Ok(pairwise_sum(&sums))
}

#[allow(clippy::too_many_arguments)]
fn path_term(
    atoms: &[ProbVector],
    probs: &[f64],
    mean: &ProbVector,
    factors: &[f64],
    f: &CylinderFunction,
    payload: &(dyn Fn(f64) -> f64 + Sync),
    n: usize,
    steps: &[u8],
    pos: &[Vec<i64>],
) -> f64 {
    let tilt: f64 = steps.iter().map(|&s| factors[s as usize]).sum::<f64>().exp();
    let x0 = &pos[n];
    let rel = f
        .referenced_cells(&steps[n..])
        .unwrap_or_else(|| f.window_cells());
    let cells: Vec<(i64, Vec<i64>)> = rel
        .into_iter()
        .map(|(l, x)| (l + n as i64, x.iter().zip(x0).map(|(a, b)| a + b).collect()))
        .collect();
    // steps through cells outside the read set see the mean kernel
    let mut base = 1.0;
    let mut on_path: Vec<(usize, usize)> = Vec::new();
    for (j, &s) in steps.iter().enumerate() {
        match cells.iter().position(|(l, y)| *l == j as i64 && *y == pos[j]) {
            Some(c) => on_path.push((c, s as usize)),
            None => base *= mean.get(s as usize),
        }
    }
    let k = atoms.len();
    let mut choice = vec![0usize; cells.len()];
    let mut acc = Vec::with_capacity(k.pow(cells.len() as u32));
    loop {
        let mut w: f64 = choice.iter().map(|&c| probs[c]).product();
        for &(c, s) in &on_path {
            w *= atoms[choice[c]].get(s);
        }
        if w > 0.0 {
            let view = Assigned {
                cells: &cells,
                choice: &choice,
                atoms,
                mean,
                t0: n as i64,
                x0,
            };
            acc.push(w * payload(f.eval(&view, &steps[n..])));
        }
        // odometer over assignments
        let mut i = 0;
        while i < choice.len() {
            choice[i] += 1;
            if choice[i] < k {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == choice.len() {
            break;
        }
    }
    base * tilt * pairwise_sum(&acc)
}

/// `∫ f dμ̄_ξ` by exact enumeration.
pub fn mu_exact(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction) -> Result<MuValue> {
    let tilt = tilt_for(dist, xi)?;
    let value = tilted_expectation(dist, &tilt, f, &|v| v)?;
    Ok(MuValue {
        value,
        method: MuMethod::ExactEnumeration,
        error: 0.0,
        bound: f.bound(),
    })
}

/// `∫ f dμ_ξ^1` for a function of the environment alone (`K = 0`): the
/// marginal of `μ̄_ξ` on the environment coordinate.
pub fn mu1_exact(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction) -> Result<MuValue> {
    if f.nmk().2 != 0 {
        return Err(Error::config("the environment marginal takes functions of the environment only (K = 0)"));
    }
    mu_exact(dist, xi, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowValue {
    pub nmk: (usize, usize, usize),
    pub value: f64,
}

/// Values of `∫ f dμ̄_ξ` on enlarged windows and their largest spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelldefinedReport {
    pub function: String,
    pub values: Vec<WindowValue>,
    pub max_deviation: f64,
    pub passed: bool,
}

/// Compares the windows `(N,M,K)`, `(N+1,M,K)`, `(N,M+1,K)` and `(N,M,K+1)`,
/// each by its own enumeration.
pub fn welldefined_check(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction) -> Result<WelldefinedReport> {
    let tilt = tilt_for(dist, xi)?;
    let (n, m, k) = f.nmk();
    let windows = [(n, m, k), (n + 1, m, k), (n, m + 1, k), (n, m, k + 1)];
    let values = windows
        .iter()
        .map(|&(a, b, c)| {
            let g = f.with_window(a, b, c)?;
            Ok(WindowValue {
                nmk: (a, b, c),
                value: tilted_expectation(dist, &tilt, &g, &|v| v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lo = values.iter().map(|v| v.value).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.value).fold(f64::NEG_INFINITY, f64::max);
    Ok(WelldefinedReport {
        function: f.describe(),
        values,
        max_deviation: hi - lo,
        passed: hi - lo <= 1e-12,
    })
}

/// `∫ f ∘ S̄ dμ̄_ξ` against `∫ f dμ̄_ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub function: String,
    pub value: f64,
    pub shifted_value: f64,
    pub deviation: f64,
    pub passed: bool,
}

pub fn stationarity_check(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction) -> Result<StationarityReport> {
    let tilt = tilt_for(dist, xi)?;
    let value = tilted_expectation(dist, &tilt, f, &|v| v)?;
    let shifted_value = tilted_expectation(dist, &tilt, &f.shifted(1), &|v| v)?;
    let deviation = (shifted_value - value).abs();
    Ok(StationarityReport {
        function: f.describe(),
        value,
        shifted_value,
        deviation,
        passed: deviation <= 1e-12,
    })
}

/// `ζ(z) = (1/L) log E[e^{<θ,X_L> - L log φ + L z F}]` with `F = f - ∫ f dμ̄_ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaReport {
    pub function: String,
    pub mu: f64,
    pub length: usize,
    pub z_grid: Vec<f64>,
    pub zeta: Vec<f64>,
    pub zeta_at_zero: f64,
    /// Central difference with step `1e-5`.
    pub derivative_at_zero: f64,
    /// `(h, ζ(h) / h)` for `h ∈ {1e-2, 1e-3, 1e-4}`.
    pub refinement: Vec<(f64, f64)>,
    /// Whether second differences on the grid are nonnegative (up to rounding).
    pub convex_on_grid: bool,
    pub passed: bool,
}

pub fn zeta_diagnostic(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction, z_grid: &[f64]) -> Result<ZetaReport> {
    let tilt = tilt_for(dist, xi)?;
    let mu = tilted_expectation(dist, &tilt, f, &|v| v)?;
    let len = f.length();
    let l = len as f64;
    let zeta = |z: f64| -> Result<f64> {
        Ok(tilted_expectation(dist, &tilt, f, &|v| (l * z * (v - mu)).exp())?.ln() / l)
    };
    let values = z_grid.iter().map(|&z| zeta(z)).collect::<Result<Vec<_>>>()?;
    let zeta_at_zero = zeta(0.0)?;
    let h = 1e-5;
    let derivative_at_zero = (zeta(h)? - zeta(-h)?) / (2.0 * h);
    let refinement = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&h| Ok((h, zeta(h)? / h)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..z_grid.len()).collect();
    order.sort_by(|&a, &b| z_grid[a].total_cmp(&z_grid[b]));
    let convex_on_grid = order.windows(3).all(|w| {
        let (z0, z1, z2) = (z_grid[w[0]], z_grid[w[1]], z_grid[w[2]]);
        let (v0, v1, v2) = (values[w[0]], values[w[1]], values[w[2]]);
        // the chord lies above the middle value
        let chord = v0 + (v2 - v0) * (z1 - z0) / (z2 - z0);
        v1 <= chord + 1e-12
    });
    Ok(ZetaReport {
        function: f.describe(),
        mu,
        length: len,
        z_grid: z_grid.to_vec(),
        zeta: values,
        zeta_at_zero,
        derivative_at_zero,
        refinement,
        convex_on_grid,
        passed: zeta_at_zero.abs() <= 1e-12 && derivative_at_zero.abs() <= 1e-8,
    })
}
