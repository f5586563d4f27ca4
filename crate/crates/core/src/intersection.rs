//! Second moments of the harmonic field through the intersections of two
//! walks sharing one environment.
//!
//! `G_N(θ) = E[(E^ω e^{<θ,X_N>})^2] / φ(θ)^{2N}` is the expectation, under two
//! independent `q^θ` walks, of `Π e^{V(Z_j, Z'_j)}` over the times `j < N` at
//! which the walks sit on the same site. Splitting on the first steps and the
//! next meeting time gives `G_N = Σ_{k=0}^{N-2} B_k G_{N-k-1} + C_N`.

use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cramer::tilted_step_law;
use crate::environment::{EnvDistribution, ProbVector};
use crate::error::{Error, Result};
use crate::lattice::{self, L1Ball, StepSet};
use crate::rng;
use crate::stats::Estimate;
use crate::walk::{convolve_on_ball, CONVOLUTION_SITE_CAP};

/// Default truncation depth of the collision series.
pub const DEFAULT_K_MAX: usize = 64;

const BRUTE_FORCE_PAIR_CAP: u128 = 50_000_000;

/// `V(x, y) = log(E[π(0,x) π(0,y)] / (q(x) q(y)))` over pairs of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPotential {
    pub d: usize,
    /// Row-major `2d × 2d`.
    pub values: Vec<f64>,
    pub v_bar: f64,
}

impl OverlapPotential {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * 2 * self.d + y]
    }
}

pub fn overlap_potential(dist: &EnvDistribution) -> OverlapPotential {
    let d = dist.dim();
    let q = dist.mean_kernel();
    let mut values = Vec::with_capacity(4 * d * d);
    for x in 0..2 * d {
        for y in 0..2 * d {
            let v = if dist.is_deterministic() {
                0.0
            } else {
                (dist.second_moment(x, y) / (q.get(x) * q.get(y))).ln()
            };
            values.push(v);
        }
    }
    let v_bar = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    OverlapPotential { d, values, v_bar }
}

/// How the collision probabilities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionMethod {
    ExactDp,
    MonteCarlo { replicas: usize },
}

/// `B_k(θ)` for `k ≤ K`, `C_N(θ)` for `N ≤ K + 2`, and a bound on the rest of `Σ B_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSeries {
    pub theta: Vec<f64>,
    pub k_max: usize,
    pub b: Vec<f64>,
    /// Standard errors of `b` when estimated by simulation.
    pub b_se: Option<Vec<f64>>,
    /// `c[N - 1] = C_N`.
    pub c: Vec<f64>,
    pub v_bar: f64,
    /// Upper bound on `Σ_{k > K} B_k`; infinite when the two walks meet
    /// infinitely often (d < 3).
    pub tail_bound: f64,
}

impl CollisionSeries {
    pub fn partial_b(&self) -> f64 {
        self.b.iter().sum()
    }

    /// `Σ B_k` including the tail bound.
    pub fn b_upper(&self) -> f64 {
        self.partial_b() + self.tail_bound
    }

    /// `C_N` for `N ≥ 1`, where it was computed.
    pub fn c_n(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.c.get(i)).copied()
    }

    /// Lower and upper ends of the bracket for `lim C_N`.
    pub fn c_limit_bracket(&self) -> (f64, f64) {
        let last = *self.c.last().expect("series has at least C_1");
        ((last - self.tail_bound).max(0.0), last)
    }

    /// `sup_N G_N ≤ max_N C_N / (1 - Σ B_k)`, when the sum is below 1.
    pub fn g_bound(&self) -> Option<f64> {
        let b = self.b_upper();
        (b < 1.0).then(|| self.c[0] / (1.0 - b))
    }
}

/// Law of `Z - Z'` for independent `Z, Z' ~ p`, as offsets with weights.
fn difference_kernel(p: &ProbVector) -> Vec<(Vec<i64>, f64)> {
    let d = p.dim();
    let steps = StepSet::new(d).expect("valid dimension");
    let mut out: Vec<(Vec<i64>, f64)> = Vec::new();
    for s in 0..2 * d {
        for t in 0..2 * d {
            let w: Vec<i64> = steps
                .vector(s)
                .iter()
                .zip(steps.vector(t))
                .map(|(a, b)| a - b)
                .collect();
            let weight = p.get(s) * p.get(t);
            match out.iter_mut().find(|(v, _)| *v == w) {
                Some(slot) => slot.1 += weight,
                None => out.push((w, weight)),
            }
        }
    }
    out
}

/// Weighted law of the gap after the first steps from a shared site:
/// `a(w) = Σ_{x - y = w} q^θ(x) q^θ(y) e^{V(x,y)}`.
fn first_gap(p: &ProbVector, v: &OverlapPotential) -> Result<(L1Ball, Vec<f64>)> {
    let d = p.dim();
    let steps = StepSet::new(d)?;
    let ball = L1Ball::new(vec![0; d], 2)?;
    let mut a = vec![0.0; ball.len()];
    for s in 0..2 * d {
        for t in 0..2 * d {
            let w: Vec<i64> = steps
                .vector(s)
                .iter()
                .zip(steps.vector(t))
                .map(|(a, b)| a - b)
                .collect();
            let i = ball.index(&w).expect("gap of two unit steps");
            a[i] += p.get(s) * p.get(t) * v.get(s, t).exp();
        }
    }
    Ok((ball, a))
}

fn check_theta(dist: &EnvDistribution, theta: &[f64]) -> Result<()> {
    if theta.len() != dist.dim() {
        return Err(Error::Dimension {
            expected: dist.dim(),
            got: theta.len(),
        });
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::config("theta must be finite"));
    }
    Ok(())
}

fn ball_cap(d: usize, radius: i64, what: &str) -> Result<()> {
    let need = lattice::l1_ball_size(d, radius);
    if need > CONVOLUTION_SITE_CAP {
        return Err(Error::resource(
            format!("{what} in d={d} (L1 ball of radius {radius})"),
            need,
            CONVOLUTION_SITE_CAP,
        ));
    }
    Ok(())
}

/// `P(X_j = Y_j)` for two independent `p`-walks from the same site, `j = 0..=n`.
pub fn return_probabilities(p: &ProbVector, n: usize) -> Result<Vec<f64>> {
    let d = p.dim();
    ball_cap(d, n as i64, "return probabilities")?;
    let kernel: Vec<(Vec<i64>, f64)> = (0..2 * d)
        .map(|s| (StepSet::new(d).expect("valid dimension").vector(s), p.get(s)))
        .collect();
    let mut ball = L1Ball::new(vec![0; d], 0)?;
    let mut law = vec![1.0];
    let mut out = vec![1.0];
    for j in 1..=n {
        let (b, l) = convolve_on_ball(&ball, &law, &kernel, j as i64)?;
        ball = b;
        law = l;
        out.push(law.iter().map(|x| x * x).sum());
    }
    Ok(out)
}

/// Bound on `Σ_{j > J} P(X_j = Y_j)` from the local limit decay `j^{-d/2}`,
/// with the constant fitted on the second half of the computed range.
fn return_tail(returns: &[f64], d: usize) -> f64 {
    if d < 3 {
        return f64::INFINITY;
    }
    let j_last = returns.len() - 1;
    let s = d as f64 / 2.0;
    let constant = (j_last / 2).max(1)..=j_last;
    let c = constant
        .map(|j| returns[j] * (j as f64).powf(s))
        .fold(0.0, f64::max);
    c * (j_last as f64).powf(1.0 - s) / (s - 1.0)
}

/// `B_k` and `C_N` for the tilt `θ` under the law `dist`.
pub fn collision_series(
    dist: &EnvDistribution,
    theta: &[f64],
    k_max: usize,
    method: CollisionMethod,
    seed: u64,
) -> Result<CollisionSeries> {
    check_theta(dist, theta)?;
    if k_max == 0 {
        return Err(Error::config("k_max must be at least 1"));
    }
    let d = dist.dim();
    let p = tilted_step_law(&dist.mean_kernel(), theta);
    let v = overlap_potential(dist);
    // B_k <= e^{V̄} P(X_{k+1} = Y_{k+1})
    let returns = return_probabilities(&p, k_max + 1)?;
    let tail_bound = v.v_bar.exp() * return_tail(&returns, d);
    let (b, b_se, c) = match method {
        CollisionMethod::ExactDp => {
            let (b, c) = exact_collisions(&p, &v, k_max)?;
            (b, None, c)
        }
        CollisionMethod::MonteCarlo { replicas } => {
            let (b, se, c) = sampled_collisions(&p, &v, k_max, replicas, seed)?;
            (b, Some(se), c)
        }
    };
    Ok(CollisionSeries {
        theta: theta.to_vec(),
        k_max,
        b,
        b_se,
        c,
        v_bar: v.v_bar,
        tail_bound,
    })
}

/// Forward DP of the gap walk killed at the origin.
fn exact_collisions(p: &ProbVector, v: &OverlapPotential, k_max: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = p.dim();
    ball_cap(d, 2 * k_max as i64 + 2, "killed gap walk")?;
    let kernel = difference_kernel(p);
    let origin = vec![0; d];
    let (mut ball, mut mass) = first_gap(p, v)?;
    let total: f64 = mass.iter().sum();
    let mut b = Vec::with_capacity(k_max + 1);
    // C_1 = Σ a; C_N = Σ a - Σ_{k ≤ N-2} B_k, kept as the surviving mass
    let mut c = vec![total];
    for k in 0..=k_max {
        let o = ball.index(&origin).expect("origin in ball");
        b.push(mass[o]);
        mass[o] = 0.0;
        c.push(mass.iter().sum());
        if k < k_max {
            let (nb, nm) = convolve_on_ball(&ball, &mass, &kernel, ball.radius() + 2)?;
            ball = nb;
            mass = nm;
        }
    }
    Ok((b, c))
}

type SampledSeries = (Vec<f64>, Vec<f64>, Vec<f64>);

fn sampled_collisions(
    p: &ProbVector,
    v: &OverlapPotential,
    k_max: usize,
    replicas: usize,
    seed: u64,
) -> Result<SampledSeries> {
    if replicas < 2 {
        return Err(Error::config("monte-carlo collision series needs at least 2 replicas"));
    }
    let d = p.dim();
    // (meeting index or None, weight)
    let runs: Vec<(Option<usize>, f64)> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::replica_stream(seed, i as u64);
            let s = ProbVector::pick(p.weights(), rng.random());
            let t = ProbVector::pick(p.weights(), rng.random());
            let weight = v.get(s, t).exp();
            let mut gap = vec![0i64; d];
            StepSet::apply(&mut gap, s);
            StepSet::unapply(&mut gap, t);
            for k in 0..=k_max {
                if gap.iter().all(|g| *g == 0) {
                    return (Some(k), weight);
                }
                if k < k_max {
                    StepSet::apply(&mut gap, ProbVector::pick(p.weights(), rng.random()));
                    StepSet::unapply(&mut gap, ProbVector::pick(p.weights(), rng.random()));
                }
            }
            (None, weight)
        })
        .collect();
    let mut b = Vec::with_capacity(k_max + 1);
    let mut se = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let xs: Vec<f64> = runs
            .iter()
            .map(|(m, w)| if *m == Some(k) { *w } else { 0.0 })
            .collect();
        let e = Estimate::from_samples(&xs);
        b.push(e.mean);
        se.push(e.se);
    }
    let c = (1..=k_max + 2)
        .map(|n| {
            let xs: Vec<f64> = runs
                .iter()
                .map(|(m, w)| match m {
                    Some(k) if k + 1 < n => 0.0,
                    _ => *w,
                })
                .collect();
            Estimate::from_samples(&xs).mean
        })
        .collect();
    Ok((b, se, c))
}

/// `G_1, ..., G_{n_max}` from the renewal recursion.
pub fn recursion_g(series: &CollisionSeries, n_max: usize) -> Result<Vec<f64>> {
    if n_max > series.k_max + 2 {
        return Err(Error::config(format!(
            "the collision series reaches N = {} but N = {n_max} was requested",
            series.k_max + 2
        )));
    }
    let mut g: Vec<f64> = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let mut acc = series.c[n - 1];
        for k in 0..n.saturating_sub(1) {
            acc += series.b[k] * g[n - k - 2];
        }
        g.push(acc);
    }
    Ok(g)
}

/// `G_1, ..., G_{n_max}` by a forward DP of the gap between two walks, with
/// the overlap weight applied whenever the gap is zero. Independent of the
/// collision decomposition.
pub fn second_moment_dp(dist: &EnvDistribution, theta: &[f64], n_max: usize) -> Result<Vec<f64>> {
    check_theta(dist, theta)?;
    let d = dist.dim();
    ball_cap(d, 2 * n_max as i64, "gap walk")?;
    let p = tilted_step_law(&dist.mean_kernel(), theta);
    let v = overlap_potential(dist);
    let kernel = difference_kernel(&p);
    let (gap_ball, a) = first_gap(&p, &v)?;
    let origin = vec![0; d];
    let mut ball = L1Ball::new(origin.clone(), 0)?;
    let mut mass = vec![1.0];
    let mut out = Vec::with_capacity(n_max);
    for _ in 0..n_max {
        let o = ball.index(&origin).expect("origin in ball");
        let at_origin = std::mem::replace(&mut mass[o], 0.0);
        let (nb, mut nm) = convolve_on_ball(&ball, &mass, &kernel, ball.radius() + 2)?;
        let mut y = vec![0; d];
        for (i, w) in a.iter().enumerate() {
            gap_ball.site_into(i, &mut y);
            nm[nb.index(&y).expect("gap ball inside")] += at_origin * w;
        }
        ball = nb;
        mass = nm;
        out.push(mass.iter().sum());
    }
    Ok(out)
}

/// `G_N` by summing over every pair of length-`N` paths; exact for
/// finite-support laws and feasible only for small `N`.
pub fn g_brute_force(dist: &EnvDistribution, theta: &[f64], n: usize) -> Result<f64> {
    check_theta(dist, theta)?;
    let d = dist.dim();
    let pairs = ((2 * d) as u128).pow(2 * n as u32);
    if pairs > BRUTE_FORCE_PAIR_CAP {
        return Err(Error::resource("double path enumeration", pairs, BRUTE_FORCE_PAIR_CAP));
    }
    let q = dist.mean_kernel();
    let p = tilted_step_law(&q, theta);
    let v = overlap_potential(dist);
    // q^θ(s) q^θ(t) e^{V(s,t)} at a shared site, q^θ(s) q^θ(t) apart
    fn walk(
        x: &mut Vec<i64>,
        y: &mut Vec<i64>,
        left: usize,
        p: &ProbVector,
        v: &OverlapPotential,
    ) -> f64 {
        if left == 0 {
            return 1.0;
        }
        let met = x == y;
        let mut total = 0.0;
        for s in 0..2 * p.dim() {
            for t in 0..2 * p.dim() {
                let mut w = p.get(s) * p.get(t);
                if met {
                    w *= v.get(s, t).exp();
                }
                StepSet::apply(x, s);
                StepSet::apply(y, t);
                total += w * walk(x, y, left - 1, p, v);
                StepSet::unapply(x, s);
                StepSet::unapply(y, t);
            }
        }
        total
    }
    Ok(walk(&mut vec![0; d], &mut vec![0; d], n, &p, &v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// `Σ B_k` plus its tail bound is below 1.
    Holds,
    Fails,
    /// The walks meet infinitely often, so no finite tail bound exists.
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub theta: Vec<f64>,
    pub b_partial: f64,
    pub tail_bound: f64,
    pub b_upper: f64,
    pub c_limit: f64,
    pub g_bound: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub k_max: usize,
    pub v_bar: f64,
    pub rows: Vec<CriterionRow>,
    /// Largest tested `|θ|` such that every tested point no farther out holds.
    pub eta_bar: Option<f64>,
}

/// Tests `Σ_k B_k(θ) < 1` at every point of the grid.
pub fn criterion_eta(dist: &EnvDistribution, grid: &[Vec<f64>], k_max: usize) -> Result<CriterionReport> {
    criterion_scan(dist, grid, k_max, CollisionMethod::ExactDp, 0)
}

/// [`criterion_eta`] with a choice of collision method; grid point `i` uses
/// seed `child_seed(seed, i)` under Monte Carlo.
pub fn criterion_scan(
    dist: &EnvDistribution,
    grid: &[Vec<f64>],
    k_max: usize,
    method: CollisionMethod,
    seed: u64,
) -> Result<CriterionReport> {
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let s = collision_series(dist, theta, k_max, method, crate::rng::child_seed(seed, i as u64))?;
            let verdict = if dist.dim() < 3 {
                Verdict::Inapplicable
            } else if s.b_upper() < 1.0 {
                Verdict::Holds
            } else {
                Verdict::Fails
            };
            Ok(CriterionRow {
                theta: theta.clone(),
                b_partial: s.partial_b(),
                tail_bound: s.tail_bound,
                b_upper: s.b_upper(),
                c_limit: s.c_limit_bracket().1,
                g_bound: s.g_bound(),
                verdict,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut radii: Vec<(f64, bool)> = rows
        .iter()
        .map(|r| (lattice::euclid(&r.theta), r.verdict == Verdict::Holds))
        .collect();
    radii.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut eta_bar = None;
    for (r, ok) in radii {
        if !ok {
            break;
        }
        eta_bar = Some(r);
    }
    Ok(CriterionReport {
        k_max,
        v_bar: overlap_potential(dist).v_bar,
        rows,
        eta_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point(bias: f64) -> EnvDistribution {
        EnvDistribution::two_point(3, bias, 0.05).unwrap()
    }

    #[test]
    fn overlap_potential_of_laws() {
        let det = EnvDistribution::uniform(3).unwrap();
        assert!(overlap_potential(&det).values.iter().all(|v| *v == 0.0));
        let dist = two_point(0.1);
        let v = overlap_potential(&dist);
        let atoms = dist.atoms().unwrap();
        let q = dist.mean_kernel();
        for x in 0..6 {
            assert!(v.get(x, x) >= 0.0);
            for y in 0..6 {
                let m = (atoms[0].0.get(x) * atoms[0].0.get(y) + atoms[1].0.get(x) * atoms[1].0.get(y)) / 2.0;
                assert!((v.get(x, y) - (m / (q.get(x) * q.get(y))).ln()).abs() < 1e-14);
                assert_eq!(v.get(x, y), v.get(y, x));
            }
        }
    }

    #[test]
    fn conservation_without_overlap() {
        let det = EnvDistribution::uniform(3).unwrap();
        let s = collision_series(&det, &[0.0; 3], 20, CollisionMethod::ExactDp, 0).unwrap();
        for n in 2..=22 {
            let sum: f64 = s.b[..n - 1].iter().sum::<f64>() + s.c_n(n).unwrap();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn first_term_is_the_diagonal_sum() {
        let dist = two_point(0.1);
        let theta = [0.05, 0.0, -0.02];
        let s = collision_series(&dist, &theta, 4, CollisionMethod::ExactDp, 0).unwrap();
        let p = tilted_step_law(&dist.mean_kernel(), &theta);
        let v = overlap_potential(&dist);
        let direct: f64 = (0..6).map(|x| p.get(x).powi(2) * v.get(x, x).exp()).sum();
        assert!((s.b[0] - direct).abs() < 1e-14);
    }

    #[test]
    fn untilted_second_moment_is_one() {
        let dist = two_point(0.1);
        let s = collision_series(&dist, &[0.0; 3], 30, CollisionMethod::ExactDp, 0).unwrap();
        for g in recursion_g(&s, 32).unwrap() {
            assert!((g - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn recursion_matches_path_pairs_and_gap_dp() {
        let dist = two_point(0.1);
        let theta = [0.05, 0.0, 0.0];
        let s = collision_series(&dist, &theta, 8, CollisionMethod::ExactDp, 0).unwrap();
        let g = recursion_g(&s, 6).unwrap();
        for n in 1..=3 {
            let bf = g_brute_force(&dist, &theta, n).unwrap();
            assert!((g[n - 1] - bf).abs() < 1e-10, "N={n}: {} vs {bf}", g[n - 1]);
        }
        let dp = second_moment_dp(&dist, &theta, 6).unwrap();
        for n in 0..6 {
            assert!((g[n] - dp[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn c_is_nonincreasing_and_bounded_away_from_zero() {
        let dist = two_point(0.1);
        let s = collision_series(&dist, &[0.05, 0.0, 0.0], 24, CollisionMethod::ExactDp, 0).unwrap();
        assert!(s.c.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(s.c_limit_bracket().0 > 0.5);
        let mut partial = 0.0;
        for b in &s.b {
            assert!(*b >= 0.0);
            partial += b;
            assert!(partial <= s.v_bar.exp());
        }
    }

    #[test]
    fn sampled_series_agrees_with_dp() {
        let dist = two_point(0.1);
        let theta = [0.05, 0.0, 0.0];
        let exact = collision_series(&dist, &theta, 10, CollisionMethod::ExactDp, 0).unwrap();
        let mc = collision_series(&dist, &theta, 10, CollisionMethod::MonteCarlo { replicas: 200_000 }, 4).unwrap();
        let se = mc.b_se.as_ref().unwrap();
        for k in 0..=10 {
            assert!((mc.b[k] - exact.b[k]).abs() <= 3.0 * se[k] + 1e-12, "k={k} {} {} {}", mc.b[k], exact.b[k], se[k]);
        }
    }

    #[test]
    fn criterion_verdicts() {
        let det = EnvDistribution::uniform(3).unwrap();
        let r = criterion_eta(&det, &[vec![0.0; 3]], 32).unwrap();
        assert_eq!(r.rows[0].verdict, Verdict::Holds);
        // two simple walks in d=3 meet again with probability about 0.34
        assert!(r.rows[0].b_partial > 0.25 && r.rows[0].b_upper < 0.5);
        let d1 = EnvDistribution::uniform(1).unwrap();
        assert_eq!(criterion_eta(&d1, &[vec![0.0]], 16).unwrap().rows[0].verdict, Verdict::Inapplicable);
        let dist = two_point(0.05);
        let grid: Vec<Vec<f64>> = (0..=5).map(|i| vec![0.01 * i as f64, 0.0, 0.0]).collect();
        let r = criterion_eta(&dist, &grid, 32).unwrap();
        assert!(r.rows.iter().all(|row| row.verdict == Verdict::Holds));
        assert!((r.eta_bar.unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn depth_is_checked() {
        let s = collision_series(&two_point(0.1), &[0.0; 3], 3, CollisionMethod::ExactDp, 0).unwrap();
        assert!(recursion_g(&s, 5).is_ok());
        assert!(recursion_g(&s, 6).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recursion_agrees_with_gap_dp(bias in 0.0f64..0.11, t1 in -0.3f64..0.3, t2 in -0.3f64..0.3) {
            let dist = two_point(bias);
            let theta = [t1, t2, 0.0];
            let s = collision_series(&dist, &theta, 6, CollisionMethod::ExactDp, 0).unwrap();
            let g = recursion_g(&s, 8).unwrap();
            let dp = second_moment_dp(&dist, &theta, 8).unwrap();
            for n in 0..8 {
                prop_assert!((g[n] - dp[n]).abs() < 1e-10 * dp[n]);
            }
        }
    }
}
