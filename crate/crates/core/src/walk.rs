//! Quenched and averaged path measures.

use std::io::{BufRead, Write};

use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvDistribution, Environment, ProbVector};
use crate::error::{Error, Result};
use crate::lattice::{self, L1Ball, StepSet};
use crate::rng;
use crate::stats::{pairwise_sum, Estimate};

/// A nearest-neighbour path stored as step indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub start_time: i64,
    pub start: Vec<i64>,
    pub steps: Vec<u8>,
}

impl Path {
    pub fn new(start_time: i64, start: Vec<i64>, steps: Vec<u8>) -> Self {
        Path {
            start_time,
            start,
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `X_{k+i}` for `i = 0..=len`.
    pub fn positions(&self) -> Vec<Vec<i64>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut x = self.start.clone();
        out.push(x.clone());
        for &s in &self.steps {
            StepSet::apply(&mut x, s as usize);
            out.push(x.clone());
        }
        out
    }

    pub fn end(&self) -> Vec<i64> {
        let mut x = self.start.clone();
        for &s in &self.steps {
            StepSet::apply(&mut x, s as usize);
        }
        x
    }

    /// Displacement `X_{k+len} - X_k`.
    pub fn displacement(&self) -> Vec<i64> {
        let mut x = vec![0; self.start.len()];
        for &s in &self.steps {
            StepSet::apply(&mut x, s as usize);
        }
        x
    }
}

/// Paths with importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub paths: Vec<Path>,
    pub weights: Vec<f64>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathLine {
    start_time: i64,
    start: Vec<i64>,
    steps: Vec<u8>,
    weight: f64,
}

impl PathEnsemble {
    pub fn empty(seed: Option<u64>) -> Self {
        PathEnsemble {
            paths: Vec::new(),
            weights: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Importance-weighted mean of `g` over the paths, with its standard error.
    pub fn weighted_mean(&self, mut g: impl FnMut(&Path) -> f64) -> Estimate {
        let xs: Vec<f64> = self
            .paths
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * g(p))
            .collect();
        Estimate::from_samples(&xs)
    }

    /// Per-axis unweighted mean of `X_n / n` with standard errors.
    pub fn mean_velocity(&self) -> Vec<Estimate> {
        let Some(first) = self.paths.first() else {
            return Vec::new();
        };
        let d = first.start.len();
        (0..d)
            .map(|k| {
                let xs: Vec<f64> = self
                    .paths
                    .iter()
                    .map(|p| p.displacement()[k] as f64 / p.len().max(1) as f64)
                    .collect();
                Estimate::from_samples(&xs)
            })
            .collect()
    }

    /// One JSON object per line: start, steps, weight.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (p, &weight) in self.paths.iter().zip(&self.weights) {
            let line = PathLine {
                start_time: p.start_time,
                start: p.start.clone(),
                steps: p.steps.clone(),
                weight,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut out = PathEnsemble::empty(None);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PathLine = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("path line {}: {e}", i + 1)))?;
            if !(p.weight.is_finite() && p.weight > 0.0) {
                return Err(Error::Parse(format!("path line {}: weight must be positive", i + 1)));
            }
            out.paths.push(Path::new(p.start_time, p.start, p.steps));
            out.weights.push(p.weight);
        }
        Ok(out)
    }
}

/// `(π_{n,n+1}(x, x+z))_z`.
pub fn quenched_step_law<E: Environment + ?Sized>(env: &E, n: i64, x: &[i64]) -> Result<ProbVector> {
    env.cell(n, x)
}

/// `replicas` independent paths of the quenched chain started at `(k, x)`.
///
/// Replica `i` draws from its own stream, so the ensemble does not depend on
/// the number of worker threads.
pub fn simulate_quenched<E: Environment + ?Sized>(
    env: &E,
    k: i64,
    x: &[i64],
    n_steps: usize,
    replicas: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if x.len() != env.dim() {
        return Err(Error::Dimension {
            expected: env.dim(),
            got: x.len(),
        });
    }
    env.check_cone(k, x, 0, n_steps)?;
    let width = env.steps().len();
    let paths = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::replica_stream(seed, i as u64);
            let mut pos = x.to_vec();
            let mut cell = vec![0.0; width];
            let mut steps = Vec::with_capacity(n_steps);
            for j in 0..n_steps {
                env.cell_into(k + j as i64, &pos, &mut cell)?;
                let s = ProbVector::pick(&cell, rng.random());
                StepSet::apply(&mut pos, s);
                steps.push(s as u8);
            }
            Ok(Path::new(k, x.to_vec(), steps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        weights: vec![1.0; paths.len()],
        paths,
        seed: Some(seed),
    })
}

/// Paths under the averaged measure: replica `i` walks in its own freshly
/// sampled environment.
pub fn simulate_averaged(
    dist: &EnvDistribution,
    n_steps: usize,
    replicas: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let d = dist.dim();
    let shared = std::sync::Arc::new(dist.clone());
    let paths = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let env = crate::environment::SiteKeyedEnv::new(
                shared.clone(),
                rng::environment_seed(seed, i as u64),
            );
            let mut rng = rng::replica_stream(seed, i as u64);
            let mut pos = vec![0; d];
            let mut cell = vec![0.0; 2 * d];
            let mut steps = Vec::with_capacity(n_steps);
            for j in 0..n_steps {
                env.cell_into(j as i64, &pos, &mut cell)?;
                let s = ProbVector::pick(&cell, rng.random());
                StepSet::apply(&mut pos, s);
                steps.push(s as u8);
            }
            Ok(Path::new(0, vec![0; d], steps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        weights: vec![1.0; paths.len()],
        paths,
        seed: Some(seed),
    })
}

/// Product of the cell probabilities along `path`.
pub fn quenched_path_prob<E: Environment + ?Sized>(env: &E, path: &Path) -> Result<f64> {
    let mut x = path.start.clone();
    let mut p = 1.0;
    let mut cell = vec![0.0; env.steps().len()];
    for (j, &s) in path.steps.iter().enumerate() {
        env.cell_into(path.start_time + j as i64, &x, &mut cell)?;
        p *= cell[s as usize];
        StepSet::apply(&mut x, s as usize);
    }
    Ok(p)
}

/// Largest ball the exact convolution will allocate (two buffers of this many f64).
pub const CONVOLUTION_SITE_CAP: u128 = 40_000_000;

/// The exact law of `X_n` for a walk with i.i.d. steps of law `q`, on the
/// L1 ball of radius `n`.
#[derive(Debug, Clone)]
pub struct LatticeLaw {
    n: usize,
    ball: L1Ball,
    probs: Vec<f64>,
}

impl LatticeLaw {
    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.ball.center().len()
    }

    pub fn prob(&self, x: &[i64]) -> f64 {
        if x.len() != self.dim() {
            return 0.0;
        }
        self.ball.index(x).map_or(0.0, |i| self.probs[i])
    }

    /// Visits `(x, P(X_n = x))` for every site of positive probability.
    pub fn for_each(&self, mut f: impl FnMut(&[i64], f64)) {
        let mut x = vec![0; self.dim()];
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                self.ball.site_into(i, &mut x);
                f(&x, p);
            }
        }
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.probs)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        self.for_each(|x, p| {
            for (mk, xk) in m.iter_mut().zip(x) {
                *mk += p * *xk as f64;
            }
        });
        m
    }

    /// `E[e^{<θ, X_n>}]`.
    pub fn mgf(&self, theta: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.probs.len());
        self.for_each(|x, p| terms.push(p * lattice::dot(theta, x).exp()));
        pairwise_sum(&terms)
    }

    /// `P(pred(X_n))`.
    pub fn prob_where(&self, mut pred: impl FnMut(&[i64]) -> bool) -> f64 {
        let mut terms = Vec::new();
        self.for_each(|x, p| {
            if pred(x) {
                terms.push(p)
            }
        });
        pairwise_sum(&terms)
    }
}

/// n-fold convolution of the step law `q`.
pub fn convolution_law(q: &ProbVector, n: usize) -> Result<LatticeLaw> {
    let d = q.dim();
    let need = lattice::l1_ball_size(d, n as i64);
    if need > CONVOLUTION_SITE_CAP {
        return Err(Error::resource(
            format!("exact law of X_{n} in d={d} (L1 ball of radius {n})"),
            need,
            CONVOLUTION_SITE_CAP,
        ));
    }
    let origin = vec![0i64; d];
    let kernel: Vec<(Vec<i64>, f64)> = (0..2 * d)
        .map(|s| (StepSet::new(d).expect("dimension checked").vector(s), q.get(s)))
        .collect();
    let mut src_ball = L1Ball::new(origin, 0)?;
    let mut src = vec![1.0];
    for _ in 0..n {
        let (ball, next) = convolve_on_ball(&src_ball, &src, &kernel, src_ball.radius() + 1)?;
        src_ball = ball;
        src = next;
    }
    Ok(LatticeLaw {
        n,
        ball: src_ball,
        probs: src,
    })
}

/// `dst(t) = Σ_w k(w) src(t - w)` for `t` in the ball of `radius` around the
/// source centre. Mass that would land outside is dropped.
pub(crate) fn convolve_on_ball(
    src_ball: &L1Ball,
    src: &[f64],
    kernel: &[(Vec<i64>, f64)],
    radius: i64,
) -> Result<(L1Ball, Vec<f64>)> {
    let d = src_ball.center().len();
    let dst_ball = L1Ball::new(src_ball.center().to_vec(), radius)?;
    let mut dst = vec![0.0; dst_ball.len()];
    let mut shifted = vec![0i64; d - 1];
    dst_ball.for_each_row(|prefix, start, hw| {
        let row = &mut dst[start..start + (2 * hw + 1) as usize];
        for (w, weight) in kernel {
            if *weight == 0.0 {
                continue;
            }
            for k in 0..d - 1 {
                shifted[k] = prefix[k] - w[k];
            }
            if let Some((s0, shw)) = src_ball.row(&shifted) {
                let srow = &src[s0..s0 + (2 * shw + 1) as usize];
                add_shifted(row, hw, srow, shw, w[d - 1], *weight);
            }
        }
    });
    Ok((dst_ball, dst))
}

/// `row[t] += weight * src[t - shift]` over coordinates `t` relative to the row centre.
#[inline]
fn add_shifted(row: &mut [f64], hw: i64, src: &[f64], shw: i64, shift: i64, weight: f64) {
    // t ranges over [-hw, hw]; src coordinate t - shift must lie in [-shw, shw]
    let lo = (-hw).max(-shw + shift);
    let hi = hw.min(shw + shift);
    if lo > hi {
        return;
    }
    let dst = &mut row[(lo + hw) as usize..=(hi + hw) as usize];
    let s = &src[(lo - shift + shw) as usize..=(hi - shift + shw) as usize];
    for (a, b) in dst.iter_mut().zip(s) {
        *a += weight * b;
    }
}

/// The exact averaged law of `X_n`: the `n`-fold convolution of the mean kernel.
pub fn averaged_marginal(dist: &EnvDistribution, n: usize) -> Result<LatticeLaw> {
    convolution_law(&dist.mean_kernel(), n)
}

/// `Σ_x P(X_n = x) e^{<θ,x>}`; equals `φ(θ)^n`.
pub fn averaged_mgf_check(dist: &EnvDistribution, theta: &[f64], n: usize) -> Result<f64> {
    if theta.len() != dist.dim() {
        return Err(Error::Dimension {
            expected: dist.dim(),
            got: theta.len(),
        });
    }
    Ok(averaged_marginal(dist, n)?.mgf(theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_window, EnvWindow, WindowGeometry};
    use proptest::prelude::*;

    fn all_paths(d: usize, len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..2 * d as u8).map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn quenched_paths_are_normalized() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let env = sample_window(&dist, WindowGeometry::cone(0, 3, vec![0, 0, 0], 0), 4).unwrap();
        let total: f64 = all_paths(3, 3)
            .into_iter()
            .map(|s| quenched_path_prob(&env, &Path::new(0, vec![0, 0, 0], s)).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(
            quenched_path_prob(&env, &Path::new(0, vec![0, 0, 0], vec![])).unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_path_probability() {
        let dist = EnvDistribution::uniform(3).unwrap();
        let env = sample_window(&dist, WindowGeometry::cone(0, 5, vec![0, 0, 0], 0), 1).unwrap();
        let p = quenched_path_prob(&env, &Path::new(0, vec![0, 0, 0], vec![0, 3, 5, 5, 1])).unwrap();
        assert!((p - 6f64.powi(-5)).abs() < 1e-18);
    }

    #[test]
    fn shifted_step_law() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let env = sample_window(&dist, WindowGeometry::cone(0, 4, vec![0, 0, 0], 1), 4).unwrap();
        let s = env.shift(1, &[1, 0, 0]);
        assert_eq!(
            quenched_step_law(&s, 0, &[0, 0, 0]).unwrap(),
            quenched_step_law(&env, 1, &[1, 0, 0]).unwrap()
        );
    }

    #[test]
    fn two_step_line_law() {
        let dist = EnvDistribution::uniform(1).unwrap();
        let law = averaged_marginal(&dist, 2).unwrap();
        assert_eq!(law.prob(&[-2]), 0.25);
        assert_eq!(law.prob(&[0]), 0.5);
        assert_eq!(law.prob(&[2]), 0.25);
        assert_eq!(law.prob(&[1]), 0.0);
        assert_eq!(averaged_marginal(&dist, 0).unwrap().prob(&[0]), 1.0);
    }

    #[test]
    fn uniform_mgf_closed_form() {
        let dist = EnvDistribution::uniform(3).unwrap();
        let v = averaged_mgf_check(&dist, &[0.1, 0.0, 0.0], 5).unwrap();
        let exact = ((0.1f64.cosh() + 2.0) / 3.0).powi(5);
        assert!((v / exact - 1.0).abs() < 1e-13);
    }

    /// Direct convolution by a hash map, used as an oracle for the row kernel.
    fn naive_law(q: &ProbVector, n: usize) -> std::collections::HashMap<Vec<i64>, f64> {
        let d = q.dim();
        let mut law = std::collections::HashMap::from([(vec![0i64; d], 1.0)]);
        for _ in 0..n {
            let mut next = std::collections::HashMap::new();
            for (x, p) in &law {
                for s in 0..2 * d {
                    let mut y = x.clone();
                    StepSet::apply(&mut y, s);
                    *next.entry(y).or_insert(0.0) += p * q.get(s);
                }
            }
            law = next;
        }
        law
    }

    proptest! {
        #[test]
        fn row_convolution_matches_direct(d in 1usize..4, n in 0usize..7, raw in proptest::collection::vec(0.05f64..1.0, 6)) {
            let q = ProbVector::normalized(raw[..2 * d].to_vec()).unwrap();
            let law = convolution_law(&q, n).unwrap();
            let oracle = naive_law(&q, n);
            for (x, p) in &oracle {
                prop_assert!((law.prob(x) - p).abs() < 1e-15);
            }
            prop_assert!((law.total() - 1.0).abs() < 1e-12);
            let mean = law.mean();
            for (m, xi) in mean.iter().zip(q.mean_step()) {
                prop_assert!((m - n as f64 * xi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convolution_cap_is_reported() {
        let q = ProbVector::uniform(3);
        assert!(matches!(
            convolution_law(&q, 2000),
            Err(Error::Resource { .. })
        ));
    }

    #[test]
    fn forced_step_frequency() {
        let (d, c) = (3usize, 0.05);
        let mut w = vec![c; 2 * d];
        w[0] = 1.0 - (2 * d - 1) as f64 * c;
        let steps = StepSet::new(d).unwrap();
        let geom = WindowGeometry::cone(0, 1, vec![0, 0, 0], 0);
        let env = EnvWindow::from_cells(steps, geom, vec![ProbVector::new(w.clone()).unwrap()]).unwrap();
        let r = 20_000;
        let ens = simulate_quenched(&env, 0, &[0, 0, 0], 1, r, 3).unwrap();
        let hits = ens.paths.iter().filter(|p| p.steps[0] == 0).count() as f64;
        let p = w[0];
        let sd = (p * (1.0 - p) / r as f64).sqrt();
        assert!((hits / r as f64 - p).abs() < 3.0 * sd);
        assert!(simulate_quenched(&env, 0, &[0, 0, 0], 2, 1, 3).is_err());
        assert!(simulate_quenched(&env, 0, &[0, 0, 0], 1, 0, 3).unwrap().is_empty());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dist = EnvDistribution::uniform(2).unwrap();
        let env = sample_window(&dist, WindowGeometry::cone(0, 6, vec![0, 0], 0), 1).unwrap();
        let ens = simulate_quenched(&env, 0, &[0, 0], 6, 5, 9).unwrap();
        let mut buf = Vec::new();
        ens.write_jsonl(&mut buf).unwrap();
        let back = PathEnsemble::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.paths, ens.paths);
        assert_eq!(back.weights, ens.weights);
    }
}
