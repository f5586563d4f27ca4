//! The environment: i.i.d. random transition vectors attached to every
//! space-time site, finite realized windows, and space-time shifts.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::prelude::*;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Region, StepSet};
use crate::rng::{self, Stream};

/// Tolerance on the total mass of a probability vector.
pub const MASS_TOL: f64 = 1e-12;

/// A probability vector over the 2d nearest-neighbour steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 || weights.len() % 2 != 0 {
            return Err(Error::config(format!(
                "a step vector needs 2d entries, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("step probabilities must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::config(format!(
                "step probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(weights))
    }

    /// Normalizes a nonnegative vector with positive mass.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::config("cannot normalize a vector without positive finite mass"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        ProbVector::new(weights)
    }

    pub fn uniform(d: usize) -> Self {
        ProbVector(vec![1.0 / (2 * d) as f64; 2 * d])
    }

    pub fn dim(&self) -> usize {
        self.0.len() / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, s: usize) -> f64 {
        self.0[s]
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `Σ_z q(z) z`.
    pub fn mean_step(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (s, w) in self.0.iter().enumerate() {
            m[StepSet::axis(s)] += StepSet::sign(s) as f64 * w;
        }
        m
    }

    /// Index of the step selected by the uniform variate `u ∈ [0,1)`.
    #[inline]
    pub fn pick(weights: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (s, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return s;
            }
        }
        // u landed in the rounding gap above the total mass
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// Law of a single environment cell.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    Deterministic(ProbVector),
    FiniteSupport(Vec<(ProbVector, f64)>),
    /// Floor-and-renormalize Dirichlet: `c + (1 - 2dc) D`, `D ~ Dir(alpha)`.
    Dirichlet(Vec<f64>),
}

/// The i.i.d. law of the environment cells, with its ellipticity constant.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDistribution {
    steps: StepSet,
    ellipticity: f64,
    kind: EnvKind,
    cumulative: Vec<f64>,
    gammas: Vec<Gamma<f64>>,
}

impl EnvDistribution {
    pub fn deterministic(q: ProbVector, c: f64) -> Result<Self> {
        Self::build(q.dim(), c, EnvKind::Deterministic(q))
    }

    pub fn finite(atoms: Vec<(ProbVector, f64)>, c: f64) -> Result<Self> {
        let d = atoms
            .first()
            .map(|(v, _)| v.dim())
            .ok_or_else(|| Error::config("finite support needs at least one atom"))?;
        Self::build(d, c, EnvKind::FiniteSupport(atoms))
    }

    pub fn dirichlet(alpha: Vec<f64>, c: f64) -> Result<Self> {
        if alpha.len() % 2 != 0 || alpha.is_empty() {
            return Err(Error::config("dirichlet needs 2d concentration parameters"));
        }
        Self::build(alpha.len() / 2, c, EnvKind::Dirichlet(alpha))
    }

    /// Uniform steps, no disorder.
    pub fn uniform(d: usize) -> Result<Self> {
        Self::deterministic(ProbVector::uniform(d), 1.0 / (2 * d) as f64)
    }

    /// Two equally likely atoms: uniform steps tilted by `±bias` along `+e1/-e1`.
    ///
    /// `bias` must leave every weight at least `c`.
    pub fn two_point(d: usize, bias: f64, c: f64) -> Result<Self> {
        let base = 1.0 / (2 * d) as f64;
        let mut up = vec![base; 2 * d];
        let mut down = vec![base; 2 * d];
        up[0] += bias;
        up[1] -= bias;
        down[0] -= bias;
        down[1] += bias;
        Self::finite(
            vec![(ProbVector::new(up)?, 0.5), (ProbVector::new(down)?, 0.5)],
            c,
        )
    }

    fn build(d: usize, c: f64, kind: EnvKind) -> Result<Self> {
        let steps = StepSet::new(d)?;
        let cmax = 1.0 / (2 * d) as f64;
        if !(c > 0.0 && c <= cmax + 1e-15) {
            return Err(Error::config(format!(
                "ellipticity constant must lie in (0, 1/(2d)] = (0, {cmax}], got {c}"
            )));
        }
        let check_floor = |v: &ProbVector| -> Result<()> {
            if v.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: v.dim(),
                });
            }
            if v.min() < c - 1e-15 {
                return Err(Error::config(format!(
                    "vector {:?} violates ellipticity floor {c}",
                    v.weights()
                )));
            }
            Ok(())
        };
        let mut cumulative = Vec::new();
        let mut gammas = Vec::new();
        match &kind {
            EnvKind::Deterministic(q) => check_floor(q)?,
            EnvKind::FiniteSupport(atoms) => {
                let mut acc = 0.0;
                for (v, p) in atoms {
                    check_floor(v)?;
                    if !(p.is_finite() && *p >= 0.0) {
                        return Err(Error::config("atom probabilities must be nonnegative"));
                    }
                    acc += p;
                    cumulative.push(acc);
                }
                if (acc - 1.0).abs() > MASS_TOL {
                    return Err(Error::config(format!("atom probabilities sum to {acc}, not 1")));
                }
            }
            EnvKind::Dirichlet(alpha) => {
                for &a in alpha {
                    if !(a.is_finite() && a > 0.0) {
                        return Err(Error::config(format!(
                            "dirichlet parameters must be positive and finite, got {a}"
                        )));
                    }
                    gammas.push(Gamma::new(a, 1.0).map_err(|e| Error::config(e.to_string()))?);
                }
            }
        }
        Ok(EnvDistribution {
            steps,
            ellipticity: c,
            kind,
            cumulative,
            gammas,
        })
    }

    pub fn steps(&self) -> StepSet {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.steps.dim()
    }

    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, EnvKind::Deterministic(_))
    }

    /// The support with its probabilities, when it is finite.
    pub fn atoms(&self) -> Option<Vec<(&ProbVector, f64)>> {
        match &self.kind {
            EnvKind::Deterministic(q) => Some(vec![(q, 1.0)]),
            EnvKind::FiniteSupport(a) => Some(a.iter().map(|(v, p)| (v, *p)).collect()),
            EnvKind::Dirichlet(_) => None,
        }
    }

    /// Draws one cell into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.kind {
            EnvKind::Deterministic(q) => out.copy_from_slice(q.weights()),
            EnvKind::FiniteSupport(atoms) => {
                let u: f64 = rng.random();
                let i = self
                    .cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(atoms.len() - 1);
                out.copy_from_slice(atoms[i].0.weights());
            }
            EnvKind::Dirichlet(_) => {
                let scale = 1.0 - 2.0 * self.dim() as f64 * self.ellipticity;
                let mut total = 0.0;
                for (o, g) in out.iter_mut().zip(&self.gammas) {
                    *o = g.sample(rng);
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o = self.ellipticity + scale * *o / total;
                }
            }
        }
    }

    /// Draws a cell from the size-biased law `P(dω) ω(z) / q(z)`.
    pub fn sample_size_biased_into<R: Rng + ?Sized>(&self, z: usize, rng: &mut R, out: &mut [f64]) {
        match &self.kind {
            EnvKind::Deterministic(q) => out.copy_from_slice(q.weights()),
            EnvKind::FiniteSupport(atoms) => {
                let qz: f64 = atoms.iter().map(|(v, p)| p * v.get(z)).sum();
                let u: f64 = rng.random::<f64>() * qz;
                let mut acc = 0.0;
                let mut pick = atoms.len() - 1;
                for (i, (v, p)) in atoms.iter().enumerate() {
                    acc += p * v.get(z);
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                out.copy_from_slice(atoms[pick].0.weights());
            }
            EnvKind::Dirichlet(alpha) => {
                // c + sD_z is a mixture: the constant part keeps D ~ Dir(alpha),
                // the D_z part size-biases D to Dir(alpha + e_z).
                let c = self.ellipticity;
                let s = 1.0 - 2.0 * self.dim() as f64 * c;
                let a0: f64 = alpha.iter().sum();
                let biased_mass = s * alpha[z] / a0;
                let u: f64 = rng.random::<f64>() * (c + biased_mass);
                let mut total = 0.0;
                for (k, (o, g)) in out.iter_mut().zip(&self.gammas).enumerate() {
                    *o = if u >= c && k == z {
                        Gamma::new(alpha[z] + 1.0, 1.0).unwrap().sample(rng)
                    } else {
                        g.sample(rng)
                    };
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o = c + s * *o / total;
                }
            }
        }
    }

    /// `q(z) = E[π_{0,1}(0,z)]`.
    pub fn mean_kernel(&self) -> ProbVector {
        let w = match &self.kind {
            EnvKind::Deterministic(q) => q.weights().to_vec(),
            EnvKind::FiniteSupport(atoms) => {
                let mut m = vec![0.0; self.steps.len()];
                for (v, p) in atoms {
                    for (mi, vi) in m.iter_mut().zip(v.weights()) {
                        *mi += p * vi;
                    }
                }
                m
            }
            EnvKind::Dirichlet(alpha) => {
                let c = self.ellipticity;
                let s = 1.0 - 2.0 * self.dim() as f64 * c;
                let a0: f64 = alpha.iter().sum();
                alpha.iter().map(|a| c + s * a / a0).collect()
            }
        };
        ProbVector(w)
    }

    /// `E[π_{0,1}(0,x) π_{0,1}(0,y)]`.
    pub fn second_moment(&self, x: usize, y: usize) -> f64 {
        match &self.kind {
            EnvKind::Deterministic(q) => q.get(x) * q.get(y),
            EnvKind::FiniteSupport(atoms) => atoms.iter().map(|(v, p)| p * v.get(x) * v.get(y)).sum(),
            EnvKind::Dirichlet(alpha) => {
                let c = self.ellipticity;
                let s = 1.0 - 2.0 * self.dim() as f64 * c;
                let a0: f64 = alpha.iter().sum();
                let exy = if x == y {
                    alpha[x] * (alpha[x] + 1.0) / (a0 * (a0 + 1.0))
                } else {
                    alpha[x] * alpha[y] / (a0 * (a0 + 1.0))
                };
                c * c + c * s * (alpha[x] + alpha[y]) / a0 + s * s * exy
            }
        }
    }

    pub fn to_spec(&self) -> EnvSpec {
        let d = self.dim();
        let c = self.ellipticity;
        match &self.kind {
            EnvKind::Deterministic(q) => EnvSpec::Deterministic {
                d,
                c,
                q: q.weights().to_vec(),
            },
            EnvKind::FiniteSupport(atoms) => EnvSpec::Finite {
                d,
                c,
                atoms: atoms
                    .iter()
                    .map(|(v, p)| AtomSpec {
                        p: *p,
                        weights: v.weights().to_vec(),
                    })
                    .collect(),
            },
            EnvKind::Dirichlet(alpha) => EnvSpec::Dirichlet {
                d,
                c,
                alpha: alpha.clone(),
            },
        }
    }
}

/// The JSON form of an environment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Deterministic { d: usize, c: f64, q: Vec<f64> },
    Finite { d: usize, c: f64, atoms: Vec<AtomSpec> },
    Dirichlet { d: usize, c: f64, alpha: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub p: f64,
    pub weights: Vec<f64>,
}

impl EnvSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("environment spec: {e}")))
    }

    pub fn build(&self) -> Result<EnvDistribution> {
        let check_len = |d: usize, n: usize| -> Result<()> {
            if n != 2 * d {
                Err(Error::Dimension { expected: 2 * d, got: n })
            } else {
                Ok(())
            }
        };
        match self {
            EnvSpec::Deterministic { d, c, q } => {
                check_len(*d, q.len())?;
                EnvDistribution::deterministic(ProbVector::new(q.clone())?, *c)
            }
            EnvSpec::Finite { d, c, atoms } => {
                let mut out = Vec::with_capacity(atoms.len());
                for a in atoms {
                    check_len(*d, a.weights.len())?;
                    out.push((ProbVector::new(a.weights.clone())?, a.p));
                }
                EnvDistribution::finite(out, *c)
            }
            EnvSpec::Dirichlet { d, c, alpha } => {
                check_len(*d, alpha.len())?;
                EnvDistribution::dirichlet(alpha.clone(), *c)
            }
        }
    }
}

/// Anything that can hand out environment cells.
pub trait Environment: Send + Sync {
    fn steps(&self) -> StepSet;

    /// Writes `(π_{n,n+1}(x, x+z))_z` into `out`.
    fn cell_into(&self, n: i64, x: &[i64], out: &mut [f64]) -> Result<()>;

    fn dim(&self) -> usize {
        self.steps().dim()
    }

    fn cell(&self, n: i64, x: &[i64]) -> Result<ProbVector> {
        let mut out = vec![0.0; self.steps().len()];
        self.cell_into(n, x, &mut out)?;
        Ok(ProbVector(out))
    }

    /// Fails unless every cone site `(k + j, y)` with `|y - center|_1 <= r0 + j`,
    /// `0 <= j < levels`, has a cell.
    fn check_cone(&self, _k: i64, _center: &[i64], _r0: i64, _levels: usize) -> Result<()> {
        Ok(())
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn steps(&self) -> StepSet {
        (**self).steps()
    }
    fn cell_into(&self, n: i64, x: &[i64], out: &mut [f64]) -> Result<()> {
        (**self).cell_into(n, x, out)
    }
    fn check_cone(&self, k: i64, center: &[i64], r0: i64, levels: usize) -> Result<()> {
        (**self).check_cone(k, center, r0, levels)
    }
}

impl<E: Environment + ?Sized> Environment for Arc<E> {
    fn steps(&self) -> StepSet {
        (**self).steps()
    }
    fn cell_into(&self, n: i64, x: &[i64], out: &mut [f64]) -> Result<()> {
        (**self).cell_into(n, x, out)
    }
    fn check_cone(&self, k: i64, center: &[i64], r0: i64, levels: usize) -> Result<()> {
        (**self).check_cone(k, center, r0, levels)
    }
}

/// The unbounded environment whose cell at `(n, x)` is drawn from the stream
/// keyed by `(seed, n, x)`.
#[derive(Debug, Clone)]
pub struct SiteKeyedEnv {
    dist: Arc<EnvDistribution>,
    seed: u64,
}

impl SiteKeyedEnv {
    pub fn new(dist: Arc<EnvDistribution>, seed: u64) -> Self {
        SiteKeyedEnv { dist, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> &EnvDistribution {
        &self.dist
    }
}

impl Environment for SiteKeyedEnv {
    fn steps(&self) -> StepSet {
        self.dist.steps()
    }

    #[inline]
    fn cell_into(&self, n: i64, x: &[i64], out: &mut [f64]) -> Result<()> {
        if let EnvKind::Deterministic(q) = &self.dist.kind {
            out.copy_from_slice(q.weights());
        } else {
            let mut rng: Stream = rng::cell_stream(self.seed, n, x);
            self.dist.sample_into(&mut rng, out);
        }
        Ok(())
    }
}

/// Shape of a finite window: levels `n_lo..n_hi`, each carrying a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum WindowGeometry {
    /// Level `k` holds the L1 ball of radius `r0 + (k - n_lo)` around `center`.
    Cone {
        n_lo: i64,
        n_hi: i64,
        center: Vec<i64>,
        r0: i64,
    },
    /// Every level holds the box `lo..=hi`.
    Box {
        n_lo: i64,
        n_hi: i64,
        lo: Vec<i64>,
        hi: Vec<i64>,
    },
}

impl WindowGeometry {
    pub fn cone(n_lo: i64, n_hi: i64, center: Vec<i64>, r0: i64) -> Self {
        WindowGeometry::Cone {
            n_lo,
            n_hi,
            center,
            r0,
        }
    }

    pub fn levels(&self) -> (i64, i64) {
        match self {
            WindowGeometry::Cone { n_lo, n_hi, .. } | WindowGeometry::Box { n_lo, n_hi, .. } => {
                (*n_lo, *n_hi)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WindowGeometry::Cone { center, .. } => center.len(),
            WindowGeometry::Box { lo, .. } => lo.len(),
        }
    }

    pub fn region(&self, level: i64) -> Result<Region> {
        match self {
            WindowGeometry::Cone {
                n_lo, center, r0, ..
            } => Region::ball(center.clone(), r0 + (level - n_lo)),
            WindowGeometry::Box { lo, hi, .. } => Region::boxed(lo.clone(), hi.clone()),
        }
    }

    /// The geometry seen after shifting the frame by `(m, y)`.
    pub fn shifted(&self, m: i64, y: &[i64]) -> Self {
        let sub = |v: &[i64]| v.iter().zip(y).map(|(a, b)| a - b).collect();
        match self {
            WindowGeometry::Cone {
                n_lo,
                n_hi,
                center,
                r0,
            } => WindowGeometry::Cone {
                n_lo: n_lo - m,
                n_hi: n_hi - m,
                center: sub(center),
                r0: *r0,
            },
            WindowGeometry::Box { n_lo, n_hi, lo, hi } => WindowGeometry::Box {
                n_lo: n_lo - m,
                n_hi: n_hi - m,
                lo: sub(lo),
                hi: sub(hi),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.levels();
        if hi <= lo {
            return Err(Error::config("window has no levels"));
        }
        if let WindowGeometry::Cone { r0, .. } = self {
            if *r0 < 0 {
                return Err(Error::config("cone base radius must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// A realized environment restricted to a finite window.
///
/// Cells are stored in the frame the window was sampled in; `shift` only
/// moves the frame, so shifted windows share storage.
#[derive(Debug, Clone)]
pub struct EnvWindow {
    steps: StepSet,
    // geometry in the storage frame
    geometry: WindowGeometry,
    regions: Vec<Region>,
    offsets: Vec<usize>,
    cells: Arc<Vec<f64>>,
    // current frame: cell(n, x) = stored(n + shift_time, x + shift_space)
    shift_time: i64,
    shift_space: Vec<i64>,
    seed: Option<u64>,
}

impl PartialEq for EnvWindow {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.geometry() == other.geometry()
            && self.seed == other.seed
            && (Arc::ptr_eq(&self.cells, &other.cells) && self.shift_time == other.shift_time
                && self.shift_space == other.shift_space
                || self.cells_in_frame() == other.cells_in_frame())
    }
}

impl EnvWindow {
    fn layout(geometry: &WindowGeometry) -> Result<(Vec<Region>, Vec<usize>)> {
        geometry.validate()?;
        let (lo, hi) = geometry.levels();
        let mut regions = Vec::with_capacity((hi - lo) as usize);
        let mut offsets = Vec::with_capacity((hi - lo) as usize + 1);
        let mut total = 0usize;
        for k in lo..hi {
            let r = geometry.region(k)?;
            offsets.push(total);
            total += r.len();
            regions.push(r);
        }
        offsets.push(total);
        Ok((regions, offsets))
    }

    /// Builds a window from explicit cells listed level by level in region order.
    pub fn from_cells(steps: StepSet, geometry: WindowGeometry, cells: Vec<ProbVector>) -> Result<Self> {
        if geometry.dim() != steps.dim() {
            return Err(Error::Dimension {
                expected: steps.dim(),
                got: geometry.dim(),
            });
        }
        let (regions, offsets) = Self::layout(&geometry)?;
        let total = *offsets.last().unwrap();
        if cells.len() != total {
            return Err(Error::config(format!(
                "window holds {total} sites but {} cells were given",
                cells.len()
            )));
        }
        let mut flat = Vec::with_capacity(total * steps.len());
        for c in cells {
            if c.weights().len() != steps.len() {
                return Err(Error::Dimension {
                    expected: steps.len(),
                    got: c.weights().len(),
                });
            }
            flat.extend_from_slice(c.weights());
        }
        Ok(EnvWindow {
            steps,
            shift_space: vec![0; steps.dim()],
            geometry,
            regions,
            offsets,
            cells: Arc::new(flat),
            shift_time: 0,
            seed: None,
        })
    }

    /// Fills `geometry` with the site-keyed cells of `(dist, seed)`.
    pub fn sample(dist: &EnvDistribution, geometry: WindowGeometry, seed: u64) -> Result<Self> {
        if geometry.dim() != dist.dim() {
            return Err(Error::Dimension {
                expected: dist.dim(),
                got: geometry.dim(),
            });
        }
        let (regions, offsets) = Self::layout(&geometry)?;
        let total = *offsets.last().unwrap();
        let width = dist.steps().len();
        let cap = 400_000_000u128;
        if (total as u128) * width as u128 > cap {
            return Err(Error::resource("environment window", total as u128 * width as u128, cap));
        }
        let mut flat = vec![0.0; total * width];
        let (n_lo, _) = geometry.levels();
        let env = SiteKeyedEnv::new(Arc::new(dist.clone()), seed);
        flat.par_chunks_mut(width).enumerate().for_each_init(
            || vec![0i64; dist.dim()],
            |x, (i, out)| {
                let level = offsets.partition_point(|&o| o <= i) - 1;
                regions[level].site_into(i - offsets[level], x);
                env.cell_into(n_lo + level as i64, x, out)
                    .expect("site-keyed cells are total");
            },
        );
        Ok(EnvWindow {
            steps: dist.steps(),
            shift_space: vec![0; dist.dim()],
            geometry,
            regions,
            offsets,
            cells: Arc::new(flat),
            shift_time: 0,
            seed: Some(seed),
        })
    }

    /// Re-samples the same window from its recorded seed.
    pub fn regenerate(&self, dist: &EnvDistribution) -> Result<Self> {
        let seed = self
            .seed
            .ok_or_else(|| Error::config("window was not sampled from a seed"))?;
        Ok(Self::sample(dist, self.geometry.clone(), seed)?.shift(self.shift_time, &self.shift_space))
    }

    /// `(T_{m,y} ω)_{n,x} = ω_{n+m, x+y}`.
    pub fn shift(&self, m: i64, y: &[i64]) -> Self {
        let mut out = self.clone();
        out.shift_time += m;
        for (a, b) in out.shift_space.iter_mut().zip(y) {
            *a += b;
        }
        out
    }

    pub fn geometry(&self) -> WindowGeometry {
        self.geometry.shifted(self.shift_time, &self.shift_space)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn frame_shift(&self) -> (i64, &[i64]) {
        (self.shift_time, &self.shift_space)
    }

    pub fn num_cells(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Levels covered, in the current frame.
    pub fn levels(&self) -> (i64, i64) {
        let (lo, hi) = self.geometry.levels();
        (lo - self.shift_time, hi - self.shift_time)
    }

    /// The region at `level` in the current frame.
    pub fn region(&self, level: i64) -> Option<Region> {
        let (lo, hi) = self.geometry.levels();
        let abs = level + self.shift_time;
        if abs < lo || abs >= hi {
            return None;
        }
        self.regions[(abs - lo) as usize].translated(&self.shift_space).ok()
    }

    #[inline]
    fn slot(&self, n: i64, x: &[i64]) -> Option<usize> {
        let (lo, hi) = self.geometry.levels();
        let abs = n + self.shift_time;
        if abs < lo || abs >= hi || x.len() != self.steps.dim() {
            return None;
        }
        let level = (abs - lo) as usize;
        let i = if self.shift_space.iter().all(|&s| s == 0) {
            self.regions[level].index(x)?
        } else {
            let y: Vec<i64> = x.iter().zip(&self.shift_space).map(|(a, b)| a + b).collect();
            self.regions[level].index(&y)?
        };
        Some(self.offsets[level] + i)
    }

    pub fn contains(&self, n: i64, x: &[i64]) -> bool {
        self.slot(n, x).is_some()
    }

    /// Borrowed view of the cell at `(n, x)`.
    pub fn cell_slice(&self, n: i64, x: &[i64]) -> Result<&[f64]> {
        let w = self.steps.len();
        let i = self.slot(n, x).ok_or_else(|| Error::WindowBounds {
            level: n,
            site: x.to_vec(),
        })?;
        Ok(&self.cells[i * w..(i + 1) * w])
    }

    /// A copy of this window with the cell at `(n, x)` replaced.
    pub fn with_cell(&self, n: i64, x: &[i64], v: &ProbVector) -> Result<Self> {
        let w = self.steps.len();
        let i = self.slot(n, x).ok_or_else(|| Error::WindowBounds {
            level: n,
            site: x.to_vec(),
        })?;
        let mut cells = (*self.cells).clone();
        cells[i * w..(i + 1) * w].copy_from_slice(v.weights());
        let mut out = self.clone();
        out.cells = Arc::new(cells);
        out.seed = None;
        Ok(out)
    }

    /// All cells in the current frame, level by level in region order.
    pub fn cells_in_frame(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells.len());
        let (lo, hi) = self.levels();
        for n in lo..hi {
            if let Some(region) = self.region(n) {
                region.for_each_site(|_, x| {
                    out.extend_from_slice(self.cell_slice(n, x).expect("site from own region"))
                });
            }
        }
        out
    }

    /// Compact little-endian binary form (bit-exact round trip).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WINDOW_MAGIC)?;
        let d = self.steps.dim();
        w.write_all(&(d as u32).to_le_bytes())?;
        let put = |w: &mut W, v: i64| w.write_all(&v.to_le_bytes());
        match &self.geometry {
            WindowGeometry::Cone {
                n_lo,
                n_hi,
                center,
                r0,
            } => {
                w.write_all(&[0u8])?;
                put(&mut w, *n_lo)?;
                put(&mut w, *n_hi)?;
                for c in center {
                    put(&mut w, *c)?;
                }
                put(&mut w, *r0)?;
            }
            WindowGeometry::Box { n_lo, n_hi, lo, hi } => {
                w.write_all(&[1u8])?;
                put(&mut w, *n_lo)?;
                put(&mut w, *n_hi)?;
                for c in lo.iter().chain(hi) {
                    put(&mut w, *c)?;
                }
            }
        }
        put(&mut w, self.shift_time)?;
        for c in &self.shift_space {
            put(&mut w, *c)?;
        }
        match self.seed {
            Some(s) => {
                w.write_all(&[1u8])?;
                w.write_all(&s.to_le_bytes())?;
            }
            None => {
                w.write_all(&[0u8])?;
                w.write_all(&0u64.to_le_bytes())?;
            }
        }
        w.write_all(&(self.cells.len() as u64).to_le_bytes())?;
        for v in self.cells.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WINDOW_MAGIC {
            return Err(Error::Parse("not an environment window file".into()));
        }
        let d = read_u32(&mut r)? as usize;
        let steps = StepSet::new(d)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let geometry = match tag[0] {
            0 => {
                let n_lo = read_i64(&mut r)?;
                let n_hi = read_i64(&mut r)?;
                let center = (0..d).map(|_| read_i64(&mut r)).collect::<Result<_>>()?;
                let r0 = read_i64(&mut r)?;
                WindowGeometry::Cone {
                    n_lo,
                    n_hi,
                    center,
                    r0,
                }
            }
            1 => {
                let n_lo = read_i64(&mut r)?;
                let n_hi = read_i64(&mut r)?;
                let lo = (0..d).map(|_| read_i64(&mut r)).collect::<Result<_>>()?;
                let hi = (0..d).map(|_| read_i64(&mut r)).collect::<Result<_>>()?;
                WindowGeometry::Box { n_lo, n_hi, lo, hi }
            }
            t => return Err(Error::Parse(format!("unknown geometry tag {t}"))),
        };
        let shift_time = read_i64(&mut r)?;
        let shift_space = (0..d).map(|_| read_i64(&mut r)).collect::<Result<Vec<_>>>()?;
        r.read_exact(&mut tag)?;
        let seed_raw = read_u64(&mut r)?;
        let seed = (tag[0] == 1).then_some(seed_raw);
        let count = read_u64(&mut r)? as usize;
        let (regions, offsets) = Self::layout(&geometry)?;
        if count != offsets.last().unwrap() * steps.len() {
            return Err(Error::Parse("cell count does not match the window geometry".into()));
        }
        let mut cells = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            cells.push(f64::from_le_bytes(buf));
        }
        Ok(EnvWindow {
            steps,
            geometry,
            regions,
            offsets,
            cells: Arc::new(cells),
            shift_time,
            shift_space,
            seed,
        })
    }

    /// JSON grid form.
    pub fn to_json(&self) -> WindowJson {
        WindowJson {
            d: self.steps.dim(),
            steps: self.steps.labels(),
            geometry: self.geometry.clone(),
            shift: (self.shift_time, self.shift_space.clone()),
            seed: self.seed,
            cells: self
                .cells
                .chunks(self.steps.len())
                .map(|c| c.to_vec())
                .collect(),
        }
    }

    pub fn from_json(j: &WindowJson) -> Result<Self> {
        let steps = StepSet::new(j.d)?;
        if j.steps != steps.labels() {
            return Err(Error::Parse("step order differs from the canonical order".into()));
        }
        let cells = j
            .cells
            .iter()
            .map(|c| ProbVector::new(c.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut w = Self::from_cells(steps, j.geometry.clone(), cells)?;
        w.shift_time = j.shift.0;
        w.shift_space = j.shift.1.clone();
        w.seed = j.seed;
        Ok(w)
    }
}

const WINDOW_MAGIC: &[u8; 8] = b"RWSENV\x00\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowJson {
    pub d: usize,
    pub steps: Vec<String>,
    pub geometry: WindowGeometry,
    pub shift: (i64, Vec<i64>),
    pub seed: Option<u64>,
    pub cells: Vec<Vec<f64>>,
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    Ok(read_u64(r)? as i64)
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

impl Environment for EnvWindow {
    fn steps(&self) -> StepSet {
        self.steps
    }

    #[inline]
    fn cell_into(&self, n: i64, x: &[i64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(self.cell_slice(n, x)?);
        Ok(())
    }

    fn check_cone(&self, k: i64, center: &[i64], r0: i64, levels: usize) -> Result<()> {
        for j in 0..levels as i64 {
            let need = Region::ball(center.to_vec(), r0 + j)?;
            let missing = match self.region(k + j) {
                Some(have) => need.witness_outside(&have),
                None => Some(center.to_vec()),
            };
            if let Some(site) = missing {
                return Err(Error::WindowBounds { level: k + j, site });
            }
        }
        Ok(())
    }
}

/// Samples the window `geometry` from `dist` under `seed`.
pub fn sample_window(dist: &EnvDistribution, geometry: WindowGeometry, seed: u64) -> Result<EnvWindow> {
    EnvWindow::sample(dist, geometry, seed)
}

/// Shifts a window: `(T_{m,y} ω)_{n,x} = ω_{n+m, x+y}`.
pub fn shift(env: &EnvWindow, m: i64, y: &[i64]) -> EnvWindow {
    env.shift(m, y)
}

/// Mean transition vector `q`.
pub fn mean_kernel(dist: &EnvDistribution) -> ProbVector {
    dist.mean_kernel()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> EnvDistribution {
        EnvDistribution::two_point(3, 0.1, 0.05).unwrap()
    }

    #[test]
    fn deterministic_windows_are_constant() {
        let q = ProbVector::new(vec![0.3, 0.1, 0.15, 0.15, 0.2, 0.1]).unwrap();
        let dist = EnvDistribution::deterministic(q.clone(), 0.1).unwrap();
        let w = sample_window(&dist, WindowGeometry::cone(0, 4, vec![0, 0, 0], 1), 99).unwrap();
        let (lo, hi) = w.levels();
        for n in lo..hi {
            w.region(n).unwrap().for_each_site(|_, x| {
                assert_eq!(w.cell(n, x).unwrap(), q);
            });
        }
    }

    #[test]
    fn two_point_atom_frequencies_concentrate() {
        // 10^4 cells; P(|freq - 1/2| > 0.03) <= 2 exp(-2 * 1e4 * 0.03^2) ≈ 3e-8
        let dist = two_point();
        let geom = WindowGeometry::Box {
            n_lo: 0,
            n_hi: 16,
            lo: vec![0, 0, 0],
            hi: vec![7, 7, 9],
        };
        let w = sample_window(&dist, geom, 2024).unwrap();
        assert_eq!(w.num_cells(), 16 * 8 * 8 * 10);
        let cells = w.cells_in_frame();
        let ups = cells.chunks(6).filter(|c| c[0] > c[1]).count();
        let freq = ups as f64 / w.num_cells() as f64;
        assert!((0.47..=0.53).contains(&freq), "freq {freq}");
    }

    #[test]
    fn cells_do_not_depend_on_window_shape() {
        let dist = two_point();
        let a = sample_window(&dist, WindowGeometry::cone(0, 5, vec![0, 0, 0], 0), 5).unwrap();
        let b = sample_window(
            &dist,
            WindowGeometry::Box {
                n_lo: 2,
                n_hi: 4,
                lo: vec![0, -1, -1],
                hi: vec![2, 1, 1],
            },
            5,
        )
        .unwrap();
        assert_eq!(a.cell(3, &[1, 0, 0]).unwrap(), b.cell(3, &[1, 0, 0]).unwrap());
    }

    #[test]
    fn shifts_compose_and_invert() {
        let dist = EnvDistribution::dirichlet(vec![1.0, 2.0, 1.5, 0.5, 1.0, 1.0], 0.02).unwrap();
        let e = sample_window(&dist, WindowGeometry::cone(0, 6, vec![0, 0, 0], 2), 11).unwrap();
        assert_eq!(e.shift(0, &[0, 0, 0]), e);
        assert_eq!(e.shift(1, &[1, 0, 0]).shift(-1, &[-1, 0, 0]), e);
        let s = e.shift(2, &[0, 1, 0]);
        assert_eq!(s.cell(0, &[1, 0, 0]).unwrap(), e.cell(2, &[1, 1, 0]).unwrap());
        assert_eq!(
            e.shift(1, &[1, 0, 0]).shift(2, &[0, -1, 1]),
            e.shift(3, &[1, -1, 1])
        );
        assert!(matches!(
            s.cell(10, &[0, 0, 0]),
            Err(Error::WindowBounds { level: 10, .. })
        ));
    }

    #[test]
    fn shift_covariance_of_sampling() {
        let dist = two_point();
        let seed = 77;
        let e = sample_window(&dist, WindowGeometry::cone(0, 5, vec![0, 0, 0], 1), seed).unwrap();
        let keyed = SiteKeyedEnv::new(Arc::new(dist), seed);
        let (m, y) = (2i64, [1i64, -1, 0]);
        let s = e.shift(m, &y);
        let (lo, hi) = s.levels();
        for n in lo..hi {
            s.region(n).unwrap().for_each_site(|_, x| {
                let shifted: Vec<i64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
                assert_eq!(s.cell(n, x).unwrap(), keyed.cell(n + m, &shifted).unwrap());
            });
        }
    }

    #[test]
    fn mean_kernels() {
        let q = ProbVector::new(vec![0.3, 0.1, 0.15, 0.15, 0.2, 0.1]).unwrap();
        assert_eq!(EnvDistribution::deterministic(q.clone(), 0.1).unwrap().mean_kernel(), q);
        let v1 = vec![0.3, 0.1, 0.15, 0.15, 0.2, 0.1];
        let v2 = vec![0.1, 0.3, 0.2, 0.1, 0.15, 0.15];
        let dist = EnvDistribution::finite(
            vec![
                (ProbVector::new(v1.clone()).unwrap(), 0.5),
                (ProbVector::new(v2.clone()).unwrap(), 0.5),
            ],
            0.1,
        )
        .unwrap();
        let m = dist.mean_kernel();
        for s in 0..6 {
            assert!((m.get(s) - (v1[s] + v2[s]) / 2.0).abs() < 1e-15);
        }
        let dir = EnvDistribution::dirichlet(vec![2.0; 6], 0.05).unwrap();
        for w in dir.mean_kernel().weights() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sampled_cells_respect_ellipticity_and_mass() {
        let dist = EnvDistribution::dirichlet(vec![0.3, 2.0, 1.0, 0.7, 5.0, 0.2], 0.03).unwrap();
        let keyed = SiteKeyedEnv::new(Arc::new(dist.clone()), 3);
        let mut sums = vec![0.0; 6];
        let mut sq = vec![0.0; 6];
        let n = 100_000;
        let mut out = vec![0.0; 6];
        for i in 0..n {
            keyed.cell_into(i as i64 % 97, &[i as i64 / 97, 0, 1], &mut out).unwrap();
            let total: f64 = out.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|w| *w >= 0.03 - 1e-15));
            for s in 0..6 {
                sums[s] += out[s];
                sq[s] += out[s] * out[s];
            }
        }
        let q = dist.mean_kernel();
        for s in 0..6 {
            let mean = sums[s] / n as f64;
            let sd = (sq[s] / n as f64 - mean * mean).sqrt();
            assert!((mean - q.get(s)).abs() < 3.0 * sd / (n as f64).sqrt() + 1e-12, "step {s}");
        }
    }

    #[test]
    fn size_biased_sampling_matches_reweighting() {
        let dist = two_point();
        let mut rng = crate::rng::replica_stream(1, 0);
        let mut out = vec![0.0; 6];
        let n = 40_000;
        let mut ups = 0;
        for _ in 0..n {
            dist.sample_size_biased_into(0, &mut rng, &mut out);
            if out[0] > out[1] {
                ups += 1;
            }
        }
        // P(up | step +e1) = 0.5 * (1/6 + 0.1) / (1/6)
        let p = 0.5 * (1.0 / 6.0 + 0.1) / (1.0 / 6.0);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((ups as f64 / n as f64) - p).abs() < 4.0 * sd);
    }

    #[test]
    fn rejects_bad_laws() {
        assert!(EnvDistribution::dirichlet(vec![1.0, -1.0], 0.1).is_err());
        assert!(EnvDistribution::dirichlet(vec![1.0; 6], 0.2).is_err());
        assert!(EnvDistribution::two_point(3, 0.15, 0.05).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        let spec = r#"{"kind":"finite","d":1,"c":0.1,"atoms":[{"p":1.0,"weights":[0.5,0.5]}],"extra":1}"#;
        assert!(EnvSpec::from_json(spec).is_err());
    }

    #[test]
    fn spec_roundtrip() {
        let dist = two_point();
        let text = serde_json::to_string(&dist.to_spec()).unwrap();
        assert_eq!(EnvSpec::from_json(&text).unwrap().build().unwrap(), dist);
    }

    #[test]
    fn binary_and_json_roundtrips_are_exact() {
        let dist = EnvDistribution::dirichlet(vec![1.0, 2.0, 1.5, 0.5], 0.02).unwrap();
        let e = sample_window(&dist, WindowGeometry::cone(-1, 4, vec![0, 2], 1), 8)
            .unwrap()
            .shift(1, &[0, 1]);
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        let back = EnvWindow::read_binary(&buf[..]).unwrap();
        assert_eq!(back, e);
        let mut buf2 = Vec::new();
        back.write_binary(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        let json = serde_json::to_string(&e.to_json()).unwrap();
        let j: WindowJson = serde_json::from_str(&json).unwrap();
        assert_eq!(EnvWindow::from_json(&j).unwrap(), e);
        assert_eq!(e.regenerate(&dist).unwrap(), e);
    }
}
