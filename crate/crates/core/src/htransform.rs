//! The tilted harmonic field `u_N^θ`, computed by backward recursion, and the
//! Doob-transformed kernel it induces.
//!
//! For a horizon `N` the field is
//! `u_N(ω, n, x) = E^ω_{n,x}[e^{<θ, X_N - X_n>}] / φ(θ)^{N-n}`, with
//! `u_N(·, N, ·) = 1` and
//! `u_N(n, x) = Σ_z π_{n,n+1}(x, x+z) e^{<θ,z> - log φ} u_N(n+1, x+z)`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cramer::Tilt;
use crate::environment::{
    read_f64, read_i64, read_u32, read_u64, EnvDistribution, EnvSpec, Environment, SiteKeyedEnv,
};
use crate::error::{Error, Result};
use crate::lattice::{Region, StepSet};
use crate::rng;
use crate::stats::{median, Estimate};
use crate::walk::{Path, PathEnsemble};

/// Above this value of `|θ| N` the recursion runs on `log u`.
pub const LOG_SCALE_THRESHOLD: f64 = 30.0;

/// Default number of extra levels beyond the simulated steps.
pub const DEFAULT_EXTRA_HORIZON: usize = 16;

const FIELD_MAGIC: &[u8; 8] = b"RWSFLD\x00\x01";
const FIELD_SITE_CAP: u128 = 60_000_000;

/// Where the environment of a field came from, so it can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub env: EnvSpec,
    pub seed: u64,
}

impl Provenance {
    pub fn environment(&self) -> Result<SiteKeyedEnv> {
        Ok(SiteKeyedEnv::new(Arc::new(self.env.build()?), self.seed))
    }
}

/// Spatial support of a field, level by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum FieldGeometry {
    /// Level `n` holds the L1 ball of radius `r0 + (n - base)` around `center`;
    /// every neighbour of a level lies in the next one, so the field is exact.
    Cone { center: Vec<i64>, r0: i64 },
    /// One box per level. Neighbours outside the next box count as `u = 1`.
    Tube { boxes: Vec<(Vec<i64>, Vec<i64>)> },
}

/// The table `{u_N^θ(ω, n, x)}` over a space-time region.
#[derive(Debug, Clone)]
pub struct HarmonicField {
    tilt: Tilt,
    base: i64,
    horizon: i64,
    geometry: FieldGeometry,
    regions: Vec<Region>,
    offsets: Vec<usize>,
    // u, or log u when `log_scale`
    values: Vec<f64>,
    log_scale: bool,
    provenance: Option<Provenance>,
}

impl PartialEq for HarmonicField {
    fn eq(&self, other: &Self) -> bool {
        self.tilt == other.tilt
            && self.base == other.base
            && self.horizon == other.horizon
            && self.geometry == other.geometry
            && self.log_scale == other.log_scale
            && self.provenance == other.provenance
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-thread scratch for one level update.
struct Scratch {
    x: Vec<i64>,
    y: Vec<i64>,
    cell: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            x: vec![0; d],
            y: vec![0; d],
            cell: vec![0.0; 2 * d],
        }
    }
}

/// Fills `cur` (sites of `cur_region` at level `n`) from `next` (level `n+1`).
#[allow(clippy::too_many_arguments)]
fn level_update<E: Environment + ?Sized>(
    env: &E,
    n: i64,
    factors: &[f64],
    log_scale: bool,
    cur_region: &Region,
    cur: &mut [f64],
    next_region: &Region,
    next: &[f64],
) -> Result<()> {
    let d = cur_region.dim();
    let tilt: Vec<f64> = factors.iter().map(|f| f.exp()).collect();
    cur.par_iter_mut().enumerate().try_for_each_init(
        || Scratch::new(d),
        |sc, (i, out)| {
            cur_region.site_into(i, &mut sc.x);
            env.cell_into(n, &sc.x, &mut sc.cell)?;
            if log_scale {
                let mut terms = [0.0f64; 32];
                let mut m = f64::NEG_INFINITY;
                for s in 0..2 * d {
                    sc.y.copy_from_slice(&sc.x);
                    StepSet::apply(&mut sc.y, s);
                    let lv = next_region.index(&sc.y).map_or(0.0, |j| next[j]);
                    terms[s] = sc.cell[s].ln() + factors[s] + lv;
                    m = m.max(terms[s]);
                }
                let sum: f64 = terms[..2 * d].iter().map(|t| (t - m).exp()).sum();
                *out = m + sum.ln();
            } else {
                let mut acc = 0.0;
                for s in 0..2 * d {
                    sc.y.copy_from_slice(&sc.x);
                    StepSet::apply(&mut sc.y, s);
                    let v = next_region.index(&sc.y).map_or(1.0, |j| next[j]);
                    acc += sc.cell[s] * tilt[s] * v;
                }
                *out = acc;
            }
            Ok(())
        },
    )
}

fn wants_log_scale(tilt: &Tilt, levels: i64) -> bool {
    tilt.norm() * levels as f64 > LOG_SCALE_THRESHOLD
}

impl HarmonicField {
    fn build<E: Environment + ?Sized>(
        env: &E,
        tilt: &Tilt,
        base: i64,
        horizon: i64,
        geometry: FieldGeometry,
        regions: Vec<Region>,
    ) -> Result<Self> {
        if tilt.dim() != env.dim() {
            return Err(Error::Dimension {
                expected: env.dim(),
                got: tilt.dim(),
            });
        }
        let mut offsets = Vec::with_capacity(regions.len() + 1);
        let mut total = 0usize;
        for r in &regions {
            offsets.push(total);
            total += r.len();
        }
        offsets.push(total);
        if total as u128 > FIELD_SITE_CAP {
            return Err(Error::resource("harmonic field", total as u128, FIELD_SITE_CAP));
        }
        let log_scale = wants_log_scale(tilt, horizon - base);
        let fill = if log_scale { 0.0 } else { 1.0 };
        let mut values = vec![fill; total];
        if !tilt.is_zero() {
            let factors = tilt.step_log_factors();
            for level in (0..regions.len() - 1).rev() {
                let (head, tail) = values.split_at_mut(offsets[level + 1]);
                let cur = &mut head[offsets[level]..];
                let next = &tail[..offsets[level + 2] - offsets[level + 1]];
                level_update(
                    env,
                    base + level as i64,
                    &factors,
                    log_scale,
                    &regions[level],
                    cur,
                    &regions[level + 1],
                    next,
                )?;
            }
        }
        Ok(HarmonicField {
            tilt: tilt.clone(),
            base,
            horizon,
            geometry,
            regions,
            offsets,
            values,
            log_scale,
            provenance: None,
        })
    }

    /// The field on the cone over the ball of radius `r0` around `center` at
    /// level `base`, up to the terminal level `horizon`.
    pub fn cone<E: Environment + ?Sized>(
        env: &E,
        tilt: &Tilt,
        horizon: i64,
        base: i64,
        center: &[i64],
        r0: i64,
    ) -> Result<Self> {
        if horizon < base || r0 < 0 {
            return Err(Error::config("field needs horizon >= base level and r0 >= 0"));
        }
        env.check_cone(base, center, r0, (horizon - base) as usize)?;
        let regions = (base..=horizon)
            .map(|n| Region::ball(center.to_vec(), r0 + n - base))
            .collect::<Result<Vec<_>>>()?;
        Self::build(
            env,
            tilt,
            base,
            horizon,
            FieldGeometry::Cone {
                center: center.to_vec(),
                r0,
            },
            regions,
        )
    }

    /// The field on one explicit box per level, `u = 1` outside.
    pub fn tube<E: Environment + ?Sized>(
        env: &E,
        tilt: &Tilt,
        horizon: i64,
        base: i64,
        boxes: Vec<(Vec<i64>, Vec<i64>)>,
    ) -> Result<Self> {
        if boxes.len() as i64 != horizon - base + 1 {
            return Err(Error::config("a tube needs one box per level"));
        }
        let regions = boxes
            .iter()
            .map(|(lo, hi)| Region::boxed(lo.clone(), hi.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::build(env, tilt, base, horizon, FieldGeometry::Tube { boxes }, regions)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn tilt(&self) -> &Tilt {
        &self.tilt
    }

    pub fn theta(&self) -> &[f64] {
        &self.tilt.theta
    }

    pub fn log_phi(&self) -> f64 {
        self.tilt.log_phi
    }

    pub fn dim(&self) -> usize {
        self.tilt.dim()
    }

    pub fn base(&self) -> i64 {
        self.base
    }

    pub fn horizon(&self) -> i64 {
        self.horizon
    }

    pub fn geometry(&self) -> &FieldGeometry {
        &self.geometry
    }

    pub fn is_log_scale(&self) -> bool {
        self.log_scale
    }

    pub fn num_sites(&self) -> usize {
        self.values.len()
    }

    pub fn region(&self, n: i64) -> Option<&Region> {
        if n < self.base || n > self.horizon {
            return None;
        }
        self.regions.get((n - self.base) as usize)
    }

    fn slot(&self, n: i64, x: &[i64]) -> Option<usize> {
        let level = (n - self.base) as usize;
        let i = self.region(n)?.index(x)?;
        Some(self.offsets[level] + i)
    }

    /// `log u_N(n, x)` where the field is stored.
    pub fn log_u(&self, n: i64, x: &[i64]) -> Option<f64> {
        self.slot(n, x).map(|i| {
            if self.log_scale {
                self.values[i]
            } else {
                self.values[i].ln()
            }
        })
    }

    /// `u_N(n, x)` where the field is stored.
    pub fn u(&self, n: i64, x: &[i64]) -> Option<f64> {
        self.slot(n, x).map(|i| {
            if self.log_scale {
                self.values[i].exp()
            } else {
                self.values[i]
            }
        })
    }

    /// `log h(n, x)`: the stored value, and 0 off the support or past the horizon.
    #[inline]
    pub fn log_h(&self, n: i64, x: &[i64]) -> f64 {
        if n >= self.horizon {
            return 0.0;
        }
        self.log_u(n, x).unwrap_or(0.0)
    }

    /// Smallest stored value of `u`.
    pub fn min_u(&self) -> f64 {
        let m = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        if self.log_scale {
            m.exp()
        } else {
            m
        }
    }

    /// Visits `(n, x, u)` for every stored site.
    pub fn for_each(&self, mut f: impl FnMut(i64, &[i64], f64)) {
        let mut x = vec![0; self.dim()];
        for (level, region) in self.regions.iter().enumerate() {
            for i in 0..region.len() {
                region.site_into(i, &mut x);
                let v = self.values[self.offsets[level] + i];
                f(self.base + level as i64, &x, if self.log_scale { v.exp() } else { v });
            }
        }
    }

    /// Largest relative violation of the one-step recursion over all sites
    /// below the horizon whose neighbours are stored.
    pub fn harmonic_residual<E: Environment + ?Sized>(&self, env: &E) -> Result<f64> {
        let factors = self.tilt.step_log_factors();
        let d = self.dim();
        let mut worst = 0.0f64;
        let mut y = vec![0; d];
        let mut cell = vec![0.0; 2 * d];
        let mut err = None;
        for level in 0..self.regions.len().saturating_sub(1) {
            let n = self.base + level as i64;
            let next = &self.regions[level + 1];
            self.regions[level].for_each_site(|i, x| {
                if err.is_some() {
                    return;
                }
                if let Err(e) = env.cell_into(n, x, &mut cell) {
                    err = Some(e);
                    return;
                }
                let lu = self.stored_log(self.offsets[level] + i);
                let mut sum = 0.0;
                for s in 0..2 * d {
                    y.copy_from_slice(x);
                    StepSet::apply(&mut y, s);
                    let ln = next
                        .index(&y)
                        .map_or(0.0, |j| self.stored_log(self.offsets[level + 1] + j));
                    sum += cell[s] * (factors[s] + ln - lu).exp();
                }
                worst = worst.max((sum - 1.0).abs());
            });
        }
        match err {
            Some(e) => Err(e),
            None => Ok(worst),
        }
    }

    fn stored_log(&self, i: usize) -> f64 {
        if self.log_scale {
            self.values[i]
        } else {
            self.values[i].ln()
        }
    }

    /// The Doob-transformed kernel of this field in `env`.
    pub fn doob_kernel<'a, E: Environment + ?Sized>(&'a self, env: &'a E) -> TiltedKernelField<'a, E> {
        TiltedKernelField { field: self, env }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.log_scale)])?;
        for t in &self.tilt.theta {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&self.tilt.log_phi.to_le_bytes())?;
        w.write_all(&self.base.to_le_bytes())?;
        w.write_all(&self.horizon.to_le_bytes())?;
        match &self.geometry {
            FieldGeometry::Cone { center, r0 } => {
                w.write_all(&[0u8])?;
                for c in center {
                    w.write_all(&c.to_le_bytes())?;
                }
                w.write_all(&r0.to_le_bytes())?;
            }
            FieldGeometry::Tube { boxes } => {
                w.write_all(&[1u8])?;
                for (lo, hi) in boxes {
                    for c in lo.iter().chain(hi) {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        match &self.provenance {
            Some(p) => {
                let json = serde_json::to_vec(&p.env)?;
                w.write_all(&[1u8])?;
                w.write_all(&p.seed.to_le_bytes())?;
                w.write_all(&(json.len() as u64).to_le_bytes())?;
                w.write_all(&json)?;
            }
            None => w.write_all(&[0u8])?,
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(Error::Parse("not a harmonic field file".into()));
        }
        let d = read_u32(&mut r)? as usize;
        StepSet::new(d)?;
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let log_scale = byte[0] == 1;
        let theta = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let log_phi = read_f64(&mut r)?;
        let base = read_i64(&mut r)?;
        let horizon = read_i64(&mut r)?;
        if horizon < base {
            return Err(Error::Parse("field horizon precedes its base level".into()));
        }
        r.read_exact(&mut byte)?;
        let geometry = match byte[0] {
            0 => {
                let center = (0..d).map(|_| read_i64(&mut r)).collect::<Result<Vec<_>>>()?;
                let r0 = read_i64(&mut r)?;
                FieldGeometry::Cone { center, r0 }
            }
            1 => {
                let boxes = (base..=horizon)
                    .map(|_| {
                        let lo = (0..d).map(|_| read_i64(&mut r)).collect::<Result<Vec<_>>>()?;
                        let hi = (0..d).map(|_| read_i64(&mut r)).collect::<Result<Vec<_>>>()?;
                        Ok((lo, hi))
                    })
                    .collect::<Result<Vec<_>>>()?;
                FieldGeometry::Tube { boxes }
            }
            t => return Err(Error::Parse(format!("unknown field geometry tag {t}"))),
        };
        r.read_exact(&mut byte)?;
        let provenance = if byte[0] == 1 {
            let seed = read_u64(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let mut json = vec![0u8; len];
            r.read_exact(&mut json)?;
            Some(Provenance {
                env: serde_json::from_slice(&json)?,
                seed,
            })
        } else {
            None
        };
        let regions = match &geometry {
            FieldGeometry::Cone { center, r0 } => (base..=horizon)
                .map(|n| Region::ball(center.clone(), r0 + n - base))
                .collect::<Result<Vec<_>>>()?,
            FieldGeometry::Tube { boxes } => boxes
                .iter()
                .map(|(lo, hi)| Region::boxed(lo.clone(), hi.clone()))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut offsets = Vec::with_capacity(regions.len() + 1);
        let mut total = 0usize;
        for reg in &regions {
            offsets.push(total);
            total += reg.len();
        }
        offsets.push(total);
        let count = read_u64(&mut r)? as usize;
        if count != total {
            return Err(Error::Parse("value count does not match the field geometry".into()));
        }
        let values = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Ok(HarmonicField {
            tilt: Tilt { theta, log_phi },
            base,
            horizon,
            geometry,
            regions,
            offsets,
            values,
            log_scale,
            provenance,
        })
    }
}

/// `u_N(·)` on the cone over a single base point.
pub fn compute_u<E: Environment + ?Sized>(
    env: &E,
    tilt: &Tilt,
    horizon: i64,
    base: i64,
    x0: &[i64],
) -> Result<HarmonicField> {
    HarmonicField::cone(env, tilt, horizon, base, x0, 0)
}

/// `u_N(n0, x0)` alone, keeping only two levels in memory.
pub fn u_at<E: Environment + ?Sized>(env: &E, tilt: &Tilt, horizon: i64, n0: i64, x0: &[i64]) -> Result<f64> {
    if horizon < n0 {
        return Err(Error::config("horizon precedes the base level"));
    }
    if tilt.is_zero() || horizon == n0 {
        return Ok(1.0);
    }
    env.check_cone(n0, x0, 0, (horizon - n0) as usize)?;
    let log_scale = wants_log_scale(tilt, horizon - n0);
    let factors = tilt.step_log_factors();
    let mut next_region = Region::ball(x0.to_vec(), horizon - n0)?;
    let mut next = vec![if log_scale { 0.0 } else { 1.0 }; next_region.len()];
    for n in (n0..horizon).rev() {
        let region = Region::ball(x0.to_vec(), n - n0)?;
        let mut cur = vec![0.0; region.len()];
        level_update(env, n, &factors, log_scale, &region, &mut cur, &next_region, &next)?;
        next = cur;
        next_region = region;
    }
    Ok(if log_scale { next[0].exp() } else { next[0] })
}

/// `log u_N(n0, x0)`, see [`u_at`].
pub fn log_u_at<E: Environment + ?Sized>(env: &E, tilt: &Tilt, horizon: i64, n0: i64, x0: &[i64]) -> Result<f64> {
    // values stay in linear scale only where they are far from overflow
    u_at(env, tilt, horizon, n0, x0).map(f64::ln)
}

/// Deviation between `u_N(T_{n,x}ω, 0, 0)` and `u_{N+n}(ω, n, x)` over the
/// whole shifted cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftIdentityReport {
    pub n: i64,
    pub x: Vec<i64>,
    pub horizon: i64,
    pub sites: usize,
    pub max_relative_deviation: f64,
    pub passed: bool,
}

pub fn shift_identity_check(
    env: &crate::environment::EnvWindow,
    tilt: &Tilt,
    n: i64,
    x: &[i64],
    horizon: i64,
) -> Result<ShiftIdentityReport> {
    let origin = vec![0; x.len()];
    let shifted = env.shift(n, x);
    let a = compute_u(&shifted, tilt, horizon, 0, &origin)?;
    let b = compute_u(env, tilt, horizon + n, n, x)?;
    let mut worst = 0.0f64;
    let mut sites = 0usize;
    let mut y = vec![0; x.len()];
    a.for_each(|m, z, ua| {
        for k in 0..z.len() {
            y[k] = z[k] + x[k];
        }
        let ub = b.u(m + n, &y).expect("cones correspond under the shift");
        worst = worst.max((ua - ub).abs() / ub);
        sites += 1;
    });
    Ok(ShiftIdentityReport {
        n,
        x: x.to_vec(),
        horizon,
        sites,
        max_relative_deviation: worst,
        passed: worst <= 1e-12,
    })
}

/// Per-horizon statistics of `u_N(·, 0, 0)` over sampled environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub horizon: usize,
    pub mean: Estimate,
    pub second_moment: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub theta: Vec<f64>,
    pub environments: usize,
    pub rows: Vec<MartingaleRow>,
    /// `u_N(ω_i, 0, 0)` with environments as rows and horizons as columns.
    pub samples: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

fn low_dimension_warning(d: usize) -> Vec<String> {
    if d < 3 {
        vec![format!(
            "d={d}: the second-moment bound that keeps u bounded in L2 needs d >= 3"
        )]
    } else {
        Vec::new()
    }
}

pub fn martingale_diagnostics(
    dist: &EnvDistribution,
    theta: &[f64],
    horizons: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let tilt = Tilt::new(&dist.mean_kernel(), theta)?;
    let shared = Arc::new(dist.clone());
    let origin = vec![0; dist.dim()];
    let samples = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let env = SiteKeyedEnv::new(shared.clone(), rng::environment_seed(seed, i as u64));
            horizons
                .iter()
                .map(|&n| u_at(&env, &tilt, n as i64, 0, &origin))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = horizons
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let u: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
            MartingaleRow {
                horizon: n,
                mean: Estimate::from_samples(&u),
                second_moment: Estimate::from_samples(&u2),
            }
        })
        .collect();
    Ok(MartingaleReport {
        theta: theta.to_vec(),
        environments: replicas,
        rows,
        samples,
        warnings: low_dimension_warning(dist.dim()),
    })
}

/// `(1/n) log u_n(ω, 0, 0)` over an n-grid and sampled environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchedRateReport {
    pub theta: Vec<f64>,
    pub n_list: Vec<usize>,
    /// Environments as rows, `n` as columns.
    pub samples: Vec<Vec<f64>>,
    pub median_abs: Vec<f64>,
    pub max_abs: Vec<f64>,
    pub warnings: Vec<String>,
}

impl QuenchedRateReport {
    /// Ratio of the median `|(1/n) log u_n|` at the first and last `n`.
    pub fn median_decrease_factor(&self) -> f64 {
        match (self.median_abs.first(), self.median_abs.last()) {
            (Some(a), Some(b)) if *b > 0.0 => a / b,
            (Some(a), Some(_)) if *a > 0.0 => f64::INFINITY,
            _ => 1.0,
        }
    }
}

pub fn quenched_rate_convergence(
    dist: &EnvDistribution,
    theta: &[f64],
    n_list: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<QuenchedRateReport> {
    if n_list.contains(&0) {
        return Err(Error::config("n-grid entries must be positive"));
    }
    let tilt = Tilt::new(&dist.mean_kernel(), theta)?;
    let shared = Arc::new(dist.clone());
    let origin = vec![0; dist.dim()];
    let samples = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let env = SiteKeyedEnv::new(shared.clone(), rng::environment_seed(seed, i as u64));
            n_list
                .iter()
                .map(|&n| Ok(log_u_at(&env, &tilt, n as i64, 0, &origin)? / n as f64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |k: usize| -> Vec<f64> { samples.iter().map(|s| s[k].abs()).collect() };
    let median_abs = (0..n_list.len()).map(|k| median(&column(k))).collect();
    let max_abs = (0..n_list.len())
        .map(|k| column(k).into_iter().fold(0.0, f64::max))
        .collect();
    Ok(QuenchedRateReport {
        theta: theta.to_vec(),
        n_list: n_list.to_vec(),
        samples,
        median_abs,
        max_abs,
        warnings: low_dimension_warning(dist.dim()),
    })
}

/// `π̄^θ` built from a field and its environment; rows are computed on demand.
pub struct TiltedKernelField<'a, E: Environment + ?Sized> {
    field: &'a HarmonicField,
    env: &'a E,
}

/// One transition of the tilted chain.
#[derive(Debug, Clone, Copy)]
pub struct TiltedStep {
    pub step: usize,
    /// `log` of quenched over tilted transition probability.
    pub log_likelihood_ratio: f64,
}

impl<'a, E: Environment + ?Sized> TiltedKernelField<'a, E> {
    pub fn field(&self) -> &HarmonicField {
        self.field
    }

    pub fn env(&self) -> &E {
        self.env
    }

    /// Writes the kernel row at `(n, x)` into `row`, using `cell` as scratch.
    /// Returns `log` of the row's normalizer relative to `h(n, x)`.
    pub fn row_into(&self, n: i64, x: &[i64], cell: &mut [f64], row: &mut [f64]) -> Result<()> {
        self.env.cell_into(n, x, cell)?;
        if self.field.tilt.is_zero() {
            row.copy_from_slice(cell);
            return Ok(());
        }
        self.tilted_row(n, x, cell, row);
        Ok(())
    }

    // Fills `row` with π e^{<θ,z> - log φ} h(n+1, x+z) / h(n, x) and returns log h(n, x).
    fn tilted_row(&self, n: i64, x: &[i64], cell: &[f64], row: &mut [f64]) -> f64 {
        let d = x.len();
        let f = &self.field.tilt;
        let mut y = x.to_vec();
        let mut m = f64::NEG_INFINITY;
        for s in 0..2 * d {
            y.copy_from_slice(x);
            StepSet::apply(&mut y, s);
            row[s] = cell[s].ln() + StepSet::dot(&f.theta, s) - f.log_phi + self.field.log_h(n + 1, &y);
            m = m.max(row[s]);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        let log_norm = m + z.ln();
        let log_h = if n < self.field.horizon {
            self.field.log_u(n, x).unwrap_or(log_norm)
        } else {
            log_norm
        };
        let scale = (m - log_h).exp();
        for r in row.iter_mut() {
            *r *= scale;
        }
        log_h
    }

    /// The kernel row at `(n, x)`.
    pub fn row(&self, n: i64, x: &[i64]) -> Result<Vec<f64>> {
        let w = 2 * x.len();
        let mut cell = vec![0.0; w];
        let mut row = vec![0.0; w];
        self.row_into(n, x, &mut cell, &mut row)?;
        Ok(row)
    }

    /// Samples one step from `(n, x)` with the uniform variate `u`.
    pub fn step(&self, n: i64, x: &[i64], u: f64, cell: &mut [f64], row: &mut [f64]) -> Result<TiltedStep> {
        self.env.cell_into(n, x, cell)?;
        if self.field.tilt.is_zero() {
            let s = crate::environment::ProbVector::pick(cell, u);
            return Ok(TiltedStep {
                step: s,
                log_likelihood_ratio: 0.0,
            });
        }
        self.tilted_row(n, x, cell, row);
        let s = crate::environment::ProbVector::pick(row, u);
        Ok(TiltedStep {
            step: s,
            log_likelihood_ratio: (cell[s] / row[s]).ln(),
        })
    }
}

/// Paths of the tilted chain with weights `Π π / π̄^θ`, which make weighted
/// averages unbiased for the quenched law.
pub fn simulate_tilted<E: Environment + ?Sized>(
    kernel: &TiltedKernelField<'_, E>,
    k: i64,
    x: &[i64],
    n_steps: usize,
    replicas: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let d = kernel.field.dim();
    if x.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len() });
    }
    kernel.env.check_cone(k, x, 0, n_steps)?;
    let runs = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::replica_stream(seed, i as u64);
            let mut pos = x.to_vec();
            let mut cell = vec![0.0; 2 * d];
            let mut row = vec![0.0; 2 * d];
            let mut steps = Vec::with_capacity(n_steps);
            let mut log_w = 0.0;
            for j in 0..n_steps {
                let st = kernel.step(k + j as i64, &pos, rng.random(), &mut cell, &mut row)?;
                StepSet::apply(&mut pos, st.step);
                steps.push(st.step as u8);
                log_w += st.log_likelihood_ratio;
            }
            Ok((Path::new(k, x.to_vec(), steps), log_w.exp()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (paths, weights) = runs.into_iter().unzip();
    Ok(PathEnsemble {
        paths,
        weights,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cramer::{self, tilted_step_law};
    use crate::environment::{sample_window, EnvWindow, ProbVector, WindowGeometry};
    use crate::walk::{quenched_path_prob, simulate_quenched};

    fn two_point() -> EnvDistribution {
        EnvDistribution::two_point(3, 0.1, 0.05).unwrap()
    }

    fn window(dist: &EnvDistribution, levels: i64, seed: u64) -> EnvWindow {
        sample_window(dist, WindowGeometry::cone(0, levels, vec![0; dist.dim()], 2), seed).unwrap()
    }

    /// `Σ_paths Π π e^{<θ,ΔX>} / φ^N` by enumerating every path.
    fn path_sum(env: &EnvWindow, tilt: &Tilt, n0: i64, x0: &[i64], horizon: i64) -> f64 {
        let d = x0.len();
        let len = (horizon - n0) as usize;
        let mut total = 0.0;
        for code in 0..(2 * d).pow(len as u32) {
            let mut c = code;
            let steps: Vec<u8> = (0..len)
                .map(|_| {
                    let s = c % (2 * d);
                    c /= 2 * d;
                    s as u8
                })
                .collect();
            let path = Path::new(n0, x0.to_vec(), steps);
            let disp = path.displacement();
            let p = quenched_path_prob(env, &path).unwrap();
            total += p * (crate::lattice::dot(&tilt.theta, &disp) - len as f64 * tilt.log_phi).exp();
        }
        total
    }

    #[test]
    fn deterministic_and_untilted_fields_are_one() {
        let q = ProbVector::new(vec![0.3, 0.1, 0.15, 0.15, 0.2, 0.1]).unwrap();
        let det = EnvDistribution::deterministic(q.clone(), 0.1).unwrap();
        let env = window(&det, 8, 1);
        let tilt = Tilt::new(&q, &[0.2, -0.1, 0.3]).unwrap();
        let f = compute_u(&env, &tilt, 6, 0, &[0, 0, 0]).unwrap();
        f.for_each(|_, _, u| assert!((u - 1.0).abs() < 1e-13));
        let env2 = window(&two_point(), 8, 1);
        let zero = Tilt::new(&two_point().mean_kernel(), &[0.0; 3]).unwrap();
        compute_u(&env2, &zero, 6, 0, &[0, 0, 0])
            .unwrap()
            .for_each(|_, _, u| assert_eq!(u, 1.0));
    }

    #[test]
    fn field_matches_path_enumeration() {
        let dist = two_point();
        let env = window(&dist, 6, 17);
        let tilt = Tilt::new(&dist.mean_kernel(), &[0.1, 0.0, 0.0]).unwrap();
        let f = compute_u(&env, &tilt, 3, 0, &[0, 0, 0]).unwrap();
        let oracle = path_sum(&env, &tilt, 0, &[0, 0, 0], 3);
        assert!((f.u(0, &[0, 0, 0]).unwrap() / oracle - 1.0).abs() < 1e-12);
        // an interior site of the cone against its own enumeration
        let inner = path_sum(&env, &tilt, 1, &[0, 1, 0], 3);
        assert!((f.u(1, &[0, 1, 0]).unwrap() / inner - 1.0).abs() < 1e-12);
        assert!((u_at(&env, &tilt, 3, 0, &[0, 0, 0]).unwrap() / oracle - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_scale_agrees_with_linear() {
        let dist = two_point();
        let env = window(&dist, 40, 5);
        let strong = Tilt::new(&dist.mean_kernel(), &[1.0, 0.0, 0.0]).unwrap();
        let f = compute_u(&env, &strong, 35, 0, &[0, 0, 0]).unwrap();
        assert!(f.is_log_scale());
        let weak_levels = compute_u(&env, &strong, 20, 0, &[0, 0, 0]).unwrap();
        assert!(!weak_levels.is_log_scale());
        // the same quantity through the two paths: u_35(15, x) = u_20-type recursion on a shifted horizon
        let g = compute_u(&env.shift(15, &[0, 0, 0]), &strong, 20, 0, &[0, 0, 0]).unwrap();
        let a = f.u(15, &[0, 0, 0]).unwrap();
        let b = g.u(0, &[0, 0, 0]).unwrap();
        assert!((a / b - 1.0).abs() < 1e-12);
        assert!(f.harmonic_residual(&env).unwrap() < 1e-12);
    }

    #[test]
    fn harmonicity_positivity_and_rows() {
        let dist = two_point();
        let q = dist.mean_kernel();
        let env = window(&dist, 12, 9);
        let theta = [0.1, -0.05, 0.2];
        let tilt = Tilt::new(&q, &theta).unwrap();
        let f = compute_u(&env, &tilt, 10, 0, &[0, 0, 0]).unwrap();
        assert!(f.harmonic_residual(&env).unwrap() < 1e-12);
        let c = dist.ellipticity();
        let tmax = theta.iter().fold(0.0f64, |a, t| a.max(t.abs()));
        let floor = (c * (-tmax).exp() / cramer::phi(&q, &theta)).powi(10);
        assert!(f.min_u() >= floor);
        let kernel = f.doob_kernel(&env);
        f.for_each(|n, x, _| {
            if n < 10 {
                let row = kernel.row(n, x).unwrap();
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|r| *r > 0.0));
            }
        });
    }

    #[test]
    fn deterministic_kernel_is_tilted_step_law() {
        let q = ProbVector::new(vec![0.3, 0.1, 0.15, 0.15, 0.2, 0.1]).unwrap();
        let det = EnvDistribution::deterministic(q.clone(), 0.1).unwrap();
        let env = window(&det, 6, 1);
        let tilt = Tilt::new(&q, &[0.2, -0.1, 0.3]).unwrap();
        let f = compute_u(&env, &tilt, 5, 0, &[0, 0, 0]).unwrap();
        let row = f.doob_kernel(&env).row(1, &[1, 0, 0]).unwrap();
        let qt = tilted_step_law(&q, &tilt.theta);
        for s in 0..6 {
            assert!((row[s] - qt.get(s)).abs() < 1e-13);
        }
    }

    #[test]
    fn shift_identity() {
        let dist = two_point();
        let env = window(&dist, 10, 21);
        let tilt = Tilt::new(&dist.mean_kernel(), &[0.1, 0.0, 0.0]).unwrap();
        let r = shift_identity_check(&env, &tilt, 2, &[1, 0, 0], 4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.sites > 0);
        let r0 = shift_identity_check(&env, &tilt, 0, &[0, 0, 0], 4).unwrap();
        assert_eq!(r0.max_relative_deviation, 0.0);
    }

    #[test]
    fn untilted_simulation_reproduces_quenched_paths() {
        let dist = two_point();
        let env = window(&dist, 12, 2);
        let zero = Tilt::new(&dist.mean_kernel(), &[0.0; 3]).unwrap();
        let f = compute_u(&env, &zero, 10, 0, &[0, 0, 0]).unwrap();
        let tilted = simulate_tilted(&f.doob_kernel(&env), 0, &[0, 0, 0], 10, 50, 8).unwrap();
        let plain = simulate_quenched(&env, 0, &[0, 0, 0], 10, 50, 8).unwrap();
        assert_eq!(tilted.paths, plain.paths);
        assert!(tilted.weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn weighted_path_indicator_is_unbiased() {
        let dist = two_point();
        let env = window(&dist, 8, 31);
        let tilt = Tilt::new(&dist.mean_kernel(), &[0.3, 0.0, -0.2]).unwrap();
        let f = compute_u(&env, &tilt, 6, 0, &[0, 0, 0]).unwrap();
        let target = Path::new(0, vec![0, 0, 0], vec![0, 5, 0]);
        let exact = quenched_path_prob(&env, &target).unwrap();
        let ens = simulate_tilted(&f.doob_kernel(&env), 0, &[0, 0, 0], 3, 40_000, 4).unwrap();
        let est = ens.weighted_mean(|p| f64::from(u8::from(p.steps == target.steps)));
        assert!(est.within(exact, 3.0), "{est:?} vs {exact}");
    }

    #[test]
    fn tilted_walk_velocity() {
        let q = ProbVector::uniform(3);
        let det = EnvDistribution::deterministic(q.clone(), 1.0 / 6.0).unwrap();
        let env = SiteKeyedEnv::new(Arc::new(det), 0);
        let sol = cramer::solve_theta(&q, &[0.3, 0.0, -0.1]).unwrap();
        let tilt = Tilt::new(&q, &sol.theta).unwrap();
        let f = compute_u(&env, &tilt, 40, 0, &[0, 0, 0]).unwrap();
        let ens = simulate_tilted(&f.doob_kernel(&env), 0, &[0, 0, 0], 40, 4000, 6).unwrap();
        let v = ens.mean_velocity();
        for (e, xi) in v.iter().zip(&sol.xi) {
            assert!(e.within(*xi, 3.0), "{e:?} vs {xi}");
        }
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let dist = two_point();
        let env = sample_window(&dist, WindowGeometry::cone(0, 8, vec![0, 0, 0], 3), 3).unwrap();
        let tilt = Tilt::new(&dist.mean_kernel(), &[0.1, 0.2, 0.0]).unwrap();
        let f = compute_u(&env, &tilt, 6, 0, &[0, 0, 0])
            .unwrap()
            .with_provenance(Provenance {
                env: dist.to_spec(),
                seed: 3,
            });
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let back = HarmonicField::read_binary(&buf[..]).unwrap();
        assert_eq!(back, f);
        let boxes = (0..=4).map(|_| (vec![-1, -1, -1], vec![1, 1, 1])).collect();
        let t = HarmonicField::tube(&env, &tilt, 4, 0, boxes).unwrap();
        let mut buf2 = Vec::new();
        t.write_binary(&mut buf2).unwrap();
        assert_eq!(HarmonicField::read_binary(&buf2[..]).unwrap(), t);
    }

    #[test]
    fn missing_window_sites_are_named() {
        let dist = two_point();
        let env = sample_window(&dist, WindowGeometry::cone(0, 3, vec![0, 0, 0], 0), 1).unwrap();
        let tilt = Tilt::new(&dist.mean_kernel(), &[0.1, 0.0, 0.0]).unwrap();
        assert!(matches!(
            compute_u(&env, &tilt, 5, 0, &[0, 0, 0]),
            Err(Error::WindowBounds { level: 3, .. })
        ));
    }

    #[test]
    fn martingale_mean_by_enumeration() {
        // N = 2 from the origin reads level 0 and the unit ball at level 1
        let dist = two_point();
        let q = dist.mean_kernel();
        let tilt = Tilt::new(&q, &[0.1, 0.0, 0.0]).unwrap();
        let atoms = dist.atoms().unwrap();
        let steps = StepSet::new(3).unwrap();
        let geom = WindowGeometry::cone(0, 2, vec![0, 0, 0], 0);
        let mut mean = 0.0;
        for code in 0..(1usize << 8) {
            let mut p = 1.0;
            let cells: Vec<ProbVector> = (0..8)
                .map(|k| {
                    let (v, pa) = atoms[(code >> k) & 1];
                    p *= pa;
                    v.clone()
                })
                .collect();
            let env = EnvWindow::from_cells(steps, geom.clone(), cells).unwrap();
            mean += p * u_at(&env, &tilt, 2, 0, &[0, 0, 0]).unwrap();
        }
        assert!((mean - 1.0).abs() < 1e-12);
    }
}
