//! Conditional probabilities of empirical-average deviations given the
//! velocity event, estimated by importance sampling.
//!
//! With `F_j = f(T_{j,X_j} ω, (Z_{j+i})) - ∫ f dμ̄_ξ`, the events are
//! `A = {|(1/n) Σ_{j<n} F_j| > ε}` (split into `A+` and `A-` by sign) and
//! `D = {|X_n / n - ξ| ≤ δ}`. `P(D)` is estimated under the `θ`-tilted walk
//! (the Doob-transformed kernel in quenched mode); `P(A ∩ D)` under a mixture
//! of twists that also push the empirical average of a local `f` to `μ ± ε`.

use std::sync::Arc;

use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::{finite_atoms, mu_exact, tilt_for, MuValue};
use super::htransform_mu::{mu_via_htransform, EnvView};
use super::observable::{CellView, CylinderFunction};
use crate::cramer::{hess_log_phi, rate_function, ExpFamily, Tilt};
use crate::environment::{EnvDistribution, Environment, ProbVector, SiteKeyedEnv};
use crate::error::{Error, Result};
use crate::htransform::{HarmonicField, TiltedKernelField};
use crate::lattice::StepSet;
use crate::rng;
use crate::stats::{log_sum_exp, pairwise_sum, Estimate};
use crate::walk::convolution_law;

/// Site budget of the quenched proposal's field.
pub const TUBE_SITE_BUDGET: u128 = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Averaged,
    Quenched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricsSettings {
    pub mode: Mode,
    pub xi: Vec<f64>,
    pub eps: f64,
    pub delta: f64,
    pub n_grid: Vec<usize>,
    pub replicas: usize,
    pub seed: u64,
    /// Seed of the fixed environment in quenched mode; derived from `seed` when absent.
    #[serde(default)]
    pub env_seed: Option<u64>,
    /// Levels of the quenched field beyond the longest path.
    #[serde(default = "default_horizon_extra")]
    pub horizon_extra: usize,
    /// Environments for `∫ f dμ̄_ξ` when it cannot be enumerated.
    #[serde(default = "default_mu_environments")]
    pub mu_environments: usize,
}

fn default_horizon_extra() -> usize {
    16
}

fn default_mu_environments() -> usize {
    512
}

impl EmpiricsSettings {
    pub fn new(mode: Mode, xi: Vec<f64>, eps: f64, delta: f64, n_grid: Vec<usize>, replicas: usize, seed: u64) -> Self {
        EmpiricsSettings {
            mode,
            xi,
            eps,
            delta,
            n_grid,
            replicas,
            seed,
            env_seed: None,
            horizon_extra: default_horizon_extra(),
            mu_environments: default_mu_environments(),
        }
    }

    pub fn environment_seed(&self) -> u64 {
        self.env_seed.unwrap_or_else(|| rng::environment_seed(self.seed, 0))
    }
}

/// Statistics at one horizon `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalProcessStats {
    pub n: usize,
    pub p_d: Estimate,
    pub p_ad: Estimate,
    /// `P̂(A ∩ D) / P̂(D)`.
    pub p_a_given_d: f64,
    pub p_a_given_d_se: f64,
    /// `(1/n) log P̂(A | D)`; `-inf` when no sample hit `A ∩ D`.
    pub log_rate: f64,
    pub d_hits: usize,
    pub ad_hits: usize,
    pub a_plus_hits: usize,
    pub a_minus_hits: usize,
    /// Weighted mean of `(1/n) Σ F_j` given `D`.
    pub mean_centered_average_given_d: f64,
    pub ess_d: f64,
    pub ess_ad: f64,
}

/// `|θ| δ < -γ`, the sufficient condition on `δ`, with `γ` measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCondition {
    /// Least-squares slope of `log P̂(A | D)` against `n`.
    pub gamma: Option<f64>,
    pub theta_delta: f64,
    pub satisfied: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricsReport {
    pub settings: EmpiricsSettings,
    pub function: String,
    pub theta: Vec<f64>,
    pub mu: MuValue,
    /// `ε` widened by twice the error of `∫ f dμ̄_ξ`.
    pub eps_effective: f64,
    pub proposal_d: String,
    pub proposal_ad: String,
    pub rows: Vec<EmpiricalProcessStats>,
    pub delta_condition: DeltaCondition,
    pub warnings: Vec<String>,
}

impl EmpiricsReport {
    /// Whether every `(1/n) log P̂(A|D)` is negative and the sequence is nonincreasing in `n`.
    pub fn rates_negative_and_nonincreasing(&self) -> bool {
        let r: Vec<f64> = self.rows.iter().map(|r| r.log_rate).collect();
        r.iter().all(|x| *x < 0.0) && r.windows(2).all(|w| w[1] <= w[0])
    }
}

/// One twist `p(z) ∝ base e^{<λ, z> + η f}`.
#[derive(Debug, Clone)]
struct Twist {
    lambda: Vec<f64>,
    eta: f64,
    /// Averaged mode: log-probabilities over the joint points.
    log_probs: Vec<f64>,
}

/// Joint points `(atom, step)` of the averaged one-step law with the value of a local `f`.
struct LocalTable {
    atoms: Vec<ProbVector>,
    // (atom index or usize::MAX when cells are not drawn, step, base weight, f value)
    points: Vec<(usize, usize, f64, f64)>,
}

impl LocalTable {
    fn build(dist: &EnvDistribution, f: &CylinderFunction) -> Option<LocalTable> {
        let local = f.local_form()?;
        let d = dist.dim();
        if local.uses_cell() {
            let (atoms, probs) = finite_atoms(dist).ok()?;
            let mut points = Vec::new();
            for (a, (v, p)) in atoms.iter().zip(&probs).enumerate() {
                for s in 0..2 * d {
                    points.push((a, s, p * v.get(s), local.eval(v.weights(), s)));
                }
            }
            Some(LocalTable { atoms, points })
        } else {
            let q = dist.mean_kernel();
            let points = (0..2 * d)
                .map(|s| (usize::MAX, s, q.get(s), local.eval(q.weights(), s)))
                .collect();
            Some(LocalTable { atoms: Vec::new(), points })
        }
    }

    fn fit(&self, d: usize, xi: &[f64], target_f: f64) -> Result<Twist> {
        let (lo, hi) = self
            .points
            .iter()
            .filter(|p| p.2 > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.3), hi.max(p.3)));
        if !(target_f > lo && target_f < hi) {
            return Err(Error::config("twist target outside the range of f"));
        }
        let stats: Vec<Vec<f64>> = self
            .points
            .iter()
            .map(|&(_, s, _, fv)| {
                let mut t = vec![0.0; d + 1];
                t[StepSet::axis(s)] = StepSet::sign(s) as f64;
                t[d] = fv;
                t
            })
            .collect();
        let base: Vec<f64> = self.points.iter().map(|p| p.2).collect();
        let family = ExpFamily::new(base.clone(), stats.clone())?;
        let mut target = xi.to_vec();
        target.push(target_f);
        let fit = family.solve(&target)?;
        let log_probs = base
            .iter()
            .zip(&stats)
            .map(|(b, t)| b.ln() + t.iter().zip(&fit.lambda).map(|(a, l)| a * l).sum::<f64>() - fit.log_norm)
            .collect();
        Ok(Twist {
            lambda: fit.lambda[..d].to_vec(),
            eta: fit.lambda[d],
            log_probs,
        })
    }
}

/// How paths are proposed.
enum Proposal<'a> {
    /// Averaged: i.i.d. `q^θ` steps with size-biased cells on the path.
    Tilted(&'a Tilt),
    /// Quenched: the Doob-transformed kernel.
    Doob(&'a TiltedKernelField<'a, SiteKeyedEnv>),
    /// Equal-weight mixture of twists of a local `f`.
    Twists(&'a LocalTable, &'a [Twist]),
}

/// Environment of one replica: fixed in quenched mode, a fresh site-keyed
/// draw with the path's own cells overriding it in averaged mode.
struct Frame<'a> {
    env: &'a SiteKeyedEnv,
    pos: &'a [Vec<i64>],
    cells: &'a [Vec<f64>],
    override_path: bool,
}

struct FrameView<'a> {
    frame: &'a Frame<'a>,
    t0: i64,
    x0: &'a [i64],
}

impl CellView for FrameView<'_> {
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
        let t = self.t0 + level;
        let y: Vec<i64> = x.iter().zip(self.x0).map(|(a, b)| a + b).collect();
        let fr = self.frame;
        if fr.override_path && t >= 0 && (t as usize) < fr.cells.len() && fr.pos[t as usize] == y {
            return fr.cells[t as usize][step];
        }
        EnvView {
            env: fr.env,
            t0: 0,
            x0: vec![0; y.len()],
        }
        .weight(t, &y, step)
    }
}

struct Sample {
    log_w: f64,
    in_d: bool,
    centered: f64,
}

struct Context<'a> {
    dist: &'a EnvDistribution,
    f: &'a CylinderFunction,
    mode: Mode,
    quenched_env: Option<&'a SiteKeyedEnv>,
    xi: &'a [f64],
    delta: f64,
    mu: f64,
}

impl Context<'_> {
    fn run(&self, proposal: &Proposal<'_>, n: usize, stream_seed: u64, i: usize) -> Result<Sample> {
        let d = self.dist.dim();
        let k = self.f.nmk().2;
        let len = n + k.saturating_sub(1);
        let mut r = rng::replica_stream(stream_seed, i as u64);
        let shared;
        let env = match self.quenched_env {
            Some(e) => e,
            None => {
                shared = SiteKeyedEnv::new(Arc::new(self.dist.clone()), rng::environment_seed(stream_seed, i as u64));
                &shared
            }
        };
        let need_cells = self.f.uses_cells();
        let mut pos = vec![vec![0i64; d]; len + 1];
        let mut steps = vec![0u8; len];
        let mut cells: Vec<Vec<f64>> = Vec::new();
        let mut cell = vec![0.0; 2 * d];
        let mut row = vec![0.0; 2 * d];
        let mut log_w = 0.0;
        // twist mixture bookkeeping: chosen component, log base, log component densities
        let mut comp = 0usize;
        let mut log_base = 0.0;
        let mut log_comp: Vec<f64> = Vec::new();
        if let Proposal::Twists(_, tw) = proposal {
            comp = if tw.len() > 1 && r.random::<f64>() >= 0.5 { 1 } else { 0 };
            log_comp = vec![0.0; tw.len()];
        }
        for j in 0..len {
            let x = pos[j].clone();
            let s = match (proposal, self.mode) {
                (Proposal::Tilted(tilt), _) => {
                    let qt = crate::cramer::tilted_step_law(&self.dist.mean_kernel(), &tilt.theta);
                    let s = ProbVector::pick(qt.weights(), r.random());
                    log_w -= StepSet::dot(&tilt.theta, s) - tilt.log_phi;
                    if need_cells {
                        self.dist.sample_size_biased_into(s, &mut r, &mut cell);
                    }
                    s
                }
                (Proposal::Doob(kernel), _) => {
                    let st = kernel.step(j as i64, &x, r.random(), &mut cell, &mut row)?;
                    log_w += st.log_likelihood_ratio;
                    st.step
                }
                (Proposal::Twists(table, tw), Mode::Averaged) => {
                    let probs: Vec<f64> = tw[comp].log_probs.iter().map(|l| l.exp()).collect();
                    let p = ProbVector::pick(&probs, r.random());
                    let (a, s, b, _) = table.points[p];
                    log_base += b.ln();
                    for (c, t) in tw.iter().enumerate() {
                        log_comp[c] += t.log_probs[p];
                    }
                    if need_cells {
                        cell.copy_from_slice(table.atoms[a].weights());
                    }
                    s
                }
                (Proposal::Twists(_, tw), Mode::Quenched) => {
                    env.cell_into(j as i64, &x, &mut cell)?;
                    let local = self.f.local_form().expect("twists need a local f");
                    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(tw.len());
                    for t in tw.iter() {
                        let mut w: Vec<f64> = (0..2 * d)
                            .map(|z| cell[z] * (StepSet::dot(&t.lambda, z) + t.eta * local.eval(&cell, z)).exp())
                            .collect();
                        let tot: f64 = w.iter().sum();
                        w.iter_mut().for_each(|v| *v /= tot);
                        rows.push(w);
                    }
                    let s = ProbVector::pick(&rows[comp], r.random());
                    log_base += cell[s].ln();
                    for (c, w) in rows.iter().enumerate() {
                        log_comp[c] += w[s].ln();
                    }
                    s
                }
            };
            steps[j] = s as u8;
            pos[j + 1] = x;
            StepSet::apply(&mut pos[j + 1], s);
            if need_cells {
                cells.push(cell.clone());
            }
        }
        if let Proposal::Twists(_, tw) = proposal {
            let ln_w = -(tw.len() as f64).ln();
            let mix: Vec<f64> = log_comp.iter().map(|l| l + ln_w).collect();
            log_w = log_base - log_sum_exp(&mix);
        }
        let xn = &pos[n];
        let dist2: f64 = xn
            .iter()
            .zip(self.xi)
            .map(|(a, b)| (*a as f64 / n as f64 - b).powi(2))
            .sum();
        let in_d = dist2.sqrt() <= self.delta;
        let frame = Frame {
            env,
            pos: &pos,
            cells: &cells,
            override_path: self.mode == Mode::Averaged,
        };
        let local = self.f.local_form();
        let values: Vec<f64> = (0..n)
            .map(|j| match (&local, need_cells) {
                (Some(l), true) => l.eval(&cells[j], steps[j] as usize),
                (Some(l), false) => l.eval(&[], steps[j] as usize),
                (None, _) => self.f.eval(
                    &FrameView {
                        frame: &frame,
                        t0: j as i64,
                        x0: &pos[j],
                    },
                    &steps[j..],
                ),
            })
            .collect();
        let centered = pairwise_sum(&values) / n as f64 - self.mu;
        Ok(Sample { log_w, in_d, centered })
    }
}

fn describe(p: &Proposal<'_>) -> String {
    match p {
        Proposal::Tilted(_) => "theta-tilted steps with size-biased path cells".into(),
        Proposal::Doob(_) => "transformed kernel of a tube field".into(),
        Proposal::Twists(_, tw) => format!("mixture of {} joint twists of velocity and f", tw.len()),
    }
}

/// Boxes `round(ξ j) ± w_j` with `w_j = min(j, ⌈s σ √j⌉ + 2)` per axis,
/// `s ≤ 3` shrunk until the total fits the budget.
pub fn tube_boxes(q: &ProbVector, theta: &[f64], xi: &[f64], horizon: usize, budget: u128) -> Result<Vec<(Vec<i64>, Vec<i64>)>> {
    let d = q.dim();
    let h = hess_log_phi(q, theta);
    let sigma: Vec<f64> = (0..d).map(|k| h[(k, k)].max(0.0).sqrt()).collect();
    let make = |scale: f64| -> (Vec<(Vec<i64>, Vec<i64>)>, u128) {
        let mut total = 0u128;
        let boxes = (0..=horizon)
            .map(|j| {
                let mut lo = vec![0; d];
                let mut hi = vec![0; d];
                let mut size = 1u128;
                for k in 0..d {
                    let c = (xi[k] * j as f64).round() as i64;
                    let w = ((scale * sigma[k] * (j as f64).sqrt()).ceil() as i64 + 2).min(j as i64);
                    lo[k] = c - w;
                    hi[k] = c + w;
                    size *= (2 * w + 1) as u128;
                }
                total += size;
                (lo, hi)
            })
            .collect();
        (boxes, total)
    };
    let mut scale = 3.0;
    loop {
        let (boxes, total) = make(scale);
        if total <= budget {
            return Ok(boxes);
        }
        if scale < 0.05 {
            return Err(Error::resource("tube field", total, budget));
        }
        scale *= 0.8;
    }
}

fn estimate_center(dist: &EnvDistribution, xi: &[f64], f: &CylinderFunction, settings: &EmpiricsSettings, warnings: &mut Vec<String>) -> Result<MuValue> {
    match mu_exact(dist, xi, f) {
        Ok(v) => Ok(v),
        Err(Error::Config(_)) | Err(Error::Resource { .. }) => {
            warnings.push("∫f dμ̄ estimated through the harmonic field; ε widened by twice its error".into());
            Ok(mu_via_htransform(dist, xi, f, None, settings.mu_environments, rng::child_seed(settings.seed, 7))?.value)
        }
        Err(e) => Err(e),
    }
}

struct Tally {
    p: Estimate,
    hits: usize,
    plus: usize,
    minus: usize,
    ess: f64,
    mean_centered: f64,
}

fn tally(samples: &[Sample], pred: impl Fn(&Sample) -> bool, eps: f64) -> Tally {
    let w: Vec<f64> = samples.iter().map(|s| if pred(s) { s.log_w.exp() } else { 0.0 }).collect();
    let hits = samples.iter().filter(|s| pred(s)).count();
    let sum = pairwise_sum(&w);
    let sq: Vec<f64> = w.iter().map(|x| x * x).collect();
    let sq = pairwise_sum(&sq);
    let wc: Vec<f64> = samples.iter().zip(&w).map(|(s, x)| x * s.centered).collect();
    Tally {
        p: Estimate::from_samples(&w),
        hits,
        plus: samples.iter().filter(|s| pred(s) && s.centered > eps).count(),
        minus: samples.iter().filter(|s| pred(s) && s.centered < -eps).count(),
        ess: if sq > 0.0 { sum * sum / sq } else { 0.0 },
        mean_centered: if sum > 0.0 { pairwise_sum(&wc) / sum } else { f64::NAN },
    }
}

/// Estimates `P(A | D)` on the `n`-grid.
pub fn conditioned_empirics(dist: &EnvDistribution, f: &CylinderFunction, settings: &EmpiricsSettings) -> Result<EmpiricsReport> {
    let d = dist.dim();
    if f.dim() != d || settings.xi.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if f.dim() != d { f.dim() } else { settings.xi.len() },
        });
    }
    if !(settings.eps > 0.0 && settings.delta > 0.0) {
        return Err(Error::config("eps and delta must be positive"));
    }
    if settings.n_grid.is_empty() || settings.n_grid.contains(&0) {
        return Err(Error::config("the n-grid needs positive entries"));
    }
    if settings.replicas < 2 {
        return Err(Error::config("need at least 2 replicas"));
    }
    let mut warnings = Vec::new();
    if d < 3 {
        warnings.push(format!("d={d}: the conditioning results are stated for d >= 3"));
    }
    let tilt = tilt_for(dist, &settings.xi)?;
    let mu = estimate_center(dist, &settings.xi, f, settings, &mut warnings)?;
    let eps_eff = settings.eps + 2.0 * mu.error;

    let q = dist.mean_kernel();
    let n_max = *settings.n_grid.iter().max().expect("nonempty grid");
    let k = f.nmk().2;
    let quenched_env = (settings.mode == Mode::Quenched)
        .then(|| SiteKeyedEnv::new(Arc::new(dist.clone()), settings.environment_seed()));
    let field: Option<HarmonicField> = match &quenched_env {
        Some(env) => {
            let horizon = n_max + k + settings.horizon_extra;
            let boxes = tube_boxes(&q, &tilt.theta, &settings.xi, horizon, TUBE_SITE_BUDGET)?;
            Some(HarmonicField::tube(env, &tilt, horizon as i64, 0, boxes)?)
        }
        None => None,
    };
    let kernel = match (&field, &quenched_env) {
        (Some(fl), Some(env)) => Some(fl.doob_kernel(env)),
        _ => None,
    };
    let proposal_d = match &kernel {
        Some(kn) => Proposal::Doob(kn),
        None => Proposal::Tilted(&tilt),
    };

    let table = LocalTable::build(dist, f);
    let mut twists = Vec::new();
    match &table {
        Some(t) => {
            for sign in [1.0, -1.0] {
                if let Ok(tw) = t.fit(d, &settings.xi, mu.value + sign * eps_eff) {
                    twists.push(tw);
                }
            }
        }
        None => warnings.push("f is not local; A ∩ D is sampled under the velocity proposal".into()),
    }
    let proposal_ad = match (&table, twists.is_empty()) {
        (Some(t), false) => Proposal::Twists(t, &twists),
        _ => match &kernel {
            Some(kn) => Proposal::Doob(kn),
            None => Proposal::Tilted(&tilt),
        },
    };

    let ctx = Context {
        dist,
        f,
        mode: settings.mode,
        quenched_env: quenched_env.as_ref(),
        xi: &settings.xi,
        delta: settings.delta,
        mu: mu.value,
    };
    let mut rows = Vec::new();
    for (g, &n) in settings.n_grid.iter().enumerate() {
        let seed_d = rng::child_seed(settings.seed, 16 + 2 * g as u64);
        let seed_ad = rng::child_seed(settings.seed, 17 + 2 * g as u64);
        let run = |p: &Proposal<'_>, s: u64| -> Result<Vec<Sample>> {
            (0..settings.replicas).into_par_iter().map(|i| ctx.run(p, n, s, i)).collect()
        };
        let sd = run(&proposal_d, seed_d)?;
        let sad = run(&proposal_ad, seed_ad)?;
        let td = tally(&sd, |s| s.in_d, eps_eff);
        if td.hits == 0 {
            return Err(Error::EstimateUndefined(format!(
                "no replica reached D at n={n}; increase delta or replicas"
            )));
        }
        let tad = tally(&sad, |s| s.in_d && s.centered.abs() > eps_eff, eps_eff);
        let ratio = tad.p.mean / td.p.mean;
        let rel = ((tad.p.se / tad.p.mean).powi(2) + (td.p.se / td.p.mean).powi(2)).sqrt();
        rows.push(EmpiricalProcessStats {
            n,
            p_d: td.p,
            p_ad: tad.p,
            p_a_given_d: ratio,
            p_a_given_d_se: if ratio > 0.0 { ratio * rel } else { 0.0 },
            log_rate: ratio.ln() / n as f64,
            d_hits: td.hits,
            ad_hits: tad.hits,
            a_plus_hits: tad.plus,
            a_minus_hits: tad.minus,
            mean_centered_average_given_d: td.mean_centered,
            ess_d: td.ess,
            ess_ad: tad.ess,
        });
    }
    for r in &rows {
        if r.ad_hits > 0 && r.ess_ad < 100.0 {
            warnings.push(format!("n={}: effective sample size of A ∩ D is only {:.1}", r.n, r.ess_ad));
        }
    }
    let gamma = slope(&rows);
    let theta_delta = crate::lattice::euclid(&tilt.theta) * settings.delta;
    Ok(EmpiricsReport {
        settings: settings.clone(),
        function: f.describe(),
        theta: tilt.theta.clone(),
        mu,
        eps_effective: eps_eff,
        proposal_d: describe(&proposal_d),
        proposal_ad: describe(&proposal_ad),
        rows,
        delta_condition: DeltaCondition {
            gamma,
            theta_delta,
            satisfied: gamma.map(|g| theta_delta < -g),
        },
        warnings,
    })
}

fn slope(rows: &[EmpiricalProcessStats]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.p_a_given_d > 0.0)
        .map(|r| (r.n as f64, r.p_a_given_d.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// `P(D)` under the averaged law by the tilted walk, with the rate it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProbability {
    pub n: usize,
    pub delta: f64,
    pub estimate: Estimate,
    /// `-(1/n) log P̂(D)`.
    pub empirical_rate: f64,
    pub rate_function: f64,
    /// `P(D)` from the exact law of `X_n`, when computed.
    pub exact: Option<f64>,
}

/// Importance-sampled `P(|X_n/n - ξ| ≤ δ)` under the averaged law.
pub fn averaged_velocity_probability(
    dist: &EnvDistribution,
    xi: &[f64],
    delta: f64,
    n: usize,
    replicas: usize,
    seed: u64,
    with_exact: bool,
) -> Result<VelocityProbability> {
    let q = dist.mean_kernel();
    let tilt = tilt_for(dist, xi)?;
    let qt = crate::cramer::tilted_step_law(&q, &tilt.theta);
    let inside = |x: &[i64]| -> bool {
        x.iter()
            .zip(xi)
            .map(|(a, b)| (*a as f64 / n as f64 - b).powi(2))
            .sum::<f64>()
            .sqrt()
            <= delta
    };
    let w: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::replica_stream(seed, i as u64);
            let mut x = vec![0i64; q.dim()];
            for _ in 0..n {
                StepSet::apply(&mut x, ProbVector::pick(qt.weights(), r.random()));
            }
            if inside(&x) {
                (n as f64 * tilt.log_phi - crate::lattice::dot(&tilt.theta, &x)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let estimate = Estimate::from_samples(&w);
    let exact = if with_exact {
        Some(convolution_law(&q, n)?.prob_where(|x| inside(x)))
    } else {
        None
    };
    Ok(VelocityProbability {
        n,
        delta,
        estimate,
        empirical_rate: -estimate.mean.ln() / n as f64,
        rate_function: rate_function(&q, xi),
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(mode: Mode, n_grid: Vec<usize>, replicas: usize) -> EmpiricsSettings {
        EmpiricsSettings::new(mode, vec![0.05, 0.0, 0.0], 0.1, 0.05, n_grid, replicas, 9)
    }

    #[test]
    fn constant_f_never_deviates() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let one = CylinderFunction::constant(3, 1.0).unwrap();
        for mode in [Mode::Averaged, Mode::Quenched] {
            let r = conditioned_empirics(&dist, &one, &settings(mode, vec![20], 500)).unwrap();
            assert_eq!(r.rows[0].p_a_given_d, 0.0);
            assert_eq!(r.rows[0].log_rate, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn wide_eps_is_impossible() {
        let dist = EnvDistribution::uniform(3).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1)").unwrap();
        let mut s = settings(Mode::Averaged, vec![20], 500);
        s.eps = 2.5;
        let r = conditioned_empirics(&dist, &f, &s).unwrap();
        assert_eq!(r.rows[0].p_ad.mean, 0.0);
    }

    #[test]
    fn averaged_step_indicator_matches_multinomial_oracle() {
        // uniform q in d=3, ξ = (0.05,0,0), f = 1{z_1 = +e1}, ε = 0.1, δ = 0.05, n = 50:
        // P(A | D) from an exact trinomial-times-planar-walk sum
        let dist = EnvDistribution::uniform(3).unwrap();
        let f = CylinderFunction::parse(3, "builtin:step-indicator:+e1").unwrap();
        let r = conditioned_empirics(&dist, &f, &settings(Mode::Averaged, vec![50], 40_000)).unwrap();
        let row = &r.rows[0];
        let oracle = 0.004_501_888_994_354_801;
        assert!(
            (row.p_a_given_d - oracle).abs() <= 3.0 * row.p_a_given_d_se,
            "{} ± {} vs {oracle}",
            row.p_a_given_d,
            row.p_a_given_d_se
        );
        assert!(row.a_plus_hits > 0 && row.a_minus_hits > 0);
    }

    #[test]
    fn quenched_mode_runs_and_stays_bounded() {
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1) + cell(1,[1,0,0],-e1)").unwrap();
        let r = conditioned_empirics(&dist, &f, &settings(Mode::Quenched, vec![20, 40], 2000)).unwrap();
        for row in &r.rows {
            assert!(row.mean_centered_average_given_d.abs() <= 2.0 * f.bound());
            assert!(row.d_hits > 0);
            assert!(row.p_a_given_d >= 0.0 && row.p_a_given_d <= 1.0 + 5.0 * row.p_a_given_d_se);
        }
    }

    #[test]
    fn quenched_velocity_probability_is_unbiased_for_the_environment() {
        // With θ = 0 the quenched D-proposal is the plain walk; P(D) must be
        // 1 for a δ that covers every reachable site.
        let dist = EnvDistribution::two_point(3, 0.1, 0.05).unwrap();
        let f = CylinderFunction::parse(3, "step(1,+e1)").unwrap();
        let mut s = EmpiricsSettings::new(Mode::Quenched, vec![0.0; 3], 0.1, 2.0, vec![10], 300, 4);
        s.horizon_extra = 4;
        let r = conditioned_empirics(&dist, &f, &s).unwrap();
        assert!((r.rows[0].p_d.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tube_fits_budget() {
        let q = ProbVector::uniform(3);
        let boxes = tube_boxes(&q, &[0.1, 0.0, 0.0], &[0.033, 0.0, 0.0], 216, 20_000_000).unwrap();
        assert_eq!(boxes.len(), 217);
        assert_eq!(boxes[0], (vec![0, 0, 0], vec![0, 0, 0]));
        let small = tube_boxes(&q, &[0.0; 3], &[0.0; 3], 216, 2_000_000).unwrap();
        let total: u128 = small
            .iter()
            .map(|(lo, hi)| lo.iter().zip(hi).map(|(a, b)| (b - a + 1) as u128).product::<u128>())
            .sum();
        assert!(total <= 2_000_000);
    }

    #[test]
    fn velocity_probability_against_convolution() {
        let dist = EnvDistribution::uniform(3).unwrap();
        let v = averaged_velocity_probability(&dist, &[0.2, 0.0, 0.0], 0.05, 40, 20_000, 3, true).unwrap();
        let exact = v.exact.unwrap();
        assert!(v.estimate.within(exact, 3.0), "{:?} vs {exact}", v.estimate);
    }
}
