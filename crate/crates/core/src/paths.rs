//! Monte Carlo under explicit volatility controls.
//!
//! A control picks `sigma` in the band for every step; the path is an Euler
//! walk `dB = sigma sqrt(dt) xi` with `d<B> = sigma^2 dt` on a fine grid of
//! `substeps` steps per time-grid interval. Only the coarse-node states and
//! quadratic variation increments are stored; the fine walk is replayed from
//! the seed when a reconstruction needs it.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Point};
use crate::gexp::solve_gbsde;
use crate::model::{KSample, ProblemSpec, Regime, SolutionBundle, SpaceGrid, VolatilityBand};

/// Lookup table for a feedback control: one optimizer row per time-grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTable {
    anchor: usize,
    band: VolatilityBand,
    grid: SpaceGrid,
    rows: Vec<Vec<Regime>>,
}

impl FeedbackTable {
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    #[inline]
    fn sigma(&self, k: usize, x: f64) -> f64 {
        self.rows[k][self.grid.nearest(x)].sigma(&self.band)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolControl {
    Constant(f64),
    /// One `sigma` per time-grid interval.
    Schedule(Vec<f64>),
    /// `sigma` read from the optimizer field at the nearest node of the current state.
    Feedback(Arc<FeedbackTable>),
}

impl VolControl {
    /// Feedback control from the optimizer field of `anchor`.
    ///
    /// On the interval `[s_k, s_{k+1}]` the row `sig_star(anchor, k + 1)` is
    /// used, that is the regime picked by the step that produced `Z(anchor, k + 1)`.
    /// Before the anchor (`k < anchor`) the diagonal row `sig_star(k + 1, k + 1)` is used.
    pub fn feedback(bundle: &SolutionBundle, spec: &ProblemSpec, anchor: usize) -> Result<Self> {
        let n_t = spec.n_t();
        if anchor > n_t {
            return Err(Error::IndexOutOfRange {
                index: anchor,
                max: n_t,
            });
        }
        let rows = (0..n_t)
            .map(|k| {
                let (i, row) = if k + 1 >= anchor {
                    (anchor, k + 1)
                } else {
                    (k + 1, k + 1)
                };
                bundle
                    .sig_star
                    .row(i, row)
                    .map(<[Regime]>::to_vec)
                    .ok_or(Error::IndexOutOfRange { index: row, max: n_t })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VolControl::Feedback(Arc::new(FeedbackTable {
            anchor,
            band: spec.band,
            grid: spec.xgrid,
            rows,
        })))
    }

    pub fn label(&self) -> String {
        match self {
            VolControl::Constant(s) => format!("constant({s})"),
            VolControl::Schedule(_) => "schedule".into(),
            VolControl::Feedback(t) => format!("feedback(anchor={})", t.anchor),
        }
    }

    fn check(&self, band: &VolatilityBand, n_t: usize) -> Result<()> {
        let out_of_band = |sigma: f64| Error::ControlOutOfBand {
            sigma,
            lo: band.sigma_lo(),
            hi: band.sigma_hi(),
        };
        match self {
            VolControl::Constant(s) => {
                if !band.contains(*s) {
                    return Err(out_of_band(*s));
                }
            }
            VolControl::Schedule(v) => {
                if v.len() != n_t {
                    return Err(Error::InvalidParameter {
                        name: "control.schedule",
                        reason: format!("needs {n_t} entries, got {}", v.len()),
                    });
                }
                if let Some(s) = v.iter().find(|s| !band.contains(**s)) {
                    return Err(out_of_band(*s));
                }
            }
            VolControl::Feedback(t) => {
                if t.band != *band || t.rows.len() != n_t {
                    return Err(Error::Incompatible("feedback table built for another problem".into()));
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn sigma(&self, k: usize, x: f64) -> f64 {
        match self {
            VolControl::Constant(s) => *s,
            VolControl::Schedule(v) => v[k],
            VolControl::Feedback(t) => t.sigma(k, x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Euler sub-steps per time-grid interval.
    pub substeps: usize,
    pub x0: f64,
}

impl PathConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        PathConfig {
            n_paths,
            seed,
            substeps: 1,
            x0: 0.0,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }
}

/// One fine Euler step as seen during replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineStep {
    /// Time-grid interval `[s_k, s_{k+1}]` containing the step.
    pub k: usize,
    /// State at the start of the step.
    pub x: f64,
    pub sigma: f64,
    pub db: f64,
    pub dqv: f64,
    pub dt: f64,
}

/// Simulated paths under one control.
#[derive(Debug, Clone)]
pub struct PathBatch {
    config: PathConfig,
    control: VolControl,
    n_t: usize,
    dt: f64,
    /// `n_paths x (n_t + 1)` states at the time-grid nodes.
    x: Vec<f64>,
    /// `n_paths x n_t` quadratic variation increments per time-grid interval.
    dqv: Vec<f64>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.config.n_paths
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn control(&self) -> &VolControl {
        &self.control
    }

    pub fn label(&self) -> String {
        self.control.label()
    }

    /// State at node `k` of path `p`.
    #[inline]
    pub fn x(&self, p: usize, k: usize) -> f64 {
        self.x[p * (self.n_t + 1) + k]
    }

    pub fn x_terminal(&self, p: usize) -> f64 {
        self.x(p, self.n_t)
    }

    /// Increment of `B` over `[s_k, s_{k+1}]`.
    pub fn db(&self, p: usize, k: usize) -> f64 {
        self.x(p, k + 1) - self.x(p, k)
    }

    /// Quadratic variation accumulated over `[s_k, s_{k+1}]`.
    pub fn dqv(&self, p: usize, k: usize) -> f64 {
        self.dqv[p * self.n_t + k]
    }

    pub fn quadratic_variation(&self, p: usize) -> f64 {
        self.dqv[p * self.n_t..(p + 1) * self.n_t].iter().sum()
    }

    /// Re-runs the fine walk of path `p`, calling `visit` on every step.
    pub fn replay(&self, p: usize, mut visit: impl FnMut(&FineStep)) {
        walk(&self.control, &self.config, self.n_t, self.dt, p, |s| visit(s));
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn walk(control: &VolControl, cfg: &PathConfig, n_t: usize, dt: f64, p: usize, mut visit: impl FnMut(&FineStep)) {
    let mut rng = path_rng(cfg.seed, p);
    let h = dt / cfg.substeps as f64;
    let sqrt_h = h.sqrt();
    let mut x = cfg.x0;
    for k in 0..n_t {
        for _ in 0..cfg.substeps {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let sigma = control.sigma(k, x);
            let step = FineStep {
                k,
                x,
                sigma,
                db: sigma * sqrt_h * xi,
                dqv: sigma * sigma * h,
                dt: h,
            };
            visit(&step);
            x += step.db;
        }
    }
}

pub fn simulate_paths(control: &VolControl, spec: &ProblemSpec, cfg: &PathConfig) -> Result<PathBatch> {
    let n_t = spec.n_t();
    control.check(&spec.band, n_t)?;
    if cfg.n_paths == 0 || cfg.substeps == 0 {
        return Err(Error::InvalidParameter {
            name: "paths",
            reason: "n_paths and substeps must be positive".into(),
        });
    }
    if !cfg.x0.is_finite() {
        return Err(Error::InvalidParameter {
            name: "paths.x0",
            reason: "must be finite".into(),
        });
    }
    let dt = spec.dt();
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xs = Vec::with_capacity(n_t + 1);
            let mut qv = vec![0.0; n_t];
            xs.push(cfg.x0);
            let mut x = cfg.x0;
            let mut last_k = 0;
            walk(control, cfg, n_t, dt, p, |s| {
                if s.k != last_k {
                    xs.push(x);
                    last_k = s.k;
                }
                qv[s.k] += s.dqv;
                x += s.db;
            });
            xs.push(x);
            (xs, qv)
        })
        .collect();
    let mut x = Vec::with_capacity(cfg.n_paths * (n_t + 1));
    let mut dqv = Vec::with_capacity(cfg.n_paths * n_t);
    for (xs, qv) in per_path {
        debug_assert_eq!(xs.len(), n_t + 1);
        x.extend(xs);
        dqv.extend(qv);
    }
    Ok(PathBatch {
        config: *cfg,
        control: control.clone(),
        n_t,
        dt,
        x,
        dqv,
    })
}

/// Sample mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return Estimate { mean, stderr: 0.0 };
        }
        let var = v.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    /// Largest control mean.
    pub value: f64,
    /// Standard error of that mean.
    pub stderr: f64,
    pub per_control: Vec<(String, Estimate)>,
}

/// `max_P E_P[payoff(B_T)]` over the controls behind `batches`, a lower bound of the G-expectation.
pub fn mc_lower_bound(payoff: &Expression, batches: &[PathBatch]) -> Result<LowerBound> {
    if batches.is_empty() {
        return Err(Error::EmptyControls);
    }
    let mut per_control = Vec::with_capacity(batches.len());
    for b in batches {
        let values = (0..b.n_paths())
            .map(|p| {
                let x = b.x_terminal(p);
                payoff
                    .eval(&Point {
                        x,
                        ..Default::default()
                    })
                    .map_err(|e| Error::eval(format!("payoff(x={x})"), e))
            })
            .collect::<Result<Vec<_>>>()?;
        per_control.push((b.label(), Estimate::from_samples(&values)));
    }
    let best = per_control
        .iter()
        .map(|(_, e)| *e)
        .fold(None::<Estimate>, |acc, e| match acc {
            Some(a) if a.mean >= e.mean => Some(a),
            _ => Some(e),
        })
        .expect("non-empty");
    Ok(LowerBound {
        value: best.mean,
        stderr: best.stderr,
        per_control,
    })
}

fn check_solution_shape(bundle: &SolutionBundle, spec: &ProblemSpec, batch: &PathBatch) -> Result<()> {
    if bundle.y.n_rows() != spec.n_t() + 1 || bundle.y.n_x() != spec.n_x() || batch.n_t != spec.n_t() {
        return Err(Error::Incompatible("solution, paths and problem grids differ".into()));
    }
    Ok(())
}

/// Accumulates `K(t_i, T)` for several anchors in one replay of a path.
fn k_for_anchors(
    bundle: &SolutionBundle,
    spec: &ProblemSpec,
    batch: &PathBatch,
    p: usize,
    anchors: &[usize],
) -> Result<Vec<f64>> {
    let grid = &spec.xgrid;
    let gen = &spec.generator;
    let times = spec.tgrid.times();
    let x_end = batch.x_terminal(p);
    let mut acc: Vec<f64> = anchors
        .iter()
        .map(|&i| {
            let phi = spec.terminal.eval(times[i], x_end)?;
            Ok(phi - grid.interpolate(bundle.y.row(i), batch.x(p, i)))
        })
        .collect::<Result<_>>()?;
    let mut failure = None;
    let skip_source = gen.is_zero();
    batch.replay(p, |s| {
        if failure.is_some() {
            return;
        }
        let row = s.k + 1;
        let y_next = if gen.depends_on_y() {
            grid.interpolate(bundle.y.row(row), s.x)
        } else {
            0.0
        };
        for (a, &i) in acc.iter_mut().zip(anchors) {
            if s.k < i {
                continue;
            }
            let z = grid.interpolate(bundle.z.row(i, row).expect("row >= anchor"), s.x);
            if !skip_source {
                match gen.eval(times[i], times[row], s.x, y_next, z) {
                    Ok(f) => *a += f * s.dt,
                    Err(e) => {
                        failure = Some(e);
                        return;
                    }
                }
            }
            *a -= z * s.db;
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((pos, _)) = acc.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "K reconstruction",
            location: format!("path {p}, anchor {}", anchors[pos]),
        });
    }
    Ok(acc)
}

/// Pathwise `K(t_i, T)` from the equation rearranged:
/// `Phi(t_i, X_T) - Y(t_i, X_{t_i}) + sum F dt - sum Z dB`, with `Y` and `Z`
/// interpolated linearly in the state.
pub fn reconstruct_k(
    bundle: &SolutionBundle,
    spec: &ProblemSpec,
    batch: &PathBatch,
    path: usize,
    t_index: usize,
) -> Result<KSample> {
    check_solution_shape(bundle, spec, batch)?;
    if t_index > spec.n_t() {
        return Err(Error::IndexOutOfRange {
            index: t_index,
            max: spec.n_t(),
        });
    }
    if path >= batch.n_paths() {
        return Err(Error::IndexOutOfRange {
            index: path,
            max: batch.n_paths().saturating_sub(1),
        });
    }
    let v = k_for_anchors(bundle, spec, batch, path, &[t_index])?;
    Ok(KSample {
        t_index,
        path,
        value: v[0],
    })
}

/// `K(t_i, T)` on every path of the batch.
pub fn reconstruct_k_all(
    bundle: &SolutionBundle,
    spec: &ProblemSpec,
    batch: &PathBatch,
    t_index: usize,
) -> Result<Vec<KSample>> {
    Ok(reconstruct_k_anchors(bundle, spec, batch, &[t_index])?
        .pop()
        .expect("one anchor"))
}

/// `K(t_i, T)` on every path for each anchor in `anchors`; one vector per anchor.
pub fn reconstruct_k_anchors(
    bundle: &SolutionBundle,
    spec: &ProblemSpec,
    batch: &PathBatch,
    anchors: &[usize],
) -> Result<Vec<Vec<KSample>>> {
    check_solution_shape(bundle, spec, batch)?;
    if let Some(&bad) = anchors.iter().find(|&&i| i > spec.n_t()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            max: spec.n_t(),
        });
    }
    let per_path = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| k_for_anchors(bundle, spec, batch, p, anchors))
        .collect::<Result<Vec<_>>>()?;
    Ok(anchors
        .iter()
        .enumerate()
        .map(|(a, &i)| {
            per_path
                .iter()
                .enumerate()
                .map(|(p, v)| KSample {
                    t_index: i,
                    path: p,
                    value: v[a],
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdgRow {
    pub control: String,
    /// `E[sup_t |int xi dB|^p]`.
    pub sup_moment: f64,
    /// `E[(int xi^2 ds)^(p/2)]`.
    pub bracket_moment: f64,
    /// `E[(int xi^2 d<B>)^(p/2)]`.
    pub qv_moment: f64,
    /// `sup_moment / bracket_moment`, absent when the denominator vanishes.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdgReport {
    pub p: f64,
    pub rows: Vec<BdgRow>,
    /// All moments finite and non-negative.
    pub finite: bool,
}

/// Empirical moments on both sides of the Burkholder-Davis-Gundy inequality
/// for the integrand `xi(k, x)` on each batch.
pub fn bdg_diagnostic<F>(xi: F, p: f64, batches: &[PathBatch]) -> Result<BdgReport>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "p",
            reason: format!("must be positive, got {p}"),
        });
    }
    let mut rows = Vec::with_capacity(batches.len());
    for b in batches {
        let stats: Vec<(f64, f64, f64)> = (0..b.n_paths())
            .into_par_iter()
            .map(|path| {
                let mut m = 0.0f64;
                let mut sup = 0.0f64;
                let mut bracket = 0.0;
                let mut qv = 0.0;
                b.replay(path, |s| {
                    let v = xi(s.k, s.x);
                    m += v * s.db;
                    sup = sup.max(m.abs());
                    bracket += v * v * s.dt;
                    qv += v * v * s.dqv;
                });
                (sup.powf(p), bracket.powf(p / 2.0), qv.powf(p / 2.0))
            })
            .collect();
        let n = stats.len() as f64;
        let sup_moment = stats.iter().map(|s| s.0).sum::<f64>() / n;
        let bracket_moment = stats.iter().map(|s| s.1).sum::<f64>() / n;
        let qv_moment = stats.iter().map(|s| s.2).sum::<f64>() / n;
        rows.push(BdgRow {
            control: b.label(),
            sup_moment,
            bracket_moment,
            qv_moment,
            ratio: (bracket_moment > 0.0).then(|| sup_moment / bracket_moment),
        });
    }
    let finite = rows.iter().all(|r| {
        [r.sup_moment, r.bracket_moment, r.qv_moment]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    });
    Ok(BdgReport { p, rows, finite })
}

/// Per-node CSV of one path: `k,dB,dqv,X,K` where `K` is the running
/// `K(0, s_k)` of the anchor-0 equation.
pub fn path_csv(bundle: &SolutionBundle, spec: &ProblemSpec, batch: &PathBatch, p: usize) -> Result<String> {
    check_solution_shape(bundle, spec, batch)?;
    if p >= batch.n_paths() {
        return Err(Error::IndexOutOfRange {
            index: p,
            max: batch.n_paths().saturating_sub(1),
        });
    }
    let surface = solve_gbsde(0, spec, Some(&bundle.y))?;
    let grid = &spec.xgrid;
    let gen = &spec.generator;
    let times = spec.tgrid.times();
    let n_t = spec.n_t();
    // running integrals at the coarse nodes
    let mut integral = vec![0.0; n_t + 1];
    let mut acc = 0.0;
    let mut failure = None;
    batch.replay(p, |s| {
        if failure.is_some() {
            return;
        }
        let row = s.k + 1;
        let z = grid.interpolate(bundle.z.row(0, row).expect("anchor 0 covers every row"), s.x);
        let y = grid.interpolate(bundle.y.row(row), s.x);
        match gen.eval(times[0], times[row], s.x, y, z) {
            Ok(f) => acc += f * s.dt - z * s.db,
            Err(e) => failure = Some(e),
        }
        integral[row] = acc;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let lambda0 = surface.value_at(0, batch.x(p, 0), grid);
    let mut out = String::from("k,dB,dqv,X,K\n");
    for k in 0..=n_t {
        let (db, dqv) = if k == 0 {
            (0.0, 0.0)
        } else {
            (batch.db(p, k - 1), batch.dqv(p, k - 1))
        };
        let x = batch.x(p, k);
        let k_run = surface.value_at(k, x, grid) - lambda0 + integral[k];
        writeln!(out, "{k},{db:.16e},{dqv:.16e},{x:.16e},{k_run:.16e}").expect("write to string");
    }
    Ok(out)
}
