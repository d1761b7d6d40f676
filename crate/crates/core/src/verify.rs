//! Comparison, a priori and continuity diagnostics on solved problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsvie::{run_picard, solve_bsvie, PicardEvent};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::gexp::propagate;
use crate::model::{GeneratorSpec, NodeTable, ProblemSpec, SolutionBundle, TerminalFamily};
use crate::paths::{reconstruct_k_anchors, simulate_paths, Estimate, PathConfig, VolControl};

pub const DEFAULT_CMP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub cmp_tol: f64,
    /// Also run the monotone iteration seeded at the other solution and check its ladder.
    pub chained: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            cmp_tol: DEFAULT_CMP_TOL,
            chained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisAudit {
    /// `min (Phi1 - Phi2)` over the grid.
    pub terminal_gap: f64,
    /// `min (F1 - F2)` over the probe lattice.
    pub generator_gap: f64,
    pub f1_y_monotone: bool,
    pub f2_y_monotone: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderDirection {
    /// Iterating problem 1 from `Y2` upwards.
    Ascending,
    /// Iterating problem 2 from `Y1` downwards.
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub lo: usize,
    pub hi: usize,
    pub iteration: usize,
    /// Smallest nodewise step in the ladder direction; non-negative up to rounding.
    pub min_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderTrace {
    pub direction: LadderDirection,
    pub steps: Vec<LadderStep>,
    pub monotone: bool,
    /// `max |Y_chained - Y_direct|` for the iterated problem.
    pub chained_vs_direct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub audit: HypothesisAudit,
    pub cmp_tol: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    /// `(t, x)` where the minimum gap is attained.
    pub argmin: (f64, f64),
    pub passed: bool,
    pub ladder: Option<LadderTrace>,
}

pub struct Comparison {
    pub report: ComparisonReport,
    pub bundle1: SolutionBundle,
    pub bundle2: SolutionBundle,
}

fn ensure_comparable(a: &ProblemSpec, b: &ProblemSpec) -> Result<()> {
    let mut diffs = Vec::new();
    if a.band != b.band {
        diffs.push("volatility band");
    }
    if a.tgrid != b.tgrid {
        diffs.push("time grid");
    }
    if a.xgrid != b.xgrid {
        diffs.push("space grid");
    }
    if a.substeps != b.substeps {
        diffs.push("substeps");
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(format!("differing {}", diffs.join(", "))))
    }
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Probe points `(t, s, x)` with `t <= s` used by the generator audits.
fn probe_points(spec: &ProblemSpec) -> Vec<(f64, f64, f64)> {
    let n_t = spec.n_t();
    let idx: Vec<usize> = (0..5).map(|q| q * n_t / 4).collect();
    let xs = lattice(spec.xgrid.x_min(), spec.xgrid.x_max(), 9);
    let mut out = Vec::new();
    for &i in &idx {
        for &k in idx.iter().filter(|&&k| k >= i) {
            for &x in &xs {
                out.push((spec.tgrid.time(i), spec.tgrid.time(k), x));
            }
        }
    }
    out
}

fn y_monotone(spec: &ProblemSpec, points: &[(f64, f64, f64)], ys: &[f64], zs: &[f64]) -> Result<bool> {
    let gen = &spec.generator;
    if !gen.depends_on_y() {
        return Ok(true);
    }
    let ok = points
        .par_iter()
        .map(|&(t, s, x)| -> Result<bool> {
            for &z in zs {
                let mut prev = f64::NEG_INFINITY;
                for &y in ys {
                    let v = gen.eval(t, s, x, y, z)?;
                    if v < prev - 1e-12 * (1.0 + prev.abs()) {
                        return Ok(false);
                    }
                    prev = v;
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ok.into_iter().all(|b| b))
}

/// Checks `Phi1 >= Phi2` on the grid, `F1 >= F2` on a probe lattice and
/// that `F1` or `F2` is non-decreasing in `y`.
pub fn audit_hypotheses(spec1: &ProblemSpec, spec2: &ProblemSpec) -> Result<HypothesisAudit> {
    ensure_comparable(spec1, spec2)?;
    let n_x = spec1.n_x();
    let terminal_gap = (0..=spec1.n_t())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let a = spec1.terminal_row(i)?;
            let b = spec2.terminal_row(i)?;
            Ok((0..n_x).map(|j| a[j] - b[j]).fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    let n = spec1.probe.box_n.max(spec2.probe.box_n);
    let ys = lattice(-n, n, 9);
    let zs = lattice(-n, n, 9);
    let points = probe_points(spec1);
    let generator_gap = points
        .par_iter()
        .map(|&(t, s, x)| -> Result<f64> {
            let mut gap = f64::INFINITY;
            for &y in &ys {
                for &z in &zs {
                    let d = spec1.generator.eval(t, s, x, y, z)? - spec2.generator.eval(t, s, x, y, z)?;
                    gap = gap.min(d);
                }
            }
            Ok(gap)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let f1_y_monotone = y_monotone(spec1, &points, &ys, &zs)?;
    let f2_y_monotone = y_monotone(spec2, &points, &ys, &zs)?;

    let mut problems = Vec::new();
    if terminal_gap < 0.0 {
        problems.push(format!("Phi1 < Phi2 somewhere on the grid (min gap {terminal_gap:e})"));
    }
    if generator_gap < 0.0 {
        problems.push(format!(
            "F1 < F2 somewhere on the probe lattice (min gap {generator_gap:e})"
        ));
    }
    if !(f1_y_monotone || f2_y_monotone) {
        problems.push("neither generator is non-decreasing in y".into());
    }
    Ok(HypothesisAudit {
        terminal_gap,
        generator_gap,
        f1_y_monotone,
        f2_y_monotone,
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            "ok".into()
        } else {
            problems.join("; ")
        },
    })
}

/// Solves both problems and reports `min (Y1 - Y2)` over every node.
///
/// Refuses (with [`Error::AuditFailed`]) when the ordering hypotheses
/// cannot be confirmed on the probe lattice.
pub fn compare_solutions(spec1: &ProblemSpec, spec2: &ProblemSpec, opts: &CompareOptions) -> Result<Comparison> {
    let audit = audit_hypotheses(spec1, spec2)?;
    if !audit.passed {
        return Err(Error::AuditFailed(audit.detail));
    }
    let (b1, b2) = rayon::join(|| solve_bsvie(spec1), || solve_bsvie(spec2));
    let (bundle1, bundle2) = (b1?, b2?);

    let n_x = spec1.n_x();
    let mut min_gap = f64::INFINITY;
    let mut max_gap = f64::NEG_INFINITY;
    let mut argmin = (0.0, 0.0);
    for i in 0..=spec1.n_t() {
        let (r1, r2) = (bundle1.y.row(i), bundle2.y.row(i));
        for j in 0..n_x {
            let d = r1[j] - r2[j];
            if d < min_gap {
                min_gap = d;
                argmin = (spec1.tgrid.time(i), spec1.xgrid.x(j));
            }
            max_gap = max_gap.max(d);
        }
    }

    let ladder = if opts.chained {
        Some(ladder_trace(spec1, spec2, &audit, &bundle1, &bundle2, opts.cmp_tol)?)
    } else {
        None
    };
    let passed = min_gap >= -opts.cmp_tol && ladder.as_ref().is_none_or(|l| l.monotone);
    Ok(Comparison {
        report: ComparisonReport {
            audit,
            cmp_tol: opts.cmp_tol,
            min_gap,
            max_gap,
            argmin,
            passed,
            ladder,
        },
        bundle1,
        bundle2,
    })
}

fn ladder_trace(
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    audit: &HypothesisAudit,
    bundle1: &SolutionBundle,
    bundle2: &SolutionBundle,
    tol: f64,
) -> Result<LadderTrace> {
    let (direction, spec, seed, direct) = if audit.f1_y_monotone {
        (LadderDirection::Ascending, spec1, &bundle2.y, &bundle1.y)
    } else {
        (LadderDirection::Descending, spec2, &bundle1.y, &bundle2.y)
    };
    let sign = match direction {
        LadderDirection::Ascending => 1.0,
        LadderDirection::Descending => -1.0,
    };
    let mut steps = Vec::new();
    let chained = run_picard(spec, Some(seed), &mut |ev| {
        if let PicardEvent::Sweep {
            interval,
            iteration,
            prev,
            new,
        } = ev
        {
            let min_increment = new
                .iter()
                .zip(prev)
                .map(|(n, p)| sign * (n - p))
                .fold(f64::INFINITY, f64::min);
            steps.push(LadderStep {
                lo: interval.lo,
                hi: interval.hi,
                iteration,
                min_increment,
            });
        }
    })?;
    let chained_vs_direct = max_abs_diff(&chained.y, direct);
    let monotone = steps.iter().all(|s| s.min_increment >= -tol);
    Ok(LadderTrace {
        direction,
        steps,
        monotone,
        chained_vs_direct,
    })
}

fn max_abs_diff(a: &NodeTable, b: &NodeTable) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn coef(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> String {
    format!("({:.6})", rng.random_range(lo..hi))
}

/// Random ordered pair on the grids of `template`: problem 2 is smooth with a
/// generator non-decreasing in `y`, problem 1 adds non-negative bumps to both
/// the terminal family and the generator.
pub fn random_ordered_pair(template: &ProblemSpec, seed: u64) -> Result<(ProblemSpec, ProblemSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let phi2 = format!(
        "{} + {}*sin({}*x + {}*t) + {}*cos({}*x)*exp(-t)",
        coef(r, -1.0, 1.0),
        coef(r, -1.0, 1.0),
        coef(r, 0.5, 2.0),
        coef(r, -1.0, 1.0),
        coef(r, -0.5, 0.5),
        coef(r, 0.5, 1.5),
    );
    let phi1 = format!(
        "{phi2} + {} + {}*exp(-(x - {})^2)",
        coef(r, 0.0, 0.2),
        coef(r, 0.0, 0.5),
        coef(r, -1.0, 1.0),
    );
    let a: f64 = r.random_range(0.0..1.0);
    let e: f64 = r.random_range(-0.1..0.1);
    let f2 = format!(
        "({a:.6})*y + {}*sin(x + {}*s) + {}*cos(t - s) + ({e:.6})*z*cos(x)",
        coef(r, -0.5, 0.5),
        coef(r, 0.0, 2.0),
        coef(r, -0.5, 0.5),
    );
    let f1 = format!(
        "{f2} + {} + {}*(1 + sin({}*x + s))",
        coef(r, 0.0, 0.3),
        coef(r, 0.0, 0.3),
        coef(r, 0.5, 2.0),
    );
    let lip = a.max(e.abs()) + 1e-3;
    let build = |phi: &str, f: &str| -> Result<ProblemSpec> {
        Ok(template
            .clone()
            .with_terminal(TerminalFamily::new(Expression::parse(phi)?, 0))
            .with_generator(GeneratorSpec::new(Expression::parse(f)?, lip)?))
    };
    Ok((build(&phi1, &f1)?, build(&phi2, &f2)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriRow {
    pub t: f64,
    /// `max_j |Y(t, x_j)|^alpha`.
    pub lhs: f64,
    /// `max_j` of the conditional driver statistic.
    pub rhs: f64,
    /// `max_j` of the nodewise ratio; zero where both sides vanish.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub alpha: f64,
    pub per_t: Vec<AprioriRow>,
    /// `sum_i dt E[|Y(t_i, B_{t_i})|^alpha]` from the start point.
    pub integrated_lhs: f64,
    /// `sum_i dt (E[|Phi(t_i, B_T)|^alpha] + (int |f0|)^alpha)` from the start point.
    pub integrated_rhs: f64,
    pub integrated_ratio: f64,
    pub max_ratio: f64,
    pub finite: bool,
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else {
        lhs / rhs
    }
}

/// Ratio diagnostics for the a priori bound of `|Y|^alpha` by the driver
/// statistics `E_t[|Phi(t, B_T)|^alpha] + (int_t^T max_x |F(t, s, x, 0, 0)| ds)^alpha`.
///
/// Conditional sublinear expectations come from the lattice scheme.
pub fn apriori_diagnostics(bundle: &SolutionBundle, spec: &ProblemSpec) -> Result<AprioriReport> {
    let n_t = spec.n_t();
    let n_x = spec.n_x();
    let dt = spec.dt();
    let alpha = spec.alpha;
    let x0 = spec.xgrid.nearest(0.0);
    let times = spec.tgrid.times();

    let rows = (0..=n_t)
        .into_par_iter()
        .map(|i| -> Result<(AprioriRow, f64, f64)> {
            let t = times[i];
            // (int_t^T max_x |F(t, s, x, 0, 0)| ds)^alpha on the grid
            let mut integral = 0.0;
            if !spec.generator.is_zero() {
                for k in i + 1..=n_t {
                    let mut worst = 0.0f64;
                    for j in 0..n_x {
                        let v = spec.generator.eval(t, times[k], spec.xgrid.x(j), 0.0, 0.0)?;
                        worst = worst.max(v.abs());
                    }
                    integral += worst * dt;
                }
            }
            let f_term = integral.powf(alpha);
            let phi_pow = spec.terminal_row(i)?.into_iter().map(|v| v.abs().powf(alpha)).collect();
            let heat = |row: Vec<f64>, steps: usize| propagate(row, steps, dt, &spec.band, &spec.xgrid, spec.substeps);
            let cond = heat(phi_pow, n_t - i)?;
            let y_row = bundle.y.row(i);
            let mut lhs = 0.0f64;
            let mut rhs = 0.0f64;
            let mut r = 0.0f64;
            for j in 0..n_x {
                let l = y_row[j].abs().powf(alpha);
                let d = cond[j] + f_term;
                lhs = lhs.max(l);
                rhs = rhs.max(d);
                r = r.max(ratio(l, d));
            }
            let y_start = heat(y_row.iter().map(|v| v.abs().powf(alpha)).collect(), i)?[x0];
            let driver_start = heat(cond, i)?[x0] + f_term;
            Ok((AprioriRow { t, lhs, rhs, ratio: r }, y_start, driver_start))
        })
        .collect::<Result<Vec<_>>>()?;

    let integrated_lhs: f64 = rows.iter().map(|r| r.1 * dt).sum();
    let integrated_rhs: f64 = rows.iter().map(|r| r.2 * dt).sum();
    let per_t: Vec<AprioriRow> = rows.into_iter().map(|r| r.0).collect();
    let integrated_ratio = ratio(integrated_lhs, integrated_rhs);
    let max_ratio = per_t.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let finite = max_ratio.is_finite() && integrated_ratio.is_finite();
    Ok(AprioriReport {
        alpha,
        per_t,
        integrated_lhs,
        integrated_rhs,
        integrated_ratio,
        max_ratio,
        finite,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementStability {
    pub coarse: f64,
    pub fine: f64,
    /// `|fine - coarse| / max(|coarse|, |fine|)`, zero when both vanish.
    pub relative_change: f64,
}

impl RefinementStability {
    fn new(coarse: f64, fine: f64) -> Self {
        let scale = coarse.abs().max(fine.abs());
        let relative_change = if scale == 0.0 {
            0.0
        } else {
            (fine - coarse).abs() / scale
        };
        RefinementStability {
            coarse,
            fine,
            relative_change,
        }
    }
}

/// Integrated a priori ratio on the grid of `spec` and with `dt` halved.
pub fn apriori_refinement(spec: &ProblemSpec) -> Result<RefinementStability> {
    let fine_spec = spec.regrid(2 * spec.n_t(), spec.n_x())?;
    let coarse = apriori_diagnostics(&solve_bsvie(spec)?, spec)?.integrated_ratio;
    let fine = apriori_diagnostics(&solve_bsvie(&fine_spec)?, &fine_spec)?.integrated_ratio;
    Ok(RefinementStability::new(coarse, fine))
}

/// Sensitivity of `Y` to the terminal family: with `Phi_eps = (1 + eps) Phi`,
/// `sum_i dt max_j |Y_eps - Y|^alpha` divided by `sum_i dt max_j |eps Phi(t_i, x_j)|^alpha`.
pub fn perturbation_ratio(spec: &ProblemSpec, eps: f64) -> Result<f64> {
    let scaled = Expression::parse(&format!("(1 + ({eps}))*({})", spec.terminal.expr()))?;
    let perturbed = spec
        .clone()
        .with_terminal(TerminalFamily::new(scaled, spec.terminal.growth_degree()));
    let (a, b) = rayon::join(|| solve_bsvie(spec), || solve_bsvie(&perturbed));
    let (a, b) = (a?, b?);
    let dt = spec.dt();
    let alpha = spec.alpha;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for i in 0..=spec.n_t() {
        let gap =
            a.y.row(i)
                .iter()
                .zip(b.y.row(i))
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
        lhs += dt * gap.powf(alpha);
        let phi = spec
            .terminal_row(i)?
            .into_iter()
            .map(|v| (eps * v).abs())
            .fold(0.0, f64::max);
        rhs += dt * phi.powf(alpha);
    }
    Ok(ratio(lhs, rhs))
}

/// Perturbation ratio on the grid of `spec` and with `dt` halved.
pub fn perturbation_refinement(spec: &ProblemSpec, eps: f64) -> Result<RefinementStability> {
    let fine_spec = spec.regrid(2 * spec.n_t(), spec.n_x())?;
    Ok(RefinementStability::new(
        perturbation_ratio(spec, eps)?,
        perturbation_ratio(&fine_spec, eps)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modulus {
    /// Lags in time steps.
    pub lags: Vec<usize>,
    /// Lags as times.
    pub h: Vec<f64>,
    pub values: Vec<f64>,
    pub non_decreasing: bool,
}

impl Modulus {
    fn new(lags: &[usize], dt: f64, values: Vec<f64>) -> Self {
        let non_decreasing = values.windows(2).all(|w| w[1] >= w[0]);
        Modulus {
            lags: lags.to_vec(),
            h: lags.iter().map(|&l| l as f64 * dt).collect(),
            values,
            non_decreasing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub y: Modulus,
    pub z: Modulus,
    pub k: Option<Modulus>,
    /// Mean `K(t_i, T)` under the feedback control, per time node.
    pub k_means: Option<Vec<Estimate>>,
    pub monotone: bool,
}

pub const CONTINUITY_LAGS: [usize; 3] = [1, 2, 4];

/// `max_{|i - i'| <= lag} d(i, i')` for each lag, given a symmetric node distance.
fn modulus_of<D>(n: usize, lags: &[usize], dist: D) -> Vec<f64>
where
    D: Fn(usize, usize) -> f64 + Sync,
{
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    // best[l - 1] = max over pairs exactly l apart
    let per_lag: Vec<f64> = (1..=max_lag)
        .into_par_iter()
        .map(|l| (0..n.saturating_sub(l)).map(|i| dist(i, i + l)).fold(0.0, f64::max))
        .collect();
    lags.iter()
        .map(|&l| per_lag[..l.min(per_lag.len())].iter().copied().fold(0.0, f64::max))
        .collect()
}

/// Discrete time moduli of `Y`, of `Z` (in the `H` norm over the shared
/// triangle) and, when `paths` is given, of the mean of `K(t_i, T)` under the
/// feedback control of anchor 0.
pub fn continuity_report(
    bundle: &SolutionBundle,
    spec: &ProblemSpec,
    paths: Option<&PathConfig>,
) -> Result<ContinuityReport> {
    let n_t = spec.n_t();
    let n_x = spec.n_x();
    let dt = spec.dt();
    let lags: Vec<usize> = CONTINUITY_LAGS.iter().map(|&l| l.min(n_t)).collect();

    let y = Modulus::new(
        &lags,
        dt,
        modulus_of(n_t + 1, &lags, |a, b| {
            bundle
                .y
                .row(a)
                .iter()
                .zip(bundle.y.row(b))
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max)
        }),
    );
    let z = Modulus::new(
        &lags,
        dt,
        modulus_of(n_t + 1, &lags, |a, b| {
            let shared = a.max(b);
            (0..n_x)
                .map(|j| {
                    (shared..=n_t)
                        .map(|k| {
                            let d = bundle.z.get(a, k, j).unwrap_or(0.0) - bundle.z.get(b, k, j).unwrap_or(0.0);
                            d * d * dt
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max)
        }),
    );

    let (k, k_means) = match paths {
        Some(cfg) => {
            let control = VolControl::feedback(bundle, spec, 0)?;
            let batch = simulate_paths(&control, spec, cfg)?;
            let anchors: Vec<usize> = (0..=n_t).collect();
            let samples = reconstruct_k_anchors(bundle, spec, &batch, &anchors)?;
            let means: Vec<Estimate> = samples
                .iter()
                .map(|s| Estimate::from_samples(&s.iter().map(|k| k.value).collect::<Vec<_>>()))
                .collect();
            let m = modulus_of(n_t + 1, &lags, |a, b| (means[a].mean - means[b].mean).abs());
            (Some(Modulus::new(&lags, dt, m)), Some(means))
        }
        None => (None, None),
    };
    let monotone = y.non_decreasing && z.non_decreasing && k.as_ref().is_none_or(|m| m.non_decreasing);
    Ok(ContinuityReport {
        y,
        z,
        k,
        k_means,
        monotone,
    })
}
