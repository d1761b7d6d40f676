//! Diagonal construction and backward local-interval Picard iteration.
//!
//! For a generator that ignores `y`, each anchor `t_i` gets its own value
//! surface and the solution is read off the diagonal: `Y(t_i) = u_i(t_i)`,
//! `Z(t_i, s_k) = D1 u_i(s_k)`.
//!
//! When the generator depends on `y`, the time axis is cut into intervals
//! `(T - delta, T]`, `(T - 2 delta, T - delta]`, ... processed backwards. On
//! each interval the anchors are re-solved with `y` frozen to the accepted
//! tail beyond the interval and to the previous iterate inside it, starting
//! from the zero iterate. `delta` is halved when the observed contraction
//! ratio stays above `theta`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gexp::solve_gbsde;
use crate::model::{NodeTable, ProblemSpec, Regime, SolutionBundle, TriangularField};

/// Closed node range `lo..=hi` of the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLog {
    pub interval: Interval,
    pub delta: f64,
    pub residuals: Vec<f64>,
    /// `residuals[n] / residuals[n - 1]` for `n >= 1`.
    pub ratios: Vec<f64>,
    pub restarts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalPlan {
    /// Accepted intervals, latest time first.
    pub intervals: Vec<IntervalLog>,
}

impl IntervalPlan {
    /// Lower interval boundaries as times, from `T` backwards.
    pub fn breakpoints(&self, spec: &ProblemSpec) -> Vec<f64> {
        let mut out = vec![spec.tgrid.horizon()];
        out.extend(self.intervals.iter().map(|l| spec.tgrid.time(l.interval.lo)));
        out
    }
}

/// Observation hooks for the Picard loop.
pub enum PicardEvent<'a> {
    /// One sweep finished on `interval`; `prev` and `new` are the flattened rows `lo..=hi`.
    Sweep {
        interval: Interval,
        iteration: usize,
        prev: &'a [f64],
        new: &'a [f64],
    },
    /// The interval was accepted; `table` holds every row accepted so far.
    Accepted { interval: Interval, table: &'a NodeTable },
}

/// Output of one sweep: diagonal rows plus the surfaces' gradient and optimizer blocks.
struct SweepOutput {
    rows: Vec<f64>,
    z_blocks: Vec<Vec<f64>>,
    sig_blocks: Vec<Vec<Regime>>,
}

/// Diagonal, `Z` block and optimizer block of one anchor.
type AnchorParts = (Vec<f64>, Vec<f64>, Vec<Regime>);

fn sweep(spec: &ProblemSpec, interval: Interval, table: &NodeTable) -> Result<SweepOutput> {
    let parts: Vec<Result<AnchorParts>> = (interval.lo..=interval.hi)
        .into_par_iter()
        .map(|i| {
            let surface = solve_gbsde(i, spec, Some(table))?;
            let diag = surface.diagonal().to_vec();
            let (_, grad, sig) = surface.into_parts();
            Ok((diag, grad, sig))
        })
        .collect();
    let mut rows = Vec::with_capacity(interval.len() * spec.n_x());
    let mut z_blocks = Vec::with_capacity(interval.len());
    let mut sig_blocks = Vec::with_capacity(interval.len());
    for p in parts {
        let (diag, grad, sig) = p?;
        rows.extend_from_slice(&diag);
        z_blocks.push(grad);
        sig_blocks.push(sig);
    }
    Ok(SweepOutput {
        rows,
        z_blocks,
        sig_blocks,
    })
}

/// One Picard sweep on `interval`.
///
/// `y_frozen` must be a full `(n_t + 1) x n_x` table; only its rows above
/// `interval.hi` are read. `y_prev` holds the current iterate on the
/// interval, one row per node. Returns the new iterate, one row per node.
pub fn picard_sweep(
    spec: &ProblemSpec,
    interval: Interval,
    y_frozen: &NodeTable,
    y_prev: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_interval(spec, interval)?;
    assert_eq!(y_prev.len(), interval.len(), "y_prev must cover the interval");
    let mut table = y_frozen.clone();
    for (r, i) in y_prev.iter().zip(interval.lo..=interval.hi) {
        table.row_mut(i).copy_from_slice(r);
    }
    let out = sweep(spec, interval, &table)?;
    Ok(out.rows.chunks(spec.n_x()).map(<[f64]>::to_vec).collect())
}

fn check_interval(spec: &ProblemSpec, interval: Interval) -> Result<()> {
    if interval.lo > interval.hi || interval.hi > spec.n_t() {
        return Err(Error::IndexOutOfRange {
            index: interval.hi.max(interval.lo),
            max: spec.n_t(),
        });
    }
    Ok(())
}

/// `(sum_k dt max_j |y_new - y_old|^alpha)^(1/alpha)` over flattened rows.
pub fn residual_norm(y_new: &[f64], y_old: &[f64], n_x: usize, alpha: f64, dt: f64) -> f64 {
    assert_eq!(y_new.len(), y_old.len(), "residual operands differ in shape");
    let total: f64 = y_new
        .chunks(n_x)
        .zip(y_old.chunks(n_x))
        .map(|(a, b)| {
            let gap = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            dt * gap.powf(alpha)
        })
        .sum();
    total.powf(1.0 / alpha)
}

/// Solution for a generator that does not depend on `y`.
pub fn solve_bsvie_no_y(spec: &ProblemSpec) -> Result<SolutionBundle> {
    if spec.generator.depends_on_y() {
        return Err(Error::GeneratorDependsOnY);
    }
    let n_t = spec.n_t();
    let n_x = spec.n_x();
    let parts: Vec<Result<AnchorParts>> = (0..=n_t)
        .into_par_iter()
        .map(|i| {
            let surface = solve_gbsde(i, spec, None)?;
            let diag = surface.diagonal().to_vec();
            let (_, grad, sig) = surface.into_parts();
            Ok((diag, grad, sig))
        })
        .collect();
    let mut y = NodeTable::zeros(n_t + 1, n_x);
    let mut z = TriangularField::filled(n_t, n_x, 0.0);
    let mut sig_star = TriangularField::filled(n_t, n_x, Regime::High);
    for (i, p) in parts.into_iter().enumerate() {
        let (diag, grad, sig) = p?;
        y.row_mut(i).copy_from_slice(&diag);
        z.set_anchor(i, &grad);
        sig_star.set_anchor(i, &sig);
    }
    let plan = IntervalPlan {
        intervals: vec![IntervalLog {
            interval: Interval { lo: 0, hi: n_t },
            delta: spec.tgrid.horizon(),
            residuals: Vec::new(),
            ratios: Vec::new(),
            restarts: 0,
        }],
    };
    Ok(finish(spec, y, z, sig_star, plan))
}

/// Solves the equation, using the Picard scheme only when the generator depends on `y`.
pub fn solve_bsvie(spec: &ProblemSpec) -> Result<SolutionBundle> {
    if spec.generator.depends_on_y() {
        solve_bsvie_picard(spec)
    } else {
        solve_bsvie_no_y(spec)
    }
}

/// Always runs the local-interval Picard scheme, whatever the generator.
pub fn solve_bsvie_picard(spec: &ProblemSpec) -> Result<SolutionBundle> {
    run_picard(spec, None, &mut |_| {})
}

/// Picard scheme with an optional starting iterate (rows of `seed` are used
/// on each interval in place of the zero iterate) and an event observer.
pub fn run_picard(
    spec: &ProblemSpec,
    seed: Option<&NodeTable>,
    observer: &mut dyn FnMut(PicardEvent<'_>),
) -> Result<SolutionBundle> {
    let n_t = spec.n_t();
    let n_x = spec.n_x();
    let dt = spec.dt();
    let cfg = spec.picard;
    if let Some(s) = seed {
        assert_eq!((s.n_rows(), s.n_x()), (n_t + 1, n_x), "seed table has wrong shape");
    }

    let mut table = NodeTable::zeros(n_t + 1, n_x);
    let mut z = TriangularField::filled(n_t, n_x, 0.0);
    let mut sig_star = TriangularField::filled(n_t, n_x, Regime::High);
    let mut plan = IntervalPlan::default();

    let width = |delta: f64| (delta / dt + 1e-9).floor() as usize;
    let mut delta = cfg.delta_init;
    let mut hi = n_t;
    loop {
        let mut restarts = 0;
        let (interval, residuals, ratios) = 'restart: loop {
            let m = width(delta);
            if m == 0 {
                return Err(Error::NonContraction { t: spec.tgrid.time(hi) });
            }
            let interval = Interval {
                lo: (hi + 1).saturating_sub(m),
                hi,
            };
            for i in interval.lo..=interval.hi {
                match seed {
                    Some(s) => table.row_mut(i).copy_from_slice(s.row(i)),
                    None => table.row_mut(i).fill(0.0),
                }
            }
            let mut residuals: Vec<f64> = Vec::new();
            let mut ratios: Vec<f64> = Vec::new();
            let mut above = 0;
            for iteration in 1..=cfg.max_iter {
                let out = sweep(spec, interval, &table)?;
                let lo_off = interval.lo * n_x;
                let hi_off = (interval.hi + 1) * n_x;
                let prev = &table.as_slice()[lo_off..hi_off];
                let res = residual_norm(&out.rows, prev, n_x, spec.alpha, dt);
                observer(PicardEvent::Sweep {
                    interval,
                    iteration,
                    prev,
                    new: &out.rows,
                });
                for (r, i) in out.rows.chunks(n_x).zip(interval.lo..=interval.hi) {
                    table.row_mut(i).copy_from_slice(r);
                }
                if let Some(&last) = residuals.last() {
                    let ratio = if last > 0.0 { res / last } else { 0.0 };
                    ratios.push(ratio);
                    above = if ratio > cfg.theta { above + 1 } else { 0 };
                }
                residuals.push(res);
                if res <= cfg.tol {
                    for (b, i) in (interval.lo..=interval.hi).enumerate() {
                        z.set_anchor(i, &out.z_blocks[b]);
                        sig_star.set_anchor(i, &out.sig_blocks[b]);
                    }
                    break 'restart (interval, residuals, ratios);
                }
                if above >= 2 {
                    delta *= 0.5;
                    restarts += 1;
                    continue 'restart;
                }
            }
            return Err(Error::NotConverged {
                a: spec.tgrid.time(interval.lo),
                b: spec.tgrid.time(interval.hi),
                tol: cfg.tol,
                max_iter: cfg.max_iter,
                residual: residuals.last().copied().unwrap_or(f64::NAN),
            });
        };
        observer(PicardEvent::Accepted {
            interval,
            table: &table,
        });
        plan.intervals.push(IntervalLog {
            interval,
            delta,
            residuals,
            ratios,
            restarts,
        });
        if interval.lo == 0 {
            break;
        }
        hi = interval.lo - 1;
    }
    Ok(finish(spec, table, z, sig_star, plan))
}

fn finish(
    spec: &ProblemSpec,
    y: NodeTable,
    z: TriangularField<f64>,
    sig_star: TriangularField<Regime>,
    plan: IntervalPlan,
) -> SolutionBundle {
    let mut diagnostics = BTreeMap::new();
    let y_max = y.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diagnostics.insert("y_max_abs".into(), serde_json::json!(y_max));
    diagnostics.insert("z_norm".into(), serde_json::json!(z.norm(spec.dt(), spec.alpha)));
    diagnostics.insert("intervals".into(), serde_json::json!(plan.intervals.len()));
    diagnostics.insert(
        "sweeps".into(),
        serde_json::json!(plan.intervals.iter().map(|l| l.residuals.len()).sum::<usize>()),
    );
    SolutionBundle {
        y,
        z,
        sig_star,
        k_samples: Vec::new(),
        plan,
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VolatilityBand;
    use approx::assert_abs_diff_eq;

    fn spec(generator: &str, terminal: &str, lo: f64, hi: f64, n_t: usize, n_x: usize) -> ProblemSpec {
        ProblemSpec::from_exprs(
            VolatilityBand::new(lo, hi).unwrap(),
            1.0,
            n_t,
            4.0,
            n_x,
            generator,
            1.0,
            terminal,
        )
        .unwrap()
    }

    #[test]
    fn residual_examples() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(residual_norm(&a, &a, 2, 2.0, 0.1), 0.0);
        // constant gap c on 5 nodes of weight dt: c (5 dt)^{1/alpha}
        let old = vec![0.0; 10];
        let new = vec![0.3; 10];
        assert_abs_diff_eq!(
            residual_norm(&new, &old, 2, 3.0, 0.2),
            0.3 * 1.0f64.powf(1.0 / 3.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            residual_norm(&new, &old, 2, 2.0, 0.1),
            0.3 * 0.5f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn residual_matches_brute_force_sum() {
        let n_x = 7;
        let dt = 0.05;
        let new: Vec<f64> = (0..4 * n_x).map(|q| ((q * 13 % 7) as f64 - 3.0) * 0.1).collect();
        let old: Vec<f64> = (0..4 * n_x).map(|q| (q as f64 * 0.37).sin()).collect();
        let mut total = 0.0;
        for k in 0..4 {
            let mut worst = 0.0f64;
            for j in 0..n_x {
                let d = (new[k * n_x + j] - old[k * n_x + j]).abs();
                if d > worst {
                    worst = d;
                }
            }
            total += worst * worst * dt;
        }
        assert_abs_diff_eq!(residual_norm(&new, &old, n_x, 2.0, dt), total.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn deterministic_terminal_family() {
        let s = spec("0", "1 - t", 0.5, 1.0, 20, 21);
        let b = solve_bsvie_no_y(&s).unwrap();
        for i in 0..=20 {
            for j in 0..21 {
                assert_abs_diff_eq!(b.y.get(i, j), 1.0 - s.tgrid.time(i), epsilon = 1e-14);
            }
            for k in i..=20 {
                assert!(b.z.row(i, k).unwrap().iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn linear_in_x_terminal_family() {
        let s = spec("0", "(1 - t)*x", 0.5, 1.0, 20, 21);
        let b = solve_bsvie_no_y(&s).unwrap();
        for i in 0..=20 {
            for j in 0..21 {
                let exact = (1.0 - s.tgrid.time(i)) * s.xgrid.x(j);
                assert_abs_diff_eq!(b.y.get(i, j), exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn convex_terminal_follows_upper_heat_flow() {
        let s = ProblemSpec::from_exprs(
            VolatilityBand::new(0.5, 1.0).unwrap(),
            1.0,
            40,
            8.0,
            81,
            "0",
            1.0,
            "x^2",
        )
        .unwrap();
        let b = solve_bsvie_no_y(&s).unwrap();
        for i in 0..=40 {
            let tau = 1.0 - s.tgrid.time(i);
            for j in 35..46 {
                let x = s.xgrid.x(j);
                assert_abs_diff_eq!(b.y.get(i, j), x * x + tau, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn no_y_refuses_y_dependent_generator() {
        let s = spec("0.5*y", "1", 1.0, 1.0, 10, 11);
        assert!(matches!(solve_bsvie_no_y(&s), Err(Error::GeneratorDependsOnY)));
    }

    #[test]
    fn y_independent_sweep_ignores_previous_iterate() {
        let s = spec("sin(x)*cos(s) + 0.2*z", "x^2 - t", 0.5, 1.0, 12, 17);
        let reference = solve_bsvie_no_y(&s).unwrap();
        let interval = Interval { lo: 5, hi: 9 };
        let garbage: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 * 10.0; 17]).collect();
        let out = picard_sweep(&s, interval, &reference.y, &garbage).unwrap();
        for (r, i) in out.iter().zip(5..=9) {
            assert_eq!(r.as_slice(), reference.y.row(i));
        }
    }

    #[test]
    fn first_sweep_matches_hand_rolled_recursion() {
        // F = a y on a 4-step grid; y_prev = 0 on the interval, exact tail frozen beyond it
        let a = 0.5;
        let s = spec("0.5*y", "1", 1.0, 1.0, 4, 9);
        let dt = s.dt();
        let n_x = 9;
        let mut frozen = NodeTable::zeros(5, n_x);
        for k in 0..=4 {
            frozen.row_mut(k).fill((a * (1.0 - s.tgrid.time(k))).exp());
        }
        let interval = Interval { lo: 0, hi: 2 };
        let prev = vec![vec![0.0; n_x]; 3];
        let out = picard_sweep(&s, interval, &frozen, &prev).unwrap();
        // Phi = 1, Z = 0: u_i(t_i) = 1 + dt * a * sum_{k=i+1}^{4} Y(s_k)
        let y_src = |k: usize| if k > 2 { frozen.get(k, 0) } else { 0.0 };
        for (row, i) in out.iter().zip(0..=2) {
            let expected: f64 = 1.0 + (i + 1..=4).map(|k| dt * a * y_src(k)).sum::<f64>();
            for v in row {
                assert_abs_diff_eq!(*v, expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn fixed_point_is_reproduced() {
        let s = spec("0.5*y + 0.1*sin(x)", "x^2/4", 0.5, 1.0, 16, 21);
        let b = solve_bsvie(&s).unwrap();
        let interval = b.plan.intervals.last().unwrap().interval;
        let prev: Vec<Vec<f64>> = (interval.lo..=interval.hi).map(|i| b.y.row(i).to_vec()).collect();
        let out = picard_sweep(&s, interval, &b.y, &prev).unwrap();
        let flat_new: Vec<f64> = out.concat();
        let flat_old: Vec<f64> = prev.concat();
        let res = residual_norm(&flat_new, &flat_old, 21, s.alpha, s.dt());
        assert!(res <= s.picard.tol, "residual {res}");
    }

    #[test]
    fn classical_volterra_ode_limit() {
        let s = spec("0.5*y", "1", 1.0, 1.0, 100, 41);
        let b = solve_bsvie(&s).unwrap();
        for i in 0..=100 {
            let exact = (0.5 * (1.0 - s.tgrid.time(i))).exp();
            for j in 0..41 {
                assert_abs_diff_eq!(b.y.get(i, j), exact, epsilon = 1e-2);
            }
        }
        for log in &b.plan.intervals {
            for r in &log.ratios {
                assert!(*r <= s.picard.theta, "{log:?}");
            }
        }
    }

    #[test]
    fn halving_kicks_in_for_strong_coupling() {
        // a large y-coefficient on a long interval fails to contract at first
        let mut s = spec("6*y", "1", 1.0, 1.0, 40, 11);
        s.picard.theta = 0.3;
        let b = solve_bsvie(&s).unwrap();
        let restarts: usize = b.plan.intervals.iter().map(|l| l.restarts).sum();
        assert!(restarts > 0);
        assert!(b.plan.intervals.len() > 1);
        for i in 0..=40 {
            let exact = (1.0 + 6.0 * s.dt()).powi((40 - i) as i32);
            assert_abs_diff_eq!(b.y.get(i, 5), exact, epsilon = 1e-8 * exact);
        }
    }
}
