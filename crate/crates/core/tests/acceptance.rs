//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any fails.

use std::process::ExitCode;
use std::time::Instant;

use gbsvie_core::bsvie::{picard_sweep, residual_norm, run_picard, solve_bsvie_picard, PicardEvent};
use gbsvie_core::expr::Expression;
use gbsvie_core::model::{GeneratorSpec, PicardConfig, TerminalFamily};
use gbsvie_core::paths::{mc_lower_bound, reconstruct_k_all, simulate_paths, Estimate, PathConfig, VolControl};
use gbsvie_core::verify::{compare_solutions, continuity_report, random_ordered_pair, CompareOptions};
use gbsvie_core::{g_expectation, solve_bsvie, solve_bsvie_no_y, ProblemSpec, SpaceGrid, TimeGrid, VolatilityBand};
use rayon::prelude::*;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn band(lo: f64, hi: f64) -> VolatilityBand {
    VolatilityBand::new(lo, hi).unwrap()
}

/// The 400 x 401 grid on [-6, 6] with three explicit sub-steps per interval.
fn fine_spec(lo: f64, hi: f64, generator: &str, lip: f64, terminal: &str) -> ProblemSpec {
    ProblemSpec::from_exprs(band(lo, hi), 1.0, 400, 6.0, 401, generator, lip, terminal)
        .unwrap()
        .with_substeps(3)
        .unwrap()
}

fn worst_case_second_moment() -> Outcome {
    let start = Instant::now();
    let b = band(0.5, 1.0);
    let tg = TimeGrid::new(1.0, 400)?;
    let xg = SpaceGrid::symmetric(6.0, 401)?;
    let up = g_expectation(&Expression::parse("x^2")?, &b, &tg, &xg, 3)?;
    let down = g_expectation(&Expression::parse("-x^2")?, &b, &tg, &xg, 3)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = (up - 1.0).abs() <= 5e-3 && (down + 0.25).abs() <= 5e-3 && secs < 10.0;
    Ok((ok, format!("E[x^2]={up:.6}, E[-x^2]={down:.6}, {secs:.2}s")))
}

fn classical_volterra_oracle() -> Outcome {
    let spec = ProblemSpec::from_exprs(band(1.0, 1.0), 1.0, 100, 6.0, 121, "0.5*y", 0.5, "1")?;
    let bundle = solve_bsvie(&spec)?;
    let mut err = 0.0f64;
    for i in 0..=spec.n_t() {
        let exact = (0.5 * (1.0 - spec.tgrid.time(i))).exp();
        for v in bundle.y.row(i) {
            err = err.max((v - exact).abs());
        }
    }
    let max_ratio = bundle
        .plan
        .intervals
        .iter()
        .flat_map(|l| l.ratios.iter().copied())
        .fold(0.0, f64::max);
    let batch = simulate_paths(
        &VolControl::Constant(1.0),
        &spec,
        &PathConfig::new(2000, 21).with_substeps(4),
    )?;
    let mut k_max = 0.0f64;
    for i in [0, 25, 50, 99] {
        for k in reconstruct_k_all(&bundle, &spec, &batch, i)? {
            k_max = k_max.max(k.value.abs());
        }
    }
    let ok = err <= 1e-2 && max_ratio <= 0.75 && k_max <= 5e-2;
    Ok((
        ok,
        format!("max|Y-exp(0.5(1-t))|={err:.2e}, max contraction ratio={max_ratio:.3}, max|K|={k_max:.2e}"),
    ))
}

fn k_identity() -> Outcome {
    let spec = fine_spec(0.5, 1.0, "0", 0.0, "x^2");
    let bundle = solve_bsvie(&spec)?;
    let cfg = PathConfig::new(10_000, 2024).with_substeps(64);
    let controls = [
        VolControl::Constant(1.0),
        VolControl::Constant(0.5),
        VolControl::feedback(&bundle, &spec, 0)?,
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    let mut means = Vec::new();
    for (c, control) in controls.iter().enumerate() {
        let batch = simulate_paths(
            control,
            &spec,
            &PathConfig {
                seed: cfg.seed + c as u64,
                ..cfg
            },
        )?;
        let ks = reconstruct_k_all(&bundle, &spec, &batch, 0)?;
        let close = ks
            .iter()
            .filter(|k| (k.value - (batch.quadratic_variation(k.path) - 1.0)).abs() <= 5e-2)
            .count();
        let frac = close as f64 / ks.len() as f64;
        let k_top = ks.iter().map(|k| k.value).fold(f64::NEG_INFINITY, f64::max);
        ok &= frac >= 0.99 && k_top <= 5e-2;
        let est = Estimate::from_samples(&ks.iter().map(|k| k.value).collect::<Vec<_>>());
        notes.push(format!("{}: within={:.4} maxK={k_top:.3e}", control.label(), frac));
        means.push(est);
    }
    let (hi, lo) = (means[0], means[1]);
    ok &= hi.mean.abs() <= 3.0 * hi.stderr;
    ok &= (lo.mean + 0.75).abs() <= 3.0 * lo.stderr;
    notes.push(format!(
        "mean K sigma_hi={:.2e}±{:.1e}, sigma_lo={:.5}±{:.1e}",
        hi.mean, hi.stderr, lo.mean, lo.stderr
    ));
    Ok((ok, notes.join("; ")))
}

fn comparison_suite() -> Outcome {
    let start = Instant::now();
    let template = ProblemSpec::from_exprs(band(0.5, 1.0), 1.0, 50, 4.0, 41, "0", 0.0, "0")?;
    let results: Vec<Result<(f64, bool), String>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let (s1, s2) = random_ordered_pair(&template, seed).map_err(|e| e.to_string())?;
            let opts = CompareOptions {
                cmp_tol: 1e-6,
                chained: true,
            };
            let c = compare_solutions(&s1, &s2, &opts).map_err(|e| e.to_string())?;
            Ok((c.report.min_gap, c.report.passed))
        })
        .collect();
    let mut min_gap = f64::INFINITY;
    let mut all_passed = true;
    for r in results {
        let (g, p) = r?;
        min_gap = min_gap.min(g);
        all_passed &= p;
    }
    let s2 = template
        .clone()
        .with_generator(GeneratorSpec::new(Expression::parse("sin(x)*cos(s)")?, 0.0)?)
        .with_terminal(TerminalFamily::new(Expression::parse("cos(x) + t")?, 0));
    let s1 = s2
        .clone()
        .with_generator(GeneratorSpec::new(Expression::parse("sin(x)*cos(s) + 1")?, 0.0)?);
    let c = compare_solutions(&s1, &s2, &CompareOptions::default())?;
    let mut shift_err = 0.0f64;
    for i in 0..=template.n_t() {
        let tau = 1.0 - template.tgrid.time(i);
        for (a, b) in c.bundle1.y.row(i).iter().zip(c.bundle2.y.row(i)) {
            shift_err = shift_err.max((a - b - tau).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = min_gap >= -1e-6 && all_passed && shift_err <= 1e-9 && secs < 120.0;
    Ok((
        ok,
        format!("min gap over 20 pairs={min_gap:.3e}, ladders ok={all_passed}, |Y1-Y2-(T-t)|max={shift_err:.2e}, {secs:.1}s"),
    ))
}

fn mc_lattice_sandwich() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let cfg = PathConfig::new(10_000, 77).with_substeps(4);
    for payoff in ["x^2", "-x^2", "abs(x)", "sin(3*x)"] {
        let spec = fine_spec(0.5, 1.0, "0", 0.0, payoff);
        let bundle = solve_bsvie(&spec)?;
        let lattice = bundle.y_at(0, 0.0, &spec.xgrid);
        let controls = [
            VolControl::Constant(0.5),
            VolControl::Constant(1.0),
            VolControl::feedback(&bundle, &spec, 0)?,
        ];
        let batches = controls
            .iter()
            .map(|c| simulate_paths(c, &spec, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let lb = mc_lower_bound(&Expression::parse(payoff)?, &batches)?;
        let below = lb.value <= lattice + 3.0 * lb.stderr;
        ok &= below;
        notes.push(format!(
            "{payoff}: mc={:.4}±{:.4} lattice={lattice:.4}",
            lb.value, lb.stderr
        ));
        if payoff == "abs(x)" {
            let oracle = (2.0 / std::f64::consts::PI).sqrt();
            ok &= (lattice - oracle).abs() <= 5e-3;
        }
    }
    Ok((ok, notes.join("; ")))
}

fn contraction_and_frozen_tail() -> Outcome {
    let spec = ProblemSpec::from_exprs(
        band(0.5, 1.0),
        1.0,
        60,
        4.0,
        61,
        "0.8*sin(y) + 0.3*cos(x + s) + 0.1*z",
        0.9,
        "x^2/4 + t",
    )?
    .with_picard(PicardConfig {
        delta_init: 0.25,
        ..PicardConfig::for_horizon(1.0)
    })?;
    let n_x = spec.n_x();

    // accepted rows, as they looked at acceptance time
    let mut snapshots: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let bundle = run_picard(&spec, None, &mut |ev| {
        if let PicardEvent::Accepted { interval, table } = ev {
            let rows = table.as_slice()[interval.lo * n_x..(interval.hi + 1) * n_x].to_vec();
            snapshots.push((interval.lo, interval.hi, rows));
        }
    })?;
    let frozen_ok = snapshots
        .iter()
        .all(|(lo, hi, rows)| bundle.y.as_slice()[lo * n_x..(hi + 1) * n_x] == rows[..]);

    let mut worst_post = 0.0f64;
    for log in &bundle.plan.intervals {
        let iv = log.interval;
        let prev: Vec<Vec<f64>> = (iv.lo..=iv.hi).map(|i| bundle.y.row(i).to_vec()).collect();
        let next = picard_sweep(&spec, iv, &bundle.y, &prev)?;
        let res = residual_norm(&next.concat(), &prev.concat(), n_x, spec.alpha, spec.dt());
        worst_post = worst_post.max(res);
    }
    let rerun = solve_bsvie_picard(&spec)?;
    let rerun_ok = rerun.y == bundle.y && rerun.z == bundle.z;

    let no_y_spec = ProblemSpec::from_exprs(
        band(0.5, 1.0),
        1.0,
        60,
        4.0,
        61,
        "sin(x)*cos(t - s) + 0.2*z",
        0.2,
        "cos(x) + t",
    )?;
    let a = solve_bsvie_picard(&no_y_spec)?;
    let b = solve_bsvie_no_y(&no_y_spec)?;
    let bitwise = a.y == b.y && a.z == b.z && a.sig_star == b.sig_star;

    let ok = frozen_ok && rerun_ok && worst_post <= spec.picard.tol && bitwise;
    Ok((
        ok,
        format!(
            "{} intervals, post-convergence residual={worst_post:.2e}, tails frozen={frozen_ok}, rerun identical={rerun_ok}, y-independent bitwise={bitwise}",
            bundle.plan.intervals.len()
        ),
    ))
}

fn refinement_and_continuity() -> Outcome {
    let lin = ProblemSpec::from_exprs(band(0.5, 1.0), 1.0, 40, 4.0, 41, "0", 0.0, "(1 - t)*x")?;
    let r = continuity_report(&solve_bsvie(&lin)?, &lin, None)?;
    let lin_err = (r.y.values[0] - lin.dt() * 4.0).abs();
    let mut ok = lin_err <= 1e-9;
    let mut notes = vec![format!("linear family |m_Y(dt)-dt*x_max|={lin_err:.1e}")];

    let coarse_t = ProblemSpec::from_exprs(band(0.5, 1.0), 1.0, 40, 4.0, 41, "0", 0.0, "0")?;
    let fine_t = coarse_t.regrid(80, 81)?.with_substeps(2)?;
    let paths = PathConfig::new(2000, 5).with_substeps(4);
    for seed in 0..3u64 {
        let (_, coarse) = random_ordered_pair(&coarse_t, 100 + seed)?;
        let fine = fine_t
            .clone()
            .with_generator(coarse.generator.clone())
            .with_terminal(coarse.terminal.clone());
        let rc = continuity_report(&solve_bsvie(&coarse)?, &coarse, Some(&paths))?;
        let rf = continuity_report(&solve_bsvie(&fine)?, &fine, Some(&paths))?;
        let (kc, kf) = (rc.k.as_ref().unwrap(), rf.k.as_ref().unwrap());
        let decreases =
            rf.y.values[0] < rc.y.values[0] && rf.z.values[0] < rc.z.values[0] && kf.values[0] < kc.values[0];
        ok &= rc.monotone && rf.monotone && decreases;
        notes.push(format!(
            "spec {seed}: m_Y {:.3e}->{:.3e}, m_Z {:.3e}->{:.3e}, m_K {:.3e}->{:.3e}",
            rc.y.values[0], rf.y.values[0], rc.z.values[0], rf.z.values[0], kc.values[0], kf.values[0]
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 worst-case second moment", worst_case_second_moment),
        ("2 classical-limit Volterra oracle", classical_volterra_oracle),
        ("3 K identity", k_identity),
        ("4 comparison suite", comparison_suite),
        ("5 MC/lattice sandwich", mc_lattice_sandwich),
        ("6 contraction and frozen tail", contraction_and_frozen_tail),
        ("7 refinement and continuity", refinement_and_continuity),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "[{}] criterion {name}: {detail} ({:.2}s)",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 7 criteria passed", 7 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
