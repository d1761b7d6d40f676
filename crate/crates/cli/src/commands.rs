//! The four subcommands. Each returns an [`Outcome`] or a [`Failure`]
//! carrying the exit code of the stage that failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use gbsvie_core::paths::reconstruct_k_anchors;
use gbsvie_core::verify::{audit_hypotheses, AprioriReport, ContinuityReport};
use gbsvie_core::{
    apriori_diagnostics, compare_solutions, continuity_report, parse_problem, simulate_paths, solve_bsvie,
    CompareOptions, PathConfig, ProblemSpec, SolutionBundle, ValidationReport, VolControl,
};
use serde::Serialize;
use serde_json::json;

use crate::output::{self, num, plan_entries, InputEntry, Manifest, OutDir, Seeds};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_VERIFY_FAIL: u8 = 4;
pub const EXIT_AUDIT_REFUSED: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    VerifyFail,
    AuditRefused,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Pass => EXIT_OK,
            Outcome::VerifyFail => EXIT_VERIFY_FAIL,
            Outcome::AuditRefused => EXIT_AUDIT_REFUSED,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

/// Attaches an exit code to an error.
pub trait Stage<T> {
    fn or_exit(self, code: u8) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for std::result::Result<T, E> {
    fn or_exit(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

/// Options shared by the commands that simulate paths.
#[derive(Debug, Clone, Copy)]
pub struct PathOptions {
    pub n_paths: usize,
    pub seed: u64,
    pub substeps: usize,
}

impl PathOptions {
    fn config(&self) -> PathConfig {
        PathConfig::new(self.n_paths, self.seed).with_substeps(self.substeps)
    }
}

struct Loaded {
    path: PathBuf,
    bytes: Vec<u8>,
    spec: ProblemSpec,
    report: ValidationReport,
}

impl Loaded {
    fn entry(&self) -> InputEntry {
        InputEntry::new(&self.path, &self.bytes, &self.spec)
    }
}

fn load(path: &Path) -> CmdResult<Loaded> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .or_exit(EXIT_VALIDATION)?;
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("{} is not UTF-8", path.display()))
        .or_exit(EXIT_VALIDATION)?;
    let (spec, report) = parse_problem(text)
        .with_context(|| format!("invalid problem file {}", path.display()))
        .or_exit(EXIT_VALIDATION)?;
    for w in &report.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(Loaded {
        path: path.to_path_buf(),
        bytes,
        spec,
        report,
    })
}

fn solve(loaded: &Loaded) -> CmdResult<SolutionBundle> {
    solve_bsvie(&loaded.spec)
        .with_context(|| format!("solving {}", loaded.path.display()))
        .or_exit(EXIT_SOLVER)
}

fn io_err(e: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_SOLVER,
        error: e,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
struct KSummary {
    n_paths: usize,
    seed: u64,
    substeps: usize,
    max: f64,
    mean_at_t0: f64,
}

/// Pathwise `K(t_i, T)` for every anchor under the anchor-0 feedback control.
fn sample_k(spec: &ProblemSpec, bundle: &mut SolutionBundle, opts: &PathOptions) -> CmdResult<Option<KSummary>> {
    if opts.n_paths == 0 {
        return Ok(None);
    }
    let control = VolControl::feedback(bundle, spec, 0).or_exit(EXIT_SOLVER)?;
    let batch = simulate_paths(&control, spec, &opts.config()).or_exit(EXIT_SOLVER)?;
    let anchors: Vec<usize> = (0..=spec.n_t()).collect();
    let samples = reconstruct_k_anchors(bundle, spec, &batch, &anchors).or_exit(EXIT_SOLVER)?;
    let mean_at_t0 = samples[0].iter().map(|k| k.value).sum::<f64>() / opts.n_paths as f64;
    bundle.k_samples = samples.into_iter().flatten().collect();
    let max = bundle
        .k_samples
        .iter()
        .map(|k| k.value)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(KSummary {
        n_paths: opts.n_paths,
        seed: opts.seed,
        substeps: opts.substeps,
        max,
        mean_at_t0,
    }))
}

pub fn cmd_solve(spec_path: &Path, out: &Path, paths: &PathOptions, anchor_stride: usize) -> CmdResult<Outcome> {
    let clock = Instant::now();
    let loaded = load(spec_path)?;
    let spec = &loaded.spec;
    let mut bundle = solve(&loaded)?;
    let k = sample_k(spec, &mut bundle, paths)?;

    let mut dir = OutDir::create(out).map_err(io_err)?;
    dir.write_with("y_surface.csv", |w| output::write_y_surface(w, spec, &bundle))
        .map_err(io_err)?;
    dir.write_with("z_field.csv", |w| {
        output::write_z_field(w, spec, &bundle, anchor_stride)
    })
    .map_err(io_err)?;
    dir.write_with("sig_star.csv", |w| {
        output::write_sig_star(w, spec, &bundle, anchor_stride)
    })
    .map_err(io_err)?;
    dir.write_with("k_samples.csv", |w| output::write_k_samples(w, spec, &bundle))
        .map_err(io_err)?;
    let diagnostics = json!({
        "solver": bundle.diagnostics,
        "validation": loaded.report,
        "plan": bundle.plan,
        "k": k,
        "anchor_stride": anchor_stride,
    });
    dir.write_json("diagnostics.json", &diagnostics).map_err(io_err)?;

    let mut input = loaded.entry();
    input.plan = Some(plan_entries(spec, &bundle.plan));
    let seeds = Seeds {
        paths: (paths.n_paths > 0).then_some(paths.seed),
        probes: vec![spec.probe.seed],
    };
    dir.finish(Manifest::new(
        "solve",
        vec![input],
        seeds,
        clock.elapsed().as_secs_f64(),
    ))
    .map_err(io_err)?;
    Ok(Outcome::Pass)
}

pub fn cmd_compare(spec1: &Path, spec2: &Path, out: &Path, opts: &CompareOptions) -> CmdResult<Outcome> {
    let clock = Instant::now();
    let (l1, l2) = (load(spec1)?, load(spec2)?);
    let audit = audit_hypotheses(&l1.spec, &l2.spec).or_exit(EXIT_VALIDATION)?;
    let mut dir = OutDir::create(out).map_err(io_err)?;
    let seeds = Seeds {
        paths: None,
        probes: vec![l1.spec.probe.seed, l2.spec.probe.seed],
    };
    if !audit.passed {
        eprintln!("comparison refused: {}", audit.detail);
        dir.write_json("audit.json", &audit).map_err(io_err)?;
        dir.finish(Manifest::new(
            "compare",
            vec![l1.entry(), l2.entry()],
            seeds,
            clock.elapsed().as_secs_f64(),
        ))
        .map_err(io_err)?;
        return Ok(Outcome::AuditRefused);
    }

    let cmp = compare_solutions(&l1.spec, &l2.spec, opts)
        .context("comparing solutions")
        .or_exit(EXIT_SOLVER)?;
    dir.write_json("comparison.json", &cmp.report).map_err(io_err)?;
    let spec = &l1.spec;
    dir.write_with("y_gap.csv", |w| {
        writeln!(w, "t,x,gap")?;
        for i in 0..=spec.n_t() {
            let t = num(spec.tgrid.time(i));
            for (j, (a, b)) in cmp.bundle1.y.row(i).iter().zip(cmp.bundle2.y.row(i)).enumerate() {
                writeln!(w, "{t},{},{}", num(spec.xgrid.x(j)), num(a - b))?;
            }
        }
        Ok(())
    })
    .map_err(io_err)?;

    let (mut e1, mut e2) = (l1.entry(), l2.entry());
    e1.plan = Some(plan_entries(&l1.spec, &cmp.bundle1.plan));
    e2.plan = Some(plan_entries(&l2.spec, &cmp.bundle2.plan));
    dir.finish(Manifest::new(
        "compare",
        vec![e1, e2],
        seeds,
        clock.elapsed().as_secs_f64(),
    ))
    .map_err(io_err)?;
    eprintln!(
        "{}: min gap {:.3e} (tolerance {:.1e})",
        if cmp.report.passed { "PASS" } else { "FAIL" },
        cmp.report.min_gap,
        cmp.report.cmp_tol
    );
    Ok(if cmp.report.passed {
        Outcome::Pass
    } else {
        Outcome::VerifyFail
    })
}

#[derive(Debug, Clone, Serialize)]
struct VerifySummary {
    assumptions_passed: bool,
    failed_checks: Vec<String>,
    apriori_finite: bool,
    apriori_max_ratio: f64,
    continuity_monotone: bool,
    passed: bool,
}

fn summarize(report: &ValidationReport, apriori: &AprioriReport, continuity: &ContinuityReport) -> VerifySummary {
    let failed_checks: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    let assumptions_passed = failed_checks.is_empty();
    let passed = assumptions_passed && apriori.finite && continuity.monotone;
    VerifySummary {
        assumptions_passed,
        failed_checks,
        apriori_finite: apriori.finite,
        apriori_max_ratio: apriori.max_ratio,
        continuity_monotone: continuity.monotone,
        passed,
    }
}

pub fn cmd_verify(spec_path: &Path, out: &Path, paths: &PathOptions) -> CmdResult<Outcome> {
    let clock = Instant::now();
    let loaded = load(spec_path)?;
    let spec = &loaded.spec;
    let bundle = solve(&loaded)?;
    let apriori = apriori_diagnostics(&bundle, spec).or_exit(EXIT_SOLVER)?;
    let cfg = paths.config();
    let continuity = continuity_report(&bundle, spec, (paths.n_paths > 0).then_some(&cfg)).or_exit(EXIT_SOLVER)?;
    let summary = summarize(&loaded.report, &apriori, &continuity);

    let mut dir = OutDir::create(out).map_err(io_err)?;
    dir.write_json("assumptions.json", &loaded.report).map_err(io_err)?;
    dir.write_json("apriori.json", &apriori).map_err(io_err)?;
    dir.write_json("continuity.json", &continuity).map_err(io_err)?;
    dir.write_json("verify.json", &summary).map_err(io_err)?;

    let mut input = loaded.entry();
    input.plan = Some(plan_entries(spec, &bundle.plan));
    let seeds = Seeds {
        paths: (paths.n_paths > 0).then_some(paths.seed),
        probes: vec![spec.probe.seed],
    };
    dir.finish(Manifest::new(
        "verify",
        vec![input],
        seeds,
        clock.elapsed().as_secs_f64(),
    ))
    .map_err(io_err)?;
    eprintln!("{}", if summary.passed { "PASS" } else { "FAIL" });
    if !summary.passed {
        for name in &summary.failed_checks {
            eprintln!("  failed assumption proxy: {name}");
        }
    }
    Ok(if summary.passed {
        Outcome::Pass
    } else {
        Outcome::VerifyFail
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_t: usize,
    pub n_x: usize,
    pub substeps: usize,
    pub dt: f64,
    pub dx: f64,
    pub effective_cfl: f64,
    pub value: f64,
    pub error: Option<f64>,
    pub order: Option<f64>,
}

/// Same problem with `n_t` time steps; the space step scales like `sqrt(dt)`
/// so that the CFL number stays put, and sub-steps are added if rounding
/// pushes it above 1. An even number of space intervals stays even, which
/// keeps the grid midpoint a node.
pub fn refine(base: &ProblemSpec, n_t: usize) -> anyhow::Result<ProblemSpec> {
    let scale = (n_t as f64 / base.n_t() as f64).sqrt();
    let cells = (base.n_x() - 1) as f64 * scale;
    let cells = if (base.n_x() - 1).is_multiple_of(2) {
        2 * ((cells / 2.0).round() as usize).max(1)
    } else {
        (cells.round() as usize).max(2)
    };
    let n_x = cells + 1;
    let mut spec = base.regrid(n_t, n_x)?;
    while spec.effective_cfl() > 1.0 {
        spec.substeps += 1;
    }
    Ok(spec)
}

pub fn sweep_rows(base: &ProblemSpec, nts: &[usize], x0: f64, reference: Option<f64>) -> CmdResult<Vec<SweepRow>> {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(nts.len());
    for &n_t in nts {
        let spec = refine(base, n_t).or_exit(EXIT_VALIDATION)?;
        let bundle = solve_bsvie(&spec)
            .with_context(|| format!("solving with n_t={n_t}"))
            .or_exit(EXIT_SOLVER)?;
        rows.push(SweepRow {
            n_t,
            n_x: spec.n_x(),
            substeps: spec.substeps,
            dt: spec.dt(),
            dx: spec.dx(),
            effective_cfl: spec.effective_cfl(),
            value: spec.xgrid.interpolate(bundle.y.row(0), x0),
            error: None,
            order: None,
        });
    }
    // without a reference value the finest run serves as one
    let (reference, last) = match reference {
        Some(r) => (r, rows.len()),
        None => (rows.last().map_or(0.0, |r| r.value), rows.len().saturating_sub(1)),
    };
    for row in &mut rows[..last] {
        row.error = Some((row.value - reference).abs());
    }
    for k in 1..last {
        if let (Some(a), Some(b)) = (rows[k - 1].error, rows[k].error) {
            if a > 0.0 && b > 0.0 {
                rows[k].order = Some((a / b).ln() / (rows[k].n_t as f64 / rows[k - 1].n_t as f64).ln());
            }
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(spec_path: &Path, nts: &[usize], out: &Path, x0: f64, reference: Option<f64>) -> CmdResult<Outcome> {
    let clock = Instant::now();
    let loaded = load(spec_path)?;
    let mut nts = nts.to_vec();
    nts.sort_unstable();
    nts.dedup();
    if nts.is_empty() || nts[0] == 0 {
        return Err(Failure {
            code: EXIT_USAGE,
            error: anyhow!("--nt needs at least one positive step count"),
        });
    }
    if !x0.is_finite() {
        return Err(Failure {
            code: EXIT_USAGE,
            error: anyhow!("--x0 must be finite"),
        });
    }
    let rows = sweep_rows(&loaded.spec, &nts, x0, reference)?;

    let mut dir = OutDir::create(out).map_err(io_err)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    dir.write_with("convergence.csv", |w| {
        writeln!(w, "n_t,n_x,substeps,dt,dx,effective_cfl,value,error,order")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.n_t,
                r.n_x,
                r.substeps,
                num(r.dt),
                num(r.dx),
                num(r.effective_cfl),
                num(r.value),
                opt(r.error),
                opt(r.order)
            )?;
        }
        Ok(())
    })
    .map_err(io_err)?;
    dir.write_json(
        "sweep.json",
        &json!({
            "x0": x0,
            "reference": reference,
            "reference_kind": if reference.is_some() { "given" } else { "finest run" },
            "rows": rows,
        }),
    )
    .map_err(io_err)?;
    let seeds = Seeds {
        paths: None,
        probes: vec![loaded.spec.probe.seed],
    };
    dir.finish(Manifest::new(
        "sweep",
        vec![loaded.entry()],
        seeds,
        clock.elapsed().as_secs_f64(),
    ))
    .map_err(io_err)?;
    Ok(Outcome::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gbsvie_core::VolatilityBand;

    fn base() -> ProblemSpec {
        ProblemSpec::from_exprs(
            VolatilityBand::new(0.5, 1.0).unwrap(),
            1.0,
            100,
            6.0,
            121,
            "0",
            0.0,
            "x^2",
        )
        .unwrap()
    }

    #[test]
    fn refine_keeps_the_cfl_number() {
        let b = base();
        let fine = refine(&b, 400).unwrap();
        assert_eq!(fine.n_x(), 241);
        assert_eq!(fine.substeps, b.substeps);
        assert!((fine.effective_cfl() - b.effective_cfl()).abs() < 1e-12);
    }

    #[test]
    fn refine_adds_substeps_when_rounding_breaks_the_cfl_bound() {
        let b = base();
        let r = refine(&b, 200).unwrap();
        assert!(r.effective_cfl() <= 1.0);
        assert_eq!(r.n_x(), 171);
    }

    #[test]
    fn sweep_without_reference_measures_against_the_finest_run() {
        let rows = sweep_rows(&base(), &[25, 100], 0.0, None).unwrap();
        assert!(rows[0].error.is_some());
        assert_eq!(rows[1].error, None);
    }
}
