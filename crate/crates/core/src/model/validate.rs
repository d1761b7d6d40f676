//! Sampled proxies for the standing assumptions on `(F, Phi)`.
//!
//! None of these are proofs. Lipschitz continuity in `(y, z)` is probed on a
//! lattice, integrability of `F(t, s, x, 0, 0)` is checked on the grid, and
//! continuity in the first time index is judged from how a discrete modulus
//! shrinks between lags `4 dt` and `dt`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cfl_number, ProblemSpec};
use crate::error::{Error, Result};

/// Shrink factor a vanishing modulus must show from lag `4 dt` to lag `dt`.
const MODULUS_SHRINK: f64 = 0.6;
const MODULUS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Half-size `N` of the probe box `|y| + |z| <= N` (and `|y|, |z| <= N` for Lipschitz probing).
    pub box_n: f64,
    /// Points per axis of the `(x, y, z)` probe lattice.
    pub lattice: usize,
    /// Relative slack on the declared Lipschitz constant.
    pub eps_lip: f64,
    pub seed: u64,
    /// Number of random `(t, s)` pairs for Lipschitz probing.
    pub time_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            box_n: 10.0,
            lattice: 32,
            eps_lip: 0.05,
            seed: 0,
            time_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cfl: f64,
    pub effective_cfl: f64,
    pub checks: Vec<AssumptionCheck>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs every assumption proxy. CFL breaches, evaluation errors and
/// non-finite values on the grid are hard errors; failed proxies become
/// warnings in the report.
pub fn validate_problem(spec: &ProblemSpec) -> Result<ValidationReport> {
    spec.check()?;
    let cfl = cfl_number(spec);
    let effective_cfl = spec.effective_cfl();
    if effective_cfl > 1.0 + 1e-12 {
        return Err(Error::CflViolated { cfl: effective_cfl });
    }

    let terminal_grid = terminal_grid(spec)?;
    let checks = vec![
        lipschitz_check(spec)?,
        integrability_check(spec)?,
        generator_continuity_check(spec)?,
        terminal_continuity_check(spec, &terminal_grid),
        growth_check(spec, &terminal_grid),
        stencil_check(spec)?,
    ];
    let warnings = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} proxy failed: {}", c.name, c.detail))
        .collect();
    Ok(ValidationReport {
        cfl,
        effective_cfl,
        checks,
        warnings,
    })
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn time_pairs(spec: &ProblemSpec) -> Vec<(f64, f64)> {
    let probe = &spec.probe;
    let n_t = spec.n_t();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut pairs = vec![(0.0, 0.0), (0.0, spec.tgrid.horizon())];
    for _ in 0..probe.time_samples {
        let i = rng.random_range(0..=n_t);
        let k = rng.random_range(i..=n_t);
        pairs.push((spec.tgrid.time(i), spec.tgrid.time(k)));
    }
    pairs
}

/// Largest `|F(y1,z1) - F(y2,z2)| / (|y1-y2| + |z1-z2|)` over lattice neighbours.
fn sampled_lipschitz(spec: &ProblemSpec) -> Result<(f64, f64)> {
    let probe = &spec.probe;
    let g = &spec.generator;
    let n = probe.lattice.max(2);
    let xs = lattice(spec.xgrid.x_min(), spec.xgrid.x_max(), n);
    let ys = if g.depends_on_y() {
        lattice(-probe.box_n, probe.box_n, n)
    } else {
        vec![0.0, 1.0]
    };
    let zs = if g.depends_on_z() {
        lattice(-probe.box_n, probe.box_n, n)
    } else {
        vec![0.0, 1.0]
    };
    let pairs = time_pairs(spec);
    let per_point: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .flat_map_iter(|&(t, s)| xs.iter().map(move |&x| (t, s, x)))
        .map(|(t, s, x)| {
            let mut table = vec![0.0; ys.len() * zs.len()];
            for (a, &y) in ys.iter().enumerate() {
                for (b, &z) in zs.iter().enumerate() {
                    table[a * zs.len() + b] = g.eval(t, s, x, y, z)?;
                }
            }
            let mut lip = 0.0f64;
            let mut lip_z = 0.0f64;
            for a in 0..ys.len() {
                for b in 0..zs.len() {
                    let v = table[a * zs.len() + b];
                    if a + 1 < ys.len() {
                        let w = table[(a + 1) * zs.len() + b];
                        lip = lip.max((w - v).abs() / (ys[a + 1] - ys[a]));
                    }
                    if b + 1 < zs.len() {
                        let w = table[a * zs.len() + b + 1];
                        let r = (w - v).abs() / (zs[b + 1] - zs[b]);
                        lip = lip.max(r);
                        lip_z = lip_z.max(r);
                    }
                    if a + 1 < ys.len() && b + 1 < zs.len() {
                        let w = table[(a + 1) * zs.len() + b + 1];
                        let d = (ys[a + 1] - ys[a]) + (zs[b + 1] - zs[b]);
                        lip = lip.max((w - v).abs() / d);
                    }
                }
            }
            Ok((lip, lip_z))
        })
        .collect();
    let mut lip = 0.0f64;
    let mut lip_z = 0.0f64;
    for r in per_point {
        let (a, b) = r?;
        if !a.is_finite() {
            return Err(Error::NonFinite {
                what: "generator Lipschitz ratio",
                location: "probe lattice".into(),
            });
        }
        lip = lip.max(a);
        lip_z = lip_z.max(b);
    }
    Ok((lip, lip_z))
}

fn lipschitz_check(spec: &ProblemSpec) -> Result<AssumptionCheck> {
    let (lip, _) = sampled_lipschitz(spec)?;
    let declared = spec.generator.lipschitz();
    let bound = declared * (1.0 + spec.probe.eps_lip);
    Ok(AssumptionCheck {
        name: "lipschitz-yz".into(),
        passed: lip <= bound + 1e-12,
        statistic: lip,
        detail: format!("sampled Lipschitz ratio {lip:.6e} vs declared L={declared} (bound {bound:.6e})"),
    })
}

/// Gridded `sum_{k>i} dt |F(t_i, s_k, x_j, 0, 0)|`.
fn integrability_check(spec: &ProblemSpec) -> Result<AssumptionCheck> {
    let n_t = spec.n_t();
    let dt = spec.dt();
    let g = &spec.generator;
    let rows: Vec<Result<f64>> = (0..=n_t)
        .into_par_iter()
        .map(|i| {
            let t = spec.tgrid.time(i);
            let mut worst = 0.0f64;
            for j in 0..spec.n_x() {
                let x = spec.xgrid.x(j);
                let mut acc = 0.0;
                for k in i + 1..=n_t {
                    let s = spec.tgrid.time(k);
                    let v = g.eval(t, s, x, 0.0, 0.0)?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: "generator",
                            location: format!("(t={t}, s={s}, x={x}, y=0, z=0)"),
                        });
                    }
                    acc += v.abs() * dt;
                }
                worst = worst.max(acc);
            }
            Ok(worst)
        })
        .collect();
    let mut worst = 0.0f64;
    for r in rows {
        worst = worst.max(r?);
    }
    Ok(AssumptionCheck {
        name: "generator-integrability".into(),
        passed: worst.is_finite(),
        statistic: worst,
        detail: format!("max over (t, x) of the gridded integral of |F(t,s,x,0,0)|: {worst:.6e}"),
    })
}

/// Decides whether a modulus sampled at lags `dt, 2dt, 4dt` is vanishing.
fn modulus_vanishes(m: &[f64; 3]) -> bool {
    m[0] <= MODULUS_FLOOR || m[0] <= MODULUS_SHRINK * m[2]
}

const LAGS: [usize; 3] = [1, 2, 4];

fn generator_continuity_check(spec: &ProblemSpec) -> Result<AssumptionCheck> {
    let g = &spec.generator;
    let n_t = spec.n_t();
    let dt = spec.dt();
    let probe = &spec.probe;
    let xs = lattice(spec.xgrid.x_min(), spec.xgrid.x_max(), 4);
    let side = if g.depends_on_y() || g.depends_on_z() { 7 } else { 1 };
    let mut yz = Vec::new();
    for &y in &lattice(-probe.box_n, probe.box_n, side) {
        for &z in &lattice(-probe.box_n, probe.box_n, side) {
            let y = if g.depends_on_y() { y } else { 0.0 };
            let z = if g.depends_on_z() { z } else { 0.0 };
            if y.abs() + z.abs() <= probe.box_n + 1e-12 && !yz.contains(&(y, z)) {
                yz.push((y, z));
            }
        }
    }
    let points: Vec<(f64, f64, f64)> = xs
        .iter()
        .flat_map(|&x| yz.iter().map(move |&(y, z)| (x, y, z)))
        .collect();
    let moduli: Vec<Result<[f64; 3]>> = points
        .par_iter()
        .map(|&(x, y, z)| {
            // table[i][k] = F(t_i, s_k, x, y, z)
            let mut table = vec![0.0; (n_t + 1) * (n_t + 1)];
            for i in 0..=n_t {
                let t = spec.tgrid.time(i);
                for k in 0..=n_t {
                    table[i * (n_t + 1) + k] = g.eval(t, spec.tgrid.time(k), x, y, z)?;
                }
            }
            let mut m = [0.0f64; 3];
            for (slot, &lag) in LAGS.iter().enumerate() {
                for i in 0..=n_t.saturating_sub(lag) {
                    let ip = i + lag;
                    let d: f64 = (ip + 1..=n_t)
                        .map(|k| (table[ip * (n_t + 1) + k] - table[i * (n_t + 1) + k]).abs() * dt)
                        .sum();
                    m[slot] = m[slot].max(d);
                }
            }
            Ok(m)
        })
        .collect();
    let mut m = [0.0f64; 3];
    for r in moduli {
        let r = r?;
        for q in 0..3 {
            m[q] = m[q].max(r[q]);
        }
    }
    // moduli over lags <= h are running maxima
    m[1] = m[1].max(m[0]);
    m[2] = m[2].max(m[1]);
    Ok(AssumptionCheck {
        name: "generator-continuity".into(),
        passed: modulus_vanishes(&m),
        statistic: m[0],
        detail: format!(
            "t-modulus of the integrated generator at h = dt, 2dt, 4dt: {:.6e}, {:.6e}, {:.6e}",
            m[0], m[1], m[2]
        ),
    })
}

fn terminal_grid(spec: &ProblemSpec) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Result<Vec<f64>>> = (0..=spec.n_t())
        .into_par_iter()
        .map(|i| {
            let row = spec.terminal_row(i)?;
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "terminal family",
                    location: format!("(t={}, x={})", spec.tgrid.time(i), spec.xgrid.x(j)),
                });
            }
            Ok(row)
        })
        .collect();
    rows.into_iter().collect()
}

/// Sampled `omega(h) = max |Phi(t', x) - Phi(t, x)|` over `|t' - t| <= h`.
pub(crate) fn terminal_modulus(rows: &[Vec<f64>], lags: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(lags.len());
    let mut running = 0.0f64;
    let mut done = 0usize;
    for &lag in lags {
        for l in done + 1..=lag {
            for i in 0..rows.len().saturating_sub(l) {
                for (a, b) in rows[i].iter().zip(&rows[i + l]) {
                    running = running.max((a - b).abs());
                }
            }
        }
        done = done.max(lag);
        out.push(running);
    }
    out
}

fn terminal_continuity_check(spec: &ProblemSpec, rows: &[Vec<f64>]) -> AssumptionCheck {
    let m = terminal_modulus(rows, &LAGS);
    let m = [m[0], m[1], m[2]];
    let monotone = m[0] <= m[1] && m[1] <= m[2];
    let _ = spec;
    AssumptionCheck {
        name: "phi-continuity".into(),
        passed: monotone && modulus_vanishes(&m),
        statistic: m[0],
        detail: format!(
            "t-modulus of Phi at h = dt, 2dt, 4dt: {:.6e}, {:.6e}, {:.6e}",
            m[0], m[1], m[2]
        ),
    }
}

fn growth_check(spec: &ProblemSpec, rows: &[Vec<f64>]) -> AssumptionCheck {
    let deg = spec.terminal.growth_degree() as i32;
    let mut worst = 0.0f64;
    for row in rows {
        for (j, v) in row.iter().enumerate() {
            let x = spec.xgrid.x(j);
            worst = worst.max(v.abs() / (1.0 + x.abs().powi(deg)));
        }
    }
    AssumptionCheck {
        name: "growth".into(),
        passed: worst.is_finite(),
        statistic: worst,
        detail: format!("max |Phi| / (1 + |x|^{deg}) on the grid: {worst:.6e}"),
    }
}

/// Monotonicity of the explicit stencil needs `|dF/dz| dx <= sigma_lo^2`.
fn stencil_check(spec: &ProblemSpec) -> Result<AssumptionCheck> {
    let lip_z = if spec.generator.depends_on_z() {
        sampled_lipschitz(spec)?.1
    } else {
        0.0
    };
    let bound = spec.band.var_lo() / spec.dx();
    Ok(AssumptionCheck {
        name: "monotone-stencil".into(),
        passed: lip_z <= bound,
        statistic: lip_z,
        detail: format!("sampled |dF/dz| {lip_z:.6e} vs sigma_lo^2/dx = {bound:.6e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VolatilityBand;

    fn spec(generator: &str, lip: f64, terminal: &str) -> ProblemSpec {
        ProblemSpec::from_exprs(
            VolatilityBand::new(0.5, 1.0).unwrap(),
            1.0,
            40,
            3.0,
            31,
            generator,
            lip,
            terminal,
        )
        .unwrap()
    }

    #[test]
    fn zero_generator_passes_everything() {
        let r = validate_problem(&spec("0", 0.0, "x")).unwrap();
        assert!(r.all_passed(), "{r:#?}");
        assert!(r.warnings.is_empty());
        assert!(r.cfl <= 1.0);
    }

    #[test]
    fn sine_is_one_lipschitz() {
        let r = validate_problem(&spec("sin(y)", 1.0, "x^2")).unwrap();
        let lip = r.check("lipschitz-yz").unwrap();
        assert!(lip.passed, "{lip:?}");
        assert!(lip.statistic <= 1.0 + 1e-12);
        assert!(lip.statistic > 0.9);
    }

    #[test]
    fn understated_lipschitz_constant_is_flagged() {
        let r = validate_problem(&spec("2*y + z", 1.0, "x")).unwrap();
        assert!(!r.check("lipschitz-yz").unwrap().passed);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn jump_in_first_time_index_is_flagged() {
        let r = validate_problem(&spec("step(t - 0.5)*y", 1.0, "x")).unwrap();
        let cont = r.check("generator-continuity").unwrap();
        assert!(!cont.passed, "{cont:?}");
        // |y| up to N = 10 over an s-range of length about T/2
        assert!(cont.statistic >= 0.5 * 10.0 * 0.9);
        // a jump in s alone is allowed
        let r = validate_problem(&spec("step(s - 0.5)*y", 1.0, "x")).unwrap();
        assert!(r.check("generator-continuity").unwrap().passed);
    }

    #[test]
    fn smooth_time_dependence_passes_h4() {
        let r = validate_problem(&spec("cos(t)*sin(y) + t*s*0.1*z", 1.1, "(1-t)*x")).unwrap();
        assert!(r.check("generator-continuity").unwrap().passed);
        assert!(r.check("phi-continuity").unwrap().passed);
    }

    #[test]
    fn terminal_jump_in_t_is_flagged() {
        let r = validate_problem(&spec("0", 0.0, "step(t - 0.5)*x")).unwrap();
        assert!(!r.check("phi-continuity").unwrap().passed);
    }

    #[test]
    fn hard_errors() {
        let s =
            ProblemSpec::from_exprs(VolatilityBand::new(1.0, 2.0).unwrap(), 1.0, 10, 1.0, 21, "0", 0.0, "x").unwrap();
        assert!(matches!(validate_problem(&s), Err(Error::CflViolated { .. })));
        assert!(matches!(
            validate_problem(&spec("0", 0.0, "log(x)")),
            Err(Error::Eval { .. })
        ));
        assert!(matches!(
            validate_problem(&spec("1/(x - x)", 0.0, "x")),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn validation_is_deterministic() {
        let s = spec("sin(y)*cos(z)", 1.0, "x^2");
        assert_eq!(validate_problem(&s).unwrap(), validate_problem(&s).unwrap());
    }
}
