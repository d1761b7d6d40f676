//! JSON problem files.
//!
//! ```json
//! {
//!   "band": { "sigma_lo": 0.5, "sigma_hi": 1.0 },
//!   "grid": { "T": 1.0, "n_t": 100 },
//!   "generator": "0",
//!   "terminal": "x^2"
//! }
//! ```
//!
//! Optional keys: `grid.n_x` (default: the largest odd count keeping the
//! effective CFL number at most 1), `grid.x_min`/`grid.x_max` or
//! `grid.half_width` (default half-width `6 sigma_hi sqrt(T)`), `alpha`
//! (default 2), `picard` (any subset of `delta_init`, `theta`, `tol`,
//! `max_iter`), `substeps` (default 1) and `probe`. The generator and the
//! terminal family are either an expression string or an object
//! `{"expr": ..., "L": ...}` / `{"expr": ..., "growth_degree": ...}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Var};
use crate::model::{
    validate_problem, GeneratorSpec, PicardConfig, ProbeConfig, ProblemSpec, SpaceGrid, TerminalFamily, TimeGrid,
    ValidationReport, VolatilityBand,
};

/// Upper bound on the automatically chosen number of space nodes.
pub const MAX_AUTO_NX: usize = 4001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandFile {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_x: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorFile {
    Expr(String),
    Full {
        expr: String,
        #[serde(rename = "L", default)]
        lipschitz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TerminalFile {
    Expr(String),
    Full {
        expr: String,
        #[serde(default)]
        growth_degree: Option<u32>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub band: BandFile,
    pub grid: GridFile,
    pub generator: GeneratorFile,
    pub terminal: TerminalFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

/// Largest odd node count on `[x_min, x_max]` with `sigma_hi^2 dt / (substeps dx^2) <= 1`.
pub fn auto_nx(band: &VolatilityBand, tgrid: &TimeGrid, x_min: f64, x_max: f64, substeps: usize) -> usize {
    let dx_min = (band.var_hi() * tgrid.dt() / substeps as f64).sqrt();
    let mut n = ((x_max - x_min) / dx_min).floor() as usize + 1;
    n = n.clamp(3, MAX_AUTO_NX);
    if n.is_multiple_of(2) {
        n -= 1;
    }
    // guard against rounding at the boundary of the CFL condition
    while n > 3 {
        let dx = (x_max - x_min) / (n - 1) as f64;
        if band.var_hi() * tgrid.dt() / (substeps as f64 * dx * dx) <= 1.0 {
            break;
        }
        n -= 2;
    }
    n
}

impl ProblemFile {
    /// Builds the specification with defaults filled in; no validation probes are run.
    pub fn to_spec(&self) -> Result<ProblemSpec> {
        let band = VolatilityBand::new(self.band.sigma_lo, self.band.sigma_hi)?;
        let tgrid = TimeGrid::new(self.grid.horizon, self.grid.n_t)?;
        let (x_min, x_max) = match (self.grid.x_min, self.grid.x_max, self.grid.half_width) {
            (None, None, None) => {
                let h = 6.0 * band.sigma_hi() * tgrid.horizon().sqrt();
                (-h, h)
            }
            (None, None, Some(h)) => (-h, h),
            (Some(lo), Some(hi), None) => (lo, hi),
            _ => {
                return Err(Error::Schema(
                    "grid: give either both x_min and x_max, or half_width, or neither".into(),
                ))
            }
        };
        let substeps = self.substeps.unwrap_or(1);
        if substeps == 0 {
            return Err(Error::Schema("substeps must be positive".into()));
        }
        let n_x = match self.grid.n_x {
            Some(n) => n,
            None => auto_nx(&band, &tgrid, x_min, x_max, substeps),
        };
        let xgrid = SpaceGrid::new(x_min, x_max, n_x)?;

        let generator = match &self.generator {
            GeneratorFile::Expr(e) => build_generator(e, None)?,
            GeneratorFile::Full { expr, lipschitz } => build_generator(expr, *lipschitz)?,
        };
        let terminal = match &self.terminal {
            TerminalFile::Expr(e) => TerminalFamily::new(Expression::parse(e)?, 2),
            TerminalFile::Full { expr, growth_degree } => {
                TerminalFamily::new(Expression::parse(expr)?, growth_degree.unwrap_or(2))
            }
        };
        let mut spec = ProblemSpec::new(band, tgrid, xgrid, generator, terminal)?;
        spec.substeps = substeps;
        if let Some(a) = self.alpha {
            spec.alpha = a;
        }
        if let Some(p) = &self.picard {
            let d = PicardConfig::for_horizon(tgrid.horizon());
            spec.picard = PicardConfig {
                delta_init: p.delta_init.unwrap_or(d.delta_init),
                theta: p.theta.unwrap_or(d.theta),
                tol: p.tol.unwrap_or(d.tol),
                max_iter: p.max_iter.unwrap_or(d.max_iter),
            };
        }
        if let Some(p) = self.probe {
            spec.probe = p;
        }
        spec.check()?;
        Ok(spec)
    }

    /// Fully resolved file for `spec`, with every default written out.
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        ProblemFile {
            band: BandFile {
                sigma_lo: spec.band.sigma_lo(),
                sigma_hi: spec.band.sigma_hi(),
            },
            grid: GridFile {
                horizon: spec.tgrid.horizon(),
                n_t: spec.n_t(),
                n_x: Some(spec.n_x()),
                x_min: Some(spec.xgrid.x_min()),
                x_max: Some(spec.xgrid.x_max()),
                half_width: None,
            },
            generator: GeneratorFile::Full {
                expr: spec.generator.expr().source().to_string(),
                lipschitz: Some(spec.generator.lipschitz()),
            },
            terminal: TerminalFile::Full {
                expr: spec.terminal.expr().source().to_string(),
                growth_degree: Some(spec.terminal.growth_degree()),
            },
            alpha: Some(spec.alpha),
            picard: Some(PicardFile {
                delta_init: Some(spec.picard.delta_init),
                theta: Some(spec.picard.theta),
                tol: Some(spec.picard.tol),
                max_iter: Some(spec.picard.max_iter),
            }),
            substeps: Some(spec.substeps),
            probe: Some(spec.probe),
        }
    }
}

fn build_generator(text: &str, lipschitz: Option<f64>) -> Result<GeneratorSpec> {
    let expr = Expression::parse(text)?;
    let lip = match lipschitz {
        Some(l) => l,
        None if expr.mentions(Var::Y) || expr.mentions(Var::Z) => {
            return Err(Error::Schema(
                "generator.L is required when the generator depends on y or z".into(),
            ))
        }
        None => 0.0,
    };
    GeneratorSpec::new(expr, lip)
}

/// Parses a problem file and runs the assumption probes.
///
/// Schema violations and validation hard errors (CFL, evaluation failures)
/// are errors; failed proxies are reported as warnings.
pub fn parse_problem(text: &str) -> Result<(ProblemSpec, ValidationReport)> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let spec = file.to_spec()?;
    let report = validate_problem(&spec)?;
    Ok((spec, report))
}

pub fn load_problem(path: &Path) -> Result<(ProblemSpec, ValidationReport)> {
    let text = std::fs::read_to_string(path)?;
    parse_problem(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cfl_number;

    const MINIMAL: &str = r#"{
        "band": {"sigma_lo": 0.5, "sigma_hi": 1.0},
        "grid": {"T": 1.0, "n_t": 100},
        "generator": "0",
        "terminal": "x^2"
    }"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let (spec, report) = parse_problem(MINIMAL).unwrap();
        assert_eq!(spec.alpha, 2.0);
        assert_eq!(spec.picard.theta, 0.75);
        assert_eq!(spec.xgrid.x_max(), 6.0);
        assert_eq!(spec.xgrid.x_min(), -6.0);
        assert_eq!(spec.n_x(), 121);
        assert!(cfl_number(&spec) <= 1.0);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn inverted_band_is_rejected() {
        let text = MINIMAL.replace("\"sigma_lo\": 0.5", "\"sigma_lo\": 2.0");
        let err = parse_problem(&text).unwrap_err();
        assert!(err.to_string().contains("band violates 0<σ̲≤σ̄"), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("\"n_t\": 100", "\"n_x\": 101");
        let err = parse_problem(&text).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("n_t"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("\"n_t\": 100", "\"n_t\": 100, \"dt\": 0.01");
        assert!(matches!(parse_problem(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn object_forms_and_overrides() {
        let text = r#"{
            "band": {"sigma_lo": 1.0, "sigma_hi": 1.0},
            "grid": {"T": 2.0, "n_t": 50, "n_x": 41, "half_width": 4.0},
            "generator": {"expr": "0.5*y", "L": 0.5},
            "terminal": {"expr": "1", "growth_degree": 0},
            "alpha": 3,
            "picard": {"theta": 0.5},
            "substeps": 2
        }"#;
        let (spec, _) = parse_problem(text).unwrap();
        assert_eq!(spec.n_x(), 41);
        assert_eq!(spec.xgrid.x_max(), 4.0);
        assert_eq!(spec.alpha, 3.0);
        assert_eq!(spec.picard.theta, 0.5);
        assert_eq!(spec.picard.delta_init, 2.0);
        assert_eq!(spec.substeps, 2);
        assert!(spec.generator.depends_on_y());
        assert_eq!(spec.terminal.growth_degree(), 0);
    }

    #[test]
    fn y_dependent_generator_needs_lipschitz_constant() {
        let text = MINIMAL.replace("\"generator\": \"0\"", "\"generator\": \"0.5*y\"");
        let err = parse_problem(&text).unwrap_err();
        assert!(err.to_string().contains("generator.L"));
    }

    #[test]
    fn cfl_breach_is_a_hard_error() {
        let text = MINIMAL.replace("\"n_t\": 100", "\"n_t\": 100, \"n_x\": 401");
        assert!(matches!(parse_problem(&text), Err(Error::CflViolated { .. })));
        let text = text.replace("\"terminal\"", "\"substeps\": 12, \"terminal\"");
        assert!(parse_problem(&text).is_ok());
    }

    #[test]
    fn resolved_file_round_trips() {
        let (spec, _) = parse_problem(MINIMAL).unwrap();
        let file = ProblemFile::from_spec(&spec);
        let json = serde_json::to_string(&file).unwrap();
        let (again, _) = parse_problem(&json).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn auto_nx_respects_substeps() {
        let band = VolatilityBand::new(0.5, 1.0).unwrap();
        let tg = TimeGrid::new(1.0, 400).unwrap();
        let n1 = auto_nx(&band, &tg, -6.0, 6.0, 1);
        let n3 = auto_nx(&band, &tg, -6.0, 6.0, 3);
        assert_eq!(n1 % 2, 1);
        assert!(n3 > n1);
        let dx = 12.0 / (n3 - 1) as f64;
        assert!(0.0025 / (3.0 * dx * dx) <= 1.0);
    }
}
