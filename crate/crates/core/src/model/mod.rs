//! Problem data: volatility band, grids, generator and terminal family.

mod field;
mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Point, Var};

pub use field::{KSample, NodeTable, Regime, SolutionBundle, TriangularField, ValueSurface};
pub use validate::{validate_problem, AssumptionCheck, ProbeConfig, ValidationReport};

/// The uncertainty set `[sigma_lo^2, sigma_hi^2]` of the quadratic variation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityBand {
    sigma_lo: f64,
    sigma_hi: f64,
}

impl VolatilityBand {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        let ok = sigma_lo.is_finite() && sigma_hi.is_finite() && sigma_lo > 0.0 && sigma_lo <= sigma_hi;
        if !ok {
            return Err(Error::InvalidBand { sigma_lo, sigma_hi });
        }
        Ok(VolatilityBand { sigma_lo, sigma_hi })
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    pub fn var_lo(&self) -> f64 {
        self.sigma_lo * self.sigma_lo
    }

    pub fn var_hi(&self) -> f64 {
        self.sigma_hi * self.sigma_hi
    }

    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.sigma_lo && sigma <= self.sigma_hi
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_lo == self.sigma_hi
    }
}

/// Uniform partition `0 = t_0 < ... < t_{n_t} = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_t: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_t: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if n_t < 2 {
            return Err(Error::InvalidGrid(format!("n_t must be at least 2, got {n_t}")));
        }
        Ok(TimeGrid { horizon, n_t })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals; nodes are indexed `0..=n_t`.
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|k| self.time(k)).collect()
    }
}

/// Uniform state grid on `[x_min, x_max]` with `n_x` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    x_min: f64,
    x_max: f64,
    n_x: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_x: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < 0.0 && 0.0 < x_max) {
            return Err(Error::InvalidGrid(format!(
                "space grid must satisfy x_min < 0 < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_x < 3 {
            return Err(Error::InvalidGrid(format!("n_x must be at least 3, got {n_x}")));
        }
        Ok(SpaceGrid { x_min, x_max, n_x })
    }

    /// Symmetric grid `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, n_x: usize) -> Result<Self> {
        Self::new(-half_width, half_width, n_x)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n_x {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.x(j)).collect()
    }

    /// Index of the node closest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let r = ((x - self.x_min) / self.dx()).round();
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(self.n_x - 1)
        }
    }

    /// Piecewise-linear interpolation of a row of nodal values, constant
    /// extrapolation outside the grid.
    #[inline]
    pub fn interpolate(&self, row: &[f64], x: f64) -> f64 {
        debug_assert_eq!(row.len(), self.n_x);
        let pos = (x - self.x_min) / self.dx();
        if pos <= 0.0 {
            return row[0];
        }
        let j = pos.floor() as usize;
        if j + 1 >= self.n_x {
            return row[self.n_x - 1];
        }
        let w = pos - j as f64;
        if w == 0.0 {
            row[j]
        } else {
            row[j] * (1.0 - w) + row[j + 1] * w
        }
    }
}

/// The generator `F(t, s, x, y, z)` with its declared Lipschitz constant in `(y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    expr: Expression,
    lipschitz: f64,
    depends_on_y: bool,
    depends_on_z: bool,
}

impl GeneratorSpec {
    pub fn new(expr: Expression, lipschitz: f64) -> Result<Self> {
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "generator.L",
                reason: format!("must be finite and non-negative, got {lipschitz}"),
            });
        }
        let depends_on_y = expr.mentions(Var::Y);
        let depends_on_z = expr.mentions(Var::Z);
        Ok(GeneratorSpec {
            expr,
            lipschitz,
            depends_on_y,
            depends_on_z,
        })
    }

    pub fn zero() -> Self {
        GeneratorSpec {
            expr: Expression::constant(0.0),
            lipschitz: 0.0,
            depends_on_y: false,
            depends_on_z: false,
        }
    }

    pub fn expr(&self) -> &Expression {
        &self.expr
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn depends_on_y(&self) -> bool {
        self.depends_on_y
    }

    pub fn depends_on_z(&self) -> bool {
        self.depends_on_z
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero_constant()
    }

    #[inline]
    pub fn eval(&self, t: f64, s: f64, x: f64, y: f64, z: f64) -> Result<f64> {
        self.expr
            .eval(&Point { t, s, x, y, z })
            .map_err(|e| Error::eval(format!("F(t={t}, s={s}, x={x}, y={y}, z={z})"), e))
    }
}

/// The terminal family `Phi(t, x)`, so that `phi(t) = Phi(t, B_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalFamily {
    expr: Expression,
    growth_degree: u32,
}

impl TerminalFamily {
    pub fn new(expr: Expression, growth_degree: u32) -> Self {
        TerminalFamily { expr, growth_degree }
    }

    pub fn expr(&self) -> &Expression {
        &self.expr
    }

    pub fn growth_degree(&self) -> u32 {
        self.growth_degree
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        self.expr
            .eval(&Point {
                t,
                s: t,
                x,
                ..Default::default()
            })
            .map_err(|e| Error::eval(format!("Phi(t={t}, x={x})"), e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub delta_init: f64,
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl PicardConfig {
    pub fn for_horizon(horizon: f64) -> Self {
        PicardConfig {
            delta_init: horizon,
            theta: 0.75,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Everything a solve needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub band: VolatilityBand,
    pub tgrid: TimeGrid,
    pub xgrid: SpaceGrid,
    pub generator: GeneratorSpec,
    pub terminal: TerminalFamily,
    pub alpha: f64,
    pub picard: PicardConfig,
    /// Explicit sub-steps per time-grid interval.
    pub substeps: usize,
    pub probe: ProbeConfig,
}

impl ProblemSpec {
    pub fn new(
        band: VolatilityBand,
        tgrid: TimeGrid,
        xgrid: SpaceGrid,
        generator: GeneratorSpec,
        terminal: TerminalFamily,
    ) -> Result<Self> {
        let spec = ProblemSpec {
            band,
            tgrid,
            xgrid,
            generator,
            terminal,
            alpha: 2.0,
            picard: PicardConfig::for_horizon(tgrid.horizon()),
            substeps: 1,
            probe: ProbeConfig::default(),
        };
        spec.check()?;
        Ok(spec)
    }

    /// Convenience constructor from expression sources on a symmetric grid.
    pub fn from_exprs(
        band: VolatilityBand,
        horizon: f64,
        n_t: usize,
        half_width: f64,
        n_x: usize,
        generator: &str,
        lipschitz: f64,
        terminal: &str,
    ) -> Result<Self> {
        Self::new(
            band,
            TimeGrid::new(horizon, n_t)?,
            SpaceGrid::symmetric(half_width, n_x)?,
            GeneratorSpec::new(Expression::parse(generator)?, lipschitz)?,
            TerminalFamily::new(Expression::parse(terminal)?, 2),
        )
    }

    pub fn with_substeps(mut self, substeps: usize) -> Result<Self> {
        self.substeps = substeps;
        self.check()?;
        Ok(self)
    }

    pub fn with_picard(mut self, picard: PicardConfig) -> Result<Self> {
        self.picard = picard;
        self.check()?;
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.check()?;
        Ok(self)
    }

    pub fn with_terminal(mut self, terminal: TerminalFamily) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_generator(mut self, generator: GeneratorSpec) -> Self {
        self.generator = generator;
        self
    }

    /// Same problem on another grid.
    pub fn regrid(&self, n_t: usize, n_x: usize) -> Result<Self> {
        let mut out = self.clone();
        out.tgrid = TimeGrid::new(self.tgrid.horizon(), n_t)?;
        out.xgrid = SpaceGrid::new(self.xgrid.x_min(), self.xgrid.x_max(), n_x)?;
        Ok(out)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must exceed 1, got {}", self.alpha),
            });
        }
        let p = &self.picard;
        if !(p.delta_init > 0.0 && p.delta_init <= self.tgrid.horizon()) {
            return Err(Error::InvalidParameter {
                name: "picard.delta_init",
                reason: format!("must lie in (0, T], got {}", p.delta_init),
            });
        }
        if !(p.theta > 0.0 && p.theta < 1.0) {
            return Err(Error::InvalidParameter {
                name: "picard.theta",
                reason: format!("must lie in (0, 1), got {}", p.theta),
            });
        }
        if !(p.tol >= 0.0 && p.tol.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "picard.tol",
                reason: format!("must be finite and non-negative, got {}", p.tol),
            });
        }
        if p.max_iter == 0 {
            return Err(Error::InvalidParameter {
                name: "picard.max_iter",
                reason: "must be positive".into(),
            });
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter {
                name: "substeps",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.tgrid.dt()
    }

    pub fn dx(&self) -> f64 {
        self.xgrid.dx()
    }

    pub fn n_t(&self) -> usize {
        self.tgrid.n_t()
    }

    pub fn n_x(&self) -> usize {
        self.xgrid.n_x()
    }

    /// CFL number of the sub-stepped scheme actually run.
    pub fn effective_cfl(&self) -> f64 {
        cfl_number(self) / self.substeps as f64
    }

    /// Terminal row `Phi(t_i, x_j)` for anchor `i`.
    pub fn terminal_row(&self, i: usize) -> Result<Vec<f64>> {
        let t = self.tgrid.time(i);
        (0..self.n_x())
            .map(|j| self.terminal.eval(t, self.xgrid.x(j)))
            .collect()
    }
}

/// `sigma_hi^2 * dt / dx^2` on the time grid.
pub fn cfl_number(spec: &ProblemSpec) -> f64 {
    spec.band.var_hi() * spec.dt() / (spec.dx() * spec.dx())
}
