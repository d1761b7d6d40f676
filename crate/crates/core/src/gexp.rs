//! Explicit monotone scheme for the G-heat equation with a source term.
//!
//! One backward step reads
//!
//! ```text
//! u[j] = u_next[j] + dt * ( G(D2 u_next[j]) + source(x_j, u_next[j], D1 u_next[j]) )
//! ```
//!
//! with `G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2`, `D2` the three-point
//! second difference and `D1` the central difference. The second difference
//! is set to zero on the two boundary columns (linear extrapolation).

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::model::{NodeTable, ProblemSpec, Regime, SpaceGrid, TerminalFamily, TimeGrid, ValueSurface, VolatilityBand};

/// `G(a) = 1/2 sup_{gamma in [sigma_lo^2, sigma_hi^2]} a gamma`.
#[inline]
pub fn g_function(a: f64, band: &VolatilityBand) -> f64 {
    0.5 * (band.var_hi() * a.max(0.0) - band.var_lo() * (-a).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub u_row: Vec<f64>,
    pub grad_row: Vec<f64>,
    pub sig_row: Vec<Regime>,
}

/// Step geometry shared by every row of a solve.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub band: VolatilityBand,
    pub dt: f64,
    pub grid: SpaceGrid,
}

impl Stencil {
    pub fn cfl(&self) -> f64 {
        let dx = self.grid.dx();
        self.band.var_hi() * self.dt / (dx * dx)
    }
}

/// Central first difference, one-sided on the boundary columns.
pub fn first_difference(row: &[f64], dx: f64) -> Vec<f64> {
    let n = row.len();
    let mut out = vec![0.0; n];
    out[0] = (row[1] - row[0]) / dx;
    out[n - 1] = (row[n - 1] - row[n - 2]) / dx;
    for j in 1..n - 1 {
        out[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
    }
    out
}

#[inline]
fn second_difference(row: &[f64], j: usize, inv_dx2: f64) -> f64 {
    if j == 0 || j + 1 == row.len() {
        0.0
    } else {
        (row[j - 1] - 2.0 * row[j] + row[j + 1]) * inv_dx2
    }
}

/// One explicit backward step. `source(j, x, u, z)` is evaluated at the
/// values of the incoming row.
pub fn step_backward<S>(u_next: &[f64], mut source: S, stencil: &Stencil) -> Result<StepResult>
where
    S: FnMut(usize, f64, f64, f64) -> Result<f64>,
{
    let cfl = stencil.cfl();
    if cfl > 1.0 + 1e-12 {
        return Err(Error::CflViolated { cfl });
    }
    let n = u_next.len();
    debug_assert_eq!(n, stencil.grid.n_x());
    let dx = stencil.grid.dx();
    let inv_dx2 = 1.0 / (dx * dx);
    let grad_next = first_difference(u_next, dx);
    let mut u_row = vec![0.0; n];
    let mut sig_row = vec![Regime::High; n];
    for j in 0..n {
        let d2 = second_difference(u_next, j, inv_dx2);
        sig_row[j] = Regime::for_curvature(d2);
        let f = source(j, stencil.grid.x(j), u_next[j], grad_next[j])?;
        let v = u_next[j] + stencil.dt * (g_function(d2, &stencil.band) + f);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "backward step",
                location: format!("x={} (CFL {cfl:.3})", stencil.grid.x(j)),
            });
        }
        u_row[j] = v;
    }
    let grad_row = first_difference(&u_row, dx);
    Ok(StepResult {
        u_row,
        grad_row,
        sig_row,
    })
}

/// Backward sweep from a terminal row at `n_t` down to `anchor`.
///
/// The source for the step into row `k` is called as
/// `source(k + 1, j, x, u, z)`: generator data are frozen at the upper node
/// of each grid interval. Each grid interval is split into `substeps`
/// explicit sub-steps.
pub fn solve_backward_with<S>(
    anchor: usize,
    tgrid: &TimeGrid,
    stencil_band: &VolatilityBand,
    grid: &SpaceGrid,
    substeps: usize,
    terminal: Vec<f64>,
    mut source: S,
) -> Result<ValueSurface>
where
    S: FnMut(usize, usize, f64, f64, f64) -> Result<f64>,
{
    let n_t = tgrid.n_t();
    let n_x = grid.n_x();
    if anchor > n_t {
        return Err(Error::IndexOutOfRange {
            index: anchor,
            max: n_t,
        });
    }
    let rows = n_t + 1 - anchor;
    let stencil = Stencil {
        band: *stencil_band,
        dt: tgrid.dt() / substeps as f64,
        grid: *grid,
    };
    let mut values = vec![0.0; rows * n_x];
    let mut grad = vec![0.0; rows * n_x];
    let mut sig = vec![Regime::High; rows * n_x];

    let last = (rows - 1) * n_x;
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    for j in 0..n_x {
        sig[last + j] = Regime::for_curvature(second_difference(&terminal, j, inv_dx2));
    }
    grad[last..].copy_from_slice(&first_difference(&terminal, grid.dx()));
    values[last..].copy_from_slice(&terminal);

    let mut current = terminal;
    for k in (anchor..n_t).rev() {
        let mut step = None;
        for _ in 0..substeps {
            let r = step_backward(&current, |j, x, u, z| source(k + 1, j, x, u, z), &stencil)?;
            current = r.u_row.clone();
            step = Some(r);
        }
        let r = step.expect("substeps >= 1");
        let o = (k - anchor) * n_x;
        values[o..o + n_x].copy_from_slice(&r.u_row);
        grad[o..o + n_x].copy_from_slice(&r.grad_row);
        sig[o..o + n_x].copy_from_slice(&r.sig_row);
    }
    Ok(ValueSurface {
        t_index: anchor,
        n_x,
        values,
        grad,
        sig,
    })
}

/// Solves the parameterized equation for the anchor `t_index`.
///
/// Without `y_source` the generator sees the running value `u` in its `y`
/// slot. With `y_source` (a full `(n_t + 1) x n_x` diagonal table) it sees
/// `Y(s, x)` instead.
pub fn solve_gbsde(t_index: usize, spec: &ProblemSpec, y_source: Option<&NodeTable>) -> Result<ValueSurface> {
    if let Some(y) = y_source {
        assert_eq!(y.n_rows(), spec.n_t() + 1, "y_source must cover every time node");
        assert_eq!(y.n_x(), spec.n_x(), "y_source must match the space grid");
    }
    let terminal = spec.terminal_row(t_index)?;
    let t = spec.tgrid.time(t_index);
    let gen = &spec.generator;
    let zero = gen.is_zero();
    solve_backward_with(
        t_index,
        &spec.tgrid,
        &spec.band,
        &spec.xgrid,
        spec.substeps,
        terminal,
        |k, j, x, u, z| {
            if zero {
                return Ok(0.0);
            }
            let y = match y_source {
                Some(tab) => tab.get(k, j),
                None => u,
            };
            gen.eval(t, spec.tgrid.time(k), x, y, z)
        },
    )
}

/// Applies `steps` backward steps of the pure G-heat scheme (no source) to `row`.
pub fn propagate(
    row: Vec<f64>,
    steps: usize,
    dt: f64,
    band: &VolatilityBand,
    grid: &SpaceGrid,
    substeps: usize,
) -> Result<Vec<f64>> {
    let stencil = Stencil {
        band: *band,
        dt: dt / substeps as f64,
        grid: *grid,
    };
    let mut current = row;
    for _ in 0..steps * substeps {
        current = step_backward(&current, |_, _, _, _| Ok(0.0), &stencil)?.u_row;
    }
    Ok(current)
}

/// Value surface of `E^[payoff(x + B_{T-t})]`, anchored at `t = 0`.
pub fn g_expectation_surface(
    payoff: &Expression,
    band: &VolatilityBand,
    tgrid: &TimeGrid,
    xgrid: &SpaceGrid,
    substeps: usize,
) -> Result<ValueSurface> {
    let terminal = TerminalFamily::new(payoff.clone(), 0);
    let t_end = tgrid.horizon();
    let row = (0..xgrid.n_x())
        .map(|j| terminal.eval(t_end, xgrid.x(j)))
        .collect::<Result<Vec<_>>>()?;
    solve_backward_with(0, tgrid, band, xgrid, substeps, row, |_, _, _, _, _| Ok(0.0))
}

/// Sublinear expectation `E^[payoff(B_T)]` read off the lattice at `(0, 0)`.
pub fn g_expectation(
    payoff: &Expression,
    band: &VolatilityBand,
    tgrid: &TimeGrid,
    xgrid: &SpaceGrid,
    substeps: usize,
) -> Result<f64> {
    let surface = g_expectation_surface(payoff, band, tgrid, xgrid, substeps)?;
    Ok(surface.value_at(0, 0.0, xgrid))
}
