//! Solvers for backward stochastic Volterra integral equations driven by
//! G-Brownian motion in one space dimension.
//!
//! The building blocks are
//!
//! * [`expr`]: the scalar expression language used for generators and terminal families,
//! * [`model`]: band, grids, problem specification, solution containers and
//!   assumption probes,
//! * [`gexp`]: the explicit monotone scheme for the G-heat equation,
//! * [`bsvie`]: diagonal construction and local-interval Picard iteration,
//! * [`paths`]: Monte Carlo under explicit volatility controls and `K` reconstruction,
//! * [`verify`]: comparison, a priori and continuity diagnostics,
//! * [`problem_file`]: the JSON problem format.

pub mod bsvie;
pub mod error;
pub mod expr;
pub mod gexp;
pub mod model;
pub mod paths;
pub mod problem_file;
pub mod verify;

pub use bsvie::{solve_bsvie, solve_bsvie_no_y, solve_bsvie_picard, Interval, IntervalLog, IntervalPlan};
pub use error::{Error, Result};
pub use expr::{parse_expression, Expression};
pub use gexp::{g_expectation, g_function, solve_gbsde};
pub use model::{
    cfl_number, validate_problem, GeneratorSpec, NodeTable, PicardConfig, ProblemSpec, Regime, SolutionBundle,
    SpaceGrid, TerminalFamily, TimeGrid, TriangularField, ValidationReport, VolatilityBand,
};
pub use paths::{
    bdg_diagnostic, mc_lower_bound, reconstruct_k, reconstruct_k_all, simulate_paths, PathBatch, PathConfig, VolControl,
};
pub use problem_file::{load_problem, parse_problem, ProblemFile};
pub use verify::{apriori_diagnostics, compare_solutions, continuity_report, random_ordered_pair, CompareOptions};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
