pub mod explicit;
pub mod monomial;
pub mod problem;
mod reduce;
pub mod solve;

pub use explicit::{explicit_moment_matrix, ExplicitMeasurements};
pub use monomial::{canonicalize, generate_monomials, Generator, Monomial, MonomialSet};
pub use problem::{build_problem, AffineConstraint, GramInterval, GramSpec, MomentKey, MomentProblem, Part};
pub use solve::{guessing_bound, solve, solve_scaled, SdpSolution, SolveStatus, SolveTolerances};
