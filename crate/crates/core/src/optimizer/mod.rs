//! Linearized constrained program over mechanism-instance mixtures and its
//! augmented Lagrangian solver.

mod brute;
mod problem;
mod simplex;
mod solver;

use serde::{Deserialize, Serialize};

pub use brute::brute_force_solve;
pub use problem::{build_problem, Block, ConstraintRow, ConstraintTargets, ProblemSpec};
pub use simplex::{project_simplex, project_simplex_in_place, project_simplex_scaled};
pub use solver::{entropy, entropy_term, objective_value, solve, Solution, SolveStatus, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStatus {
    pub name: String,
    pub residual: f64,
    pub dual: f64,
    pub violated: bool,
    /// Active at the solution or carrying a positive multiplier.
    pub binding: bool,
}

pub fn feasibility_report(problem: &ProblemSpec, solution: &Solution, tolerance: f64) -> Vec<ConstraintStatus> {
    problem
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let residual = row.eval(&solution.x);
            let dual = solution.duals.get(k).copied().unwrap_or(0.0);
            ConstraintStatus {
                name: row.name.clone(),
                residual,
                dual,
                violated: residual > tolerance,
                binding: residual > -tolerance || dual > 0.0,
            }
        })
        .collect()
}

/// Names of the rows a solution violates.
pub fn violated_rows(problem: &ProblemSpec, solution: &Solution, tolerance: f64) -> Vec<String> {
    feasibility_report(problem, solution, tolerance)
        .into_iter()
        .filter(|c| c.violated)
        .map(|c| c.name)
        .collect()
}
