//! Multiple-shooting NMPC local planner.

pub mod problem;
pub mod qp;
pub mod solver;

pub use problem::{
    build_cost, obstacle_constraints, shooting_defects, shooting_jacobian, Layout, Obstacle, ReferenceSlice,
};
pub use solver::{
    shift_solution, solve, solve_with_guess, NmpcConfig, NmpcSolution, NmpcSolver, SolveStatus,
};
