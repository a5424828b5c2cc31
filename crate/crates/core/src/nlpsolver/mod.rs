//! Sequential quadratic programming with a dual active-set QP subsolver.

pub mod qp;
pub mod sqp;

pub use qp::{minimum_violation, solve_qp, QpOutcome, QpProblem, QpSolution};
pub use sqp::{solve_nlp, solve_nlp_from, NlpProblem, NlpSolution, SolveReport, SolveStatus, SqpOptions};
