//! Differentially private federated stochastic convex optimization with
//! weighted-momentum gradient estimates, noise that cancels across rounds
//! under partial participation, a zCDP accountant and an empirical
//! verification suite.

pub mod error;
pub mod fedcore;
pub mod harness;
pub mod numkit;
pub mod objectives;
pub mod privacy;
pub mod verify;

pub use error::{Error, Result};
pub use fedcore::{run, Algorithm, Problem, RunConfig, RunOutput, StepSize};
pub use numkit::{Ball, Vector};
pub use objectives::{LogisticRegression, Objective, ObjectiveConstants, QuadraticProblem, QuadraticSpec};
pub use privacy::{BudgetLedger, PrivacyBudget};
