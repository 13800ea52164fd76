//! Model selection and estimation for multi-valued treatments via the
//! generalized propensity score (GPS).
//!
//! The crate fits multinomial-logit GPS models over candidate covariate
//! subsets, matches units on the estimated scores, ranks the candidates with
//! covariate balance measures — including an outcome-adjusted measure that
//! weights each covariate's imbalance by its estimated relevance to the
//! outcome — and estimates all pairwise average treatment effects with an
//! Abadie–Imbens-style variance that accounts for the estimated score.
//!
//! Module map:
//! - [`dataset`]: CSV ingestion, validation, dummy coding, standardization.
//! - [`mnlogit`]: multinomial-logit maximum likelihood and score evaluation.
//! - [`matching`]: nearest-neighbor matching with replacement on a scalar
//!   score, imputation, and match-use counting.
//! - [`correlation`]: covariate–outcome relevance profiles (per-arm OLS or
//!   ball correlation with a permutation test).
//! - [`balance`]: balance measures for a candidate model at one arm.
//! - [`estimate`]: mean potential outcomes, pairwise effects, variances.
//! - [`pipeline`]: standardize → fit → rank → select → estimate.
//! - [`simlab`]: seeded Monte Carlo scenarios exercising the whole stack.
//! - [`cli`]: configuration and artifact plumbing for the `gpsmatch` binary.
//!
//! All estimation routines are pure functions of immutable inputs; every
//! random choice flows from an explicit seed, so results are reproducible
//! regardless of thread count.

pub mod balance;
pub mod cli;
pub mod correlation;
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod matching;
pub mod mnlogit;
pub mod pipeline;
pub mod seeding;
pub mod simlab;

pub use error::{Error, Result};
