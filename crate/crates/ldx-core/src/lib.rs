//! Fixed-budget data acquisition for infinite-horizon discounted MDPs.
//!
//! The crate is organized around a convex sampling-allocation surrogate: given
//! gap and variance statistics of a tabular MDP, the per-pair cost `L_sa`
//! bounds how hard it is to separate a suboptimal action from the optimal one,
//! and minimizing `max L_sa` over the Bellman-flow polytope yields a target
//! sampling ratio. The `LazyGradient` agent tracks that target online with one
//! projected subgradient step at sparsely scheduled times.
//!
//! Modules:
//! - [`mdp`]: tabular MDP model, exact planning, gap/variance statistics.
//! - [`env`]: benchmark environment generators and step simulation.
//! - [`estimator`]: online visit counts and empirical/regularized models.
//! - [`solver`]: the surrogate objective, flow polytope, projection, and the
//!   lazy one-step solver.
//! - [`lazygradient`]: the adaptive agent plus uniform/Q-learning/PSRL
//!   baselines.
//! - [`linear`]: linear function approximation variants of the allocation
//!   problem.
//! - [`rate`]: large-deviations rate functions and Monte Carlo decay-rate
//!   verification.
//! - [`bench`]: seeded replication harness with CSV emission.

pub mod bench;
pub mod env;
pub mod error;
pub mod estimator;
pub mod lazygradient;
pub mod linalg;
pub mod linear;
pub mod mdp;
pub mod rate;
pub mod solver;

pub use error::{LdxError, Result};
