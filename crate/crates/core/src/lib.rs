//! Distributed multi-task learning on simulated edge-computing graphs.
//!
//! Two frameworks train one linear SVM per graph node:
//!
//! * [`netlasso`]: the network lasso objective solved by ADMM, with per-node
//!   proximal solves, closed-form edge updates and residual-based stopping.
//! * [`mocha`]: federated multi-task learning by per-task dual coordinate ascent
//!   on a quadratic approximation of the dual, with a static (graph Laplacian)
//!   or dynamically re-estimated task-relationship matrix.
//!
//! [`baselines`] provides isolated local models and a pooled global model, and
//! [`harness`] runs all four strategies on identical shards and writes reports.
//! Graphs come from [`topology`], shards from [`data`], and cluster agreement
//! is scored with [`metrics`].

pub mod baselines;
pub mod error;
pub mod harness;
pub mod data;
pub mod metrics;
pub mod mocha;
pub mod model;
pub mod netlasso;
pub mod topology;
pub mod trace;

mod linalg;

pub use error::{Error, Result, Stage};
pub use model::{
    accuracy, hinge_objective, hinge_subgradient, predict, solve_prox_svm, Anchor, BiasMode,
    Dataset, InnerMethod, InnerSolveOpts, LabeledSample, LinearModel, LossConfig, ProxSolution,
};
