//! Meta linear regression: closed-form joint-training (DRS) and one-step MAML
//! estimators, exact risk evaluators, theoretical bound evaluators, an SGD
//! simulator for the sample-complexity theorems and a Monte Carlo harness
//! for comparing the two estimators.

pub mod bounds;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod risk;
pub mod rng;
pub mod sgd_sim;
pub mod stats;
pub mod task_model;

pub use error::{Error, Result};
pub use estimators::EstimateResult;
pub use risk::AdaptationConfig;
pub use task_model::{FiniteDistribution, MetaDataset, SimulationSpec, TaskData, TaskDistribution, TaskParams};
