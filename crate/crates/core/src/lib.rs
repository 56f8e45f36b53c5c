//! LASSO for systems of regression equations with a jointly tuned penalty.

pub mod data;
pub mod debias;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod lasso;
pub mod lrv;
pub mod penalty;
pub mod rng;
pub mod stats;

pub use data::{CoefVector, Design, EquationSpec, PanelDataset, TargetSet};
pub use error::{Error, Result};
pub use lasso::{LassoFit, LassoProblem, SolverOptions};
pub use lrv::{BlockScheme, HacOptions, LoadingMatrix};
pub use penalty::{FinalFit, PenaltyMethod, PenaltyPlan, PenaltyScope, TuningConfig};
pub use debias::{DebiasConfig, DebiasMethod, DebiasedEstimate, InstrumentOptions};
pub use dgp::{Alpha0Law, DepScenario, ExperimentConfig, ExperimentResults, IidScenario, InferenceScenario, Scenario, Truth};
pub use inference::{BootCriticalValues, ConfidenceReport, Interval, TargetReport};
