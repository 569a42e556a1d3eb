//! Neural-tangent-kernel look-ahead active learning for fully connected
//! networks.
//!
//! The crate trains small MLPs with SGD, builds their empirical (or analytic
//! infinite-width) tangent kernel on the labeled set, and scores unlabeled
//! candidates by how much adding them would change the linearized model.

pub mod acquire;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod lookahead;
pub mod net;
pub mod pool;

pub use acquire::{AcquisitionResult, ChangeBaseline, Distance, Reference, Strategy};
pub use data::Dataset;
pub use error::{Error, Result};
pub use kernel::{KernelOptions, KernelState, NtkRoute, TangentKernel};
pub use linalg::{CholeskyFactor, JitterPolicy, Matrix};
pub use net::{Activation, MlpConfig, MlpParams, TrainConfig};
pub use pool::{CycleRecord, Pool, RunConfig};
