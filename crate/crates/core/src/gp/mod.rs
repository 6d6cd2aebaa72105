//! Gaussian-process regression: exact reference model and variational sparse model.

pub mod exact;
pub mod inducing;
pub mod kernel;
pub mod optim;
pub mod sparse;

pub use exact::{optimize_hyperparams, ExactGp, ExactGpRecord, GpDataset};
pub use inducing::select_inducing_points;
pub use kernel::{se_kernel, KernelHyperparams};
pub use optim::{AscentOptions, AscentResult};
pub use sparse::{
    compute_variational_params, elbo, elbo_with_gradient, train_sgp, ElboReport, SgpModel, SgpRecord,
    SgpTrainOptions, SgpTraining,
};
