//! EMQ/EMQW estimator: transforms, loss heads, training, and serialization.

pub mod emq;
pub mod loss;
pub mod serialize;
pub mod transform;

pub use emq::{
    adaptive_stop_check, fit_emq, fit_ensemble_step, fit_initial, update_fans, AdaptiveMetric,
    AdaptiveTConfig, EmqFit, EmqModel, EmqVariant, EnsembleStepConfig,
};
pub use loss::{DirectQuantileLoss, EnsembleStepLoss, GaussianHeadLoss, IntervalScoreLoss};
pub use serialize::{load_model, save_direct_model, save_emq_model, LoadedModel, FORMAT_VERSION};
pub use transform::{g_transform, gaussian_head_quantiles, lambda_head};
