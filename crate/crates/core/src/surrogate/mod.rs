//! Stochastic dose surrogate: a relu generalized linear model over spatial
//! features, trained with a masked L1 loss and sampled with inverted
//! dropout on the decoder weights.

mod features;
mod model;
mod train;

pub use features::{featurize, FeatureConfig, FeatureSet};
pub use model::{pre_activation, predict, DropoutMask, ParamVector};
pub use train::{
    grad_check, loss_and_gradient, masked_l1, train, training_samples, Gradient, TrainConfig, TrainOutcome,
    TrainingSample,
};
