//! CPU implementation of a UNet segmentation network and a loss-prediction
//! head, with hand-written backward passes.
//!
//! All layers are generic over [`Scalar`] so the same code trains in `f32`
//! and can be checked against finite differences in `f64`.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod loss;
pub mod loss_predictor;
pub mod objective;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use error::ModelError;
pub use layers::Mode;
pub use loss::{ranking_loss, softmax_channels, softmax_cross_entropy, CrossEntropy, RankingLoss};
pub use loss_predictor::{LossPredictor, LossPredictorConfig};
pub use objective::{joint_objective, ObjectiveValue};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Param};
pub use unet::{ForwardOutput, SegModelConfig, UNet};
