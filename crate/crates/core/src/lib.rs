pub mod autograd;
pub mod data;
pub mod edm;
pub mod error;
pub mod forcing;
pub mod guidance;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod trainer;

pub use edm::{Denoiser, Edm, EdmParams, NetModel, Predictor, SigmaGrid};
pub use error::{Error, ErrorKind, Result};
pub use forcing::{RolloutConfig, RolloutState, SchedulingMatrix};
pub use guidance::GuidanceWeights;
pub use net::{parameter_gradients, NetConfig, NetInput, NetWeights, UNet};
pub use rng::Rng;
pub use scalar::Scalar;
pub use sequence::{
    sinusoidal_embed, stack_frames, unstack_frames, ConditionBundle, ConditionChannel,
    LatentSequence, StackedSequence,
};
pub use tensor::Tensor;

/// Single-precision network.
pub type UNet32 = UNet<f32>;
/// Double-precision network.
pub type UNet64 = UNet<f64>;
