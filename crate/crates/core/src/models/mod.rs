//! Encoder, heads, causal bottleneck, and the training loops that tie them
//! together.

pub mod bottleneck;
pub mod encoder;
pub mod heads;
pub mod layers;
pub mod train;

pub use bottleneck::{
    bottleneck_forward, covariance_penalty, covariance_penalty_value, BottleneckOutputs,
    CausalBottleneckParams,
};
pub use encoder::{encode, EncoderParams, EncoderShape};
pub use heads::{
    summed_cross_entropy, AdversaryParams, ProjectionHead, ADVERSARY_HIDDEN, PROJECTION_DIM,
    PROJECTION_HIDDEN,
};
pub use layers::{
    bind_tensor, stack_rows, xavier_uniform, HiddenLayerClassifier, Linear, ParamLookup, ParamTree,
};
pub use train::{
    embed_set, train, train_adversarial, train_baseline, train_bottleneck, BottleneckConfig,
    EpochLoss, LossTrace, ModelInput, TrainConfig, TrainItem, TrainMode, TrainedModel, TrainingSet,
    ViewConfig, BOTTLENECK_LR, CONTRASTIVE_LR,
};
