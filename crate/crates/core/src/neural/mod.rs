//! From-scratch many-to-one recurrent networks in 64-bit floats: vanilla RNN
//! and LSTM cells, stacking, BPTT, MAE/CCE, Adam and a versioned weight format.

mod adam;
mod cell;
mod gradcheck;
mod loss;
mod network;
mod serialize;
mod spec;
mod tensor;
mod train;

use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use cell::{lstm_cell_forward, rnn_cell_forward, LstmState};
pub use gradcheck::{finite_difference_check, relative_error};
pub use loss::{cce_loss, mae_loss, LossKind, CCE_EPS};
pub use network::{backprop_through_time, batch_loss, forward_sequence, ForwardCache, Output, Target};
pub use serialize::{deserialize_model, serialize_model, FORMAT_VERSION};
pub use spec::{
    HeadKind, HeadParams, LayerKind, LayerParams, LayerSpec, LstmLayerParams, NetworkParams, NetworkSpec, RnnLayerParams,
    FORGET_BIAS_INIT,
};
pub use tensor::{sigmoid, softmax, Matrix};
pub use train::{
    evaluate, predict, predict_batch, train, MetricsReport, ModelArtifact, Normalization, TrainHyper, TrainingExample,
    DEFAULT_BATCH_SIZE, GRAD_CLIP_NORM,
};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("bad probability distribution: {0}")]
    BadDistribution(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("unsupported weight format `{0}`")]
    VersionMismatch(String),
    #[error("weights do not match the manifest: {0}")]
    ManifestShapeMismatch(String),
    #[error("malformed model meta: {0}")]
    BadMeta(String),
}
