//! Feedforward regression network that estimates the amplified excess
//! noise `a^2 t^2 xi` from six summary statistics of the estimation set.

mod features;
mod io;
mod model;
mod train;

pub use features::{extract_features, FeatureVector, N_FEATURES};
pub use io::{declared_param_count, load_model, model_checksum, read_model, save_model, write_model, MODEL_FORMAT_VERSION};
pub(crate) use io::{read_f64s, split_payload, verify_container};
pub use model::{sigma2_from_output, softplus, sigmoid, Activation, Architecture, MlpModel, Tape};
pub use train::{loss, train, AdamW, EpochRecord, Sample, TrainConfig, TrainingLog};
