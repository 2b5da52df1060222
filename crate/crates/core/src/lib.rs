//! Context-restoration self-supervised pretraining on CT liver slices and
//! local-binary-pattern fine-tuning for patient-level fibrosis and NAS
//! scoring, with repeated stratified cross-validated AUC evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training.

pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod io;
pub mod lbp;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod pretrain;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;

pub type Slice = preprocess::GraySlice<Real>;
pub type Slice64 = preprocess::GraySlice<f64>;
pub type Tensor32 = tensor::Tensor<Real>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Encoder32 = nets::Encoder<Real>;
pub type Decoder32 = nets::Decoder<Real>;
pub type Discriminator32 = nets::Discriminator<Real>;
pub type Classifier32 = nets::PatientClassifier<Real>;
