//! Desk-scale zero-shot human-object interaction (HOI) detection.
//!
//! The crate implements a one-stage, query-based HOI detector: a
//! convolutional/additive-attention pair encoder, human-object instance
//! decoding, verb-query feature learning, text-initialized interaction
//! classifiers, Hungarian set matching with a composite loss, and
//! HICO-DET-style mAP evaluation under seen/unseen splits. Pretrained
//! vision/text backbones are replaced by deterministic stub encoders behind
//! pluggable interfaces, so the whole pipeline trains and evaluates on
//! synthetic scenes in seconds on a CPU.

pub mod tensor;
pub mod tape;
pub mod nn;
pub mod gradcheck;
pub mod geometry;
pub mod label_space;
pub mod data;
pub mod frontend;
pub mod encoder;

pub mod error {
    use thiserror::Error;

    #[derive(Debug, Error)]
    pub enum Error {
        #[error("validation: {0}")]
        Validation(String),
        #[error("infeasible split: {0}")]
        Infeasible(String),
        #[error("io: {0}")]
        Io(#[from] std::io::Error),
        #[error("serialization: {0}")]
        Serde(#[from] serde_json::Error),
        #[error("runtime: {0}")]
        Runtime(String),
    }

    pub type Result<T> = std::result::Result<T, Error>;

    impl Error {
        pub fn validation(msg: impl Into<String>) -> Self {
            Error::Validation(msg.into())
        }

        pub fn runtime(msg: impl Into<String>) -> Self {
            Error::Runtime(msg.into())
        }
    }
}
