//! Back-translation-style data augmentation for attention-based end-to-end
//! speech recognition.
//!
//! The pipeline trains a character-level recognizer on paired audio, trains a
//! text-to-encoder model that predicts the recognizer's encoder states from
//! text, generates states for unpaired text, and retrains the recognizer's
//! decoder on the mixture.

pub mod asr;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod tensor;
pub mod tte;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
