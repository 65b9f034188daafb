//! Synthetic corpus, acoustic features, manifests and batching.

pub mod audio;
pub mod batch;
pub mod features;
pub mod manifest;
pub mod synth;
pub mod toy;
pub mod tensor_io;
pub mod vocab;

pub use batch::{make_batches, Batch, BatchInput, Dataset, Example, InputKind, InputSource, UtteranceInput};
pub use features::{logmel, AcousticFeatureSequence, FrameConfig, LogMel};
pub use manifest::{load_manifest, Entry, EntryKind, Manifest};
pub use synth::{synth_utterance, SynthConfig, Waveform};
pub use vocab::Vocabulary;
