//! Decoding, scoring, the character language model and attention plots.

pub mod beam;
pub mod heatmap;
pub mod lm;
pub mod metrics;

pub use beam::{
    beam_search, decode_dataset, encoder_states, greedy_decode, score_decoded, tune_fusion_weight, BeamConfig,
    Decoded, Fusion, FusionTuning, Hypothesis,
};
pub use heatmap::{attention_heatmap, diagonality};
pub use lm::{train_char_lm, CharLm, CharLmConfig, LmTrainConfig, LmTrainLog};
pub use metrics::{cer, edit_distance, score, wer, word_recall, ScoreSummary, UtteranceScore};
