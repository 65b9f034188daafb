//! Differentiable building blocks shared by the recognizer, the text-to-encoder
//! model, and the character language model.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{Grads, Graph, SeqLayout, Var};
pub use layers::{
    dropout_mask, AttentionMemory, AttentionMode, AttentionState, Blstm, BlstmpEncoder,
    Activation, ConvBnBlock, Embedding, Linear, LocationAttention, LstmCell, Mode, RunningStatsUpdate, Session,
};
pub use params::{Param, ParamId, ParamKind, ParamStore};
