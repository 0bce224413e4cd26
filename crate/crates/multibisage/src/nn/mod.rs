//! Minimal dense tensor math with reverse-mode gradients.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{attention, ffn_forward, grad_check, l2_normalize, multihead, AttentionParams};
pub use tape::{Gradients, NodeId, SeqPart, Tape, EPS_NORM};
pub use tensor::{NnError, Tensor};
