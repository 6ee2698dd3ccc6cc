//! Shared-weight Transformer encoder-decoder for open-vocabulary dialogue
//! state tracking.
//!
//! One parameter set serves two roles. As an encoder (bidirectional mask) it
//! reads `[CLS] previous turn [SEP] current turn [SEP]` followed by every
//! `[SLOT] domain - slot - value` tuple of the previous state and classifies a
//! state operation at each `[SLOT]`. As a decoder (left-to-right mask) it
//! generates a new value for each slot whose operation is UPDATE, attending at
//! every layer to a selected subset of the encoder's hidden states from the
//! layer below.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod param;
pub mod state;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use mask::{build_decoder_mask, build_encoder_mask, AttentionMask};
pub use model::{DstModel, EncodedInput, ReuseSpec, Selector};
pub use param::{ParamId, ParamSet, Parameter};
pub use state::{DialogueState, SlotValue, StateOperation};
pub use tensor::{Scalar, Tensor};
pub use transformer::{ModelConfig, Transformer};
