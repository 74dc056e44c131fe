//! Temporal single-shot detection with attentional ConvLSTM units and an
//! online tubelet tracker, all on a dense f64 tensor core with reverse-mode
//! gradients.

pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod ota;
pub mod postproc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
