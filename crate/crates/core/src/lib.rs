//! Text-guided Patchout audio captioning, end to end on the CPU.
//!
//! The crate covers the whole desk-scale system: a mel-spectrogram frontend,
//! convolutional patch embedding with decoupled positional encodings and
//! structured Patchout, a transformer encoder-decoder conditioned on guiding
//! text, embedding-space Mixup, label-smoothed cross-entropy training, beam
//! search decoding and caption metrics (BLEU, ROUGE-L, CIDEr).

pub mod augment;
pub mod decode;
pub mod error;
pub mod frontend;
pub mod model;
pub mod optim;
pub mod patchout;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod store;
pub mod tape;
pub mod tensor;
pub mod textguide;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::{rng_from_seed, Rng};
pub use tape::{AttnMask, Tape, TensorId};
pub use tensor::Tensor;
