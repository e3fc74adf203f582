//! Source-attribution classifiers over pre-extracted speech representations:
//! a small reverse-mode tensor library, FCN/CNN downstreams and a two-branch
//! fusion network trained with cross-entropy plus a Rényi-divergence
//! alignment term, with the data formats, metrics and training loop around them.

mod binfmt;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use tensor::{Element, Tape, Tensor, Var};
