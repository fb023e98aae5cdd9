//! Decoding which of two concurrent speech streams a listener attends, from
//! EEG alone, with a dual-encoder similarity classifier.

pub mod attribution;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod feature;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use feature::{read_feature_file, write_feature_file, FeatureTensor};
pub use tensor::{Gradients, Tape, Tensor, Var};
