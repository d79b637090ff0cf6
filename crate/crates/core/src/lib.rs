//! Document-image classification toolkit: a from-scratch CNN stack with
//! the preprocessing, augmentation, training, evaluation and introspection
//! machinery needed to study document classifiers at desk scale.

pub mod augment;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod introspect;
pub mod layers;
pub mod network;
pub mod pipeline;
pub mod synthdoc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
