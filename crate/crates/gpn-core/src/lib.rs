//! Graph meta-learning for few-shot classification: class prototypes are
//! refined by gated multi-head attention message passing over a class
//! taxonomy, trained episodically and evaluated with a soft
//! nearest-prototype classifier.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod store;
pub mod gradcheck;
pub mod graph;
pub mod encoder;
pub mod propagation;
pub mod memory;
pub mod synth;
pub mod trainer;
pub mod evaluator;

pub use error::{Error, Result};
pub use graph::{CategoryGraph, ClassId, PropagationPathway};
pub use store::{AdamConfig, ParameterStore};
pub use tensor::{Shape, Tensor};
