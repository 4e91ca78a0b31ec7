//! APAM: contrastive domain-adaptive pre-training plus bilevel
//! meta-learned instance reweighting for text classification under
//! long-tailed class distributions and noisy labels.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod pretrain;
pub mod real;
pub mod tensor;
pub mod textmodel;

pub use error::{ApamError, Result};
pub use real::Real;
pub use tensor::Tensor;
