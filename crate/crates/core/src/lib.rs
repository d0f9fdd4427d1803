//! Deep multi-view clustering with learned fusion weights (SiMVC) and
//! selective contrastive alignment (CoMVC), built on a small reverse-mode
//! autodiff engine.

pub mod autodiff;
mod binfmt;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod propcheck;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
