pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod ops;
pub mod output;
pub mod parsing;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod trainer;
pub mod synth;
pub mod retrieval;
pub mod pipeline;

/// Compiles and runs the code blocks of the guide in `book/`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/parsing.md")]
    mod parsing {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/results.md")]
    mod results {}
}
