//! Desk-scale retrieval-augmented masked language modelling.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: dense tensors and a reverse-mode autodiff graph.
//! * [`textcorpus`]: corpus files, vocabulary, salient-span tagging, masking and ICT examples.
//! * [`retriever`]: the two-tower dense retriever `p(z|x)`.
//! * [`mipsindex`]: exhaustive / IVF inner-product search and the index refresh protocol.
//! * [`reader`]: the knowledge-augmented encoder `p(y|z,x)` with MLM and span heads.
//! * [`trainer`]: marginal-likelihood training, ICT warm-start, fine-tuning, checkpoints.
//! * [`evalkit`]: retrieval utility, recall@k, exact match, corpus swap, ablations.
//! * [`synth`]: generated fact corpora with known ground truth.
//!
//! All model math is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root pin the double-precision instantiation used by the trainer and CLI.

pub mod diffcore;
pub mod evalkit;
pub mod mipsindex;
pub mod reader;
pub mod retriever;
pub mod rng;
pub mod synth;
pub mod textcorpus;
pub mod trainer;

mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph64 = diffcore::Graph<f64>;
pub type Graph32 = diffcore::Graph<f32>;
pub type RetrieverParams64 = retriever::RetrieverParams<f64>;
pub type ReaderParams64 = reader::ReaderParams<f64>;
pub type IndexSnapshot64 = mipsindex::IndexSnapshot<f64>;
pub type ParamStore64 = trainer::ParamStore<f64>;
