//! Desk-scale neural machine translation with checkpoint specialization:
//! resume SGD from a trained generic model on a small in-domain corpus.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod model;
pub mod nnet;
pub mod pipeline;
pub mod subword;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
