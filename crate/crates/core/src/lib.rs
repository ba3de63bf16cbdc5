//! Retrieval-augmented charge prediction harness.

pub mod bm25;
pub mod casebase;
pub mod corpus;
pub mod error;
pub mod evaluation;
mod fsutil;
pub mod inference;
pub mod llm_gateway;
pub mod prompting;
pub mod retrieval_lab;
pub mod scalar;

pub use error::{Error, Result};
pub use fsutil::{sha256_hex, write_atomic};
pub use scalar::Scalar;

pub type Index = bm25::Bm25Index<f64>;
pub type Index32 = bm25::Bm25Index<f32>;
pub type Params = bm25::Bm25Params<f64>;
pub type Hit = bm25::RankedHit<f64>;
pub type Base = casebase::CaseBase<f64>;
pub type CasePrediction = inference::Prediction<f64>;
pub type LabelParser = inference::Parser<f64>;
