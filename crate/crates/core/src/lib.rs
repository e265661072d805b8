//! Evidence-based lesion classification by retrieval.
//!
//! A small convolutional network is trained with a triplet hinge objective
//! under disease and human-similarity supervision. Its global-average-pooled
//! embedding drives exact k-nearest-neighbor search; each retrieved neighbor is
//! backed by a pair of activation maps showing which image regions account for
//! the query-result distance.

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod kv;
pub mod labels;
pub mod model;
pub mod ops;
pub mod params;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod triplet;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
