//! Conditional aggregation of embedding templates.
//!
//! A template is an unordered set of embeddings of one subject. The model
//! summarizes the set, maps the summary to a context vector and pools the
//! set with weights given by each embedding's similarity to that context.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common choice.

// Negated comparisons are how NaN is rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod context;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod scalar;
pub mod summary;
pub mod template;
pub mod train;

pub use error::{Error, Result};
pub use model::{ConanModel, ModelConfig, ParamGroup};
pub use numerics::{Tape, Tensor, Var};
pub use pooling::{aggregate_template, AggregationResult, Aggregator};
pub use scalar::Scalar;
pub use summary::{Block, SummaryLayout};
pub use template::{Dataset, Distribution, Embedding, Split, Template};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = ConanModel<f64>;
pub type Model32 = ConanModel<f32>;
pub type Template64 = Template<f64>;
pub type Dataset64 = Dataset<f64>;
