//! Context-conditioned weighted pooling.

use crate::error::{dim_err, Error, Result};
use crate::model::{forward_template, ConanModel, ModelVars};
use crate::numerics::{cosine_similarity, softmax, Axis, Tape, Tensor};
use crate::scalar::Scalar;
use crate::template::Template;

/// Output of aggregating one template.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult<T> {
    /// Weighted sum of the (possibly probe-transformed) embeddings. Not
    /// normalized.
    pub pooled: Vec<T>,
    pub weights: Vec<T>,
    pub similarities: Vec<T>,
    pub context: Vec<T>,
    pub temperature: f64,
}

/// Cosine similarity of each row of `s` with `context`.
pub fn similarities<T: Scalar>(s: &Tensor<T>, context: &[T]) -> Result<Vec<T>> {
    if s.cols() != context.len() {
        return Err(dim_err!("rows have width {}, context has {}", s.cols(), context.len()));
    }
    (0..s.rows())
        .map(|r| cosine_similarity(s.row_slice(r), context))
        .collect()
}

/// `softmax(sims / temperature)`.
pub fn softmax_weights<T: Scalar>(sims: &[T], temperature: f64) -> Result<Vec<T>> {
    if sims.is_empty() {
        return Err(Error::Parameter("no similarities to weight".into()));
    }
    let row = Tensor::row(sims.to_vec())?;
    Ok(softmax(&row, Axis::Rows, T::from_f64_lossy(temperature))?.into_data())
}

/// `Σ wᵢ sᵢ` over the rows of `s`.
pub fn weighted_sum<T: Scalar>(s: &Tensor<T>, weights: &[T]) -> Result<Vec<T>> {
    if weights.len() != s.rows() {
        return Err(dim_err!("{} weights for {} rows", weights.len(), s.rows()));
    }
    let mut out = vec![T::zero(); s.cols()];
    for (r, &w) in weights.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(s.row_slice(r)) {
            *o = *o + w * x;
        }
    }
    Ok(out)
}

/// Pools `s` given an already computed context vector.
pub fn pool_with_context<T: Scalar>(s: &Tensor<T>, context: &[T], temperature: f64) -> Result<AggregationResult<T>> {
    let sims = similarities(s, context)?;
    let weights = softmax_weights(&sims, temperature)?;
    let pooled = weighted_sum(s, &weights)?;
    Ok(AggregationResult {
        pooled,
        weights,
        similarities: sims,
        context: context.to_vec(),
        temperature,
    })
}

/// Inference-only aggregation. Keeps the model parameters on a constant tape
/// and rewinds it after every template.
pub struct Aggregator<'m, T: Scalar> {
    model: &'m ConanModel<T>,
    tape: Tape<T>,
    vars: ModelVars,
    mark: usize,
}

impl<'m, T: Scalar> Aggregator<'m, T> {
    pub fn new(model: &'m ConanModel<T>) -> Self {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model, false);
        let mark = tape.len();
        Aggregator {
            model,
            tape,
            vars,
            mark,
        }
    }

    pub fn aggregate(&mut self, t: &Template<T>) -> Result<AggregationResult<T>> {
        self.tape.truncate(self.mark);
        let x = t.matrix()?;
        let f = forward_template(&mut self.tape, &self.vars, &self.model.config, &x, t.distribution)?;
        let tape = &self.tape;
        Ok(AggregationResult {
            pooled: tape.value(f.pooled).data().to_vec(),
            weights: tape.value(f.weights).data().to_vec(),
            similarities: tape.value(f.similarities).data().to_vec(),
            context: tape.value(f.context).data().to_vec(),
            temperature: self.model.config.temperature,
        })
    }
}

/// Aggregates a single template with `model`.
pub fn aggregate_template<T: Scalar>(model: &ConanModel<T>, t: &Template<T>) -> Result<AggregationResult<T>> {
    Aggregator::new(model).aggregate(t)
}
