//! The context network: a three-layer perceptron mapping a summary vector to
//! a `d`-dimensional context vector, and the optional probe-side affine map.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::template::{Distribution, Template};

/// Weights are `fan_in × fan_out`; inputs are row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

/// Hidden widths for a `d`-dimensional context vector: `4d` then `2d`.
pub fn default_hidden(d: usize) -> [usize; 2] {
    [4 * d, 2 * d]
}

impl<T: Scalar> ContextMlp<T> {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(input: usize, hidden: [usize; 2], output: usize, rng: &mut impl Rng) -> Self {
        let mut layer = |fan_in: usize, fan_out: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
            let data = (0..fan_in * fan_out)
                .map(|_| T::from_f64_lossy(dist.sample(rng)))
                .collect();
            (
                Tensor::from_parts(vec![fan_in, fan_out], data),
                Tensor::zeros(&[1, fan_out]),
            )
        };
        let (w1, b1) = layer(input, hidden[0]);
        let (w2, b2) = layer(hidden[0], hidden[1]);
        let (w3, b3) = layer(hidden[1], output);
        ContextMlp { w1, b1, w2, b2, w3, b3 }
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w3.cols()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.w1.cols(), self.w2.cols()]
    }

    pub fn validate(&self) -> Result<()> {
        let chain = [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w3, &self.b3)];
        for (k, (w, b)) in chain.iter().enumerate() {
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(dim_err!(
                    "layer {} bias {:?} vs weight {:?}",
                    k + 1,
                    b.shape(),
                    w.shape()
                ));
            }
            if k > 0 && chain[k - 1].0.cols() != w.rows() {
                return Err(dim_err!(
                    "layer {} input {} != previous output {}",
                    k + 1,
                    w.rows(),
                    chain[k - 1].0.cols()
                ));
            }
        }
        Ok(())
    }

    /// Forward pass: `relu(relu(s·W1 + b1)·W2 + b2)·W3 + b3`.
    pub fn context_vector(&self, summary: &[T]) -> Result<Vec<T>> {
        if summary.len() != self.input_width() {
            return Err(dim_err!(
                "summary has length {}, context network expects {}",
                summary.len(),
                self.input_width()
            ));
        }
        let s = Tensor::from_parts(vec![1, summary.len()], summary.to_vec());
        let relu = |t: Tensor<T>| t.map(|v| v.max(T::zero()));
        let h1 = relu(s.matmul(&self.w1)?.zip_map(&self.b1, |a, b| a + b));
        let h2 = relu(h1.matmul(&self.w2)?.zip_map(&self.b2, |a, b| a + b));
        let out = h2.matmul(&self.w3)?.zip_map(&self.b3, |a, b| a + b);
        out.check_finite("context network")?;
        Ok(out.into_data())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

pub(crate) fn context_on_tape<T: Scalar>(tape: &mut Tape<T>, summary: Var, p: &MlpVars) -> Result<Var> {
    if tape.value(summary).cols() != tape.value(p.w1).rows() {
        return Err(dim_err!(
            "summary has length {}, context network expects {}",
            tape.value(summary).cols(),
            tape.value(p.w1).rows()
        ));
    }
    let z1 = tape.matmul(summary, p.w1)?;
    let z1 = tape.add(z1, p.b1)?;
    let h1 = tape.relu(z1)?;
    let z2 = tape.matmul(h1, p.w2)?;
    let z2 = tape.add(z2, p.b2)?;
    let h2 = tape.relu(z2)?;
    let z3 = tape.matmul(h2, p.w3)?;
    tape.add(z3, p.b3)
}

/// Per-embedding affine map `y = x·W + b` applied to probe templates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTransform<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ProbeTransform<T> {
    pub fn identity(d: usize) -> Self {
        ProbeTransform {
            w: Tensor::identity(d),
            b: Tensor::zeros(&[1, d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w.cols() != d || self.b.rows() != 1 || self.b.cols() != d {
            return Err(dim_err!(
                "probe transform shapes {:?} / {:?}",
                self.w.shape(),
                self.b.shape()
            ));
        }
        Ok(())
    }

    /// Maps every row of `s` (`M × d`).
    pub fn apply(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.cols() != self.dim() {
            return Err(dim_err!(
                "probe rows have width {}, transform expects {}",
                s.cols(),
                self.dim()
            ));
        }
        let mut out = s.matmul(&self.w)?;
        let d = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + self.b.data()[i % d];
        }
        out.check_finite("probe transform")?;
        Ok(out)
    }

    /// Applies the map to a probe template's embedding matrix.
    pub fn transform_probe(&self, t: &Template<T>) -> Result<Tensor<T>> {
        if t.distribution != Distribution::Probe {
            return Err(Error::Usage(format!(
                "probe transform applied to {} template {}",
                t.distribution, t.id
            )));
        }
        self.apply(&t.matrix()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProbeVars {
    pub w: Var,
    pub b: Var,
}

pub(crate) fn probe_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ProbeVars) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    tape.add_row(y, p.b)
}
