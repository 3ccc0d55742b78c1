//! Multi-head scaled dot-product attention over a template with one prepended
//! distribution token.
//!
//! The token row is the learnable distribution-type embedding of the
//! template's side (probe or gallery). Only the token's output row, `C`, is
//! consumed downstream. No positional encoding is used, so `C` is invariant to
//! the order of the template's rows.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::template::Distribution;

/// Projections for `heads` heads of width `d / heads`, stored as `d × d`
/// matrices whose column block `h` belongs to head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub dte_probe: Tensor<T>,
    pub dte_gallery: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Projections ~ N(0, 1/d), tokens ~ N(0, 0.02²).
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d, heads)?;
        let proj = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let tok = Normal::new(0.0, 0.02).expect("valid normal");
        let mut draw = |n: usize, dist: &Normal<f64>, rows: usize| {
            let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
            Tensor::from_parts(vec![rows, n / rows], data)
        };
        Ok(AttentionParams {
            heads,
            w_q: draw(d * d, &proj, d),
            w_k: draw(d * d, &proj, d),
            w_v: draw(d * d, &proj, d),
            w_o: draw(d * d, &proj, d),
            dte_probe: draw(d, &tok, 1),
            dte_gallery: draw(d, &tok, 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn dte(&self, dist: Distribution) -> &Tensor<T> {
        match dist {
            Distribution::Probe => &self.dte_probe,
            Distribution::Gallery => &self.dte_gallery,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_heads(d, self.heads)?;
        for (name, t, r, c) in [
            ("w_q", &self.w_q, d, d),
            ("w_k", &self.w_k, d, d),
            ("w_v", &self.w_v, d, d),
            ("w_o", &self.w_o, d, d),
            ("dte_probe", &self.dte_probe, 1, d),
            ("dte_gallery", &self.dte_gallery, 1, d),
        ] {
            if t.rows() != r || t.cols() != c {
                return Err(dim_err!(
                    "attention {name} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                ));
            }
            t.check_finite(name)?;
        }
        Ok(())
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Parameter(format!(
            "dimension {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Tape handles for [`AttentionParams`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub dte_probe: Var,
    pub dte_gallery: Var,
}

impl AttentionVars {
    pub fn dte(&self, dist: Distribution) -> Var {
        match dist {
            Distribution::Probe => self.dte_probe,
            Distribution::Gallery => self.dte_gallery,
        }
    }
}

/// Output of one attention pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionOut {
    /// `1 × d` token output.
    pub attended: Var,
}

/// Records attention of `[token; x]` on the tape. Returns the token row of
/// the output and the per-head `(N+1) × (N+1)` weight matrices.
pub(crate) fn attend_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    token: Var,
    p: &AttentionVars,
) -> Result<(AttentionOut, Vec<Var>)> {
    let d = tape.value(x).cols();
    if tape.value(token).cols() != d || tape.value(token).rows() != 1 {
        return Err(dim_err!(
            "token shape {:?} does not match template width {d}",
            tape.value(token).shape()
        ));
    }
    if tape.value(p.w_q).rows() != d {
        return Err(dim_err!(
            "attention expects width {}, template has {d}",
            tape.value(p.w_q).rows()
        ));
    }
    check_heads(d, p.heads)?;
    let dh = d / p.heads;
    let scale = T::one() / T::from_count(dh).sqrt();
    let tokens = tape.concat_rows(&[token, x])?;
    let q = tape.matmul(tokens, p.w_q)?;
    let k = tape.matmul(tokens, p.w_k)?;
    let v = tape.matmul(tokens, p.w_v)?;
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let a = tape.softmax_rows(scores, T::one())?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let joined = tape.concat_cols(&outs)?;
    let projected = tape.matmul(joined, p.w_o)?;
    let attended = tape.slice_rows(projected, 0, 1)?;
    Ok((AttentionOut { attended }, weights))
}

/// Attention token output `C` for template rows `s` (`N × d`), plus the
/// per-head attention matrices.
pub fn attend_token<T: Scalar>(
    s: &Tensor<T>,
    distribution: Distribution,
    params: &AttentionParams<T>,
) -> Result<(Vec<T>, Vec<Tensor<T>>)> {
    params.validate()?;
    if s.rows() == 0 {
        return Err(Error::Parameter("attention over an empty template".into()));
    }
    let mut tape = Tape::new();
    let vars = constant_vars(&mut tape, params);
    let x = tape.constant(s.clone());
    let (out, w) = attend_on_tape(&mut tape, x, vars.dte(distribution), &vars)?;
    Ok((
        tape.value(out.attended).data().to_vec(),
        w.into_iter().map(|v| tape.value(v).clone()).collect(),
    ))
}

pub(crate) fn constant_vars<T: Scalar>(tape: &mut Tape<T>, p: &AttentionParams<T>) -> AttentionVars {
    AttentionVars {
        heads: p.heads,
        w_q: tape.constant(p.w_q.clone()),
        w_k: tape.constant(p.w_k.clone()),
        w_v: tape.constant(p.w_v.clone()),
        w_o: tape.constant(p.w_o.clone()),
        dte_probe: tape.constant(p.dte_probe.clone()),
        dte_gallery: tape.constant(p.dte_gallery.clone()),
    }
}

/// Loop-based reference for [`attend_token`]: only the token's query row is
/// formed, and every dot product is written out explicitly.
pub fn attention_oracle<T: Scalar>(s: &Tensor<T>, token: &[T], params: &AttentionParams<T>) -> Result<Vec<T>> {
    params.validate()?;
    let d = params.dim();
    if s.cols() != d || token.len() != d {
        return Err(dim_err!("oracle inputs do not match width {d}"));
    }
    let heads = params.heads;
    let dh = d / heads;
    let n = s.rows() + 1;
    let row = |i: usize| -> Vec<T> {
        if i == 0 {
            token.to_vec()
        } else {
            s.row_slice(i - 1).to_vec()
        }
    };
    let project = |x: &[T], w: &Tensor<T>, col: usize| -> T {
        let mut acc = T::zero();
        for (r, &xv) in x.iter().enumerate() {
            acc = acc + xv * w.get(r, col);
        }
        acc
    };
    let t0 = row(0);
    let mut concat = vec![T::zero(); d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let q: Vec<T> = cols.clone().map(|c| project(&t0, &params.w_q, c)).collect();
        let mut scores = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for j in 0..n {
            let tj = row(j);
            let mut dotp = T::zero();
            for (qi, c) in q.iter().zip(cols.clone()) {
                dotp = dotp + *qi * project(&tj, &params.w_k, c);
            }
            scores.push(dotp / T::from_count(dh).sqrt());
            values.push(cols.clone().map(|c| project(&tj, &params.w_v, c)).collect::<Vec<T>>());
        }
        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scores.iter().map(|&x| (x - m).exp()).collect();
        let total: T = exps.iter().copied().fold(T::zero(), |a, b| a + b);
        for (j, e) in exps.iter().enumerate() {
            let a = *e / total;
            for (k, c) in cols.clone().enumerate() {
                concat[c] = concat[c] + a * values[j][k];
            }
        }
    }
    Ok((0..d).map(|c| project(&concat, &params.w_o, c)).collect())
}
