//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A scalar function of a list of parameter tensors with an analytic
/// gradient.
pub trait Objective {
    fn value(&mut self, params: &[Tensor<f64>]) -> Result<f64>;

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

/// Wraps a graph builder as an [`Objective`]: the builder receives one
/// parameter [`Var`] per tensor and returns the scalar root.
pub struct TapeObjective<F>(pub F);

impl<F> TapeObjective<F>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn run(&mut self, params: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = (self.0)(&mut tape, &vars)?;
        Ok((tape, vars, root))
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn value(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        let (tape, _, root) = self.run(params)?;
        Ok(tape.value(root).item())
    }

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (tape, vars, root) = self.run(params)?;
        let grads = tape.backward(root)?;
        Ok(vars
            .iter()
            .zip(params)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&[p.rows(), p.cols()]))
            })
            .collect())
    }
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) − f(p−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub stencil: Stencil,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Tensors larger than this are checked on a seeded uniform sample of
    /// this many entries; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub sample_seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            stencil: Stencil::FivePoint,
            step: 5e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
            sample_seed: 0,
        }
    }
}

/// Largest discrepancy found by [`fd_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdWorst {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Per-tensor maximum relative error.
    pub per_tensor: Vec<f64>,
    pub worst: Option<FdWorst>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `f` at `params` against central
/// differences, entry by entry.
pub fn fd_check(f: &mut impl Objective, params: &[Tensor<f64>], opts: FdOptions) -> Result<FdReport> {
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Evaluation(format!(
            "objective returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut report = FdReport {
        checked: 0,
        max_rel_error: 0.0,
        per_tensor: vec![0.0; params.len()],
        worst: None,
        passed: true,
    };
    for (ti, p) in params.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < p.len() => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(opts.sample_seed ^ (ti as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut picked = rand::seq::index::sample(&mut rng, p.len(), m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..p.len()).collect(),
        };
        for ei in entries {
            let orig = p.data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[ei] = orig + offset;
                let v = f.value(&work)?;
                if !v.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite objective perturbing tensor {ti} entry {ei}"
                    )));
                }
                Ok(v)
            };
            let h = opts.step;
            let numeric = match opts.stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            work[ti].data_mut()[ei] = orig;
            let a = analytic[ti].data()[ei];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            report.per_tensor[ti] = report.per_tensor[ti].max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(FdWorst {
                    tensor: ti,
                    element: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact_up_to_rounding() {
        // f(x) = xᵀ A x with A symmetric positive definite.
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.1, 0.5, 3.0, -0.2, 0.1, -0.2, 1.5]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.7]).unwrap();
        let mut obj = TapeObjective(|tape: &mut Tape<f64>, v: &[Var]| {
            let am = tape.constant(a.clone());
            let ax = tape.matmul(v[0], am)?;
            let xax = tape.mul(ax, v[0])?;
            tape.sum(xax)
        });
        for stencil in [Stencil::ThreePoint, Stencil::FivePoint] {
            let opts = FdOptions {
                stencil,
                tolerance: 1e-8,
                ..FdOptions::default()
            };
            let report = fd_check(&mut obj, std::slice::from_ref(&x), opts).unwrap();
            assert!(report.passed, "{report:?}");
            assert_eq!(report.checked, 3);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl Objective for Wrong {
            fn value(&mut self, p: &[Tensor<f64>]) -> Result<f64> {
                Ok(p[0].item().powi(3))
            }
            fn gradient(&mut self, p: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
                Ok(vec![Tensor::scalar(2.0 * p[0].item())?])
            }
        }
        let report = fd_check(&mut Wrong, &[Tensor::scalar(1.5).unwrap()], FdOptions::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.unwrap().element, 0);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        struct Blowup;
        impl Objective for Blowup {
            fn value(&mut self, p: &[Tensor<f64>]) -> Result<f64> {
                Ok(1.0 / (p[0].item() - FdOptions::default().step))
            }
            fn gradient(&mut self, _: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
                Ok(vec![Tensor::scalar(0.0)?])
            }
        }
        let err = fd_check(&mut Blowup, &[Tensor::scalar(0.0).unwrap()], FdOptions::default());
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    #[test]
    fn sampling_caps_large_tensors_only() {
        let mut obj = TapeObjective(|tape: &mut Tape<f64>, v: &[Var]| {
            let a = tape.mul(v[0], v[0])?;
            let b = tape.sum(a)?;
            let c = tape.sum(v[1])?;
            tape.add(b, c)
        });
        let big = Tensor::matrix(10, 10, (0..100).map(|i| i as f64 / 50.0).collect()).unwrap();
        let small = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let opts = FdOptions {
            max_entries: Some(7),
            ..FdOptions::default()
        };
        let report = fd_check(&mut obj, &[big, small], opts).unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.passed, "{report:?}");
    }
}
