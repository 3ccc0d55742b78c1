//! Supervised contrastive loss over aggregated templates, with an optional
//! FIFO memory of detached aggregates from earlier batches.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_MEMORY_CAPACITY: usize = 512;

/// Ring buffer of unit-norm aggregates and their subject labels. Entries are
/// plain values and never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBatchMemory<T> {
    capacity: usize,
    entries: VecDeque<(Vec<T>, String)>,
}

impl<T: Scalar> CrossBatchMemory<T> {
    /// Capacity 0 disables the memory.
    pub fn new(capacity: usize) -> Self {
        CrossBatchMemory {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (&[T], &str)> {
        self.entries.iter().map(|(z, s)| (z.as_slice(), s.as_str()))
    }

    /// Appends one entry, evicting the oldest beyond capacity.
    pub fn push(&mut self, z: Vec<T>, subject: impl Into<String>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((z, subject.into()));
    }

    /// Appends every row of `z` (already normalized) in order.
    pub fn update(&mut self, z: &Tensor<T>, subjects: &[String]) -> Result<()> {
        if z.rows() != subjects.len() {
            return Err(dim_err!("{} rows but {} labels", z.rows(), subjects.len()));
        }
        for (r, s) in subjects.iter().enumerate() {
            self.push(z.row_slice(r).to_vec(), s.clone());
        }
        Ok(())
    }

    fn matrix(&self, d: usize) -> Result<Option<Tensor<T>>> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let mut data = Vec::with_capacity(self.entries.len() * d);
        for (z, _) in &self.entries {
            if z.len() != d {
                return Err(dim_err!("memory entry has width {}, batch has {}", z.len(), d));
            }
            data.extend_from_slice(z);
        }
        Tensor::matrix(self.entries.len(), d, data).map(Some)
    }
}

/// Nodes produced by [`supcon_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct SupconOut {
    /// Scalar loss.
    pub loss: Var,
    /// `B × d` normalized batch entries, for the memory update.
    pub normalized: Var,
    /// The memory entries as a constant leaf, when the memory is non-empty.
    pub memory: Option<Var>,
}

/// Records the loss for `z` (`B × d`, unnormalized rows) on the tape.
///
/// Every row and every memory entry takes part in the positive and contrast
/// sets of the others. Only rows flagged in `anchors` contribute a loss term;
/// the loss is the mean over those anchors.
pub fn supcon_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    subjects: &[String],
    anchors: &[bool],
    memory: &CrossBatchMemory<T>,
    tau: f64,
) -> Result<SupconOut> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "contrastive temperature must be positive, got {tau}"
        )));
    }
    let (b, d) = (tape.value(z).rows(), tape.value(z).cols());
    if subjects.len() != b || anchors.len() != b {
        return Err(dim_err!(
            "{} rows, {} labels, {} anchor flags",
            b,
            subjects.len(),
            anchors.len()
        ));
    }
    let n_anchors = anchors.iter().filter(|&&a| a).count();
    if n_anchors == 0 {
        return Err(Error::Batch("batch has no anchors".into()));
    }
    let labels: Vec<&str> = subjects
        .iter()
        .map(String::as_str)
        .chain(memory.entries().map(|(_, s)| s))
        .collect();
    let distinct: BTreeSet<&str> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Batch("batch and memory contain fewer than two subjects".into()));
    }
    let total = labels.len();

    // Constant masks: contrast set excludes self; positive weights are
    // 1/|P(i)| on same-subject entries other than self.
    let mut contrast = vec![T::one(); b * total];
    let mut positive = vec![T::zero(); b * total];
    let mut weight = vec![T::zero(); b];
    for i in 0..b {
        contrast[i * total + i] = T::zero();
        let pos: Vec<usize> = (0..total).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if anchors[i] {
            if pos.is_empty() {
                return Err(Error::Batch(format!(
                    "anchor {i} (subject {}) has no positive",
                    labels[i]
                )));
            }
            weight[i] = T::one() / T::from_count(n_anchors);
        }
        if !pos.is_empty() {
            let share = T::one() / T::from_count(pos.len());
            for j in pos {
                positive[i * total + j] = share;
            }
        }
    }

    let normalized = tape.normalize_rows(z)?;
    let memory_var = memory.matrix(d)?.map(|m| tape.constant(m));
    let all = match memory_var {
        Some(m) => tape.concat_rows(&[normalized, m])?,
        None => normalized,
    };
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let dots = tape.matmul_bt(normalized, all)?;
    let logits = tape.scale(dots, inv_tau)?;

    let pos_w = tape.constant(Tensor::from_parts(vec![b, total], positive));
    let pos_terms = tape.mul(logits, pos_w)?;
    let pos_mean = tape.sum_cols(pos_terms)?;

    // Logits are at most 1/τ, so shifting by it keeps every exponent ≤ 0.
    let shifted = tape.shift(logits, -inv_tau)?;
    let e = tape.exp(shifted)?;
    let mask = tape.constant(Tensor::from_parts(vec![b, total], contrast));
    let masked = tape.mul(e, mask)?;
    let denom = tape.sum_cols(masked)?;
    let log_denom = tape.log(denom)?;

    let per_anchor = tape.sub(log_denom, pos_mean)?;
    let w = tape.constant(Tensor::from_parts(vec![b, 1], weight));
    let weighted = tape.mul(per_anchor, w)?;
    let mean = tape.sum(weighted)?;
    let loss = tape.shift(mean, inv_tau)?;
    Ok(SupconOut {
        loss,
        normalized,
        memory: memory_var,
    })
}

/// Loss value with every row of `z` an anchor.
pub fn supcon<T: Scalar>(z: &Tensor<T>, subjects: &[String], memory: &CrossBatchMemory<T>, tau: f64) -> Result<T> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = supcon_on_tape(&mut tape, zv, subjects, &vec![true; z.rows()], memory, tau)?;
    Ok(tape.value(out.loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Direct evaluation of the per-anchor formula.
    fn brute_force(z: &[Vec<f64>], l: &[&str], tau: f64) -> f64 {
        let unit: Vec<Vec<f64>> = z
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..z.len() {
            let denom: f64 = (0..z.len())
                .filter(|&a| a != i)
                .map(|a| (dot(&unit[i], &unit[a]) / tau).exp())
                .sum();
            let pos: Vec<usize> = (0..z.len()).filter(|&p| p != i && l[p] == l[i]).collect();
            let s: f64 = pos
                .iter()
                .map(|&p| ((dot(&unit[i], &unit[p]) / tau).exp() / denom).ln())
                .sum();
            total += -s / pos.len() as f64;
        }
        total / z.len() as f64
    }

    #[test]
    fn identical_vectors_give_log_contrast_size() {
        let z = Tensor::matrix(4, 3, [0.3, -0.2, 0.9].repeat(4)).unwrap();
        let l = labels(&["a", "a", "b", "b"]);
        let loss = supcon(&z, &l, &CrossBatchMemory::new(0), 0.1).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clustered_batch_matches_brute_force() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.5, 0.0],
        ];
        let l = ["a", "a", "b", "b"];
        let z = Tensor::from_rows(&rows).unwrap();
        let got = supcon(&z, &labels(&l), &CrossBatchMemory::new(0), 0.1).unwrap();
        assert!((got - brute_force(&rows, &l, 0.1)).abs() < 1e-12);

        let shuffled = ["a", "b", "a", "b"];
        let worse = supcon(&z, &labels(&shuffled), &CrossBatchMemory::new(0), 0.1).unwrap();
        assert!(worse > got);
    }

    #[test]
    fn memory_entries_join_the_contrast_set() {
        let rows = vec![vec![1.0, 0.2], vec![0.9, 0.1], vec![-0.3, 1.0]];
        let mut mem = CrossBatchMemory::new(8);
        mem.push(vec![0.0, 1.0], "b");
        let z = Tensor::from_rows(&rows).unwrap();
        let with_mem = supcon(&z, &labels(&["a", "a", "b"]), &mem, 0.1).unwrap();
        let mut all = rows.clone();
        all.push(vec![0.0, 1.0]);
        // Brute force over all four entries, averaging only the batch anchors.
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let u: Vec<Vec<f64>> = all.iter().map(|v| unit(v)).collect();
        let l = ["a", "a", "b", "b"];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut want = 0.0;
        for i in 0..3 {
            let denom: f64 = (0..4)
                .filter(|&a| a != i)
                .map(|a| (dot(&u[i], &u[a]) / 0.1).exp())
                .sum();
            let pos: Vec<usize> = (0..4).filter(|&p| p != i && l[p] == l[i]).collect();
            let s: f64 = pos
                .iter()
                .map(|&p| ((dot(&u[i], &u[p]) / 0.1).exp() / denom).ln())
                .sum();
            want += -s / pos.len() as f64;
        }
        want /= 3.0;
        assert!((with_mem - want).abs() < 1e-12);
    }

    #[test]
    fn construction_errors() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mem = CrossBatchMemory::new(0);
        assert!(matches!(
            supcon(&z, &labels(&["a", "b"]), &mem, 0.1),
            Err(Error::Batch(_))
        ));
        assert!(matches!(
            supcon(&z, &labels(&["a", "a"]), &mem, 0.1),
            Err(Error::Batch(_))
        ));
        let z3 = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            supcon(&z3, &labels(&["a", "a", "b"]), &mem, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn fifo_eviction() {
        let mut mem = CrossBatchMemory::<f64>::new(4);
        for i in 0..6 {
            mem.push(vec![i as f64], format!("s{i}"));
        }
        let kept: Vec<&str> = mem.entries().map(|(_, s)| s).collect();
        assert_eq!(kept, vec!["s2", "s3", "s4", "s5"]);
        let mut off = CrossBatchMemory::<f64>::new(0);
        off.push(vec![1.0], "a");
        assert!(off.is_empty());
    }

    #[test]
    fn memory_receives_no_gradient() {
        let mut mem = CrossBatchMemory::new(4);
        mem.push(vec![0.0, 1.0, 0.0], "b");
        mem.push(vec![1.0, 0.0, 0.0], "a");
        let z = Tensor::matrix(3, 3, vec![1.0, 0.1, 0.0, 0.2, 1.0, 0.3, 0.9, 0.0, 0.4]).unwrap();
        let l = labels(&["a", "b", "a"]);
        let mut tape = Tape::new();
        let zv = tape.param(z);
        let out = supcon_on_tape(&mut tape, zv, &l, &[true; 3], &mem, 0.1).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        assert!(grads.get(zv).unwrap().data().iter().any(|v| *v != 0.0));
        assert!(grads.get(out.memory.unwrap()).is_none());
    }
}
