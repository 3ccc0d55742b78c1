//! Column-wise order-statistic selections.
//!
//! Each selection returns indices into the column so that the tape can route
//! gradients to exactly the chosen entries. Ties go to the lowest index.

use crate::scalar::{lit, Scalar};

/// Number of histogram bins used by the mode estimator.
pub const MODE_BINS: usize = 16;

pub fn argmax<T: Scalar>(col: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in col.iter().enumerate().skip(1) {
        if v > col[best] {
            best = i;
        }
    }
    best
}

pub fn argmin<T: Scalar>(col: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in col.iter().enumerate().skip(1) {
        if v < col[best] {
            best = i;
        }
    }
    best
}

/// Indices of the ascending order, stable on ties.
pub fn order<T: Scalar>(col: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).expect("finite").then(a.cmp(&b)));
    idx
}

/// The one (odd length) or two (even length) central order statistics.
/// For odd lengths both indices are equal.
pub fn median_pick<T: Scalar>(col: &[T]) -> (usize, usize) {
    let ord = order(col);
    let n = col.len();
    if n % 2 == 1 {
        (ord[n / 2], ord[n / 2])
    } else {
        (ord[n / 2 - 1], ord[n / 2])
    }
}

pub fn median_value<T: Scalar>(col: &[T], pick: (usize, usize)) -> T {
    (col[pick.0] + col[pick.1]) * lit(0.5)
}

/// How the mode of one column was chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModePick<T> {
    /// A value that occurs more than once (or the only value); the index is
    /// its first occurrence.
    Exact(usize),
    /// Center of the densest histogram bin: `min + frac * (max - min)`.
    Bin { min_idx: usize, max_idx: usize, frac: T },
}

impl<T: Scalar> ModePick<T> {
    pub fn value(&self, col: &[T]) -> T {
        match *self {
            ModePick::Exact(i) => col[i],
            ModePick::Bin { min_idx, max_idx, frac } => col[min_idx] + frac * (col[max_idx] - col[min_idx]),
        }
    }
}

/// Mode of a column of continuous values.
///
/// Repeated exact values win (most frequent, then lowest value). Otherwise a
/// uniform [`MODE_BINS`]-bin histogram over `[min, max]` picks the densest bin
/// (lowest bin on ties) and reports its center. A single value, or a column
/// with `min == max`, is its own mode.
pub fn mode_pick<T: Scalar>(col: &[T]) -> ModePick<T> {
    let ord = order(col);
    let mut best: Option<(usize, usize)> = None; // (count, first index)
    let mut i = 0;
    while i < ord.len() {
        let mut j = i + 1;
        while j < ord.len() && col[ord[j]] == col[ord[i]] {
            j += 1;
        }
        let count = j - i;
        // `ord` is stable, so ord[i] is the lowest index holding this value.
        if count > 1 && best.is_none_or(|(c, _)| count > c) {
            best = Some((count, ord[i]));
        }
        i = j;
    }
    if let Some((_, idx)) = best {
        return ModePick::Exact(idx);
    }
    let min_idx = argmin(col);
    let max_idx = argmax(col);
    let (lo, hi) = (col[min_idx], col[max_idx]);
    if col.len() == 1 || lo == hi {
        return ModePick::Exact(min_idx);
    }
    let bins = bin_counts(col, lo, hi);
    let b = argmax_count(&bins);
    ModePick::Bin {
        min_idx,
        max_idx,
        frac: (T::from_count(b) + lit(0.5)) / T::from_count(MODE_BINS),
    }
}

pub(crate) fn bin_of<T: Scalar>(x: T, lo: T, hi: T) -> usize {
    let pos = (x - lo) / (hi - lo) * T::from_count(MODE_BINS);
    pos.floor().to_usize().unwrap_or(0).min(MODE_BINS - 1)
}

fn bin_counts<T: Scalar>(col: &[T], lo: T, hi: T) -> [usize; MODE_BINS] {
    let mut bins = [0usize; MODE_BINS];
    for &x in col {
        bins[bin_of(x, lo, hi)] += 1;
    }
    bins
}

fn argmax_count(bins: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in bins.iter().enumerate() {
        if c > bins[best] {
            best = i;
        }
    }
    best
}

/// Distance from the nearest ordering change that moves the median pick.
/// Swaps inside the central pair of an even column leave the midpoint
/// unchanged and do not count.
pub(crate) fn median_margin<T: Scalar>(col: &[T]) -> T {
    let n = col.len();
    if n < 2 {
        return T::infinity();
    }
    let ord = order(col);
    let gap = |r: usize| col[ord[r + 1]] - col[ord[r]];
    let (lo, hi) = if n % 2 == 1 { (n / 2, n / 2) } else { (n / 2 - 1, n / 2) };
    let mut m = T::infinity();
    if lo > 0 {
        m = m.min(gap(lo - 1));
    }
    if hi + 1 < n {
        m = m.min(gap(hi));
    }
    m
}

/// Distance from the nearest non-smooth point of the mode estimator.
///
/// For a histogram pick this is the smallest shift that could change the
/// extreme entries or the winning bin. Entries close to a bin edge are taken
/// in order of distance; each is assumed to cross in whichever way hurts the
/// winner most, and the first distance at which the winner could lose is the
/// margin.
pub(crate) fn mode_margin<T: Scalar>(col: &[T], pick: &ModePick<T>) -> T {
    let ModePick::Bin { min_idx, max_idx, .. } = *pick else {
        return if col.len() > 1 { T::zero() } else { T::infinity() };
    };
    let (lo, hi) = (col[min_idx], col[max_idx]);
    let ord = order(col);
    let n = col.len();
    let m = (col[ord[1]] - col[ord[0]]).min(col[ord[n - 1]] - col[ord[n - 2]]);

    let width = (hi - lo) / T::from_count(MODE_BINS);
    let counts = bin_counts(col, lo, hi);
    let winner = argmax_count(&counts);
    // (distance to an inner bin edge, source bin, destination bin)
    let mut moves = Vec::new();
    for (i, &x) in col.iter().enumerate() {
        if i == min_idx || i == max_idx {
            continue;
        }
        let b = bin_of(x, lo, hi);
        let pos = (x - lo) / width - T::from_count(b);
        if b > 0 {
            moves.push((pos * width, b, b - 1));
        }
        if b + 1 < MODE_BINS {
            moves.push(((T::one() - pos) * width, b, b + 1));
        }
    }
    moves.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let mut worst = counts;
    for (dist, from, to) in moves {
        if dist >= m {
            break;
        }
        if from == winner {
            worst[winner] -= 1;
        }
        if to != winner {
            worst[to] += 1;
        }
        let c = worst[winner];
        let lost = worst
            .iter()
            .enumerate()
            .any(|(b, &k)| b != winner && (k > c || (k == c && b < winner)));
        if lost {
            return dist;
        }
    }
    m
}
