//! Per-dimension template statistics and the summary vector that conditions
//! the context network.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::numerics::reduce;
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Version of the canonical block order. Bumped whenever [`Block::CANONICAL`]
/// changes; checkpoints record it.
pub const LAYOUT_VERSION: u32 = 1;

/// One `d`-wide block of the summary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    /// Attention output for the distribution token.
    Attended,
    /// The distribution token itself.
    Dte,
    Max,
    Min,
    Mean,
    Var,
    Mode,
    Median,
}

impl Block {
    pub const CANONICAL: [Block; 8] = [
        Block::Attended,
        Block::Dte,
        Block::Max,
        Block::Min,
        Block::Mean,
        Block::Var,
        Block::Mode,
        Block::Median,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Attended => "C",
            Block::Dte => "DTE",
            Block::Max => "max",
            Block::Min => "min",
            Block::Mean => "mean",
            Block::Var => "var",
            Block::Mode => "mode",
            Block::Median => "median",
        }
    }

    fn rank(self) -> usize {
        Block::CANONICAL.iter().position(|&b| b == self).expect("canonical")
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::CANONICAL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown summary block {s:?}")))
    }
}

/// Which blocks feed the context network, always in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SummaryLayout {
    blocks: Vec<Block>,
}

impl SummaryLayout {
    pub fn full() -> Self {
        SummaryLayout {
            blocks: Block::CANONICAL.to_vec(),
        }
    }

    pub fn new(blocks: &[Block]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Parameter("summary layout needs at least one block".into()));
        }
        let mut b = blocks.to_vec();
        b.sort_by_key(|x| x.rank());
        b.dedup();
        if b.len() != blocks.len() {
            return Err(Error::Parameter("summary layout repeats a block".into()));
        }
        Ok(SummaryLayout { blocks: b })
    }

    /// Parses the exact block order recorded in a checkpoint; any order other
    /// than the canonical one is rejected.
    pub fn from_names(names: &[String]) -> Result<Self> {
        let blocks = names.iter().map(|n| n.parse()).collect::<Result<Vec<Block>>>()?;
        let layout = Self::new(&blocks)?;
        if layout.blocks != blocks {
            return Err(Error::Schema(format!(
                "summary block order {names:?} differs from the canonical order"
            )));
        }
        Ok(layout)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name().to_string()).collect()
    }

    pub fn contains(&self, b: Block) -> bool {
        self.blocks.contains(&b)
    }

    /// True when the attention module contributes to the summary.
    pub fn uses_attention(&self) -> bool {
        self.contains(Block::Attended)
    }

    pub fn width(&self, d: usize) -> usize {
        self.blocks.len() * d
    }
}

/// Named presets mirroring the summary-component ablation rows.
pub fn ablation_presets() -> Vec<(&'static str, SummaryLayout)> {
    use Block::*;
    let l = |b: &[Block]| SummaryLayout::new(b).expect("preset");
    vec![
        ("mean", l(&[Mean])),
        ("mean+var", l(&[Mean, Var])),
        ("mean+var+max+min", l(&[Max, Min, Mean, Var])),
        ("stats", l(&[Max, Min, Mean, Var, Mode, Median])),
        ("attention", l(&[Attended, Dte])),
        ("full", SummaryLayout::full()),
    ]
}

/// First-order statistics of a template, one value per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBlock<T> {
    pub max: Vec<T>,
    pub min: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub mode: Vec<T>,
    pub median: Vec<T>,
}

impl<T: Scalar> StatsBlock<T> {
    pub fn get(&self, b: Block) -> Option<&[T]> {
        Some(match b {
            Block::Max => &self.max,
            Block::Min => &self.min,
            Block::Mean => &self.mean,
            Block::Var => &self.var,
            Block::Mode => &self.mode,
            Block::Median => &self.median,
            Block::Attended | Block::Dte => return None,
        })
    }
}

/// Per-dimension max, min, mean, population variance, mode and median of a
/// set of `d`-dimensional vectors given as the rows of `s`.
pub fn compute_stats<T: Scalar>(s: &Tensor<T>) -> Result<StatsBlock<T>> {
    let (n, d) = (s.rows(), s.cols());
    if n == 0 || s.is_empty() {
        return Err(Error::Parameter("statistics of an empty set".into()));
    }
    let inv_n = T::one() / T::from_count(n);
    let mut out = StatsBlock {
        max: Vec::with_capacity(d),
        min: Vec::with_capacity(d),
        mean: Vec::with_capacity(d),
        var: Vec::with_capacity(d),
        mode: Vec::with_capacity(d),
        median: Vec::with_capacity(d),
    };
    let mut col = Vec::with_capacity(n);
    for j in 0..d {
        col.clear();
        col.extend((0..n).map(|i| s.get(i, j)));
        // Sums run in ascending order so that row order cannot change a bit.
        let ord = reduce::order(&col);
        let mean = ord.iter().fold(T::zero(), |a, &i| a + col[i]) * inv_n;
        let var = ord
            .iter()
            .map(|&i| (col[i] - mean) * (col[i] - mean))
            .fold(T::zero(), |a, b| a + b)
            * inv_n;
        out.max.push(col[reduce::argmax(&col)]);
        out.min.push(col[reduce::argmin(&col)]);
        out.mean.push(mean);
        out.var.push(var);
        out.mode.push(reduce::mode_pick(&col).value(&col));
        out.median.push(reduce::median_value(&col, reduce::median_pick(&col)));
    }
    Ok(out)
}

/// Flattened summary in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryVector<T> {
    pub layout: SummaryLayout,
    pub d: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> SummaryVector<T> {
    pub fn block(&self, b: Block) -> Option<&[T]> {
        let pos = self.layout.blocks().iter().position(|&x| x == b)?;
        Some(&self.values[pos * self.d..(pos + 1) * self.d])
    }
}

/// Concatenates `{C, DTE, max, min, mean, var, mode, median}`.
pub fn assemble_summary<T: Scalar>(stats: &StatsBlock<T>, attended: &[T], dte: &[T]) -> Result<SummaryVector<T>> {
    assemble_with_layout(stats, attended, dte, &SummaryLayout::full())
}

pub fn assemble_with_layout<T: Scalar>(
    stats: &StatsBlock<T>,
    attended: &[T],
    dte: &[T],
    layout: &SummaryLayout,
) -> Result<SummaryVector<T>> {
    let d = stats.mean.len();
    let mut values = Vec::with_capacity(layout.width(d));
    for &b in layout.blocks() {
        let part = match b {
            Block::Attended => attended,
            Block::Dte => dte,
            other => stats.get(other).expect("statistic block"),
        };
        if part.len() != d {
            return Err(dim_err!("summary block {b} has length {}, expected {d}", part.len()));
        }
        values.extend_from_slice(part);
    }
    Ok(SummaryVector {
        layout: layout.clone(),
        d,
        values,
    })
}

/// Records the statistic blocks of `x` (an `N × d` node) on a tape, in layout
/// order, skipping the attention blocks.
pub(crate) fn stats_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layout: &SummaryLayout,
) -> Result<Vec<(Block, Var)>> {
    let n = tape.value(x).rows();
    let inv_n = T::one() / T::from_count(n);
    let mut mean = None;
    let mut out = Vec::new();
    let mut get_mean = |tape: &mut Tape<T>| -> Result<Var> {
        if let Some(m) = mean {
            return Ok(m);
        }
        let s = tape.sum_rows(x)?;
        let m = tape.scale(s, inv_n)?;
        mean = Some(m);
        Ok(m)
    };
    for &b in layout.blocks() {
        let v = match b {
            Block::Attended | Block::Dte => continue,
            Block::Max => tape.max_rows(x)?,
            Block::Min => tape.min_rows(x)?,
            Block::Mean => get_mean(tape)?,
            Block::Var => {
                let m = get_mean(tape)?;
                let neg = tape.scale(m, -T::one())?;
                let centered = tape.add_row(x, neg)?;
                let sq = tape.mul(centered, centered)?;
                let s = tape.sum_rows(sq)?;
                tape.scale(s, inv_n)?
            }
            Block::Mode => tape.mode_rows(x)?,
            Block::Median => tape.median_rows(x)?,
        };
        out.push((b, v));
    }
    Ok(out)
}
