//! Verification and identification metrics over aggregated templates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::ConanModel;
use crate::pooling::{AggregationResult, Aggregator};
use crate::scalar::Scalar;
use crate::template::{Dataset, Distribution, Split, Template};

pub const FAR_TARGETS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Unweighted mean of the embeddings.
pub fn gap_aggregate<T: Scalar>(t: &Template<T>) -> Vec<T> {
    let mut out = vec![T::zero(); t.dim()];
    for e in &t.embeddings {
        for (o, &x) in out.iter_mut().zip(&e.vector) {
            *o = *o + x;
        }
    }
    let n = T::from_count(t.len());
    out.into_iter().map(|v| v / n).collect()
}

/// One gallery entry per subject: the union of that subject's gallery
/// templates in `split`, in dataset order.
pub fn gallery_by_subject<T: Scalar>(ds: &Dataset<T>, split: Split) -> Vec<Template<T>> {
    let mut by: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for t in ds.split(split).filter(|t| t.distribution == Distribution::Gallery) {
        by.entry(t.subject_id.as_str())
            .or_default()
            .extend(t.embeddings.iter().cloned());
    }
    by.into_iter()
        .map(|(s, e)| Template {
            id: s.to_string(),
            subject_id: s.to_string(),
            distribution: Distribution::Gallery,
            split,
            embeddings: e,
        })
        .collect()
}

pub fn probes<T: Scalar>(ds: &Dataset<T>, split: Split) -> Vec<&Template<T>> {
    ds.split(split)
        .filter(|t| t.distribution == Distribution::Probe)
        .collect()
}

/// How templates are reduced to a single vector.
#[derive(Debug, Clone, Copy)]
pub enum Method<'m, T> {
    Gap,
    Conan(&'m ConanModel<T>),
}

impl<T: Scalar> Method<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gap => "gap",
            Method::Conan(_) => "conan",
        }
    }
}

/// Aggregates every template, in order. Work is spread over the current
/// rayon pool; results do not depend on the thread count.
pub fn aggregate_all<T: Scalar>(method: Method<'_, T>, templates: &[&Template<T>]) -> Result<Vec<Vec<T>>> {
    match method {
        Method::Gap => Ok(templates.iter().map(|t| gap_aggregate(t)).collect()),
        Method::Conan(m) => templates
            .par_iter()
            .map_init(|| Aggregator::new(m), |agg, t| agg.aggregate(t).map(|r| r.pooled))
            .collect(),
    }
}

/// Full aggregation results (weights included) for CoNAN.
pub fn aggregation_results<T: Scalar>(
    model: &ConanModel<T>,
    templates: &[&Template<T>],
) -> Result<Vec<AggregationResult<T>>> {
    templates
        .par_iter()
        .map_init(|| Aggregator::new(model), |agg, t| agg.aggregate(t))
        .collect()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("aggregate has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine scores of probes (rows) against gallery subjects (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub probe_ids: Vec<String>,
    pub probe_subjects: Vec<String>,
    pub gallery_subjects: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl MatchResult {
    /// Scores each probe aggregate against each gallery aggregate.
    pub fn from_aggregates<T: Scalar>(
        probes: &[&Template<T>],
        probe_vecs: &[Vec<T>],
        gallery: &[Template<T>],
        gallery_vecs: &[Vec<T>],
    ) -> Result<Self> {
        let to_unit = |v: &Vec<T>| unit(&v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>());
        let pu = probe_vecs.iter().map(to_unit).collect::<Result<Vec<_>>>()?;
        let gu = gallery_vecs.iter().map(to_unit).collect::<Result<Vec<_>>>()?;
        let scores = pu
            .iter()
            .map(|p| gu.iter().map(|g| cosine_of_units(p, g)).collect())
            .collect();
        Ok(MatchResult {
            probe_ids: probes.iter().map(|t| t.id.clone()).collect(),
            probe_subjects: probes.iter().map(|t| t.subject_id.clone()).collect(),
            gallery_subjects: gallery.iter().map(|t| t.subject_id.clone()).collect(),
            scores,
        })
    }

    pub fn mated(&self, probe: usize, gallery: usize) -> bool {
        self.probe_subjects[probe] == self.gallery_subjects[gallery]
    }

    /// Flattened scores and mated flags.
    pub fn pairs(&self) -> (Vec<f64>, Vec<bool>) {
        let mut s = Vec::new();
        let mut m = Vec::new();
        for (i, row) in self.scores.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                s.push(v);
                m.push(self.mated(i, j));
            }
        }
        (s, m)
    }

    /// Column index of each probe's mated gallery entry. Closed-set
    /// identification needs exactly one.
    pub fn mated_columns(&self) -> Result<Vec<usize>> {
        (0..self.scores.len())
            .map(|i| {
                let cols: Vec<usize> = (0..self.gallery_subjects.len()).filter(|&j| self.mated(i, j)).collect();
                match cols.as_slice() {
                    [j] => Ok(*j),
                    _ => Err(Error::Dataset(format!(
                        "probe {} has {} mated gallery entries",
                        self.probe_ids[i],
                        cols.len()
                    ))),
                }
            })
            .collect()
    }
}

fn cosine_of_units(a: &[f64], b: &[f64]) -> f64 {
    let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    c.clamp(-1.0, 1.0)
}

/// Aggregates the probes and per-subject galleries of `split` and scores
/// them.
pub fn match_split<T: Scalar>(ds: &Dataset<T>, split: Split, method: Method<'_, T>) -> Result<MatchResult> {
    let probes = probes(ds, split);
    let gallery = gallery_by_subject(ds, split);
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Dataset(format!(
            "{split} split lacks probes or gallery templates"
        )));
    }
    let pv = aggregate_all(method, &probes)?;
    let grefs: Vec<&Template<T>> = gallery.iter().collect();
    let gv = aggregate_all(method, &grefs)?;
    MatchResult::from_aggregates(&probes, &pv, &gallery, &gv)
}

/// TAR at each FAR target, or `None` when there are too few non-mated
/// scores to reach the target.
///
/// The threshold is the smallest non-mated score whose empirical FAR
/// (share of non-mated scores at or above it) is within the target.
pub fn verification_metrics(scores: &[f64], mated: &[bool], far_targets: &[f64]) -> Result<Vec<Option<f64>>> {
    if scores.len() != mated.len() {
        return Err(dim_err!("{} scores, {} mated flags", scores.len(), mated.len()));
    }
    let mut genuine: Vec<f64> = scores.iter().zip(mated).filter(|p| *p.1).map(|p| *p.0).collect();
    let mut impostor: Vec<f64> = scores.iter().zip(mated).filter(|p| !*p.1).map(|p| *p.0).collect();
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Evaluation(
            "need at least one mated and one non-mated score".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification scores".into()));
    }
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let n_imp = impostor.len();
    let at_or_above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&x| x < t);
    Ok(far_targets
        .iter()
        .map(|&far| {
            // Allowed false accepts; undefined when not even one is allowed.
            let allowed = (far * n_imp as f64 + 1e-9).floor() as usize;
            if allowed == 0 {
                return None;
            }
            let threshold = impostor
                .iter()
                .copied()
                .find(|&t| at_or_above(&impostor, t) <= allowed)
                .expect("the largest score always qualifies");
            Some(at_or_above(&genuine, threshold) as f64 / genuine.len() as f64)
        })
        .collect())
}

/// Rank-k accuracy for each `k`. Non-mated scores tying the mated score
/// count as ranked above it.
pub fn identification_metrics(m: &MatchResult, ks: &[usize]) -> Result<Vec<f64>> {
    let cols = m.mated_columns()?;
    if cols.is_empty() {
        return Err(Error::Evaluation("no probes to identify".into()));
    }
    let ranks: Vec<usize> = m
        .scores
        .iter()
        .zip(&cols)
        .map(|(row, &j)| 1 + row.iter().enumerate().filter(|&(c, &s)| c != j && s >= row[j]).count())
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation. A constant input has no ranking signal and scores 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(dim_err!(
            "spearman needs two equal series of length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Mean per-template Spearman correlation between pooling weights and
/// informativeness labels. Templates without both label classes, or
/// without labels, are skipped; `None` when none remain.
pub fn weight_quality<T: Scalar>(results: &[AggregationResult<T>], templates: &[&Template<T>]) -> Result<Option<f64>> {
    if results.len() != templates.len() {
        return Err(dim_err!("{} results for {} templates", results.len(), templates.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in results.iter().zip(templates) {
        let labels: Option<Vec<f64>> = t.embeddings.iter().map(|e| e.quality_hint).collect();
        let Some(labels) = labels else { continue };
        let has_both = labels.iter().any(|&l| l > 0.5) && labels.iter().any(|&l| l <= 0.5);
        if !has_both {
            continue;
        }
        let w: Vec<f64> = r.weights.iter().map(|x| x.to_f64_lossless()).collect();
        total += spearman(&w, &labels)?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub name: String,
    pub split: Split,
    pub probes: usize,
    pub gallery_subjects: usize,
    pub rank1: f64,
    pub rank5: f64,
    /// TAR at each of [`FAR_TARGETS`]; absent entries are undefined.
    pub tar_at_far: Vec<FarPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarPoint {
    pub far: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tar: Option<f64>,
}

/// Computes one report row. Weight quality is filled in for CoNAN only.
pub fn evaluate<T: Scalar>(ds: &Dataset<T>, split: Split, method: Method<'_, T>, name: &str) -> Result<ReportRow> {
    let m = match_split(ds, split, method)?;
    let ranks = identification_metrics(&m, &[1, 5])?;
    let (s, mated) = m.pairs();
    let tars = verification_metrics(&s, &mated, &FAR_TARGETS)?;
    let weight_spearman = match method {
        Method::Conan(model) => {
            let p = probes(ds, split);
            weight_quality(&aggregation_results(model, &p)?, &p)?
        }
        Method::Gap => None,
    };
    Ok(ReportRow {
        name: name.to_string(),
        split,
        probes: m.probe_ids.len(),
        gallery_subjects: m.gallery_subjects.len(),
        rank1: ranks[0],
        rank5: ranks[1],
        tar_at_far: FAR_TARGETS
            .iter()
            .zip(tars)
            .map(|(&far, tar)| FarPoint { far, tar })
            .collect(),
        weight_spearman,
    })
}

/// Evaluates each named configuration; entries without a model are skipped
/// with a warning.
pub fn ablation_suite<T: Scalar>(
    ds: &Dataset<T>,
    split: Split,
    configs: &[(String, Option<&ConanModel<T>>)],
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (name, model) in configs {
        match model {
            Some(m) => rows.push(evaluate(ds, split, Method::Conan(m), name)?),
            None => log::warn!("no checkpoint for configuration {name}; skipped"),
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<24} {:>6} {:>7} {:>7}",
            "aggregator", "split", "rank-1", "rank-5"
        );
        for far in FAR_TARGETS {
            let _ = write!(out, " {:>12}", format!("TAR@{far:.0e}"));
        }
        let _ = writeln!(out, " {:>9}", "spearman");
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<24} {:>6} {:>7.4} {:>7.4}",
                r.name,
                r.split.to_string(),
                r.rank1,
                r.rank5
            );
            for p in &r.tar_at_far {
                match p.tar {
                    Some(t) => {
                        let _ = write!(out, " {t:>12.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "undefined");
                    }
                }
            }
            match r.weight_spearman {
                Some(s) => {
                    let _ = writeln!(out, " {s:>9.4}");
                }
                None => {
                    let _ = writeln!(out, " {:>9}", "-");
                }
            }
        }
        out
    }
}

/// Per-embedding weights of one template, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRow {
    pub media_id: String,
    pub weight: f64,
    pub similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality_hint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDump {
    pub template_id: String,
    pub subject_id: String,
    pub distribution: Distribution,
    pub temperature: f64,
    pub rows: Vec<WeightRow>,
}

impl WeightDump {
    /// Rows in embedding order.
    pub fn new<T: Scalar>(t: &Template<T>, r: &AggregationResult<T>) -> Self {
        WeightDump {
            template_id: t.id.clone(),
            subject_id: t.subject_id.clone(),
            distribution: t.distribution,
            temperature: r.temperature,
            rows: t
                .embeddings
                .iter()
                .zip(r.weights.iter().zip(&r.similarities))
                .map(|(e, (w, s))| WeightRow {
                    media_id: e.media_id.clone(),
                    weight: w.to_f64_lossless(),
                    similarity: s.to_f64_lossless(),
                    quality_hint: e.quality_hint,
                })
                .collect(),
        }
    }

    /// Rows ordered from lowest to highest weight; ties keep embedding order.
    pub fn sorted_by_weight(&self) -> Vec<&WeightRow> {
        let mut rows: Vec<&WeightRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.weight.total_cmp(&b.weight));
        rows
    }
}
