//! Embeddings, templates and datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Which side of a comparison a template comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Probe,
    Gallery,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Probe => "probe",
            Distribution::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub vector: Vec<T>,
    pub media_id: String,
    /// Ground-truth informativeness for synthetic data. Evaluation only; the
    /// aggregation model never reads it.
    pub quality_hint: Option<f64>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(vector: Vec<T>, media_id: impl Into<String>) -> Self {
        Embedding {
            vector,
            media_id: media_id.into(),
            quality_hint: None,
        }
    }

    pub fn with_quality(mut self, q: f64) -> Self {
        self.quality_hint = Some(q);
        self
    }

    fn problem(&self, d: usize) -> Option<String> {
        if self.vector.len() != d {
            Some(format!("dimension {} (expected {d})", self.vector.len()))
        } else if self.vector.iter().any(|v| !v.is_finite()) {
            Some("non-finite value".into())
        } else if self.vector.iter().all(|v| *v == T::zero()) {
            Some("zero vector".into())
        } else {
            None
        }
    }
}

/// A set of embeddings of one subject from one acquisition context.
#[derive(Debug, Clone, PartialEq)]
pub struct Template<T> {
    pub id: String,
    pub subject_id: String,
    pub distribution: Distribution,
    pub split: Split,
    pub embeddings: Vec<Embedding<T>>,
}

impl<T: Scalar> Template<T> {
    /// Builds a template, rejecting empty sets and malformed embeddings.
    pub fn new(
        id: impl Into<String>,
        subject_id: impl Into<String>,
        distribution: Distribution,
        split: Split,
        embeddings: Vec<Embedding<T>>,
    ) -> Result<Self> {
        let t = Template {
            id: id.into(),
            subject_id: subject_id.into(),
            distribution,
            split,
            embeddings,
        };
        let Some(first) = t.embeddings.first() else {
            return Err(Error::Dataset(format!("template {} is empty", t.id)));
        };
        let d = first.vector.len();
        for e in &t.embeddings {
            if let Some(p) = e.problem(d) {
                return Err(Error::Dataset(format!("template {} media {}: {p}", t.id, e.media_id)));
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.vector.len())
    }

    /// The embeddings stacked as an `N × d` matrix.
    pub fn matrix(&self) -> Result<Tensor<T>> {
        Tensor::from_rows(&self.embeddings.iter().map(|e| e.vector.as_slice()).collect::<Vec<_>>())
    }

    /// Template with the embeddings reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Template {
            embeddings: perm.iter().map(|&i| self.embeddings[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Uniform sample of `k` embeddings without replacement, original order
/// preserved. Deterministic under `seed`.
pub fn subsample_template<T: Scalar>(t: &Template<T>, k: usize, seed: u64) -> Result<Template<T>> {
    if k == 0 || k > t.len() {
        return Err(Error::Parameter(format!("subsample size {k} outside 1..={}", t.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(subsample_with(t, k, &mut rng))
}

pub(crate) fn subsample_with<T: Scalar>(t: &Template<T>, k: usize, rng: &mut impl rand::Rng) -> Template<T> {
    let mut idx = sample(rng, t.len(), k).into_vec();
    idx.sort_unstable();
    t.permuted(&idx)
}

/// A collection of templates sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub d: usize,
    pub templates: Vec<Template<T>>,
}

/// One broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    EmptyTemplate {
        template: String,
    },
    BadEmbedding {
        template: String,
        media_id: String,
        problem: String,
    },
    DuplicateTemplateId {
        template: String,
    },
    MissingProbe {
        subject: String,
        split: Split,
    },
    MissingGallery {
        subject: String,
        split: Split,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTemplate { template } => write!(f, "template {template} is empty"),
            Violation::BadEmbedding {
                template,
                media_id,
                problem,
            } => write!(f, "template {template} media {media_id}: {problem}"),
            Violation::DuplicateTemplateId { template } => {
                write!(f, "template id {template} appears more than once")
            }
            Violation::MissingProbe { subject, split } => {
                write!(f, "subject {subject} has no probe template in {split}")
            }
            Violation::MissingGallery { subject, split } => {
                write!(f, "subject {subject} has no gallery template in {split}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub subjects: usize,
    pub templates: usize,
    pub embeddings: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub counts: BTreeMap<Split, SplitCounts>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Enumerates every invariant violation. Never fails.
pub fn validate<T: Scalar>(ds: &Dataset<T>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut sides: BTreeMap<(Split, &str), (bool, bool)> = BTreeMap::new();
    let mut subjects: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for t in &ds.templates {
        if !seen.insert(t.id.as_str()) {
            report
                .violations
                .push(Violation::DuplicateTemplateId { template: t.id.clone() });
        }
        if t.embeddings.is_empty() {
            report
                .violations
                .push(Violation::EmptyTemplate { template: t.id.clone() });
        }
        for e in &t.embeddings {
            if let Some(problem) = e.problem(ds.d) {
                report.violations.push(Violation::BadEmbedding {
                    template: t.id.clone(),
                    media_id: e.media_id.clone(),
                    problem,
                });
            }
        }
        let entry = sides.entry((t.split, t.subject_id.as_str())).or_default();
        match t.distribution {
            Distribution::Probe => entry.0 = true,
            Distribution::Gallery => entry.1 = true,
        }
        subjects.entry(t.split).or_default().insert(&t.subject_id);
        let c = report.counts.entry(t.split).or_default();
        c.templates += 1;
        c.embeddings += t.embeddings.len();
    }
    for (split, set) in &subjects {
        report.counts.entry(*split).or_default().subjects = set.len();
    }
    for ((split, subject), (probe, gallery)) in sides {
        if split == Split::Train {
            continue;
        }
        if !probe {
            report.violations.push(Violation::MissingProbe {
                subject: subject.to_string(),
                split,
            });
        }
        if !gallery {
            report.violations.push(Violation::MissingGallery {
                subject: subject.to_string(),
                split,
            });
        }
    }
    report
}

impl<T: Scalar> Dataset<T> {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Template<T>> {
        self.templates.iter().filter(move |t| t.split == split)
    }

    pub fn find(&self, template_id: &str) -> Option<&Template<T>> {
        self.templates.iter().find(|t| t.id == template_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64], id: &str) -> Embedding<f64> {
        Embedding::new(v.to_vec(), id)
    }

    fn tmpl(id: &str, subj: &str, dist: Distribution, split: Split, n: usize) -> Template<f64> {
        let e = (0..n)
            .map(|i| emb(&[1.0 + i as f64, -(i as f64)], &format!("{id}-{i}")))
            .collect();
        Template::new(id, subj, dist, split, e).unwrap()
    }

    fn good() -> Dataset<f64> {
        Dataset {
            d: 2,
            templates: vec![
                tmpl("a", "s1", Distribution::Probe, Split::Val, 3),
                tmpl("b", "s1", Distribution::Gallery, Split::Val, 2),
                tmpl("c", "s2", Distribution::Probe, Split::Train, 1),
            ],
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        let r = validate(&good());
        assert!(r.is_valid(), "{:?}", r.violations);
        assert_eq!(r.counts[&Split::Val].templates, 2);
        assert_eq!(r.counts[&Split::Val].embeddings, 5);
        assert_eq!(r.counts[&Split::Train].subjects, 1);
    }

    #[test]
    fn empty_template_is_listed() {
        let mut ds = good();
        ds.templates[2].embeddings.clear();
        let r = validate(&ds);
        assert_eq!(r.violations, vec![Violation::EmptyTemplate { template: "c".into() }]);
    }

    #[test]
    fn mixed_dimensions_are_listed() {
        let mut ds = good();
        ds.d = 512;
        ds.templates[0].embeddings[0].vector = vec![0.5; 256];
        let r = validate(&ds);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::BadEmbedding { problem, .. } if problem.contains("256"))));
    }

    #[test]
    fn missing_mates_are_listed() {
        let mut ds = good();
        ds.templates.remove(1);
        let r = validate(&ds);
        assert_eq!(
            r.violations,
            vec![Violation::MissingGallery {
                subject: "s1".into(),
                split: Split::Val
            }]
        );
    }

    #[test]
    fn validate_is_pure() {
        let mut ds = good();
        ds.templates[1].embeddings[0].vector = vec![0.0, 0.0];
        assert_eq!(validate(&ds), validate(&ds));
    }

    #[test]
    fn template_constructor_rejects_bad_input() {
        assert!(Template::<f64>::new("x", "s", Distribution::Probe, Split::Train, vec![]).is_err());
        let zero = vec![emb(&[0.0, 0.0], "z")];
        assert!(Template::new("x", "s", Distribution::Probe, Split::Train, zero).is_err());
    }

    #[test]
    fn subsample_edges() {
        let t = tmpl("a", "s1", Distribution::Probe, Split::Val, 6);
        let full = subsample_template(&t, 6, 3).unwrap();
        assert_eq!(full, t);
        let one = subsample_template(&t, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.subject_id, t.subject_id);
        assert_eq!(one.distribution, t.distribution);
        assert_eq!(
            subsample_template(&t, 4, 11).unwrap(),
            subsample_template(&t, 4, 11).unwrap()
        );
        assert!(matches!(subsample_template(&t, 0, 1), Err(Error::Parameter(_))));
        assert!(subsample_template(&t, 7, 1).is_err());
    }
}
