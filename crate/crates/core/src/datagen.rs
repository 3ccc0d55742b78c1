//! Synthetic embedding world.
//!
//! Each subject is a prototype on the unit sphere. Gallery embeddings are
//! light perturbations of it. Probe embeddings are heavier perturbations
//! seen through a fixed rotation, and a fraction of them are replaced by
//! unrelated unit vectors. Every probe embedding records in `quality_hint`
//! whether it carries identity signal (1) or not (0).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::template::{Dataset, Distribution, Embedding, Split, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub d: usize,
    /// Subjects assigned to the train and validation splits, in subject
    /// order; the rest form the test split.
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub gallery_templates: usize,
    pub probe_templates: usize,
    /// Inclusive size ranges.
    pub gallery_size: [usize; 2],
    pub probe_size: [usize; 2],
    /// Per-coordinate noise standard deviations.
    pub sigma_gallery: f64,
    pub sigma_probe: f64,
    /// Fraction of probe embeddings replaced by unrelated vectors.
    pub rho: f64,
    /// Rotation angle between the probe and gallery domains, in degrees.
    pub theta_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 50,
            d: 64,
            train_subjects: 30,
            val_subjects: 10,
            gallery_templates: 2,
            probe_templates: 5,
            gallery_size: [4, 8],
            probe_size: [4, 16],
            sigma_gallery: 0.1,
            sigma_probe: 0.5,
            rho: 0.4,
            theta_deg: 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_subjects < 2 {
            return bad(format!("need at least 2 subjects, got {}", self.n_subjects));
        }
        if self.d < 2 {
            return bad(format!("dimension must be at least 2, got {}", self.d));
        }
        if self.train_subjects + self.val_subjects > self.n_subjects {
            return bad(format!(
                "{} train + {} val subjects exceed {} subjects",
                self.train_subjects, self.val_subjects, self.n_subjects
            ));
        }
        if self.gallery_templates == 0 || self.probe_templates == 0 {
            return bad("every subject needs at least one probe and one gallery template".into());
        }
        for (name, [lo, hi]) in [("gallery_size", self.gallery_size), ("probe_size", self.probe_size)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        let sigmas = [self.sigma_gallery, self.sigma_probe];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("noise levels must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !self.theta_deg.is_finite() {
            return bad("rotation angle must be finite".into());
        }
        Ok(())
    }

    fn split_of(&self, subject: usize) -> Split {
        if subject < self.train_subjects {
            Split::Train
        } else if subject < self.train_subjects + self.val_subjects {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("s{i:04}")
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        if v.iter().any(|x| *x != 0.0) {
            return normalized(v);
        }
    }
}

/// A random orthonormal basis (rows), by Gram-Schmidt on Gaussian vectors.
fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian(rng, d);
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Rotation by `theta` radians in each of the `d/2` planes spanned by
/// consecutive pairs of a random orthonormal basis. Every vector orthogonal
/// to the leftover axis (odd `d`) is turned by exactly `theta`.
pub fn domain_rotation(d: usize, theta: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let q = random_orthogonal(rng, d);
    let (s, c) = theta.sin_cos();
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    // R = I + Σ_planes (c−1)(uuᵀ + vvᵀ) + s(vuᵀ − uvᵀ), acting on columns.
    for pair in q.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                r[i * d + j] += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
    }
    Tensor::from_parts(vec![d, d], r)
}

fn rotate(r: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| (0..d).map(|j| r.get(i, j) * x[j]).sum()).collect()
}

fn perturb(rng: &mut impl Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = proto
            .iter()
            .map(|p| p + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if v.iter().any(|x| *x != 0.0) {
            return normalized(v);
        }
    }
}

/// Generates the dataset. Deterministic in `config.seed`; each subject draws
/// from its own stream so subjects do not depend on each other's sizes.
pub fn generate(config: &SynthConfig) -> Result<Dataset<f64>> {
    config.validate()?;
    let d = config.d;
    let mut world = ChaCha8Rng::seed_from_u64(config.seed);
    let rotation = domain_rotation(d, config.theta_deg.to_radians(), &mut world);
    let prototypes: Vec<Vec<f64>> = (0..config.n_subjects).map(|_| unit_vector(&mut world, d)).collect();

    let mut templates = Vec::new();
    for (s, proto) in prototypes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s as u64 + 1);
        let subject = subject_name(s);
        let split = config.split_of(s);
        for k in 0..config.gallery_templates {
            let id = format!("{subject}-g{k}");
            let n = rng.random_range(config.gallery_size[0]..=config.gallery_size[1]);
            let e = (0..n)
                .map(|m| {
                    Embedding::new(perturb(&mut rng, proto, config.sigma_gallery), format!("{id}-m{m:02}"))
                        .with_quality(1.0)
                })
                .collect();
            templates.push(Template::new(id, subject.clone(), Distribution::Gallery, split, e)?);
        }
        for k in 0..config.probe_templates {
            let id = format!("{subject}-p{k}");
            let n = rng.random_range(config.probe_size[0]..=config.probe_size[1]);
            let e = (0..n)
                .map(|m| {
                    let media = format!("{id}-m{m:02}");
                    if rng.random::<f64>() < config.rho {
                        Embedding::new(unit_vector(&mut rng, d), media).with_quality(0.0)
                    } else {
                        let x = perturb(&mut rng, proto, config.sigma_probe);
                        Embedding::new(rotate(&rotation, &x), media).with_quality(1.0)
                    }
                })
                .collect();
            templates.push(Template::new(id, subject.clone(), Distribution::Probe, split, e)?);
        }
    }
    Ok(Dataset { d, templates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::validate;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn default_dataset_is_valid_and_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert!(validate(&a).is_valid());
        assert_eq!(a, generate(&cfg).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_world_reproduces_prototypes() {
        let cfg = SynthConfig {
            sigma_gallery: 0.0,
            sigma_probe: 0.0,
            rho: 0.0,
            theta_deg: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for s in 0..cfg.n_subjects {
            let name = subject_name(s);
            let first = &ds.templates.iter().find(|t| t.subject_id == name).unwrap().embeddings[0].vector;
            for t in ds.templates.iter().filter(|t| t.subject_id == name) {
                for e in &t.embeddings {
                    for (x, y) in e.vector.iter().zip(first) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_turns_every_vector_by_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = 30f64.to_radians();
        let r = domain_rotation(16, theta, &mut rng);
        let rt = r.transpose();
        let prod = r.matmul(&rt).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(16)) < 1e-12);
        for _ in 0..10 {
            let x = unit_vector(&mut rng, 16);
            assert!((cos(&x, &rotate(&r, &x)) - theta.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn informativeness_labels_follow_rho() {
        for (rho, want) in [(0.0, 1.0), (1.0, 0.0)] {
            let ds = generate(&SynthConfig {
                rho,
                ..SynthConfig::default()
            })
            .unwrap();
            for t in ds.templates.iter().filter(|t| t.distribution == Distribution::Probe) {
                assert!(t.embeddings.iter().all(|e| e.quality_hint == Some(want)));
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SynthConfig { rho: 1.5, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig {
            n_subjects: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            sigma_probe: -1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            probe_size: [5, 4],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            train_subjects: 45,
            ..ok
        }
        .validate()
        .is_err());
    }
}
