//! Self-describing model checkpoints, optionally carrying the full training
//! state for an exact resume.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CNCK"
//! 4       4     format version, u32 LE (currently 1)
//! 8       8     header length H, u64 LE
//! 16      H     header, UTF-8 TOML
//! 16+H    8·n   tensor payloads, f64 LE, concatenated
//! end−8   8     FNV-1a 64 of header and payload bytes, u64 LE
//! ```
//!
//! The header records the architecture (`d`, `heads`, `hidden`, `layout`,
//! `layout_version`, `probe_transform`, `temperature`) and a `[[tensors]]`
//! directory of `{name, shape, offset}` where `offset` counts f64 elements
//! from the start of the payload. Model tensors use the names of
//! [`ConanModel::params`]. A resumable checkpoint adds a `[training]` table
//! and tensors prefixed `state.`, `best.`, `adam.m.`, `adam.v.`, plus
//! `memory`. An optional `[config]` table echoes the run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{checksum, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::loss::CrossBatchMemory;
use crate::model::{ConanModel, ModelConfig};
use crate::numerics::Tensor;
use crate::summary::{SummaryLayout, LAYOUT_VERSION};
use crate::train::{AdamState, BestSoFar, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ConanModel<f64>,
    pub state: Option<TrainState>,
    pub config: Option<toml::Table>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    d: usize,
    heads: usize,
    hidden: [usize; 2],
    layout_version: u32,
    layout: Vec<String>,
    probe_transform: bool,
    temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<toml::Table>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingHeader {
    epoch: usize,
    stale_epochs: usize,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// 32 bytes as 64 hex digits.
    rng_seed: String,
    rng_stream: u64,
    /// Decimal; TOML integers stop at 64 bits.
    rng_word_pos: String,
    memory_capacity: usize,
    memory_subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_val_rank1: Option<f64>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || schema(format!("rng_seed {s:?} is not 64 hex digits"));
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

struct PayloadWriter {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, t: &Tensor<f64>) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: (self.payload.len() / 8) as u64,
        });
        for v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn push_model(&mut self, prefix: &str, m: &ConanModel<f64>) {
        for (name, _, t) in m.params() {
            self.push(format!("{prefix}{name}"), t);
        }
    }
}

/// Tensors read back from the directory, consumed by name.
struct TensorPool(BTreeMap<String, Tensor<f64>>);

impl TensorPool {
    fn take(&mut self, name: &str) -> Result<Tensor<f64>> {
        self.0
            .remove(name)
            .ok_or_else(|| schema(format!("checkpoint lacks tensor {name}")))
    }

    fn take_model(&mut self, prefix: &str, config: &ModelConfig) -> Result<ConanModel<f64>> {
        let mut model = ConanModel::<f64>::init(config.clone(), 0)?;
        let names: Vec<&str> = model.params().iter().map(|(n, _, _)| *n).collect();
        let values = names
            .iter()
            .map(|n| self.take(&format!("{prefix}{n}")))
            .collect::<Result<Vec<_>>>()?;
        model
            .set_params(values)
            .map_err(|e| schema(format!("checkpoint tensors do not fit the architecture: {e}")))?;
        Ok(model)
    }
}

impl Checkpoint {
    pub fn new(model: ConanModel<f64>) -> Self {
        Checkpoint {
            model,
            state: None,
            config: None,
        }
    }

    /// Fails unless the checkpoint was built for embeddings of width `d` and
    /// the given summary block order.
    pub fn check_compatible(&self, d: usize, layout: Option<&SummaryLayout>) -> Result<()> {
        let c = &self.model.config;
        if c.d != d {
            return Err(schema(format!("checkpoint expects d = {}, data has d = {d}", c.d)));
        }
        if let Some(l) = layout {
            if *l != c.layout {
                return Err(schema(format!(
                    "checkpoint block order {:?} differs from requested {:?}",
                    c.layout.names(),
                    l.names()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.model.config;
        let mut w = PayloadWriter {
            entries: Vec::new(),
            payload: Vec::new(),
        };
        w.push_model("", &self.model);
        let training = match &self.state {
            None => None,
            Some(s) => {
                let same = |m: &ConanModel<f64>| m.config == *c;
                if !same(&s.model) || s.best.as_ref().is_some_and(|b| !same(&b.model)) {
                    return Err(schema(
                        "training state uses a different architecture than the checkpoint model",
                    ));
                }
                w.push_model("state.", &s.model);
                if let Some(b) = &s.best {
                    w.push_model("best.", &b.model);
                }
                let names: Vec<&str> = s.model.params().iter().map(|(n, _, _)| *n).collect();
                if s.adam.m.len() != names.len() || s.adam.v.len() != names.len() {
                    return Err(schema("optimizer moments do not match the parameter list"));
                }
                for (n, m) in names.iter().zip(&s.adam.m) {
                    w.push(format!("adam.m.{n}"), m);
                }
                for (n, v) in names.iter().zip(&s.adam.v) {
                    w.push(format!("adam.v.{n}"), v);
                }
                let mut subjects = Vec::with_capacity(s.memory.len());
                if !s.memory.is_empty() {
                    let mut data = Vec::with_capacity(s.memory.len() * c.d);
                    for (z, subject) in s.memory.entries() {
                        data.extend_from_slice(z);
                        subjects.push(subject.to_string());
                    }
                    w.push("memory".into(), &Tensor::matrix(subjects.len(), c.d, data)?);
                }
                Some(TrainingHeader {
                    epoch: s.epoch,
                    stale_epochs: s.stale_epochs,
                    adam_step: s.adam.step,
                    beta1: s.adam.beta1,
                    beta2: s.adam.beta2,
                    eps: s.adam.eps,
                    rng_seed: hex(&s.rng.get_seed()),
                    rng_stream: s.rng.get_stream(),
                    rng_word_pos: s.rng.get_word_pos().to_string(),
                    memory_capacity: s.memory.capacity(),
                    memory_subjects: subjects,
                    best_epoch: s.best.as_ref().map(|b| b.epoch),
                    best_val_rank1: s.best.as_ref().map(|b| b.val_rank1),
                })
            }
        };
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            d: c.d,
            heads: c.heads,
            hidden: c.hidden,
            layout_version: LAYOUT_VERSION,
            layout: c.layout.names(),
            probe_transform: c.probe_transform,
            temperature: c.temperature,
            training,
            config: self.config.clone(),
            tensors: w.entries,
        };
        let text = toml::to_string(&header).map_err(|e| schema(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + text.len() + w.payload.len() + 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&w.payload);
        let sum = checksum(&out[16..]);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(schema("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Integrity("header length overflows".into()))?;
        if r.remaining() < 8 || header_len > r.remaining() - 8 {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let body = &bytes[16..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if checksum(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let text = std::str::from_utf8(&body[..header_len]).map_err(|_| schema("checkpoint header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| schema(format!("checkpoint header: {e}")))?;
        if header.format_version != version {
            return Err(schema(format!(
                "header format_version {} disagrees with the binary version {version}",
                header.format_version
            )));
        }
        if header.layout_version != LAYOUT_VERSION {
            return Err(Error::Version {
                found: header.layout_version,
                expected: LAYOUT_VERSION,
            });
        }
        let payload = &body[header_len..];
        if !payload.len().is_multiple_of(8) {
            return Err(Error::Integrity("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut pool = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = usize::try_from(e.offset).map_err(|_| schema("tensor offset overflows"))?;
            let slice = start
                .checked_add(n)
                .and_then(|end| values.get(start..end))
                .ok_or_else(|| schema(format!("tensor {} runs past the payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), slice.to_vec())?;
            if pool.insert(e.name.clone(), t).is_some() {
                return Err(schema(format!("tensor {} listed twice", e.name)));
            }
        }
        let mut pool = TensorPool(pool);

        let config = ModelConfig {
            d: header.d,
            heads: header.heads,
            hidden: header.hidden,
            layout: SummaryLayout::from_names(&header.layout)?,
            probe_transform: header.probe_transform,
            temperature: header.temperature,
        };
        config.validate()?;
        let model = pool.take_model("", &config)?;
        let state = match header.training {
            None => None,
            Some(t) => {
                let current = pool.take_model("state.", &config)?;
                let best = match (t.best_epoch, t.best_val_rank1) {
                    (Some(epoch), Some(val_rank1)) => Some(BestSoFar {
                        epoch,
                        val_rank1,
                        model: pool.take_model("best.", &config)?,
                    }),
                    (None, None) => None,
                    _ => return Err(schema("best_epoch and best_val_rank1 must appear together")),
                };
                let names: Vec<String> = current.params().iter().map(|(n, _, _)| n.to_string()).collect();
                let m = names
                    .iter()
                    .map(|n| pool.take(&format!("adam.m.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                let v = names
                    .iter()
                    .map(|n| pool.take(&format!("adam.v.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                for ((mm, vv), (_, _, p)) in m.iter().zip(&v).zip(current.params()) {
                    if !mm.same_shape(p) || !vv.same_shape(p) {
                        return Err(schema("optimizer moment shape differs from its parameter"));
                    }
                }
                let mut memory = CrossBatchMemory::new(t.memory_capacity);
                if t.memory_subjects.len() > t.memory_capacity {
                    return Err(schema("memory holds more entries than its capacity"));
                }
                if !t.memory_subjects.is_empty() {
                    let z = pool.take("memory")?;
                    if z.shape() != [t.memory_subjects.len(), header.d] {
                        return Err(schema(format!("memory tensor has shape {:?}", z.shape())));
                    }
                    memory.update(&z, &t.memory_subjects)?;
                }
                let mut rng = ChaCha8Rng::from_seed(unhex(&t.rng_seed)?);
                rng.set_stream(t.rng_stream);
                let pos: u128 = t
                    .rng_word_pos
                    .parse()
                    .map_err(|_| schema(format!("rng_word_pos {:?} is not an integer", t.rng_word_pos)))?;
                rng.set_word_pos(pos);
                Some(TrainState {
                    model: current,
                    adam: AdamState {
                        m,
                        v,
                        step: t.adam_step,
                        beta1: t.beta1,
                        beta2: t.beta2,
                        eps: t.eps,
                    },
                    memory,
                    rng,
                    epoch: t.epoch,
                    best,
                    stale_epochs: t.stale_epochs,
                })
            }
        };
        if let Some(extra) = pool.0.keys().next() {
            return Err(schema(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model,
            state,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary::Block;
    use crate::train::{sample_batch, train_step, SubjectIndex, TrainConfig};
    use rand::Rng;

    fn random_model(seed: u64, d: usize) -> ConanModel<f64> {
        let mut m = ConanModel::<f64>::init(ModelConfig::new(d), seed).unwrap();
        // Move every parameter off its initial value, including the identity
        // probe transform, so a silently re-initialized tensor would show.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn bits(m: &ConanModel<f64>) -> Vec<u64> {
        m.params()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn model_round_trip_is_bit_identical() {
        let mut ck = Checkpoint::new(random_model(1, 8));
        ck.config = Some(toml::from_str("seed = 3\n[train]\nlr_main = 0.01").unwrap());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bits(&back.model), bits(&ck.model));
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn training_state_round_trip() {
        use crate::datagen::{generate, SynthConfig};
        let ds = generate(&SynthConfig {
            n_subjects: 6,
            d: 8,
            train_subjects: 4,
            val_subjects: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            subjects_per_batch: 2,
            memory_capacity: 5,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(ds.d, &cfg).unwrap();
        let idx = SubjectIndex::build(&ds).unwrap();
        for _ in 0..4 {
            let b = sample_batch(&ds, &idx, &cfg, &mut state.rng).unwrap();
            train_step(&mut state, &b, &cfg).unwrap();
        }
        state.epoch = 3;
        state.stale_epochs = 1;
        state.best = Some(BestSoFar {
            epoch: 2,
            val_rank1: 0.75,
            model: random_model(9, 8),
        });
        let ck = Checkpoint {
            model: state.model.clone(),
            state: Some(state),
            config: None,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn flipped_payload_byte_is_an_integrity_error() {
        let mut bytes = Checkpoint::new(random_model(2, 8)).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_version_is_a_version_error() {
        let mut bytes = Checkpoint::new(random_model(2, 8)).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn mismatched_width_or_block_order_is_refused() {
        let ck = Checkpoint::new(random_model(3, 8));
        assert!(ck.check_compatible(8, Some(&SummaryLayout::full())).is_ok());
        assert!(matches!(ck.check_compatible(16, None), Err(Error::Schema(_))));
        let mean_only = SummaryLayout::new(&[Block::Mean]).unwrap();
        assert!(matches!(
            ck.check_compatible(8, Some(&mean_only)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn reordered_blocks_in_header_are_refused() {
        let bytes = Checkpoint::new(random_model(3, 8)).to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        // Same length, so the payload offsets stay valid.
        let swapped = header.replacen("\"max\", \"min\"", "\"min\", \"max\"", 1);
        assert_ne!(swapped, header);
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(swapped.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..bytes.len() - 8]);
        let sum = checksum(&out[16..]);
        out.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::Schema(_))));
    }
}
