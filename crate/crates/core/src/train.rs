//! Siamese training: probe and gallery templates go through the same model,
//! the aggregates meet in the contrastive loss, and Adam updates the two
//! parameter groups at their own rates.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Method};
use crate::loss::{supcon_on_tape, CrossBatchMemory, SupconOut, DEFAULT_MEMORY_CAPACITY, DEFAULT_TAU};
use crate::model::{
    forward_template, ConanModel, ModelConfig, ModelVars, ParamGroup, DEFAULT_HEADS, DEFAULT_TEMPERATURE,
};
use crate::numerics::{fd_check, FdOptions, FdReport, Objective, Stencil, Tape, Tensor};
use crate::summary::SummaryLayout;
use crate::template::{subsample_with, Dataset, Distribution, Split, Template};

/// Which batch entries contribute a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSet {
    /// Probe and gallery aggregates.
    Both,
    ProbesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pooling softmax temperature.
    pub temperature: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lr_main: f64,
    pub lr_probe_transform: f64,
    pub heads: usize,
    /// Summary blocks, in canonical order.
    pub layout: Vec<String>,
    pub probe_transform: bool,
    /// Hidden widths of the context network; `4d, 2d` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<[usize; 2]>,
    pub subjects_per_batch: usize,
    /// Probe and gallery templates drawn per subject and side.
    pub templates_per_subject: usize,
    /// Inclusive range of subsampled template sizes.
    pub subsample: [usize; 2],
    pub memory_capacity: usize,
    pub anchors: AnchorSet,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: DEFAULT_TEMPERATURE,
            tau: DEFAULT_TAU,
            lr_main: 1e-2,
            lr_probe_transform: 1e-4,
            heads: DEFAULT_HEADS,
            layout: SummaryLayout::full().names(),
            probe_transform: true,
            hidden: None,
            subjects_per_batch: 8,
            templates_per_subject: 1,
            subsample: [2, 16],
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
            anchors: AnchorSet::Both,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("temperature", self.temperature), ("tau", self.tau)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lr_main", self.lr_main),
            ("lr_probe_transform", self.lr_probe_transform),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Parameter("patience must be at least 1".into()));
        }
        if self.subjects_per_batch < 2 {
            return Err(Error::Parameter("a batch needs at least two subjects".into()));
        }
        if self.templates_per_subject == 0 {
            return Err(Error::Parameter("templates_per_subject must be at least 1".into()));
        }
        let [lo, hi] = self.subsample;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("subsample range [{lo}, {hi}] is invalid")));
        }
        SummaryLayout::from_names(&self.layout)?;
        Ok(())
    }

    pub fn model_config(&self, d: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(d);
        m.heads = self.heads;
        m.layout = SummaryLayout::from_names(&self.layout)?;
        m.probe_transform = self.probe_transform;
        m.temperature = self.temperature;
        if let Some(h) = self.hidden {
            m.hidden = h;
        }
        m.validate()?;
        Ok(m)
    }

    /// Optimizer steps per epoch: every eligible subject once in expectation.
    pub fn steps_per_epoch(&self, subjects: usize) -> usize {
        subjects.div_ceil(self.subjects_per_batch).max(1)
    }
}

/// Adam with bias correction. Moments follow [`ConanModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &ConanModel<f64>) -> Self {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        Self::for_shapes(&shapes)
    }

    pub fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        let zeros: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every parameter; `lrs[i]` applies to parameter `i`.
    pub fn update(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} params, {} grads, {} rates for {} moments",
                params.len(),
                grads.len(),
                lrs.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                if lrs[i] != 0.0 {
                    pd[k] -= lrs[i] * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Sampled templates; each subject contributes its probes then its
/// galleries.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub templates: Vec<Template<f64>>,
}

impl Batch {
    pub fn subjects(&self) -> Vec<String> {
        self.templates.iter().map(|t| t.subject_id.clone()).collect()
    }
}

/// Train-split subjects usable for batches, with their template indices.
#[derive(Debug, Clone)]
pub struct SubjectIndex {
    pub subjects: Vec<String>,
    probes: Vec<Vec<usize>>,
    galleries: Vec<Vec<usize>>,
}

impl SubjectIndex {
    /// Subjects lacking either side are left out with a warning.
    pub fn build(ds: &Dataset<f64>) -> Result<Self> {
        let mut by: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, t) in ds.templates.iter().enumerate() {
            if t.split != Split::Train {
                continue;
            }
            let e = by.entry(t.subject_id.as_str()).or_default();
            match t.distribution {
                Distribution::Probe => e.0.push(i),
                Distribution::Gallery => e.1.push(i),
            }
        }
        let mut idx = SubjectIndex {
            subjects: Vec::new(),
            probes: Vec::new(),
            galleries: Vec::new(),
        };
        for (s, (p, g)) in by {
            if p.is_empty() || g.is_empty() {
                log::warn!(
                    "train subject {s} lacks {} templates and is never sampled",
                    if p.is_empty() { "probe" } else { "gallery" }
                );
                continue;
            }
            idx.subjects.push(s.to_string());
            idx.probes.push(p);
            idx.galleries.push(g);
        }
        if idx.subjects.len() < 2 {
            return Err(Error::Dataset(format!(
                "training needs at least 2 subjects with probe and gallery templates, found {}",
                idx.subjects.len()
            )));
        }
        Ok(idx)
    }
}

/// Draws one batch. Every subject brings at least one probe and one gallery
/// template, so every entry has a positive.
pub fn sample_batch(ds: &Dataset<f64>, index: &SubjectIndex, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n = cfg.subjects_per_batch.min(index.subjects.len());
    let mut chosen = sample(rng, index.subjects.len(), n).into_vec();
    chosen.sort_unstable();
    let mut templates = Vec::with_capacity(n * 2 * cfg.templates_per_subject);
    let [lo, hi] = cfg.subsample;
    for s in chosen {
        for pool in [&index.probes[s], &index.galleries[s]] {
            for _ in 0..cfg.templates_per_subject {
                let t = &ds.templates[pool[rng.random_range(0..pool.len())]];
                let k = rng.random_range(lo..=hi).min(t.len());
                templates.push(subsample_with(t, k, rng));
            }
        }
    }
    Ok(Batch { templates })
}

/// Mutable training state; everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ConanModel<f64>,
    pub adam: AdamState,
    pub memory: CrossBatchMemory<f64>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best: Option<BestSoFar>,
    pub stale_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSoFar {
    pub epoch: usize,
    pub val_rank1: f64,
    pub model: ConanModel<f64>,
}

impl TrainState {
    /// Fresh state. The model and the sampler draw from separate streams of
    /// the configured seed.
    pub fn init(d: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ConanModel::init(cfg.model_config(d)?, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            adam: AdamState::new(&model),
            memory: CrossBatchMemory::new(cfg.memory_capacity),
            model,
            rng,
            epoch: 0,
            best: None,
            stale_epochs: 0,
        })
    }
}

/// Learning rate of each parameter, in [`ConanModel::params`] order.
pub fn group_rates(model: &ConanModel<f64>, cfg: &TrainConfig) -> Vec<f64> {
    model
        .params()
        .iter()
        .map(|(_, g, _)| match g {
            ParamGroup::Main => cfg.lr_main,
            ParamGroup::ProbeTransform => cfg.lr_probe_transform,
        })
        .collect()
}

fn record(
    model: &ConanModel<f64>,
    memory: &CrossBatchMemory<f64>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(Tape<f64>, ModelVars, SupconOut)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, true);
    let mut pooled = Vec::with_capacity(batch.templates.len());
    for t in &batch.templates {
        let x = t.matrix()?;
        pooled.push(forward_template(&mut tape, &vars, &model.config, &x, t.distribution)?.pooled);
    }
    let z = tape.concat_rows(&pooled)?;
    let anchors: Vec<bool> = batch
        .templates
        .iter()
        .map(|t| cfg.anchors == AnchorSet::Both || t.distribution == Distribution::Probe)
        .collect();
    let out = supcon_on_tape(&mut tape, z, &batch.subjects(), &anchors, memory, cfg.tau)?;
    Ok((tape, vars, out))
}

/// Loss of `batch` and its gradient for every parameter, plus the
/// normalized aggregates. The memory is read but not updated.
pub fn loss_and_gradients(
    model: &ConanModel<f64>,
    memory: &CrossBatchMemory<f64>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<f64>>, Tensor<f64>)> {
    let (tape, vars, out) = record(model, memory, batch, cfg)?;
    let loss = tape.value(out.loss).item();
    let grads = tape.backward(out.loss)?;
    let g = vars
        .all
        .iter()
        .map(|&v| match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        })
        .collect();
    Ok((loss, g, tape.value(out.normalized).clone()))
}

/// Smallest distance of any selection (max, min, median, mode, relu) in the
/// loss graph from a point where it switches branch.
pub fn loss_margin(
    model: &ConanModel<f64>,
    memory: &CrossBatchMemory<f64>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(record(model, memory, batch, cfg)?.0.nonsmooth_margin())
}

/// The batch loss as a function of the model parameters, for
/// finite-difference checks.
pub struct LossObjective<'a> {
    pub model: ConanModel<f64>,
    pub memory: &'a CrossBatchMemory<f64>,
    pub batch: &'a Batch,
    pub config: &'a TrainConfig,
}

impl LossObjective<'_> {
    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.model.params().into_iter().map(|(_, _, t)| t.clone()).collect()
    }
}

impl Objective for LossObjective<'_> {
    fn value(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        self.model.set_params(params.to_vec())?;
        let (tape, _, out) = record(&self.model, self.memory, self.batch, self.config)?;
        Ok(tape.value(out.loss).item())
    }

    fn gradient(&mut self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        self.model.set_params(params.to_vec())?;
        Ok(loss_and_gradients(&self.model, self.memory, self.batch, self.config)?.1)
    }
}

/// Smallest distance from a branch switch at which a finite-difference
/// check with `opts` is trusted: the largest parameter excursion of the
/// stencil, scaled by 2.5 to cover inputs of that magnitude.
pub fn tie_free_margin(opts: &FdOptions) -> f64 {
    let reach = match opts.stencil {
        Stencil::ThreePoint => 1.0,
        Stencil::FivePoint => 2.0,
    };
    2.5 * reach * opts.step
}

/// Checks the full-loss gradient on a random instance: a seeded world of
/// width `d`, batches of four subjects whose templates hold `n` embeddings,
/// and a memory primed with one earlier batch. Batches too close to a
/// branch switch of max, min, median, mode or relu are redrawn.
pub fn gradient_check_instance(seed: u64, d: usize, n: usize, opts: FdOptions) -> Result<FdReport> {
    let cfg = TrainConfig {
        heads: if d.is_multiple_of(DEFAULT_HEADS) {
            DEFAULT_HEADS
        } else {
            1
        },
        subjects_per_batch: 4,
        subsample: [n, n],
        memory_capacity: 8,
        seed,
        ..TrainConfig::default()
    };
    let mut tightest = None;
    for attempt in 0..20u64 {
        let world = generate(&SynthConfig {
            n_subjects: 12,
            d,
            train_subjects: 12,
            val_subjects: 0,
            gallery_templates: 1,
            probe_templates: 1,
            gallery_size: [n, n],
            probe_size: [n, n],
            seed: seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            ..SynthConfig::default()
        })?;
        let mut state = TrainState::init(d, &cfg)?;
        let index = SubjectIndex::build(&world)?;
        let first = sample_batch(&world, &index, &cfg, &mut state.rng)?;
        let (_, _, z) = loss_and_gradients(&state.model, &state.memory, &first, &cfg)?;
        state.memory.update(&z, &first.subjects())?;
        for _ in 0..20 {
            let batch = sample_batch(&world, &index, &cfg, &mut state.rng)?;
            let (tape, _, _) = record(&state.model, &state.memory, &batch, &cfg)?;
            if tape.nonsmooth_margin() < tie_free_margin(&opts) {
                tightest = tape.tightest_nonsmooth();
                continue;
            }
            let mut obj = LossObjective {
                model: state.model.clone(),
                memory: &state.memory,
                batch: &batch,
                config: &cfg,
            };
            let params = obj.params();
            return fd_check(&mut obj, &params, opts);
        }
    }
    Err(Error::Degenerate(format!(
        "no tie-free batch found for seed {seed}, d {d}, n {n} (last tightest: {tightest:?})"
    )))
}

/// Loss of `batch` under the current state, without updating anything.
pub fn batch_loss(state: &TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_and_gradients(&state.model, &state.memory, batch, cfg)?.0)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let (loss, grads, normalized) =
        loss_and_gradients(&state.model, &state.memory, batch, cfg).map_err(|e| match e {
            Error::NonFinite(what) => abort(state, batch, &format!("non-finite value in {what}")),
            other => other,
        })?;
    if !loss.is_finite() || grads.iter().any(|g| g.check_finite("gradient").is_err()) {
        return Err(abort(state, batch, "non-finite loss or gradient"));
    }
    let rates = group_rates(&state.model, cfg);
    state.adam.update(state.model.params_mut(), &grads, &rates)?;
    state.memory.update(&normalized, &batch.subjects())?;
    Ok(loss)
}

fn abort(state: &TrainState, batch: &Batch, why: &str) -> Error {
    let mut dump = format!(
        "{why} at optimizer step {} (epoch {})\nbatch:",
        state.adam.step + 1,
        state.epoch + 1
    );
    for t in &batch.templates {
        dump.push_str(&format!(" {}[{}]", t.id, t.len()));
    }
    dump.push_str("\nparameter max-abs:");
    for (name, _, t) in state.model.params() {
        let m = t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        dump.push_str(&format!(" {name}={m:e}"));
    }
    Error::TrainingAborted(dump)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rank1: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_rank1";

impl EpochRecord {
    /// The reproducible part of the record. Wall time is kept apart.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.12e}\t{:.6}", self.epoch, self.train_loss, self.val_rank1)
    }
}

/// Where `fit` reports progress. Every hook is optional.
pub trait FitObserver {
    fn epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    fn improved(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl FitObserver for () {}

/// Writes the metrics log to one sink and wall times to another.
pub struct LogObserver<W: Write, V: Write> {
    pub log: W,
    pub timing: V,
    header_written: bool,
}

impl<W: Write, V: Write> LogObserver<W, V> {
    pub fn new(log: W, timing: V) -> Self {
        LogObserver {
            log,
            timing,
            header_written: false,
        }
    }

    /// For appending to logs of a resumed run.
    pub fn continuing(log: W, timing: V) -> Self {
        LogObserver {
            log,
            timing,
            header_written: true,
        }
    }
}

impl<W: Write, V: Write> FitObserver for LogObserver<W, V> {
    fn epoch(&mut self, r: &EpochRecord, _state: &TrainState) -> Result<()> {
        let io = |e: std::io::Error| Error::io("metrics log", e);
        if !self.header_written {
            writeln!(self.log, "{LOG_HEADER}").map_err(io)?;
            writeln!(self.timing, "epoch\tseconds").map_err(io)?;
            self.header_written = true;
        }
        writeln!(self.log, "{}", r.log_line()).map_err(io)?;
        writeln!(self.timing, "{}\t{:.3}", r.epoch, r.seconds).map_err(io)?;
        self.log.flush().map_err(io)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: BestSoFar,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Trains until validation rank-1 fails to improve for `patience` epochs or
/// `max_epochs` is reached. Continues from `state` when given.
pub fn fit(
    ds: &Dataset<f64>,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    observer: &mut dyn FitObserver,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let index = SubjectIndex::build(ds)?;
    if !ds.templates.iter().any(|t| t.split == Split::Val) {
        return Err(Error::Dataset("dataset has no validation split".into()));
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::init(ds.d, cfg)?,
    };
    if state.model.config != cfg.model_config(ds.d)? {
        return Err(Error::Schema(
            "resumed model does not match the training configuration".into(),
        ));
    }
    let steps = cfg.steps_per_epoch(index.subjects.len());
    let mut history = Vec::new();
    while state.epoch < cfg.max_epochs && state.stale_epochs < cfg.patience {
        let start = Instant::now();
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sample_batch(ds, &index, cfg, &mut state.rng)?;
            total += train_step(&mut state, &batch, cfg)?;
        }
        state.epoch += 1;
        let val = evaluate(ds, Split::Val, Method::Conan(&state.model), "val")?.rank1;
        let improved = state.best.as_ref().is_none_or(|b| val > b.val_rank1);
        if improved {
            state.best = Some(BestSoFar {
                epoch: state.epoch,
                val_rank1: val,
                model: state.model.clone(),
            });
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: total / steps as f64,
            val_rank1: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.log_line());
        observer.epoch(&record, &state)?;
        if improved {
            observer.improved(&state)?;
        }
        history.push(record);
    }
    let best = state
        .best
        .clone()
        .ok_or_else(|| Error::TrainingAborted("no epoch completed".into()))?;
    Ok(FitOutcome { best, history, state })
}
