//! The full aggregation model and its forward pass on a [`Tape`].

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_on_tape, AttentionParams, AttentionVars};
use crate::context::{context_on_tape, default_hidden, probe_on_tape, ContextMlp, MlpVars, ProbeTransform, ProbeVars};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::summary::{stats_on_tape, Block, SummaryLayout};
use crate::template::Distribution;

/// Default softmax temperature for pooling weights.
pub const DEFAULT_TEMPERATURE: f64 = 0.067;
/// Alternative temperature profile.
pub const ALT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_HEADS: usize = 4;

/// Architecture hyperparameters. Everything needed to rebuild the parameter
/// shapes from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub hidden: [usize; 2],
    pub layout: SummaryLayout,
    pub probe_transform: bool,
    /// Softmax temperature applied to embedding/context similarities.
    pub temperature: f64,
}

impl ModelConfig {
    pub fn new(d: usize) -> Self {
        ModelConfig {
            d,
            heads: DEFAULT_HEADS,
            hidden: default_hidden(d),
            layout: SummaryLayout::full(),
            probe_transform: true,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Parameter("embedding dimension must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "dimension {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Parameter("hidden widths must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Attention, distribution tokens and the context network.
    Main,
    ProbeTransform,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Main => "main",
            ParamGroup::ProbeTransform => "probe_transform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConanModel<T> {
    pub config: ModelConfig,
    pub attention: AttentionParams<T>,
    pub context: ContextMlp<T>,
    pub probe: Option<ProbeTransform<T>>,
}

impl<T: Scalar> ConanModel<T> {
    /// Seeded initialization. The probe transform starts at the identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = AttentionParams::init(config.d, config.heads, &mut rng)?;
        let context = ContextMlp::init(config.layout.width(config.d), config.hidden, config.d, &mut rng);
        let probe = config.probe_transform.then(|| ProbeTransform::identity(config.d));
        Ok(ConanModel {
            config,
            attention,
            context,
            probe,
        })
    }

    /// The context network used for templates of either side. There is one
    /// set of weights; both sides get the same object.
    pub fn context_params_for(&self, _dist: Distribution) -> &ContextMlp<T> {
        &self.context
    }

    /// Every learnable tensor in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, ParamGroup, &Tensor<T>)> {
        use ParamGroup::*;
        let a = &self.attention;
        let c = &self.context;
        let mut v = vec![
            ("attention.w_q", Main, &a.w_q),
            ("attention.w_k", Main, &a.w_k),
            ("attention.w_v", Main, &a.w_v),
            ("attention.w_o", Main, &a.w_o),
            ("attention.dte_probe", Main, &a.dte_probe),
            ("attention.dte_gallery", Main, &a.dte_gallery),
            ("context.w1", Main, &c.w1),
            ("context.b1", Main, &c.b1),
            ("context.w2", Main, &c.w2),
            ("context.b2", Main, &c.b2),
            ("context.w3", Main, &c.w3),
            ("context.b3", Main, &c.b3),
        ];
        if let Some(p) = &self.probe {
            v.push(("probe.w", ProbeTransform, &p.w));
            v.push(("probe.b", ProbeTransform, &p.b));
        }
        v
    }

    /// Mutable view in the same order as [`ConanModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let a = &mut self.attention;
        let c = &mut self.context;
        let mut v = vec![
            &mut a.w_q,
            &mut a.w_k,
            &mut a.w_v,
            &mut a.w_o,
            &mut a.dte_probe,
            &mut a.dte_gallery,
            &mut c.w1,
            &mut c.b1,
            &mut c.w2,
            &mut c.b2,
            &mut c.w3,
            &mut c.b3,
        ];
        if let Some(p) = &mut self.probe {
            v.push(&mut p.w);
            v.push(&mut p.b);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Replaces every parameter, in [`ConanModel::params`] order.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(dim_err!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            ));
        }
        for (slot, v) in slots.iter_mut().zip(&values) {
            if !slot.same_shape(v) {
                return Err(dim_err!("parameter shape {:?} vs {:?}", slot.shape(), v.shape()));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.attention.validate()?;
        self.context.validate()?;
        if self.context.input_width() != self.config.layout.width(self.config.d) {
            return Err(dim_err!(
                "context network input {} does not match summary width {}",
                self.context.input_width(),
                self.config.layout.width(self.config.d)
            ));
        }
        if self.context.output_width() != self.config.d {
            return Err(dim_err!(
                "context network output {} != d {}",
                self.context.output_width(),
                self.config.d
            ));
        }
        if let Some(p) = &self.probe {
            p.validate()?;
        }
        if self.probe.is_some() != self.config.probe_transform {
            return Err(Error::Schema("probe transform presence disagrees with config".into()));
        }
        for (name, _, t) in self.params() {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ConanModel<U> {
        let a = &self.attention;
        let c = &self.context;
        ConanModel {
            config: self.config.clone(),
            attention: AttentionParams {
                heads: a.heads,
                w_q: a.w_q.cast(),
                w_k: a.w_k.cast(),
                w_v: a.w_v.cast(),
                w_o: a.w_o.cast(),
                dte_probe: a.dte_probe.cast(),
                dte_gallery: a.dte_gallery.cast(),
            },
            context: ContextMlp {
                w1: c.w1.cast(),
                b1: c.b1.cast(),
                w2: c.w2.cast(),
                b2: c.b2.cast(),
                w3: c.w3.cast(),
                b3: c.b3.cast(),
            },
            probe: self.probe.as_ref().map(|p| ProbeTransform {
                w: p.w.cast(),
                b: p.b.cast(),
            }),
        }
    }
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub(crate) attention: AttentionVars,
    pub(crate) context: MlpVars,
    pub(crate) probe: Option<ProbeVars>,
    /// Same order as [`ConanModel::params`].
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Registers the parameters on `tape`; as gradient leaves when
    /// `trainable`, otherwise as constants.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &ConanModel<T>, trainable: bool) -> Self {
        let all: Vec<Var> = model
            .params()
            .into_iter()
            .map(|(_, _, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ModelVars {
            attention: AttentionVars {
                heads: model.attention.heads,
                w_q: all[0],
                w_k: all[1],
                w_v: all[2],
                w_o: all[3],
                dte_probe: all[4],
                dte_gallery: all[5],
            },
            context: MlpVars {
                w1: all[6],
                b1: all[7],
                w2: all[8],
                b2: all[9],
                w3: all[10],
                b3: all[11],
            },
            probe: model.probe.as_ref().map(|_| ProbeVars { w: all[12], b: all[13] }),
            all,
        }
    }
}

/// Nodes produced by aggregating one template.
#[derive(Debug, Clone)]
pub struct TemplateForward {
    /// `N × d` features actually pooled (probe-transformed when applicable).
    pub features: Var,
    pub summary: Var,
    /// `1 × d`
    pub context: Var,
    /// `1 × N` cosine similarities.
    pub similarities: Var,
    /// `1 × N` pooling weights.
    pub weights: Var,
    /// `1 × d` aggregated template.
    pub pooled: Var,
    /// Per-head attention matrices, empty when the layout has no attention.
    pub attention: Vec<Var>,
}

/// Records the aggregation of one template (`x`: `N × d`) on the tape.
///
/// Pipeline: probe transform (probe side only) → statistics → attention
/// token → summary → context vector → cosine similarities → temperature
/// softmax → weighted sum.
pub fn forward_template<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    x: &Tensor<T>,
    dist: Distribution,
) -> Result<TemplateForward> {
    if x.rows() == 0 {
        return Err(Error::Parameter("cannot aggregate an empty template".into()));
    }
    if x.cols() != config.d {
        return Err(dim_err!("template width {} but model d = {}", x.cols(), config.d));
    }
    let raw = tape.constant(x.clone());
    let features = match (dist, &vars.probe) {
        (Distribution::Probe, Some(p)) => probe_on_tape(tape, raw, p)?,
        _ => raw,
    };
    let layout = &config.layout;
    let stats = stats_on_tape(tape, features, layout)?;
    let mut attention = Vec::new();
    let mut attended = None;
    if layout.uses_attention() {
        let (out, w) = attend_on_tape(tape, features, vars.attention.dte(dist), &vars.attention)?;
        attended = Some(out.attended);
        attention = w;
    }
    let mut parts = Vec::with_capacity(layout.blocks().len());
    for &b in layout.blocks() {
        parts.push(match b {
            Block::Attended => attended.expect("attention computed"),
            Block::Dte => vars.attention.dte(dist),
            other => stats.iter().find(|(sb, _)| *sb == other).expect("statistic recorded").1,
        });
    }
    let summary = tape.concat_cols(&parts)?;
    let context = context_on_tape(tape, summary, &vars.context)?;
    let unit_x = tape.normalize_rows(features)?;
    let unit_c = tape
        .normalize_rows(context)
        .map_err(|_| Error::Degenerate("context vector has zero norm".into()))?;
    let sims = tape.matmul_bt(unit_x, unit_c)?;
    let similarities = tape.transpose(sims)?;
    let weights = tape.softmax_rows(similarities, T::from_f64_lossy(config.temperature))?;
    let pooled = tape.matmul(weights, features)?;
    Ok(TemplateForward {
        features,
        summary,
        context,
        similarities,
        weights,
        pooled,
        attention,
    })
}
