//! Parametric, differentiable Q-models over decision contexts.
//!
//! A model maps `(input, prefix)` to one utility per vocabulary token. Three
//! families are provided: a tabular n-gram table, a linear model over sparse
//! context features, and a one-hidden-layer tanh network. All three share a
//! single gradient primitive (coefficient-weighted backprop of the scalar
//! `sum_a g_a Q_a`) plus a central-difference oracle used to verify it.
//!
//! Token index 0 is reserved for EOS in every vocabulary. Conditioning on the
//! input goes through its last `context_order` tokens (tabular/linear) or a
//! mean-pooled embedding (hidden-layer family); absent slots use a virtual
//! pad token with id `d`.

// The backprop kernels index into parallel buffers laid out by the parameter
// layout; positional loops keep that arithmetic visible.
#![allow(clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::math::{QValues, StepCoefficients};
use crate::rng::RngStream;
use crate::{Token, EOS};

/// Hard cap on the parameter vector; tabular tables grow as `(d+1)^(2k) * d`.
const MAX_PARAMS: usize = 50_000_000;

/// Rng stream id reserved for parameter initialization.
const INIT_STREAM: u64 = 0x51;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary size must be >= 2, got {0}")]
    VocabTooSmall(usize),
    #[error("dimension must be positive: {0}")]
    ZeroDimension(&'static str),
    #[error("unsupported dimension combination: parameter count would exceed {MAX_PARAMS}")]
    TooManyParams,
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("prefix contains EOS at position {0}; decoding stops at EOS")]
    PrefixContainsEos(usize),
    #[error("coefficient length {got} does not match vocabulary {vocab}")]
    CoefficientLength { got: usize, vocab: usize },
    #[error("gradient buffer length {got} does not match parameter layout {expect}")]
    LayoutMismatch { got: usize, expect: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective returned a non-finite value while probing coordinate {coordinate}")]
    NonFiniteObjective { coordinate: usize },
    #[error("model produced a non-finite utility; parameters are likely corrupt")]
    NonFiniteUtility(#[from] crate::math::MathError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint line {line}: {message}")]
    CheckpointFormat { line: usize, message: String },
    #[error("operation requires the tabular family")]
    NotTabular,
}

/// One decision point: the task input and the partial output emitted so far.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub input: &'a [Token],
    pub prefix: &'a [Token],
}

impl<'a> DecisionContext<'a> {
    pub fn new(input: &'a [Token], prefix: &'a [Token]) -> Self {
        DecisionContext { input, prefix }
    }

    fn validate(&self, vocab: usize) -> Result<(), ModelError> {
        for &t in self.input {
            if t >= vocab {
                return Err(ModelError::TokenOutOfRange { token: t, vocab });
            }
        }
        for (i, &t) in self.prefix.iter().enumerate() {
            if t >= vocab {
                return Err(ModelError::TokenOutOfRange { token: t, vocab });
            }
            if t == EOS {
                return Err(ModelError::PrefixContainsEos(i));
            }
        }
        Ok(())
    }
}

/// Model family with its structural hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelFamily {
    /// Dense table over the last `context_order` tokens of the input and of
    /// the prefix; unseen rows read as zeros.
    TabularNGram { context_order: usize },
    /// `W phi(ctx)` with per-slot one-hot features plus a bias column.
    LinearFeatures { context_order: usize },
    /// Mean-pooled input embedding and prefix-tail embeddings, tanh hidden
    /// layer, linear output of size `d`.
    OneHiddenLayer {
        embed_dim: usize,
        hidden_dim: usize,
        context_order: usize,
    },
}

impl ModelFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelFamily::TabularNGram { .. } => "tabular",
            ModelFamily::LinearFeatures { .. } => "linear",
            ModelFamily::OneHiddenLayer { .. } => "one_hidden",
        }
    }

    pub fn context_order(&self) -> usize {
        match *self {
            ModelFamily::TabularNGram { context_order } => context_order,
            ModelFamily::LinearFeatures { context_order } => context_order,
            ModelFamily::OneHiddenLayer { context_order, .. } => context_order,
        }
    }

    /// Parameter count for vocabulary size `d`.
    ///
    /// - tabular: `(d+1)^(2k) * d`, one length-`d` row per padded context key
    /// - linear: `d * (2k(d+1) + 1)`, per-slot one-hots plus a bias column
    /// - one-hidden: `(d+1)e + h*e*(k+1) + h + d*h + d`: embedding table,
    ///   first layer, hidden bias, output layer, output bias
    pub fn param_count(&self, d: usize) -> Result<usize, ModelError> {
        if d < 2 {
            return Err(ModelError::VocabTooSmall(d));
        }
        let capped = |v: Option<usize>| {
            v.filter(|&n| n <= MAX_PARAMS)
                .ok_or(ModelError::TooManyParams)
        };
        match *self {
            ModelFamily::TabularNGram { context_order } => {
                let rows = (d + 1)
                    .checked_pow(2 * context_order as u32)
                    .ok_or(ModelError::TooManyParams)?;
                capped(rows.checked_mul(d))
            }
            ModelFamily::LinearFeatures { context_order } => {
                let phi = 2 * context_order * (d + 1) + 1;
                capped(d.checked_mul(phi))
            }
            ModelFamily::OneHiddenLayer {
                embed_dim,
                hidden_dim,
                context_order,
            } => {
                if embed_dim == 0 {
                    return Err(ModelError::ZeroDimension("embed_dim"));
                }
                if hidden_dim == 0 {
                    return Err(ModelError::ZeroDimension("hidden_dim"));
                }
                let m = embed_dim * (context_order + 1);
                let total =
                    (d + 1) * embed_dim + hidden_dim * m + hidden_dim + d * hidden_dim + d;
                capped(Some(total))
            }
        }
    }
}

/// Flat gradient accumulator matching a model's parameter layout.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    grads: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        GradientBuffer {
            grads: vec![0.0; len],
        }
    }

    pub fn for_model(model: &QModel) -> Self {
        GradientBuffer::zeros(model.params().len())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.grads
    }

    pub fn add(&mut self, other: &GradientBuffer) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            *g *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().fold(0.0f64, |m, g| m.max(g.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// A parametric Q-model: family, vocabulary, and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct QModel {
    family: ModelFamily,
    vocab_size: usize,
    seed: u64,
    step: u64,
    params: Vec<f64>,
}

impl QModel {
    /// Build a model. Tabular tables start at zero; linear and hidden-layer
    /// parameters draw from a seeded uniform(-0.1, 0.1) stream, so identical
    /// seeds give bit-identical parameters.
    pub fn init(family: ModelFamily, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        let count = family.param_count(vocab_size)?;
        let params = match family {
            ModelFamily::TabularNGram { .. } => vec![0.0; count],
            _ => {
                let mut rng = RngStream::new(seed, INIT_STREAM);
                (0..count).map(|_| rng.uniform(-0.1, 0.1)).collect()
            }
        };
        Ok(QModel {
            family,
            vocab_size,
            seed,
            step: 0,
            params,
        })
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Pad token id used for absent context slots.
    #[inline]
    fn pad(&self) -> usize {
        self.vocab_size
    }

    /// The last `k` entries of `seq` as slot ids, left-padded with the pad id.
    fn tail_slots(&self, seq: &[Token], k: usize, out: &mut Vec<usize>) {
        out.clear();
        let len = seq.len();
        for j in 0..k {
            if j + len < k {
                out.push(self.pad());
            } else {
                out.push(seq[len + j - k]);
            }
        }
    }

    /// Row range of the tabular table for a context (tabular family only).
    pub fn tabular_row_range(&self, ctx: &DecisionContext) -> Result<Range<usize>, ModelError> {
        let ModelFamily::TabularNGram { context_order: k } = self.family else {
            return Err(ModelError::NotTabular);
        };
        ctx.validate(self.vocab_size)?;
        let base = self.vocab_size + 1;
        let mut slots = Vec::with_capacity(2 * k);
        let mut tail = Vec::with_capacity(k);
        self.tail_slots(ctx.input, k, &mut tail);
        slots.extend_from_slice(&tail);
        self.tail_slots(ctx.prefix, k, &mut tail);
        slots.extend_from_slice(&tail);
        let mut row = 0usize;
        for &s in &slots {
            row = row * base + s;
        }
        let start = row * self.vocab_size;
        Ok(start..start + self.vocab_size)
    }

    /// Overwrite one tabular row; a convenience for building hand-specified
    /// models in tests and experiments.
    pub fn set_tabular_row(
        &mut self,
        ctx: &DecisionContext,
        values: &[f64],
    ) -> Result<(), ModelError> {
        if values.len() != self.vocab_size {
            return Err(ModelError::CoefficientLength {
                got: values.len(),
                vocab: self.vocab_size,
            });
        }
        let range = self.tabular_row_range(ctx)?;
        self.params[range].copy_from_slice(values);
        Ok(())
    }

    /// Active feature indices of the linear family's phi(ctx): a bias column
    /// followed by one slot block of size `d+1` per context position.
    fn linear_active_features(&self, ctx: &DecisionContext, k: usize) -> Vec<usize> {
        let base = self.vocab_size + 1;
        let mut active = vec![0usize]; // bias at feature 0
        let mut tail = Vec::with_capacity(k);
        self.tail_slots(ctx.input, k, &mut tail);
        for (j, &s) in tail.iter().enumerate() {
            active.push(1 + j * base + s);
        }
        self.tail_slots(ctx.prefix, k, &mut tail);
        for (j, &s) in tail.iter().enumerate() {
            active.push(1 + (k + j) * base + s);
        }
        active
    }

    /// Utilities for one decision context.
    pub fn q_values(&self, ctx: &DecisionContext) -> Result<QValues, ModelError> {
        ctx.validate(self.vocab_size)?;
        let d = self.vocab_size;
        let values = match self.family {
            ModelFamily::TabularNGram { .. } => {
                let range = self.tabular_row_range(ctx)?;
                self.params[range].to_vec()
            }
            ModelFamily::LinearFeatures { context_order: k } => {
                let active = self.linear_active_features(ctx, k);
                let phi = 2 * k * (d + 1) + 1;
                let mut q = vec![0.0; d];
                for (a, qa) in q.iter_mut().enumerate() {
                    let row = a * phi;
                    *qa = active.iter().map(|&f| self.params[row + f]).sum();
                }
                q
            }
            ModelFamily::OneHiddenLayer { .. } => self.hidden_forward(ctx).q,
        };
        Ok(QValues::new(values)?)
    }

    /// Accumulate `sum_a g_a dQ_a/dw` for one context into `buf`.
    pub fn accumulate_gradient(
        &self,
        ctx: &DecisionContext,
        g: &StepCoefficients,
        buf: &mut GradientBuffer,
    ) -> Result<(), ModelError> {
        ctx.validate(self.vocab_size)?;
        if g.len() != self.vocab_size {
            return Err(ModelError::CoefficientLength {
                got: g.len(),
                vocab: self.vocab_size,
            });
        }
        if buf.len() != self.params.len() {
            return Err(ModelError::LayoutMismatch {
                got: buf.len(),
                expect: self.params.len(),
            });
        }
        let d = self.vocab_size;
        let g = g.as_slice();
        match self.family {
            ModelFamily::TabularNGram { .. } => {
                // dQ_a/dq_{row,j} = 1{a=j}: only the context's row moves.
                let range = self.tabular_row_range(ctx)?;
                for (slot, &ga) in buf.grads[range].iter_mut().zip(g) {
                    *slot += ga;
                }
            }
            ModelFamily::LinearFeatures { context_order: k } => {
                let active = self.linear_active_features(ctx, k);
                let phi = 2 * k * (d + 1) + 1;
                for (a, &ga) in g.iter().enumerate() {
                    if ga == 0.0 {
                        continue;
                    }
                    let row = a * phi;
                    for &f in &active {
                        buf.grads[row + f] += ga;
                    }
                }
            }
            ModelFamily::OneHiddenLayer {
                embed_dim: e,
                hidden_dim: h,
                context_order: k,
            } => {
                let fwd = self.hidden_forward(ctx);
                let layout = self.hidden_layout();
                let m = e * (k + 1);

                // Output layer.
                for (a, &ga) in g.iter().enumerate() {
                    buf.grads[layout.b2 + a] += ga;
                    for i in 0..h {
                        buf.grads[layout.w2 + a * h + i] += ga * fwd.hidden[i];
                    }
                }

                // Back through tanh.
                let mut dpre = vec![0.0; h];
                for i in 0..h {
                    let mut dh = 0.0;
                    for (a, &ga) in g.iter().enumerate() {
                        dh += ga * self.params[layout.w2 + a * h + i];
                    }
                    dpre[i] = dh * (1.0 - fwd.hidden[i] * fwd.hidden[i]);
                }

                // First layer and pooled-input vector.
                let mut du = vec![0.0; m];
                for i in 0..h {
                    buf.grads[layout.b1 + i] += dpre[i];
                    for j in 0..m {
                        buf.grads[layout.w1 + i * m + j] += dpre[i] * fwd.pooled[j];
                        du[j] += dpre[i] * self.params[layout.w1 + i * m + j];
                    }
                }

                // Embeddings: input rows share the mean-pool weight, prefix
                // slots map one-to-one (pad rows accumulate like any other).
                if !ctx.input.is_empty() {
                    let w = 1.0 / ctx.input.len() as f64;
                    for &t in ctx.input {
                        for c in 0..e {
                            buf.grads[layout.embed + t * e + c] += w * du[c];
                        }
                    }
                }
                let mut tail = Vec::with_capacity(k);
                self.tail_slots(ctx.prefix, k, &mut tail);
                for (j, &slot) in tail.iter().enumerate() {
                    for c in 0..e {
                        buf.grads[layout.embed + slot * e + c] += du[e + j * e + c];
                    }
                }
            }
        }
        Ok(())
    }

    fn hidden_layout(&self) -> HiddenLayout {
        let ModelFamily::OneHiddenLayer {
            embed_dim: e,
            hidden_dim: h,
            context_order: k,
        } = self.family
        else {
            unreachable!("hidden_layout called on non-hidden family");
        };
        let d = self.vocab_size;
        let m = e * (k + 1);
        let embed = 0;
        let w1 = embed + (d + 1) * e;
        let b1 = w1 + h * m;
        let w2 = b1 + h;
        let b2 = w2 + d * h;
        HiddenLayout { embed, w1, b1, w2, b2 }
    }

    fn hidden_forward(&self, ctx: &DecisionContext) -> HiddenForward {
        let ModelFamily::OneHiddenLayer {
            embed_dim: e,
            hidden_dim: h,
            context_order: k,
        } = self.family
        else {
            unreachable!("hidden_forward called on non-hidden family");
        };
        let d = self.vocab_size;
        let layout = self.hidden_layout();
        let m = e * (k + 1);

        let mut pooled = vec![0.0; m];
        if !ctx.input.is_empty() {
            let w = 1.0 / ctx.input.len() as f64;
            for &t in ctx.input {
                for c in 0..e {
                    pooled[c] += w * self.params[layout.embed + t * e + c];
                }
            }
        }
        let mut tail = Vec::with_capacity(k);
        self.tail_slots(ctx.prefix, k, &mut tail);
        for (j, &slot) in tail.iter().enumerate() {
            for c in 0..e {
                pooled[e + j * e + c] = self.params[layout.embed + slot * e + c];
            }
        }

        let mut hidden = vec![0.0; h];
        for (i, hv) in hidden.iter_mut().enumerate() {
            let mut pre = self.params[layout.b1 + i];
            for (j, &u) in pooled.iter().enumerate() {
                pre += self.params[layout.w1 + i * m + j] * u;
            }
            *hv = pre.tanh();
        }

        let mut q = vec![0.0; d];
        for (a, qa) in q.iter_mut().enumerate() {
            let mut v = self.params[layout.b2 + a];
            for (i, &hv) in hidden.iter().enumerate() {
                v += self.params[layout.w2 + a * h + i] * hv;
            }
            *qa = v;
        }
        HiddenForward { pooled, hidden, q }
    }
}

struct HiddenLayout {
    embed: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct HiddenForward {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    q: Vec<f64>,
}

/// Central-difference gradient of `objective` with respect to every model
/// parameter: `(f(w + h e_j) - f(w - h e_j)) / 2h`. The model passed to the
/// objective carries the perturbed parameters; the caller's model is left
/// untouched.
pub fn finite_difference_gradient<F>(
    model: &QModel,
    objective: F,
    h: f64,
) -> Result<Vec<f64>, ModelError>
where
    F: Fn(&QModel) -> Result<f64, ModelError>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(ModelError::BadStep(h));
    }
    let mut probe = model.clone();
    let n = probe.params.len();
    let mut grad = vec![0.0; n];
    for j in 0..n {
        let original = probe.params[j];
        probe.params[j] = original + h;
        let plus = objective(&probe)?;
        probe.params[j] = original - h;
        let minus = objective(&probe)?;
        probe.params[j] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(ModelError::NonFiniteObjective { coordinate: j });
        }
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Checkpoint format (shared with the command-line harness)
// ---------------------------------------------------------------------------
//
//   qdual-checkpoint v1
//   family <tabular|linear|one_hidden>
//   context_order <k>
//   embed_dim <e>        (one_hidden only)
//   hidden_dim <h>       (one_hidden only)
//   vocab_size <d>
//   seed <u64>
//   step <u64>
//   params <count>
//   <count lines, one decimal float in {:.16e} form (17 significant digits)>

const CHECKPOINT_HEADER: &str = "qdual-checkpoint v1";

/// Serialize a model to the checkpoint text format.
pub fn checkpoint_to_string(model: &QModel) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    let _ = writeln!(out, "family {}", model.family.tag());
    let _ = writeln!(out, "context_order {}", model.family.context_order());
    if let ModelFamily::OneHiddenLayer {
        embed_dim,
        hidden_dim,
        ..
    } = model.family
    {
        let _ = writeln!(out, "embed_dim {embed_dim}");
        let _ = writeln!(out, "hidden_dim {hidden_dim}");
    }
    let _ = writeln!(out, "vocab_size {}", model.vocab_size);
    let _ = writeln!(out, "seed {}", model.seed);
    let _ = writeln!(out, "step {}", model.step);
    let _ = writeln!(out, "params {}", model.params.len());
    for p in &model.params {
        let _ = writeln!(out, "{p:.16e}");
    }
    out
}

pub fn save_checkpoint(model: &QModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<QModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<QModel, ModelError> {
    let bad = |line: usize, message: &str| ModelError::CheckpointFormat {
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    if header.trim() != CHECKPOINT_HEADER {
        return Err(bad(1, "missing or unrecognized header"));
    }

    let mut family_tag = None;
    let mut context_order = None;
    let mut embed_dim = None;
    let mut hidden_dim = None;
    let mut vocab_size = None;
    let mut seed = None;
    let mut step = None;
    let mut count = None;
    let mut last_line = 1;

    for (idx, raw) in lines.by_ref() {
        last_line = idx + 1;
        let line = raw.trim();
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| bad(last_line, "expected `key value`"))?;
        match key {
            "family" => family_tag = Some(value.to_string()),
            "context_order" | "embed_dim" | "hidden_dim" | "vocab_size" | "seed" | "step"
            | "params" => {
                let parsed: u64 = value
                    .parse()
                    .map_err(|_| bad(last_line, &format!("invalid integer in field `{key}`")))?;
                match key {
                    "context_order" => context_order = Some(parsed as usize),
                    "embed_dim" => embed_dim = Some(parsed as usize),
                    "hidden_dim" => hidden_dim = Some(parsed as usize),
                    "vocab_size" => vocab_size = Some(parsed as usize),
                    "seed" => seed = Some(parsed),
                    "step" => step = Some(parsed),
                    "params" => count = Some(parsed as usize),
                    _ => unreachable!(),
                }
            }
            other => return Err(bad(last_line, &format!("unknown field `{other}`"))),
        }
        if count.is_some() {
            break;
        }
    }

    let family_tag = family_tag.ok_or_else(|| bad(last_line, "missing field `family`"))?;
    let context_order =
        context_order.ok_or_else(|| bad(last_line, "missing field `context_order`"))?;
    let vocab_size = vocab_size.ok_or_else(|| bad(last_line, "missing field `vocab_size`"))?;
    let seed = seed.ok_or_else(|| bad(last_line, "missing field `seed`"))?;
    let step = step.ok_or_else(|| bad(last_line, "missing field `step`"))?;
    let count = count.ok_or_else(|| bad(last_line, "missing field `params`"))?;

    let family = match family_tag.as_str() {
        "tabular" => ModelFamily::TabularNGram { context_order },
        "linear" => ModelFamily::LinearFeatures { context_order },
        "one_hidden" => ModelFamily::OneHiddenLayer {
            embed_dim: embed_dim.ok_or_else(|| bad(last_line, "missing field `embed_dim`"))?,
            hidden_dim: hidden_dim.ok_or_else(|| bad(last_line, "missing field `hidden_dim`"))?,
            context_order,
        },
        other => return Err(bad(last_line, &format!("unknown family `{other}`"))),
    };

    let expect = family.param_count(vocab_size)?;
    if expect != count {
        return Err(bad(
            last_line,
            &format!("params count {count} does not match the {family_tag} layout ({expect})"),
        ));
    }

    let mut params = Vec::with_capacity(count);
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if params.len() == count {
            return Err(bad(line_no, "trailing content after parameter block"));
        }
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| bad(line_no, &format!("invalid float `{}`", raw.trim())))?;
        if !v.is_finite() {
            return Err(bad(line_no, "non-finite parameter"));
        }
        params.push(v);
    }
    if params.len() != count {
        return Err(bad(
            last_line + params.len(),
            &format!("expected {count} parameters, found {}", params.len()),
        ));
    }

    Ok(QModel {
        family,
        vocab_size,
        seed,
        step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mle_coefficients;

    fn zero_sum_random(rng: &mut RngStream, d: usize) -> StepCoefficients {
        let mut g: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mean = g.iter().sum::<f64>() / d as f64;
        for v in &mut g {
            *v -= mean;
        }
        StepCoefficients::new(g).unwrap()
    }

    #[test]
    fn tabular_k0_layout() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 0 }, 3, 0).unwrap();
        assert_eq!(m.params().len(), 3);
        assert!(m.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        for family in [
            ModelFamily::LinearFeatures { context_order: 2 },
            ModelFamily::OneHiddenLayer {
                embed_dim: 4,
                hidden_dim: 8,
                context_order: 2,
            },
        ] {
            let a = QModel::init(family.clone(), 5, 123).unwrap();
            let b = QModel::init(family, 5, 123).unwrap();
            assert_eq!(a.params(), b.params());
        }
    }

    #[test]
    fn one_hidden_param_count_audit() {
        // (d+1)e + h*e*(k+1) + h + d*h + d, audited term by term.
        let family = ModelFamily::OneHiddenLayer {
            embed_dim: 4,
            hidden_dim: 8,
            context_order: 2,
        };
        let (d, e, h, k) = (5usize, 4usize, 8usize, 2usize);
        let expect = (d + 1) * e + h * e * (k + 1) + h + d * h + d;
        assert_eq!(family.param_count(d).unwrap(), expect);
        let m = QModel::init(family, d, 7).unwrap();
        assert_eq!(m.params().len(), expect);
    }

    #[test]
    fn fresh_tabular_returns_zeros() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
        let q = m.q_values(&DecisionContext::new(&[2, 3], &[1])).unwrap();
        assert!(q.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tabular_row_is_local() {
        let mut m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
        let ctx = DecisionContext::new(&[2], &[3]);
        m.set_tabular_row(&ctx, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(m.q_values(&ctx).unwrap().as_slice(), &[0.1, 0.2, 0.3, 0.4]);
        let other = DecisionContext::new(&[2], &[1]);
        assert!(m.q_values(&other).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hidden_params_give_zero_q() {
        let mut m = QModel::init(
            ModelFamily::OneHiddenLayer {
                embed_dim: 3,
                hidden_dim: 4,
                context_order: 1,
            },
            4,
            9,
        )
        .unwrap();
        m.params_mut().fill(0.0);
        let q = m.q_values(&DecisionContext::new(&[1, 2], &[3])).unwrap();
        assert!(q.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_validation() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
        assert!(matches!(
            m.q_values(&DecisionContext::new(&[9], &[])),
            Err(ModelError::TokenOutOfRange { token: 9, .. })
        ));
        assert!(matches!(
            m.q_values(&DecisionContext::new(&[], &[1, EOS])),
            Err(ModelError::PrefixContainsEos(1))
        ));
    }

    #[test]
    fn tabular_gradient_touches_only_its_row() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 3, 0).unwrap();
        let ctx = DecisionContext::new(&[1], &[2]);
        let g = StepCoefficients::new(vec![0.5, -0.2, -0.3]).unwrap();
        let mut buf = GradientBuffer::for_model(&m);
        m.accumulate_gradient(&ctx, &g, &mut buf).unwrap();
        let range = m.tabular_row_range(&ctx).unwrap();
        for (i, &v) in buf.as_slice().iter().enumerate() {
            if range.contains(&i) {
                assert_eq!(v, g.as_slice()[i - range.start]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn zero_coefficients_leave_buffer_unchanged() {
        let m = QModel::init(
            ModelFamily::OneHiddenLayer {
                embed_dim: 3,
                hidden_dim: 4,
                context_order: 1,
            },
            4,
            11,
        )
        .unwrap();
        let g = StepCoefficients::new(vec![0.0; 4]).unwrap();
        let mut buf = GradientBuffer::for_model(&m);
        m.accumulate_gradient(&DecisionContext::new(&[1], &[2]), &g, &mut buf)
            .unwrap();
        assert!(buf.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_all_families() {
        // The module's exactness contract: analytic backprop of
        // sum_a g_a Q_a agrees with central differences to 1e-5 relative,
        // over 100 random (ctx, g) pairs spread across the three families.
        let families = [
            ModelFamily::TabularNGram { context_order: 1 },
            ModelFamily::LinearFeatures { context_order: 2 },
            ModelFamily::OneHiddenLayer {
                embed_dim: 4,
                hidden_dim: 6,
                context_order: 2,
            },
        ];
        let d = 5;
        let mut rng = RngStream::new(77, 0);
        for family in families {
            let mut model = QModel::init(family, d, 21).unwrap();
            // Give the tabular model non-trivial parameters too.
            for p in model.params_mut().iter_mut() {
                *p += rng.uniform(-0.5, 0.5);
            }
            for trial in 0..34 {
                let input: Vec<Token> = (0..2).map(|_| 1 + rng.next_index(d - 1)).collect();
                let prefix: Vec<Token> = (0..rng.next_index(3))
                    .map(|_| 1 + rng.next_index(d - 1))
                    .collect();
                let g = zero_sum_random(&mut rng, d);

                let mut analytic = GradientBuffer::for_model(&model);
                {
                    let ctx = DecisionContext::new(&input, &prefix);
                    model.accumulate_gradient(&ctx, &g, &mut analytic).unwrap();
                }

                let numeric = finite_difference_gradient(
                    &model,
                    |m| {
                        let ctx = DecisionContext::new(&input, &prefix);
                        let q = m.q_values(&ctx)?;
                        Ok(q.as_slice()
                            .iter()
                            .zip(g.as_slice())
                            .map(|(&qa, &ga)| ga * qa)
                            .sum())
                    },
                    1e-5,
                )
                .unwrap();

                for (j, (&a, &n)) in analytic.as_slice().iter().zip(&numeric).enumerate() {
                    let scale = a.abs().max(n.abs()).max(1.0);
                    assert!(
                        (a - n).abs() / scale <= 1e-5,
                        "family {} trial {trial} coord {j}: analytic {a} vs numeric {n}",
                        model.family().tag()
                    );
                }
            }
        }
    }

    #[test]
    fn fd_of_single_coordinate_is_basis_vector() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 0 }, 3, 0).unwrap();
        let grad = finite_difference_gradient(&m, |mm| Ok(mm.params()[1]), 1e-5).unwrap();
        assert!((grad[0]).abs() < 1e-12);
        assert!((grad[1] - 1.0).abs() < 1e-9);
        assert!((grad[2]).abs() < 1e-12);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let m = QModel::init(
            ModelFamily::LinearFeatures { context_order: 1 },
            4,
            3,
        )
        .unwrap();
        let grad = finite_difference_gradient(&m, |_| Ok(4.25), 1e-5).unwrap();
        assert!(grad.iter().all(|&v| v.abs() <= 1e-9));
    }

    #[test]
    fn fd_log_likelihood_matches_mle_coefficients_on_tabular() {
        // d/dw log softmax(q)_y scattered into the context row.
        let mut m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
        let ctx_input = [2usize];
        let ctx_prefix = [1usize];
        {
            let ctx = DecisionContext::new(&ctx_input, &ctx_prefix);
            m.set_tabular_row(&ctx, &[0.3, -0.7, 1.2, 0.1]).unwrap();
        }
        let y = 2usize;
        let grad = finite_difference_gradient(
            &m,
            |mm| {
                let ctx = DecisionContext::new(&ctx_input, &ctx_prefix);
                let q = mm.q_values(&ctx)?;
                Ok(crate::math::softmax(&q).log_prob(y))
            },
            1e-5,
        )
        .unwrap();
        let ctx = DecisionContext::new(&ctx_input, &ctx_prefix);
        let q = m.q_values(&ctx).unwrap();
        let coeffs = mle_coefficients(&q, y).unwrap();
        let range = m.tabular_row_range(&ctx).unwrap();
        for (i, &gv) in grad.iter().enumerate() {
            let expect = if range.contains(&i) {
                coeffs.as_slice()[i - range.start]
            } else {
                0.0
            };
            assert!((gv - expect).abs() <= 1e-7, "coord {i}: {gv} vs {expect}");
        }
    }

    #[test]
    fn fd_rejects_bad_step_and_non_finite() {
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 0 }, 3, 0).unwrap();
        assert!(matches!(
            finite_difference_gradient(&m, |_| Ok(0.0), 0.0),
            Err(ModelError::BadStep(_))
        ));
        let err = finite_difference_gradient(&m, |_| Ok(f64::NAN), 1e-5).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteObjective { coordinate: 0 }));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = RngStream::new(5, 1);
        for family in [
            ModelFamily::TabularNGram { context_order: 1 },
            ModelFamily::LinearFeatures { context_order: 2 },
            ModelFamily::OneHiddenLayer {
                embed_dim: 4,
                hidden_dim: 8,
                context_order: 2,
            },
        ] {
            let mut model = QModel::init(family, 5, 99).unwrap();
            for p in model.params_mut().iter_mut() {
                *p += rng.uniform(-2.0, 2.0);
            }
            model.set_step(1234);
            let text = checkpoint_to_string(&model);
            let loaded = checkpoint_from_str(&text).unwrap();
            assert_eq!(loaded.step(), 1234);
            assert_eq!(loaded.family(), model.family());
            assert_eq!(loaded.params(), model.params());
            // Identical q-values on random contexts.
            for _ in 0..100 {
                let input: Vec<Token> = (0..2).map(|_| 1 + rng.next_index(4)).collect();
                let prefix: Vec<Token> = (0..rng.next_index(3))
                    .map(|_| 1 + rng.next_index(4))
                    .collect();
                let ctx = DecisionContext::new(&input, &prefix);
                assert_eq!(
                    model.q_values(&ctx).unwrap().as_slice(),
                    loaded.q_values(&ctx).unwrap().as_slice()
                );
            }
        }
    }

    #[test]
    fn checkpoint_rejects_malformed_input() {
        let err = checkpoint_from_str("not a checkpoint\n").unwrap_err();
        assert!(matches!(err, ModelError::CheckpointFormat { line: 1, .. }));

        let m = QModel::init(ModelFamily::TabularNGram { context_order: 0 }, 3, 0).unwrap();
        let mut text = checkpoint_to_string(&m);
        text.push_str("0.0\n");
        let err = checkpoint_from_str(&text).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointFormat { .. }));

        let truncated: String = checkpoint_to_string(&m)
            .lines()
            .take(7)
            .map(|l| format!("{l}\n"))
            .collect();
        let err = checkpoint_from_str(&truncated).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointFormat { .. }));
    }
}
