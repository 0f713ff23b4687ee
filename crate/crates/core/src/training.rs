//! The perturbed-advantage trainer and its forward objective evaluators.
//!
//! One training step draws a minibatch of demonstration pairs, computes the
//! per-step coefficient vectors (frozen at the current parameters), backprops
//! them into per-pair gradient buffers, averages, and takes an ascent step.
//! The perturbation coefficient `lambda` interpolates the gradient between
//! the unperturbed advantage objective (`lambda = 0`) and exact likelihood
//! ascent (`lambda = 1`).
//!
//! Determinism: the pair drawn at step `k`, slot `i` comes from rng stream
//! `PAIR_STREAM_TAG | (k * B + i)`, a pure function of `(seed, k, i)`. Pairs
//! can therefore be generated in parallel, the data order is shared across
//! `lambda` values for sweep protocols, and per-pair buffers are merged in
//! slot order so results are bit-identical at any worker count.

use std::time::Instant;

use thiserror::Error;

use crate::decoding::{greedy_decode, DecodeError, Scorer};
use crate::math::{
    expected_q, mabe_coefficients, mle_coefficients_smoothed, softmax, MathError,
};
use crate::model::{DecisionContext, GradientBuffer, ModelError, ModelFamily, QModel};
use crate::parallel::maybe_par_map;
use crate::rng::RngStream;
use crate::tasks::{LabeledPair, SyntheticTask, TaskError, DEFAULT_SUPPORT_CAP};

/// Rng stream tag for the pair drawn at `(step, slot)`.
pub const PAIR_STREAM_TAG: u64 = 1 << 56;
/// Rng stream tag for the held-out probe inputs.
pub const PROBE_STREAM_TAG: u64 = 2 << 56;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("step count must be positive")]
    ZeroSteps,
    #[error("label smoothing must lie in [0, 1), got {0}")]
    BadSmoothing(f64),
    #[error("label smoothing requires lambda = 1, got lambda = {0}")]
    SmoothingRequiresMle(f64),
    #[error("perturbation coefficient must be finite")]
    NonFiniteLambda,
    #[error("model vocabulary {model} does not match task vocabulary {task}")]
    VocabMismatch { model: usize, task: usize },
    #[error("non-finite gradient at step {step}, pair {pair}: {detail}")]
    NonFiniteGradient {
        step: usize,
        pair: usize,
        detail: String,
    },
    #[error("training aborted at step {step}, pair {pair}: {source}")]
    PairFailed {
        step: usize,
        pair: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// First-order ascent rule applied to the averaged batch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    /// Classical momentum with decay 0.9.
    Momentum { lr: f64 },
    /// Adam with (0.9, 0.999, 1e-8).
    Adam { lr: f64 },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr }
            | OptimizerKind::Momentum { lr }
            | OptimizerKind::Adam { lr } => lr,
        }
    }

    /// Toy-scale defaults fixed by a small grid: Adam 1e-2 for the
    /// table-backed families, Adam 1e-3 for the hidden-layer family.
    pub fn default_for(family: &ModelFamily) -> Self {
        match family {
            ModelFamily::OneHiddenLayer { .. } => OptimizerKind::Adam { lr: 1e-3 },
            _ => OptimizerKind::Adam { lr: 1e-2 },
        }
    }
}

/// Optimizer state; `ascend` moves parameters uphill along the estimate.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

const MOMENTUM_DECAY: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_len: usize) -> Self {
        let state_len = match kind {
            OptimizerKind::Sgd { .. } => 0,
            _ => param_len,
        };
        Optimizer {
            kind,
            t: 0,
            m: vec![0.0; state_len],
            v: match kind {
                OptimizerKind::Adam { .. } => vec![0.0; state_len],
                _ => Vec::new(),
            },
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            OptimizerKind::Momentum { lr } => {
                for ((p, m), &g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = MOMENTUM_DECAY * *m + g;
                    *p += lr * *m;
                }
            }
            OptimizerKind::Adam { lr } => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    *p += lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Full configuration of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Valid only with `lambda = 1`.
    pub label_smoothing: f64,
    /// Log a row every this many steps (the first and last step always log).
    pub eval_every: usize,
    /// Held-out inputs for the greedy exact-match probe.
    pub probe_instances: usize,
}

impl TrainConfig {
    pub fn new(lambda: f64, optimizer: OptimizerKind, batch_size: usize, steps: usize, seed: u64) -> Self {
        TrainConfig {
            lambda,
            optimizer,
            batch_size,
            steps,
            seed,
            label_smoothing: 0.0,
            eval_every: 100,
            probe_instances: 32,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lambda.is_finite() {
            return Err(TrainError::NonFiniteLambda);
        }
        if self.optimizer.lr().is_nan() || self.optimizer.lr() <= 0.0 {
            return Err(TrainError::BadLearningRate(self.optimizer.lr()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        if self.steps == 0 {
            return Err(TrainError::ZeroSteps);
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::BadSmoothing(self.label_smoothing));
        }
        if self.label_smoothing > 0.0 && self.lambda != 1.0 {
            return Err(TrainError::SmoothingRequiresMle(self.lambda));
        }
        Ok(())
    }
}

/// One logged training row.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    /// Summed log-likelihood of the step's batch (nats).
    pub j_data: f64,
    /// `j_data / n` for the same batch.
    pub j_seq: f64,
    /// `j_data / sum_i T_i` for the same batch.
    pub j_token: f64,
    /// Advantage objective on the batch, averaged per sequence.
    pub j_mabe: f64,
    /// L2 norm of the averaged ascent direction.
    pub grad_norm: f64,
    /// Greedy exact-match rate against the oracle argmax on the probe set.
    pub probe_exact_match: f64,
    /// Elapsed wall-clock at logging time (diagnostic; not deterministic).
    pub wall_clock_ms: u64,
}

/// The three equivalent likelihood objectives for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LogLikelihood {
    pub j_data: f64,
    pub j_seq: f64,
    pub j_token: f64,
}

/// Summed log-likelihood of a batch plus its two constant-factor forms.
pub fn eval_log_likelihood(
    model: &QModel,
    batch: &[LabeledPair],
) -> Result<LogLikelihood, TrainError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let mut j_data = 0.0;
    let mut tokens = 0usize;
    for pair in batch {
        for (t, &y) in pair.output.iter().enumerate() {
            let ctx = DecisionContext::new(&pair.input, &pair.output[..t]);
            let q = model.q_values(&ctx)?;
            j_data += softmax(&q).log_prob(y);
        }
        tokens += pair.output.len();
    }
    Ok(LogLikelihood {
        j_data,
        j_seq: j_data / batch.len() as f64,
        j_token: j_data / tokens as f64,
    })
}

/// Summed advantage objective over a batch: for every demonstrated token,
/// its utility minus the softmax-expected utility, exact over the
/// vocabulary (never Monte-Carlo).
pub fn eval_j_mabe_total(model: &QModel, batch: &[LabeledPair]) -> Result<f64, TrainError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let mut total = 0.0;
    for pair in batch {
        for (t, &y) in pair.output.iter().enumerate() {
            let ctx = DecisionContext::new(&pair.input, &pair.output[..t]);
            let q = model.q_values(&ctx)?;
            let p = softmax(&q);
            total += q.as_slice()[y] - expected_q(&p, &q)?;
        }
    }
    Ok(total)
}

/// [`eval_j_mabe_total`] averaged per sequence.
pub fn eval_j_mabe(model: &QModel, batch: &[LabeledPair]) -> Result<f64, TrainError> {
    Ok(eval_j_mabe_total(model, batch)? / batch.len() as f64)
}

/// The pair drawn at `(step, slot)` of a run with this seed and batch size.
/// Exposed so reference implementations and log audits can replay the
/// exact data stream.
pub fn pair_at(task: &SyntheticTask, seed: u64, batch_size: usize, step: usize, slot: usize) -> LabeledPair {
    let stream = PAIR_STREAM_TAG | (step as u64 * batch_size as u64 + slot as u64);
    let mut rng = RngStream::new(seed, stream);
    task.sample_pair(&mut rng)
}

/// Per-pair gradient of the perturbed-advantage objective, with coefficients
/// frozen at the current parameters.
fn pair_gradient(
    model: &QModel,
    pair: &LabeledPair,
    lambda: f64,
    label_smoothing: f64,
) -> Result<GradientBuffer, TrainError> {
    let mut buf = GradientBuffer::for_model(model);
    for (t, &y) in pair.output.iter().enumerate() {
        let ctx = DecisionContext::new(&pair.input, &pair.output[..t]);
        let q = model.q_values(&ctx)?;
        let g = if label_smoothing > 0.0 {
            mle_coefficients_smoothed(&q, y, label_smoothing)?
        } else {
            mabe_coefficients(&q, y, lambda)?
        };
        model.accumulate_gradient(&ctx, &g, &mut buf)?;
    }
    Ok(buf)
}

/// Train a model on a task. Fully deterministic given `(seed, config)`.
pub fn mabe_train(
    model: QModel,
    task: &SyntheticTask,
    config: &TrainConfig,
) -> Result<(QModel, Vec<TrainLogRow>), TrainError> {
    config.validate()?;
    if model.vocab_size() != task.vocab_size() {
        return Err(TrainError::VocabMismatch {
            model: model.vocab_size(),
            task: task.vocab_size(),
        });
    }

    let mut model = model;
    let mut optimizer = Optimizer::new(config.optimizer, model.params().len());
    let started = Instant::now();

    // Held-out probe set with oracle references.
    let mut probe_rng = RngStream::new(config.seed, PROBE_STREAM_TAG);
    let probes: Vec<(Vec<crate::Token>, Vec<crate::Token>)> = (0..config.probe_instances)
        .map(|_| {
            let x = task.sample_input(&mut probe_rng);
            let reference = task.map_output(&x, DEFAULT_SUPPORT_CAP)?.0;
            Ok::<_, TrainError>((x, reference))
        })
        .collect::<Result<_, _>>()?;

    let mut log = Vec::new();
    let batch_size = config.batch_size;
    for step in 0..config.steps {
        let per_pair: Vec<Result<(LabeledPair, GradientBuffer), TrainError>> =
            maybe_par_map(batch_size, |slot| {
                let pair = pair_at(task, config.seed, batch_size, step, slot);
                let buf = pair_gradient(&model, &pair, config.lambda, config.label_smoothing)
                    .map_err(|e| TrainError::PairFailed {
                        step,
                        pair: slot,
                        source: Box::new(e),
                    })?;
                if !buf.all_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        step,
                        pair: slot,
                        detail: format!("pair ({:?} -> {:?})", pair.input, pair.output),
                    });
                }
                Ok((pair, buf))
            });

        // Merge in slot order so results never depend on scheduling.
        let mut delta = GradientBuffer::for_model(&model);
        let mut batch = Vec::with_capacity(batch_size);
        for item in per_pair {
            let (pair, buf) = item?;
            delta.add(&buf);
            batch.push(pair);
        }
        delta.scale(1.0 / batch_size as f64);

        let log_now =
            step % config.eval_every == 0 || step + 1 == config.steps;
        if log_now {
            let ll = eval_log_likelihood(&model, &batch)?;
            let j_mabe = eval_j_mabe(&model, &batch)?;
            let probe_exact_match = if probes.is_empty() {
                0.0
            } else {
                let mut hits = 0usize;
                for (x, reference) in &probes {
                    let decoded = greedy_decode(
                        &model,
                        x,
                        Scorer::Softmax,
                        task.forced_eos_step(x),
                    )?;
                    if &decoded.tokens == reference {
                        hits += 1;
                    }
                }
                hits as f64 / probes.len() as f64
            };
            log.push(TrainLogRow {
                step,
                j_data: ll.j_data,
                j_seq: ll.j_seq,
                j_token: ll.j_token,
                j_mabe,
                grad_norm: delta.l2_norm(),
                probe_exact_match,
                wall_clock_ms: started.elapsed().as_millis() as u64,
            });
        }

        optimizer.ascend(model.params_mut(), delta.as_slice());
        model.set_step(step as u64 + 1);
    }

    Ok((model, log))
}
