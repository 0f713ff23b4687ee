//! Experiment configuration: a JSON document with defaults for every field
//! except the seed and the output directory, validated up front with
//! field-path diagnostics.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use qdual_core::analysis::DecodeRule;
use qdual_core::decoding::Scorer;
use qdual_core::model::{ModelFamily, QModel};
use qdual_core::tasks::{SynonymRow, SyntheticTask, TaskKind};
use qdual_core::training::{OptimizerKind, TrainConfig};
use qdual_core::Token;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field {path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Bandit {
        vocab_size: usize,
        action_probs: Vec<f64>,
    },
    NoisyCopy {
        vocab_size: usize,
        len: usize,
        eps: f64,
    },
    SynonymLookup {
        vocab_size: usize,
        input_len: usize,
        #[serde(default)]
        truncate_prob: f64,
        table: Vec<SynonymRowSpec>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymRowSpec {
    pub phrases: Vec<PhraseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhraseSpec {
    pub tokens: Vec<Token>,
    pub weight: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Bandit {
            vocab_size: 4,
            action_probs: vec![0.7, 0.3, 0.0],
        }
    }
}

impl TaskSpec {
    pub fn build(&self) -> Result<SyntheticTask, ConfigError> {
        let (kind, vocab) = match self {
            TaskSpec::Bandit {
                vocab_size,
                action_probs,
            } => (
                TaskKind::Bandit {
                    action_probs: action_probs.clone(),
                },
                *vocab_size,
            ),
            TaskSpec::NoisyCopy {
                vocab_size,
                len,
                eps,
            } => (
                TaskKind::NoisyCopy {
                    len: *len,
                    eps: *eps,
                },
                *vocab_size,
            ),
            TaskSpec::SynonymLookup {
                vocab_size,
                input_len,
                truncate_prob,
                table,
            } => (
                TaskKind::SynonymLookup {
                    table: table
                        .iter()
                        .map(|row| SynonymRow {
                            phrases: row
                                .phrases
                                .iter()
                                .map(|p| (p.tokens.clone(), p.weight))
                                .collect(),
                        })
                        .collect(),
                    input_len: *input_len,
                    truncate_prob: *truncate_prob,
                },
                *vocab_size,
            ),
        };
        SyntheticTask::new(kind, vocab).map_err(|e| invalid("task", e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Tabular {
        context_order: usize,
    },
    Linear {
        context_order: usize,
    },
    OneHidden {
        embed_dim: usize,
        hidden_dim: usize,
        context_order: usize,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Tabular { context_order: 1 }
    }
}

impl ModelSpec {
    pub fn family(&self) -> ModelFamily {
        match *self {
            ModelSpec::Tabular { context_order } => ModelFamily::TabularNGram { context_order },
            ModelSpec::Linear { context_order } => ModelFamily::LinearFeatures { context_order },
            ModelSpec::OneHidden {
                embed_dim,
                hidden_dim,
                context_order,
            } => ModelFamily::OneHiddenLayer {
                embed_dim,
                hidden_dim,
                context_order,
            },
        }
    }

    pub fn build(&self, vocab_size: usize, seed: u64) -> Result<QModel, ConfigError> {
        QModel::init(self.family(), vocab_size, seed)
            .map_err(|e| invalid("model", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Momentum { lr: f64 },
    Adam { lr: f64 },
}

impl OptimizerSpec {
    pub fn kind(&self) -> OptimizerKind {
        match *self {
            OptimizerSpec::Sgd { lr } => OptimizerKind::Sgd { lr },
            OptimizerSpec::Momentum { lr } => OptimizerKind::Momentum { lr },
            OptimizerSpec::Adam { lr } => OptimizerKind::Adam { lr },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lambda: f64,
    /// Absent means the family default (Adam 1e-2 for table-backed
    /// families, Adam 1e-3 for the hidden-layer family).
    pub optimizer: Option<OptimizerSpec>,
    pub batch_size: usize,
    pub steps: usize,
    pub label_smoothing: f64,
    pub eval_every: usize,
    pub probe_instances: usize,
    /// Write a checkpoint every this many steps; 0 means final only.
    pub checkpoint_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lambda: 1.0,
            optimizer: None,
            batch_size: 32,
            steps: 2000,
            label_smoothing: 0.0,
            eval_every: 100,
            probe_instances: 32,
            checkpoint_every: 0,
        }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, family: &ModelFamily, seed: u64) -> TrainConfig {
        let optimizer = self
            .optimizer
            .map(|o| o.kind())
            .unwrap_or_else(|| OptimizerKind::default_for(family));
        TrainConfig {
            lambda: self.lambda,
            optimizer,
            batch_size: self.batch_size,
            steps: self.steps,
            seed,
            label_smoothing: self.label_smoothing,
            eval_every: self.eval_every,
            probe_instances: self.probe_instances,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSuiteSpec {
    /// Subset of {"greedy", "sample", "beam", "map"}.
    pub rules: Vec<String>,
    /// Subset of {"softmax", "dual"}.
    pub scorers: Vec<String>,
    /// Temperatures for the sampling rule.
    pub betas: Vec<f64>,
    /// Beam widths for the beam rule.
    pub beam_sizes: Vec<usize>,
}

impl Default for DecodeSuiteSpec {
    fn default() -> Self {
        DecodeSuiteSpec {
            rules: vec!["greedy".into(), "sample".into(), "beam".into(), "map".into()],
            scorers: vec!["softmax".into(), "dual".into()],
            betas: vec![1.0],
            beam_sizes: vec![1, 4, 16],
        }
    }
}

impl DecodeSuiteSpec {
    pub fn scorers(&self) -> Result<Vec<Scorer>, ConfigError> {
        self.scorers
            .iter()
            .map(|s| match s.as_str() {
                "softmax" => Ok(Scorer::Softmax),
                "dual" => Ok(Scorer::Dual),
                other => Err(invalid(
                    "decode.scorers",
                    format!("unknown scorer `{other}` (softmax|dual)"),
                )),
            })
            .collect()
    }

    pub fn rules(&self) -> Result<Vec<DecodeRule>, ConfigError> {
        let mut out = Vec::new();
        for rule in &self.rules {
            match rule.as_str() {
                "greedy" => out.push(DecodeRule::Greedy),
                "sample" => {
                    for &beta in &self.betas {
                        out.push(DecodeRule::Sample { beta });
                    }
                }
                "beam" => {
                    for &size in &self.beam_sizes {
                        out.push(DecodeRule::Beam { size });
                    }
                }
                "map" => out.push(DecodeRule::ExactMap),
                other => {
                    return Err(invalid(
                        "decode.rules",
                        format!("unknown rule `{other}` (greedy|sample|beam|map)"),
                    ))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSpec {
    /// Explicit action distributions to certify.
    pub p_true: Vec<Vec<f64>>,
    /// Additional random strict-support instances.
    pub random_instances: usize,
    /// Vocabulary bound for the random instances.
    pub d_max: usize,
    /// Landscape grid for the two-action cross-sections.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
}

impl Default for TheoremSpec {
    fn default() -> Self {
        TheoremSpec {
            p_true: vec![vec![1.0, 0.0], vec![0.7, 0.3, 0.0]],
            random_instances: 50,
            d_max: 16,
            grid_lo: -8.0,
            grid_hi: 4.0,
            grid_step: 1e-3,
        }
    }
}

fn default_sweep_lambdas() -> Vec<f64> {
    vec![-2.0, -1.0, 0.0, 1.0, 2.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub decode: DecodeSuiteSpec,
    pub theorem: TheoremSpec,
    /// Perturbation coefficients covered by the `sweep` subcommand.
    pub sweep_lambdas: Vec<f64>,
    pub eval_instances: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            decode: DecodeSuiteSpec::default(),
            theorem: TheoremSpec::default(),
            sweep_lambdas: default_sweep_lambdas(),
            eval_instances: None,
            seed: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn eval_instances(&self) -> usize {
        self.eval_instances.unwrap_or(64)
    }

    /// Structural validation with field-path diagnostics; task/model
    /// construction invariants are re-checked by the library types.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.task {
            TaskSpec::Bandit {
                vocab_size,
                action_probs,
            } => {
                if *vocab_size < 2 {
                    return Err(invalid("task.vocab_size", "must be >= 2"));
                }
                if action_probs.len() != vocab_size - 1 {
                    return Err(invalid(
                        "task.action_probs",
                        format!("expected {} entries", vocab_size - 1),
                    ));
                }
            }
            TaskSpec::NoisyCopy {
                vocab_size,
                len,
                eps,
            } => {
                if *vocab_size < 2 {
                    return Err(invalid("task.vocab_size", "must be >= 2"));
                }
                if *len == 0 {
                    return Err(invalid("task.len", "must be positive"));
                }
                if !(0.0..1.0).contains(eps) {
                    return Err(invalid("task.eps", "must lie in [0, 1)"));
                }
            }
            TaskSpec::SynonymLookup {
                table, input_len, ..
            } => {
                if table.is_empty() {
                    return Err(invalid("task.table", "must not be empty"));
                }
                if *input_len == 0 {
                    return Err(invalid("task.input_len", "must be positive"));
                }
            }
        }
        self.task.build()?;
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if self.train.steps == 0 {
            return Err(invalid("train.steps", "must be positive"));
        }
        if self.train.eval_every == 0 {
            return Err(invalid("train.eval_every", "must be positive"));
        }
        if let Some(opt) = &self.train.optimizer {
            if opt.kind().lr().is_nan() || opt.kind().lr() <= 0.0 {
                return Err(invalid("train.optimizer.lr", "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.train.label_smoothing) {
            return Err(invalid("train.label_smoothing", "must lie in [0, 1)"));
        }
        if self.train.label_smoothing > 0.0 && self.train.lambda != 1.0 {
            return Err(invalid(
                "train.label_smoothing",
                "requires train.lambda = 1",
            ));
        }
        self.decode.scorers()?;
        self.decode.rules()?;
        for (i, p) in self.theorem.p_true.iter().enumerate() {
            let sum: f64 = p.iter().sum();
            if p.len() < 2 || (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(
                    &format!("theorem.p_true[{i}]"),
                    "must have >= 2 entries summing to 1",
                ));
            }
        }
        if self.theorem.grid_lo >= self.theorem.grid_hi
            || self.theorem.grid_step.is_nan()
            || self.theorem.grid_step <= 0.0
        {
            return Err(invalid("theorem.grid_lo/grid_hi/grid_step", "malformed grid"));
        }
        if self.sweep_lambdas.is_empty() || self.sweep_lambdas.iter().any(|l| !l.is_finite()) {
            return Err(invalid("sweep_lambdas", "must be a nonempty list of finite values"));
        }
        Ok(())
    }
}
