//! Decision rules over a trained Q-model: greedy, ancestral sampling with
//! temperature, vanilla beam search, and exact maximum-probability search by
//! depth-first backtracking with admissible pruning.
//!
//! Every rule is parameterized by a [`Scorer`], the switch between the
//! softmax distribution and the dual distribution of the Q-values. Greedy
//! picks `argmax q` directly (both scorers are order-preserving there, except
//! in the rare case where the top token's dual factor is non-positive, which
//! is counted rather than failed on). Scores are cumulative natural-log
//! probabilities with `-inf` absorbing exact zeros; no length normalization
//! anywhere.
//!
//! Generation is capped by a forced-EOS step: when a hypothesis reaches that
//! step, EOS is emitted and its actual scorer log-probability is charged, so
//! maximum-probability dominance stays exact.

use thiserror::Error;

use crate::math::{
    dual_distribution, softmax, temperature_rescale, MathError, QValues,
    TokenDistribution,
};
use crate::model::{DecisionContext, ModelError, QModel};
use crate::rng::RngStream;
use crate::{Token, EOS};

/// Default expansion budget for [`exact_map`].
pub const DEFAULT_NODE_BUDGET: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("beam size must be >= 1")]
    BadBeamSize,
    #[error("node budget {budget} exceeded after {expanded} expansions")]
    NodeBudgetExceeded {
        budget: usize,
        expanded: usize,
        /// Best completed hypothesis found before the budget ran out.
        best_so_far: Option<Box<DecodeResult>>,
    },
    #[error("output must end with EOS and contain it nowhere else")]
    MalformedOutput,
}

/// The per-token distribution fed to a decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Softmax,
    Dual,
}

impl Scorer {
    pub fn tag(&self) -> &'static str {
        match self {
            Scorer::Softmax => "softmax",
            Scorer::Dual => "dual",
        }
    }

    /// The scorer's distribution for one utility vector.
    pub fn distribution(&self, q: &QValues) -> TokenDistribution {
        match self {
            Scorer::Softmax => softmax(q),
            Scorer::Dual => dual_distribution(q).distribution,
        }
    }
}

/// One decoded output with its per-step scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Output tokens, always ending in EOS.
    pub tokens: Vec<Token>,
    /// Scorer log-probability of each emitted token (natural log).
    pub step_log_probs: Vec<f64>,
    /// Sum of the step log-probabilities; `-inf` if any step is a zero.
    pub total_log_prob: f64,
    /// Whether EOS was forced by the length cap rather than chosen.
    pub forced_eos: bool,
    /// Search effort: model evaluations (greedy/sampling/beam) or node
    /// expansions (exact search).
    pub candidates_expanded: usize,
    /// Steps at which `argmax q` had a non-positive dual factor, making the
    /// dual argmax disagree with the Q argmax (greedy diagnostic; zero for
    /// the softmax scorer).
    pub dual_argmax_mismatches: usize,
}

impl DecodeResult {
    fn from_steps(
        tokens: Vec<Token>,
        step_log_probs: Vec<f64>,
        forced_eos: bool,
        candidates_expanded: usize,
        dual_argmax_mismatches: usize,
    ) -> Self {
        let total_log_prob = step_log_probs.iter().sum();
        DecodeResult {
            tokens,
            step_log_probs,
            total_log_prob,
            forced_eos,
            candidates_expanded,
            dual_argmax_mismatches,
        }
    }
}

/// Greedy rule: at each step emit `argmax q` (ties to the lowest token
/// index); stop at EOS or the forced-EOS step. The chosen tokens do not
/// depend on the scorer; the recorded log-probabilities do.
pub fn greedy_decode(
    model: &QModel,
    x: &[Token],
    scorer: Scorer,
    forced_eos_step: usize,
) -> Result<DecodeResult, DecodeError> {
    let mut tokens: Vec<Token> = Vec::new();
    let mut lps: Vec<f64> = Vec::new();
    let mut mismatches = 0usize;
    let mut expanded = 0usize;
    loop {
        let t = tokens.len();
        let ctx = DecisionContext::new(x, &tokens);
        let q = model.q_values(&ctx)?;
        expanded += 1;
        let dist = match scorer {
            Scorer::Softmax => softmax(&q),
            Scorer::Dual => {
                let dd = dual_distribution(&q);
                if dd.factors[q.argmax()] <= 0.0 {
                    mismatches += 1;
                }
                dd.distribution
            }
        };
        let (token, forced) = if t == forced_eos_step {
            (EOS, true)
        } else {
            (q.argmax(), false)
        };
        lps.push(dist.log_prob(token));
        tokens.push(token);
        if token == EOS {
            return Ok(DecodeResult::from_steps(
                tokens, lps, forced, expanded, mismatches,
            ));
        }
    }
}

/// Rescale a distribution as `p^(1/beta)` renormalized; exact zeros stay
/// zero. `beta = 0` degenerates to the argmax (lowest index on ties).
fn power_rescale(dist: &TokenDistribution, beta: f64) -> Result<TokenDistribution, MathError> {
    if beta.is_nan() || beta < 0.0 {
        return Err(MathError::NegativeTemperature(beta));
    }
    if beta == 1.0 {
        return Ok(dist.clone());
    }
    if beta == 0.0 {
        return TokenDistribution::one_hot(dist.argmax(), dist.len());
    }
    let scaled: Vec<f64> = dist.log_probs().iter().map(|&l| l / beta).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scaled.iter().map(|&l| (l - m).exp()).sum();
    let probs: Vec<f64> = scaled.iter().map(|&l| (l - m).exp() / z).collect();
    TokenDistribution::from_probs(probs)
}

/// Temperature-regulated ancestral sampling from the scorer distribution.
///
/// For the softmax scorer the temperature rescales the utilities
/// (`softmax(q / beta)`); for the dual scorer it power-rescales the dual
/// probabilities (`p^(1/beta)` renormalized), which preserves `beta = 1` as
/// pure dual sampling and `beta -> 0` as the dual argmax. The recorded
/// log-probabilities are always the untempered scorer's, so reported scores
/// mean the same thing at every temperature.
pub fn sample_decode(
    model: &QModel,
    x: &[Token],
    scorer: Scorer,
    beta: f64,
    rng: &mut RngStream,
    forced_eos_step: usize,
) -> Result<DecodeResult, DecodeError> {
    if beta.is_nan() || beta < 0.0 {
        return Err(DecodeError::Math(MathError::NegativeTemperature(beta)));
    }
    let mut tokens: Vec<Token> = Vec::new();
    let mut lps: Vec<f64> = Vec::new();
    let mut expanded = 0usize;
    loop {
        let t = tokens.len();
        let ctx = DecisionContext::new(x, &tokens);
        let q = model.q_values(&ctx)?;
        expanded += 1;
        let score_dist = scorer.distribution(&q);
        let (token, forced) = if t == forced_eos_step {
            (EOS, true)
        } else {
            let choice_dist = match scorer {
                Scorer::Softmax => temperature_rescale(&q, beta)?,
                Scorer::Dual => power_rescale(&score_dist, beta)?,
            };
            (rng.sample_weighted(choice_dist.probs()), false)
        };
        lps.push(score_dist.log_prob(token));
        tokens.push(token);
        if token == EOS {
            return Ok(DecodeResult::from_steps(tokens, lps, forced, expanded, 0));
        }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<Token>,
    step_log_probs: Vec<f64>,
    score: f64,
    forced: bool,
}

impl Hypothesis {
    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Candidate ordering: higher score first, lexicographically smaller token
/// sequence first among equals. Total over NaN-free floats.
fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Vanilla beam search over cumulative scorer log-probability.
///
/// Finished hypotheses leave the live beam for a completed pool; expansion
/// stops when the pool's best score exceeds every live score (scores only
/// decrease) or when all live hypotheses have been force-finished. Returns
/// the pool's best, ties to the lexicographically smallest output.
pub fn beam_search(
    model: &QModel,
    x: &[Token],
    scorer: Scorer,
    beam_size: usize,
    forced_eos_step: usize,
) -> Result<DecodeResult, DecodeError> {
    if beam_size == 0 {
        return Err(DecodeError::BadBeamSize);
    }
    let d = model.vocab_size();
    let mut expanded = 0usize;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        score: 0.0,
        forced: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        if let Some(best) = pool.iter().map(|h| h.score).max_by(f64::total_cmp) {
            let live_best = live
                .iter()
                .map(|h| h.score)
                .max_by(f64::total_cmp)
                .unwrap_or(f64::NEG_INFINITY);
            if best > live_best {
                break;
            }
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let t = hyp.tokens.len();
            let ctx = DecisionContext::new(x, &hyp.tokens);
            let q = model.q_values(&ctx)?;
            expanded += 1;
            let dist = scorer.distribution(&q);
            if t == forced_eos_step {
                let mut tokens = hyp.tokens.clone();
                tokens.push(EOS);
                let mut lps = hyp.step_log_probs.clone();
                lps.push(dist.log_prob(EOS));
                candidates.push(Hypothesis {
                    score: hyp.score + dist.log_prob(EOS),
                    tokens,
                    step_log_probs: lps,
                    forced: true,
                });
            } else {
                for token in 0..d {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(token);
                    let mut lps = hyp.step_log_probs.clone();
                    lps.push(dist.log_prob(token));
                    candidates.push(Hypothesis {
                        score: hyp.score + dist.log_prob(token),
                        tokens,
                        step_log_probs: lps,
                        forced: false,
                    });
                }
            }
        }
        candidates.sort_by(hypothesis_order);
        candidates.truncate(beam_size);
        live = Vec::new();
        for hyp in candidates {
            if hyp.finished() {
                pool.push(hyp);
            } else {
                live.push(hyp);
            }
        }
    }

    let best = pool
        .into_iter()
        .min_by(hypothesis_order)
        .expect("forced EOS guarantees at least one completed hypothesis");
    Ok(DecodeResult::from_steps(
        best.tokens,
        best.step_log_probs,
        best.forced,
        expanded,
        0,
    ))
}

/// Exact maximum-probability output by depth-first search.
///
/// A prefix is pruned when its cumulative log-probability is no better than
/// the best completed score, which is admissible because every per-step
/// log-probability is non-positive under both scorers. Tokens are explored
/// in index order, so the first-found maximum is also the lexicographically
/// smallest one, matching brute-force enumeration with strict improvement.
pub fn exact_map(
    model: &QModel,
    x: &[Token],
    scorer: Scorer,
    forced_eos_step: usize,
    node_budget: usize,
) -> Result<DecodeResult, DecodeError> {
    struct Search<'a> {
        model: &'a QModel,
        x: &'a [Token],
        scorer: Scorer,
        forced_eos_step: usize,
        node_budget: usize,
        expanded: usize,
        best: Option<Hypothesis>,
    }

    impl<'a> Search<'a> {
        fn run(
            &mut self,
            prefix: &mut Vec<Token>,
            lps: &mut Vec<f64>,
            cum: f64,
        ) -> Result<(), DecodeError> {
            if self.expanded >= self.node_budget {
                return Err(DecodeError::NodeBudgetExceeded {
                    budget: self.node_budget,
                    expanded: self.expanded,
                    best_so_far: self.best.take().map(|h| {
                        Box::new(DecodeResult::from_steps(
                            h.tokens,
                            h.step_log_probs,
                            h.forced,
                            0,
                            0,
                        ))
                    }),
                });
            }
            let ctx = DecisionContext::new(self.x, prefix);
            let q = self.model.q_values(&ctx)?;
            self.expanded += 1;
            let dist = self.scorer.distribution(&q);
            let t = prefix.len();
            let forced = t == self.forced_eos_step;
            let tokens: Box<dyn Iterator<Item = Token>> = if forced {
                Box::new(std::iter::once(EOS))
            } else {
                Box::new(0..self.model.vocab_size())
            };
            for token in tokens {
                let child = cum + dist.log_prob(token);
                if let Some(best) = &self.best {
                    if child <= best.score {
                        continue; // admissible prune: extensions only lower it
                    }
                }
                prefix.push(token);
                lps.push(dist.log_prob(token));
                if token == EOS {
                    let improves = match &self.best {
                        None => true,
                        Some(b) => child > b.score,
                    };
                    if improves {
                        self.best = Some(Hypothesis {
                            tokens: prefix.clone(),
                            step_log_probs: lps.clone(),
                            score: child,
                            forced,
                        });
                    }
                } else {
                    self.run(prefix, lps, child)?;
                }
                prefix.pop();
                lps.pop();
            }
            Ok(())
        }
    }

    let mut search = Search {
        model,
        x,
        scorer,
        forced_eos_step,
        node_budget,
        expanded: 0,
        best: None,
    };
    let mut prefix = Vec::new();
    let mut lps = Vec::new();
    search.run(&mut prefix, &mut lps, 0.0)?;
    let best = search
        .best
        .expect("EOS is explored first, so a completed output always exists");
    let expanded = search.expanded;
    Ok(DecodeResult::from_steps(
        best.tokens,
        best.step_log_probs,
        best.forced,
        expanded,
        0,
    ))
}

/// Scorer log-probability of a given output.
#[derive(Debug, Clone)]
pub struct SequenceScore {
    pub step_log_probs: Vec<f64>,
    /// Sum of step log-probabilities, `-inf` absorbing.
    pub total_log_prob: f64,
    /// First step whose scorer probability is exactly zero, if any.
    pub first_zero_step: Option<usize>,
}

/// Score an output `y` (which must end in EOS and contain it nowhere else)
/// under the product rule with the chosen scorer.
pub fn sequence_log_prob(
    model: &QModel,
    x: &[Token],
    y: &[Token],
    scorer: Scorer,
) -> Result<SequenceScore, DecodeError> {
    if y.last() != Some(&EOS) || y[..y.len() - 1].contains(&EOS) {
        return Err(DecodeError::MalformedOutput);
    }
    let mut lps = Vec::with_capacity(y.len());
    let mut first_zero_step = None;
    for (t, &token) in y.iter().enumerate() {
        let ctx = DecisionContext::new(x, &y[..t]);
        let q = model.q_values(&ctx)?;
        let lp = scorer.distribution(&q).log_prob(token);
        if lp == f64::NEG_INFINITY && first_zero_step.is_none() {
            first_zero_step = Some(t);
        }
        lps.push(lp);
    }
    let total: f64 = lps.iter().sum();
    Ok(SequenceScore {
        step_log_probs: lps,
        total_log_prob: total,
        first_zero_step,
    })
}
