//! Executable verification of the formal results, plus the decoder
//! evaluation harness.
//!
//! The gradient identity check confirms, by central differences, that the
//! log-likelihood gradient equals the advantage-objective gradient plus the
//! accumulated covariance backprop. The tabular fixed-point engine ascends
//! the idealized objective `J(q) = E_true[Q] - E_softmax[Q]` with its exact
//! gradient and certifies the optimum: per-token residuals, the desired/
//! undesired margin, the undesired-utility spread, and recovery of the true
//! distribution by the dual transform. Utility oracles check by brute-force
//! enumeration that probability maximization and probability sampling are
//! optimal/sound in the covered cases. `evaluate_decoders` runs every
//! (rule, scorer) pair against exact ground truth and reports task metric,
//! log10 probabilities, sequence-level KL, and token-level calibration.

use thiserror::Error;

use crate::decoding::{
    beam_search, exact_map, greedy_decode, sample_decode, sequence_log_prob, DecodeError,
    DecodeResult, Scorer, DEFAULT_NODE_BUDGET,
};
use crate::math::{
    cov_coefficients, dual_distribution, softmax, MathError, QValues,
};
use crate::model::{
    finite_difference_gradient, DecisionContext, GradientBuffer, ModelError, QModel,
};
use crate::parallel::maybe_par_map;
use crate::rng::RngStream;
use crate::tasks::{LabeledPair, SyntheticTask, TaskError};
use crate::training::{eval_j_mabe_total, eval_log_likelihood, TrainError};
use crate::{Token, EOS};

/// Rng stream tags used by the evaluation harness.
pub const EVAL_INSTANCE_TAG: u64 = 3 << 56;
pub const EVAL_REF_TAG: u64 = 4 << 56;
pub const EVAL_DECODE_TAG: u64 = 5 << 56;
pub const EVAL_ECE_TAG: u64 = 6 << 56;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("probability vector invalid: {0}")]
    BadProbabilities(String),
    #[error("dimension {0} out of range for the fixed-point engine (2..=64)")]
    BadDimension(usize),
    #[error("landscape scan requires d = 2, got {0}")]
    LandscapeDimension(usize),
    #[error("grid must have lo < hi and a positive step")]
    BadGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

// ---------------------------------------------------------------------------
// Gradient identity
// ---------------------------------------------------------------------------

/// Residuals of the identity `grad(logP) = grad(J_adv) + sum_t cov_t`.
#[derive(Debug, Clone)]
pub struct GradientIdentityReport {
    /// Max over coordinates of `|glogp - gadv - cov| / max(1, scales)`.
    pub max_relative_residual: f64,
    pub max_abs_residual: f64,
    pub coordinates: usize,
}

/// Check the covariance decomposition of the log-likelihood gradient on one
/// batch: both objective gradients come from central differences of the
/// forward evaluators, the covariance from frozen-coefficient backprop.
pub fn verify_gradient_identity(
    model: &QModel,
    batch: &[LabeledPair],
    h: f64,
) -> Result<GradientIdentityReport, AnalysisError> {
    let glogp = finite_difference_gradient(
        model,
        |m| {
            eval_log_likelihood(m, batch)
                .map(|ll| ll.j_data)
                .map_err(|_| ModelError::NonFiniteObjective { coordinate: 0 })
        },
        h,
    )?;
    let gadv = finite_difference_gradient(
        model,
        |m| {
            eval_j_mabe_total(m, batch)
                .map_err(|_| ModelError::NonFiniteObjective { coordinate: 0 })
        },
        h,
    )?;
    let mut cov = GradientBuffer::for_model(model);
    for pair in batch {
        for t in 0..pair.output.len() {
            let ctx = DecisionContext::new(&pair.input, &pair.output[..t]);
            let q = model.q_values(&ctx)?;
            let g = cov_coefficients(&q);
            model.accumulate_gradient(&ctx, &g, &mut cov)?;
        }
    }
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for ((&a, &b), &c) in glogp.iter().zip(&gadv).zip(cov.as_slice()) {
        let r = a - b - c;
        let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
        max_abs = max_abs.max(r.abs());
        max_rel = max_rel.max(r.abs() / scale);
    }
    Ok(GradientIdentityReport {
        max_relative_residual: max_rel,
        max_abs_residual: max_abs,
        coordinates: glogp.len(),
    })
}

// ---------------------------------------------------------------------------
// Tabular fixed point
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    /// Plain gradient-ascent step; exact gradient, no stochasticity.
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Convergence: max-coordinate gradient magnitude below this.
    pub tolerance: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            learning_rate: 0.5,
            max_iterations: 2_000_000,
            tolerance: 1e-10,
        }
    }
}

/// Certified optimum of `J(q) = E_true[Q] - E_softmax(q)[Q]` for one action
/// distribution.
#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub q_star: Vec<f64>,
    pub p_star: Vec<f64>,
    /// Dual transform of `q_star`.
    pub dual_star: Vec<f64>,
    /// Per-token violation of `p*(1 + q* - EQ) = P_true`.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `max_{a in supp} q*_a - max_{b notin supp} q*_b`; defined only when
    /// the support is a strict subset.
    pub margin: Option<f64>,
    /// `max - min` of `q*_b` over out-of-support tokens.
    pub undesired_spread: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn validate_p_true(p_true: &[f64]) -> Result<(), AnalysisError> {
    if p_true.len() < 2 || p_true.len() > 64 {
        return Err(AnalysisError::BadDimension(p_true.len()));
    }
    let mut sum = 0.0;
    for &p in p_true {
        if !p.is_finite() || p < 0.0 {
            return Err(AnalysisError::BadProbabilities(format!(
                "entry {p} is negative or non-finite"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(AnalysisError::BadProbabilities(format!("sum {sum} != 1")));
    }
    Ok(())
}

/// Exact ascent direction: `dJ/dq_j = P_true(j) - p_j (1 + q_j - EQ)`.
pub fn fixed_point_gradient(p_true: &[f64], q: &[f64]) -> Vec<f64> {
    let qv = QValues::new(q.to_vec()).expect("finite q during ascent");
    let p = softmax(&qv);
    let eq: f64 = p
        .probs()
        .iter()
        .zip(q)
        .map(|(&pa, &qa)| pa * qa)
        .sum();
    p_true
        .iter()
        .zip(p.probs())
        .zip(q)
        .map(|((&pt, &pa), &qa)| pt - pa * (1.0 + qa - eq))
        .collect()
}

/// Gradient ascent on the idealized objective from zero initialization,
/// followed by a full certificate of the optimum.
pub fn tabular_fixed_point(
    p_true: &[f64],
    config: &FixedPointConfig,
) -> Result<FixedPointReport, AnalysisError> {
    validate_p_true(p_true)?;
    let d = p_true.len();
    let mut q = vec![0.0; d];
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < config.max_iterations {
        let grad = fixed_point_gradient(p_true, &q);
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad < config.tolerance {
            converged = true;
            break;
        }
        for (qj, gj) in q.iter_mut().zip(&grad) {
            *qj += config.learning_rate * gj;
        }
        iterations += 1;
    }

    let qv = QValues::new(q.clone()).expect("ascent stays finite");
    let p = softmax(&qv);
    let eq: f64 = p.probs().iter().zip(&q).map(|(&pa, &qa)| pa * qa).sum();
    let residuals: Vec<f64> = p_true
        .iter()
        .zip(p.probs())
        .zip(&q)
        .map(|((&pt, &pa), &qa)| (pa * (1.0 + qa - eq) - pt).abs())
        .collect();
    let max_residual = residuals.iter().fold(0.0f64, |m, r| m.max(*r));

    let support: Vec<usize> = (0..d).filter(|&a| p_true[a] > 0.0).collect();
    let outside: Vec<usize> = (0..d).filter(|&a| p_true[a] == 0.0).collect();
    let margin = if !outside.is_empty() && !support.is_empty() {
        let best_in = support.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
        let best_out = outside.iter().map(|&b| q[b]).fold(f64::NEG_INFINITY, f64::max);
        Some(best_in - best_out)
    } else {
        None
    };
    let undesired_spread = if outside.is_empty() {
        None
    } else {
        let hi = outside.iter().map(|&b| q[b]).fold(f64::NEG_INFINITY, f64::max);
        let lo = outside.iter().map(|&b| q[b]).fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    };

    let dual_star = dual_distribution(&qv).distribution.probs().to_vec();

    Ok(FixedPointReport {
        q_star: q,
        p_star: p.probs().to_vec(),
        dual_star,
        residuals,
        max_residual,
        margin,
        undesired_spread,
        converged,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Objective landscape (d = 2 cross-section)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct LandscapeReport {
    /// `(free coordinate, J)` along the scan.
    pub samples: Vec<(f64, f64)>,
    /// Local maxima located by derivative sign changes, refined by bisection.
    pub maxima: Vec<f64>,
}

/// Objective value `J(q) = E_true[Q] - E_softmax[Q]` at an arbitrary point.
pub fn j_value(p_true: &[f64], q: &[f64]) -> f64 {
    let qv = QValues::new(q.to_vec()).expect("finite q");
    let p = softmax(&qv);
    let e_true: f64 = p_true.iter().zip(q).map(|(&pt, &qa)| pt * qa).sum();
    let e_soft: f64 = p.probs().iter().zip(q).map(|(&pa, &qa)| pa * qa).sum();
    e_true - e_soft
}

/// Scan the `d = 2` objective with one coordinate gauged to zero, reporting
/// every local maximum found by a sign change of the exact derivative.
pub fn j_landscape(
    p_true: &[f64],
    gauge_token: usize,
    grid: GridSpec,
) -> Result<LandscapeReport, AnalysisError> {
    validate_p_true(p_true)?;
    if p_true.len() != 2 {
        return Err(AnalysisError::LandscapeDimension(p_true.len()));
    }
    if gauge_token > 1 {
        return Err(AnalysisError::BadDimension(gauge_token));
    }
    if grid.lo >= grid.hi || grid.step.is_nan() || grid.step <= 0.0 {
        return Err(AnalysisError::BadGrid);
    }
    let free = 1 - gauge_token;
    let point = |v: f64| {
        let mut q = [0.0f64; 2];
        q[free] = v;
        q
    };
    let derivative = |v: f64| fixed_point_gradient(p_true, &point(v))[free];

    let mut samples = Vec::new();
    let mut maxima = Vec::new();
    let steps = ((grid.hi - grid.lo) / grid.step).round() as usize;
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let v = grid.lo + grid.step * i as f64;
        samples.push((v, j_value(p_true, &point(v))));
        let dv = derivative(v);
        if let Some((pv, pd)) = prev {
            if pd > 0.0 && dv <= 0.0 {
                // Bracketed maximum; refine by bisection on the derivative.
                let (mut lo, mut hi) = (pv, v);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if derivative(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                maxima.push(0.5 * (lo + hi));
            }
        }
        prev = Some((v, dv));
    }
    Ok(LandscapeReport { samples, maxima })
}

// ---------------------------------------------------------------------------
// Utility specifications and the appendix oracles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    ExactMatch,
    TokenOverlapF1,
    NegNormalizedEditDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Probability-weighted average similarity over the support.
    Average,
    /// Best similarity against any support member.
    MaxOverSupport,
}

#[derive(Debug, Clone, Copy)]
pub struct UtilitySpec {
    pub similarity: Similarity,
    pub aggregation: Aggregation,
}

fn content(y: &[Token]) -> &[Token] {
    match y.last() {
        Some(&EOS) => &y[..y.len() - 1],
        _ => y,
    }
}

fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

impl Similarity {
    /// Similarity of candidate `a` to expected output `y`, computed over
    /// content tokens (the shared trailing EOS is stripped). Self-maximal:
    /// `delta(y, y) >= delta(a, y)` for every candidate.
    pub fn delta(&self, a: &[Token], y: &[Token]) -> f64 {
        let a = content(a);
        let y = content(y);
        match self {
            Similarity::ExactMatch => f64::from(u8::from(a == y)),
            Similarity::TokenOverlapF1 => {
                if a.is_empty() && y.is_empty() {
                    return 1.0;
                }
                if a.is_empty() || y.is_empty() {
                    return 0.0;
                }
                let mut counts = std::collections::HashMap::new();
                for &t in y {
                    *counts.entry(t).or_insert(0usize) += 1;
                }
                let mut overlap = 0usize;
                for &t in a {
                    if let Some(c) = counts.get_mut(&t) {
                        if *c > 0 {
                            *c -= 1;
                            overlap += 1;
                        }
                    }
                }
                if overlap == 0 {
                    return 0.0;
                }
                let precision = overlap as f64 / a.len() as f64;
                let recall = overlap as f64 / y.len() as f64;
                2.0 * precision * recall / (precision + recall)
            }
            Similarity::NegNormalizedEditDistance => {
                let denom = a.len().max(y.len()).max(1) as f64;
                -(levenshtein(a, y) as f64) / denom
            }
        }
    }
}

impl UtilitySpec {
    /// Utility of a candidate output against an enumerated support.
    pub fn utility(&self, candidate: &[Token], support: &[(Vec<Token>, f64)]) -> f64 {
        match self.aggregation {
            Aggregation::Average => support
                .iter()
                .map(|(y, p)| p * self.similarity.delta(candidate, y))
                .sum(),
            Aggregation::MaxOverSupport => support
                .iter()
                .map(|(y, _)| self.similarity.delta(candidate, y))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One instance where an optimality claim failed, recorded verbatim.
#[derive(Debug, Clone)]
pub struct CounterExample {
    pub input: Vec<Token>,
    pub claim: String,
    pub offending_candidate: Vec<Token>,
    pub offending_utility: f64,
    pub reference_utility: f64,
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub instances_checked: usize,
    pub instances_skipped: usize,
    pub counterexamples: Vec<CounterExample>,
}

/// Candidates for brute-force comparison: the support itself, the empty
/// output, and bounded random mutations of support members.
fn candidate_set(
    support: &[(Vec<Token>, f64)],
    vocab: usize,
    rng: &mut RngStream,
) -> Vec<Vec<Token>> {
    let mut candidates: Vec<Vec<Token>> = support.iter().map(|(y, _)| y.clone()).collect();
    candidates.push(vec![EOS]);
    for (y, _) in support {
        for _ in 0..2 {
            let mut mutated = y.clone();
            let body = mutated.len() - 1;
            if body > 0 {
                let pos = rng.next_index(body);
                mutated[pos] = 1 + rng.next_index(vocab - 1);
                candidates.push(mutated);
            }
        }
    }
    candidates.sort();
    candidates.dedup();
    candidates
}

/// Brute-force check that maximizing the true probability maximizes the
/// utility, in the cases where that is claimed to hold: binary similarity
/// with average aggregation, deterministic instances with any similarity,
/// and max-over-support aggregation (where every support member must attain
/// the maximum and the probability argmax is among them). Instances not
/// covered by any case, or with too large a support, are skipped with a
/// count.
pub fn map_optimality_check(
    task: &SyntheticTask,
    utility: &UtilitySpec,
    instances: usize,
    seed: u64,
    support_cap: usize,
) -> Result<OptimalityReport, AnalysisError> {
    let mut rng = RngStream::new(seed, 0x0A);
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut counterexamples = Vec::new();
    let tol = 1e-12;

    for _ in 0..instances {
        let x = task.sample_input(&mut rng);
        let support = match task.enumerate_support(&x, support_cap) {
            Ok(s) => s,
            Err(TaskError::SupportTooLarge { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let deterministic = support.len() == 1;
        let case1 = utility.similarity == Similarity::ExactMatch
            && utility.aggregation == Aggregation::Average;
        let case3 = utility.aggregation == Aggregation::MaxOverSupport;
        if !(case1 || deterministic || case3) {
            skipped += 1;
            continue;
        }

        let candidates = candidate_set(&support, task.vocab_size(), &mut rng);
        let utilities: Vec<f64> = candidates
            .iter()
            .map(|c| utility.utility(c, &support))
            .collect();
        let best = utilities.iter().fold(f64::NEG_INFINITY, |m, &u| m.max(u));
        let (map_output, _) = task.map_output(&x, support_cap)?;
        let map_utility = utility.utility(&map_output, &support);

        // In every covered case the probability argmax must attain the best
        // candidate utility.
        if map_utility < best - tol {
            let offender = candidates
                .iter()
                .zip(&utilities)
                .find(|(_, &u)| u > map_utility + tol)
                .expect("an offender exists when the claim fails");
            counterexamples.push(CounterExample {
                input: x.clone(),
                claim: "probability argmax maximizes utility".into(),
                offending_candidate: offender.0.clone(),
                offending_utility: *offender.1,
                reference_utility: map_utility,
            });
        }
        // Case 3 additionally: every support member attains the maximum.
        if case3 {
            for (y, _) in &support {
                let u = utility.utility(y, &support);
                if u < best - tol {
                    counterexamples.push(CounterExample {
                        input: x.clone(),
                        claim: "every support member attains the maximal utility".into(),
                        offending_candidate: y.clone(),
                        offending_utility: u,
                        reference_utility: best,
                    });
                }
            }
        }
        checked += 1;
    }
    Ok(OptimalityReport {
        instances_checked: checked,
        instances_skipped: skipped,
        counterexamples,
    })
}

#[derive(Debug, Clone)]
pub struct SoundnessReport {
    pub instances_checked: usize,
    /// Violations of the exact identity between the two expected-utility
    /// routes at `P_model = P_true`.
    pub identity_violations: usize,
    /// Violations of gap monotonicity along the interpolation family.
    pub monotonicity_violations: usize,
    /// Mean expected-utility gap per interpolation weight.
    pub mean_gaps: Vec<f64>,
}

/// Enumeration check that sampling the true distribution is as good as the
/// expected-output policy itself, and that the expected utility degrades
/// monotonically as the sampling distribution is interpolated away from the
/// truth (`P_model = (1-alpha) P_true + alpha uniform(support)`).
pub fn sampling_soundness_check(
    task: &SyntheticTask,
    utility: &UtilitySpec,
    instances: usize,
    seed: u64,
    alphas: &[f64],
    support_cap: usize,
) -> Result<SoundnessReport, AnalysisError> {
    let mut rng = RngStream::new(seed, 0x0B);
    let mut identity_violations = 0usize;
    let mut monotonicity_violations = 0usize;
    let mut gap_totals = vec![0.0f64; alphas.len()];
    let mut checked = 0usize;

    for _ in 0..instances {
        let x = task.sample_input(&mut rng);
        let support = task.enumerate_support(&x, support_cap)?;
        let member_utilities: Vec<f64> = support
            .iter()
            .map(|(y, _)| utility.utility(y, &support))
            .collect();

        // Route one: expected utility of an action sampled from the truth.
        let route_action: f64 = support
            .iter()
            .zip(&member_utilities)
            .map(|((_, p), &u)| p * u)
            .sum();
        // Route two: expected utility of the expected-output policy itself,
        // expanded inline without the cached per-member utilities.
        let route_policy: f64 = support
            .iter()
            .map(|(y, p)| p * utility.utility(y, &support))
            .sum();
        if (route_action - route_policy).abs() > 1e-12 {
            identity_violations += 1;
        }

        let uniform = 1.0 / support.len() as f64;
        let mut last_gap = f64::NEG_INFINITY;
        for (k, &alpha) in alphas.iter().enumerate() {
            let e_alpha: f64 = support
                .iter()
                .zip(&member_utilities)
                .map(|((_, p), &u)| ((1.0 - alpha) * p + alpha * uniform) * u)
                .sum();
            let gap = route_action - e_alpha;
            gap_totals[k] += gap;
            if gap < last_gap - 1e-12 {
                monotonicity_violations += 1;
            }
            last_gap = gap;
        }
        checked += 1;
    }
    Ok(SoundnessReport {
        instances_checked: checked,
        identity_violations,
        monotonicity_violations,
        mean_gaps: gap_totals
            .iter()
            .map(|g| g / checked.max(1) as f64)
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Decoder evaluation
// ---------------------------------------------------------------------------

/// A decision rule in the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeRule {
    Greedy,
    Sample { beta: f64 },
    Beam { size: usize },
    ExactMap,
}

impl DecodeRule {
    pub fn label(&self) -> String {
        match self {
            DecodeRule::Greedy => "greedy".into(),
            DecodeRule::Sample { beta } => format!("sample(beta={beta})"),
            DecodeRule::Beam { size } => format!("beam({size})"),
            DecodeRule::ExactMap => "map".into(),
        }
    }
}

/// One `(rule, scorer)` row of the evaluation table. Log probabilities are
/// base-10 means over finite values; exact zeros are counted separately
/// rather than averaged.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub rule: String,
    pub scorer: String,
    /// Fraction of instances whose output equals the oracle argmax.
    pub exact_match: f64,
    /// Mean expected utility of the decoded outputs.
    pub mean_utility: f64,
    pub mean_own_log10: f64,
    pub own_zero_count: usize,
    pub mean_ref_log10: f64,
    pub ref_zero_count: usize,
    pub mean_empty_log10: f64,
    pub empty_zero_count: usize,
    /// Sequence-level KL(P_true || model), finite part, averaged over
    /// instances.
    pub mean_seq_kl: f64,
    /// Support members assigned zero model mass, summed over instances.
    pub kl_zero_mass_count: usize,
    /// Token-level expected calibration error along model-sampled prefixes.
    pub token_ece: f64,
}

#[derive(Debug, Clone)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub instances: usize,
}

/// Sequence-level `KL(P_true || model-under-scorer)` by support enumeration:
/// the sum over members with positive model mass, plus the count (and true
/// mass) of members the model sends to zero.
pub fn sequence_kl(
    model: &QModel,
    task: &SyntheticTask,
    x: &[Token],
    scorer: Scorer,
    support: &[(Vec<Token>, f64)],
) -> Result<(f64, usize), AnalysisError> {
    let _ = task;
    let mut kl = 0.0;
    let mut zero_mass = 0usize;
    for (y, p) in support {
        let score = sequence_log_prob(model, x, y, scorer)?;
        if score.total_log_prob == f64::NEG_INFINITY {
            zero_mass += 1;
        } else {
            kl += p * (p.ln() - score.total_log_prob);
        }
    }
    Ok((kl, zero_mass))
}

/// Token-level expected calibration error with 10 equal-width bins: pairs
/// `(model probability, true probability)` are collected for every token at
/// every free decision step along trajectories sampled from the scorer
/// distribution at temperature 1.
pub fn token_ece(
    model: &QModel,
    task: &SyntheticTask,
    inputs: &[Vec<Token>],
    scorer: Scorer,
    seed: u64,
) -> Result<f64, AnalysisError> {
    const BINS: usize = 10;
    let mut bin_count = [0usize; BINS];
    let mut bin_model = [0.0f64; BINS];
    let mut bin_true = [0.0f64; BINS];
    for (i, x) in inputs.iter().enumerate() {
        let mut rng = RngStream::new(seed, EVAL_ECE_TAG | i as u64);
        let forced = task.forced_eos_step(x);
        let rollout = sample_decode(model, x, scorer, 1.0, &mut rng, forced)?;
        for t in 0..rollout.tokens.len() {
            if t == forced {
                break; // only free decisions enter the calibration pool
            }
            let prefix = &rollout.tokens[..t];
            let ctx = DecisionContext::new(x, prefix);
            let q = model.q_values(&ctx)?;
            let dist = scorer.distribution(&q);
            let truth = task.true_token_distribution(x, prefix).distribution;
            for a in 0..model.vocab_size() {
                let pm = dist.prob(a);
                let bin = ((pm * BINS as f64) as usize).min(BINS - 1);
                bin_count[bin] += 1;
                bin_model[bin] += pm;
                bin_true[bin] += truth.prob(a);
            }
        }
    }
    let total: usize = bin_count.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut ece = 0.0;
    for b in 0..BINS {
        if bin_count[b] > 0 {
            let n = bin_count[b] as f64;
            ece += (n / total as f64) * ((bin_model[b] - bin_true[b]) / n).abs();
        }
    }
    Ok(ece)
}

const LN_10: f64 = std::f64::consts::LN_10;

struct FiniteMean {
    sum: f64,
    count: usize,
    zeros: usize,
}

impl FiniteMean {
    fn new() -> Self {
        FiniteMean {
            sum: 0.0,
            count: 0,
            zeros: 0,
        }
    }

    fn push_ln(&mut self, ln_value: f64) {
        if ln_value == f64::NEG_INFINITY {
            self.zeros += 1;
        } else {
            self.sum += ln_value / LN_10;
            self.count += 1;
        }
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NEG_INFINITY
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Run every `(rule, scorer)` pair over `n` fresh instances and tabulate
/// task metric, probability statistics, sequence-level KL against the exact
/// ground truth, and token-level calibration. Instances decode in parallel;
/// results merge by instance index.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_decoders(
    model: &QModel,
    task: &SyntheticTask,
    scorers: &[Scorer],
    rules: &[DecodeRule],
    instances: usize,
    seed: u64,
    utility: &UtilitySpec,
    support_cap: usize,
) -> Result<EvalTable, AnalysisError> {
    assert!(instances >= 1, "need at least one instance");

    // Shared per-instance data.
    let mut xs = Vec::with_capacity(instances);
    let mut refs = Vec::with_capacity(instances);
    let mut supports = Vec::with_capacity(instances);
    let mut oracle_maps = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut xr = RngStream::new(seed, EVAL_INSTANCE_TAG | i as u64);
        let x = task.sample_input(&mut xr);
        let mut rr = RngStream::new(seed, EVAL_REF_TAG | i as u64);
        let y_ref = {
            let pair_input_rng = &mut rr;
            // Draw only the output; the input is fixed per instance.
            let support = task.enumerate_support(&x, support_cap)?;
            let weights: Vec<f64> = support.iter().map(|(_, p)| *p).collect();
            let pick = pair_input_rng.sample_weighted(&weights);
            supports.push(support.clone());
            support[pick].0.clone()
        };
        oracle_maps.push(task.map_output(&x, support_cap)?.0);
        refs.push(y_ref);
        xs.push(x);
    }

    let mut rows = Vec::new();
    for (scorer_idx, &scorer) in scorers.iter().enumerate() {
        // Scorer-level statistics shared by all of this scorer's rows.
        let mut ref_stat = FiniteMean::new();
        let mut empty_stat = FiniteMean::new();
        let mut kl_sum = 0.0;
        let mut kl_zero = 0usize;
        for i in 0..instances {
            ref_stat.push_ln(sequence_log_prob(model, &xs[i], &refs[i], scorer)?.total_log_prob);
            empty_stat.push_ln(sequence_log_prob(model, &xs[i], &[EOS], scorer)?.total_log_prob);
            let (kl, zeros) = sequence_kl(model, task, &xs[i], scorer, &supports[i])?;
            kl_sum += kl;
            kl_zero += zeros;
        }
        let ece = token_ece(model, task, &xs, scorer, seed)?;

        for (rule_idx, &rule) in rules.iter().enumerate() {
            let row_tag = (scorer_idx * rules.len() + rule_idx) as u64;
            let decodes: Vec<Result<DecodeResult, AnalysisError>> =
                maybe_par_map(instances, |i| {
                    let x = &xs[i];
                    let forced = task.forced_eos_step(x);
                    let result = match rule {
                        DecodeRule::Greedy => greedy_decode(model, x, scorer, forced)?,
                        DecodeRule::Sample { beta } => {
                            let mut rng = RngStream::new(
                                seed,
                                EVAL_DECODE_TAG | (row_tag * instances as u64 + i as u64),
                            );
                            sample_decode(model, x, scorer, beta, &mut rng, forced)?
                        }
                        DecodeRule::Beam { size } => beam_search(model, x, scorer, size, forced)?,
                        DecodeRule::ExactMap => {
                            exact_map(model, x, scorer, forced, DEFAULT_NODE_BUDGET)?
                        }
                    };
                    Ok(result)
                });

            let mut own_stat = FiniteMean::new();
            let mut matches = 0usize;
            let mut utility_sum = 0.0;
            for (i, item) in decodes.into_iter().enumerate() {
                let decode = item?;
                own_stat.push_ln(decode.total_log_prob);
                if decode.tokens == oracle_maps[i] {
                    matches += 1;
                }
                utility_sum += utility.utility(&decode.tokens, &supports[i]);
            }
            rows.push(EvalRow {
                rule: rule.label(),
                scorer: scorer.tag().into(),
                exact_match: matches as f64 / instances as f64,
                mean_utility: utility_sum / instances as f64,
                mean_own_log10: own_stat.mean(),
                own_zero_count: own_stat.zeros,
                mean_ref_log10: ref_stat.mean(),
                ref_zero_count: ref_stat.zeros,
                mean_empty_log10: empty_stat.mean(),
                empty_zero_count: empty_stat.zeros,
                mean_seq_kl: kl_sum / instances as f64,
                kl_zero_mass_count: kl_zero,
                token_ece: ece,
            });
        }
    }
    Ok(EvalTable {
        rows,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelFamily;
    use crate::tasks::{SynonymRow, TaskKind, DEFAULT_SUPPORT_CAP};
    use crate::training::{mabe_train, OptimizerKind, TrainConfig};

    fn bisect_d2_gap() -> f64 {
        // Root of x + 1 + e^x = 0 in the gauge q_1 = 0; the desired/
        // undesired gap is -x.
        let f = |x: f64| x + 1.0 + x.exp();
        let (mut lo, mut hi) = (-2.0f64, -1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        -0.5 * (lo + hi)
    }

    #[test]
    fn gradient_identity_single_step_closed_form() {
        // Tabular row q = (1, 0), demonstrated token 0: the three terms on
        // that row's first coordinate are 1-p0, 1-p0(1+q0-EQ), p0(1-EQ).
        let mut model =
            QModel::init(ModelFamily::TabularNGram { context_order: 0 }, 2, 0).unwrap();
        model.params_mut().copy_from_slice(&[1.0, 0.0]);
        let batch = vec![LabeledPair {
            input: vec![],
            output: vec![EOS],
        }];
        let report = verify_gradient_identity(&model, &batch, 1e-5).unwrap();
        assert!(report.max_abs_residual <= 1e-9, "{report:?}");

        let e = 1f64.exp();
        let p0 = e / (1.0 + e);
        let glogp = finite_difference_gradient(
            &model,
            |m| {
                eval_log_likelihood(m, &batch)
                    .map(|ll| ll.j_data)
                    .map_err(|_| ModelError::NonFiniteObjective { coordinate: 0 })
            },
            1e-5,
        )
        .unwrap();
        let gadv = finite_difference_gradient(
            &model,
            |m| {
                eval_j_mabe_total(m, &batch)
                    .map_err(|_| ModelError::NonFiniteObjective { coordinate: 0 })
            },
            1e-5,
        )
        .unwrap();
        assert!((glogp[0] - (1.0 - p0)).abs() < 1e-9);
        assert!((glogp[0] - 0.268941).abs() < 1e-6);
        assert!((gadv[0] - 0.072330).abs() < 1e-6);
        assert!((glogp[0] - gadv[0] - 0.196612).abs() < 1e-6);
    }

    #[test]
    fn gradient_identity_random_hidden_model() {
        let model = QModel::init(
            ModelFamily::OneHiddenLayer {
                embed_dim: 3,
                hidden_dim: 5,
                context_order: 1,
            },
            5,
            17,
        )
        .unwrap();
        let task = SyntheticTask::new(TaskKind::NoisyCopy { len: 2, eps: 0.2 }, 5).unwrap();
        let mut rng = RngStream::new(2, 0);
        let batch: Vec<LabeledPair> = (0..8).map(|_| task.sample_pair(&mut rng)).collect();
        let report = verify_gradient_identity(&model, &batch, 1e-5).unwrap();
        assert!(
            report.max_relative_residual <= 1e-4,
            "residual {}",
            report.max_relative_residual
        );
    }

    #[test]
    fn fixed_point_uniform_distribution() {
        let p_true = vec![0.25; 4];
        let report = tabular_fixed_point(&p_true, &FixedPointConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.max_residual <= 1e-10);
        let first = report.q_star[0];
        for &q in &report.q_star {
            assert!((q - first).abs() <= 1e-9);
        }
        for (d, p) in report.dual_star.iter().zip(&p_true) {
            assert!((d - p).abs() <= 1e-10);
        }
        assert!(report.margin.is_none());
        assert!(report.undesired_spread.is_none());
    }

    #[test]
    fn fixed_point_two_actions_anchor() {
        let report =
            tabular_fixed_point(&[1.0, 0.0], &FixedPointConfig::default()).unwrap();
        assert!(report.converged, "did not converge: {report:?}");
        let gap = report.q_star[0] - report.q_star[1];
        let oracle = bisect_d2_gap();
        assert!((gap - oracle).abs() <= 1e-8, "gap {gap} vs {oracle}");
        assert!((gap - 1.278465).abs() <= 1e-5);
        assert!((report.p_star[0] - 0.78219).abs() <= 1e-5);
        assert!((report.p_star[1] - 0.21781).abs() <= 1e-5);
        assert!(report.margin.unwrap() > 1.0);
    }

    #[test]
    fn fixed_point_three_actions_with_margin() {
        let report =
            tabular_fixed_point(&[0.7, 0.3, 0.0], &FixedPointConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.max_residual <= 1e-8);
        assert!(report.margin.unwrap() > 1.0);
        assert!(report.undesired_spread.unwrap() <= 1e-8);
        for (d, p) in report.dual_star.iter().zip(&[0.7, 0.3, 0.0]) {
            assert!((d - p).abs() <= 1e-8, "dual {d} vs {p}");
        }
    }

    #[test]
    fn fixed_point_random_supports() {
        // Smaller twin of the acceptance suite: random strict supports.
        let mut rng = RngStream::new(55, 0);
        for _ in 0..10 {
            let d = 3 + rng.next_index(14);
            let support_size = 1 + rng.next_index(d - 1);
            let mut p_true = vec![0.0; d];
            let mut weights = Vec::new();
            for _ in 0..support_size {
                weights.push(0.05 + rng.next_f64());
            }
            let total: f64 = weights.iter().sum();
            for (k, w) in weights.iter().enumerate() {
                p_true[k] = w / total;
            }
            let report = tabular_fixed_point(&p_true, &FixedPointConfig::default()).unwrap();
            assert!(report.converged);
            assert!(report.max_residual <= 1e-8, "residual {}", report.max_residual);
            assert!(report.margin.unwrap() > 1.0);
            assert!(report.undesired_spread.unwrap() <= 1e-8);
            for (dual, p) in report.dual_star.iter().zip(&p_true) {
                assert!((dual - p).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn landscape_has_single_maximum_at_fixed_point() {
        let grid = GridSpec {
            lo: -8.0,
            hi: 4.0,
            step: 1e-3,
        };
        let report = j_landscape(&[1.0, 0.0], 0, grid).unwrap();
        assert_eq!(report.maxima.len(), 1, "expected exactly one maximum");
        let oracle = -bisect_d2_gap();
        assert!((report.maxima[0] - oracle).abs() <= 1e-5);
        assert!((report.maxima[0] + 1.278465).abs() <= 1e-5);
        // J at the maximum.
        let jmax = j_value(&[1.0, 0.0], &[0.0, report.maxima[0]]);
        assert!((jmax - 0.278465).abs() <= 1e-5);
        // Gauge: shifting both coordinates leaves J unchanged.
        for &(v, j) in report.samples.iter().step_by(500) {
            let shifted = j_value(&[1.0, 0.0], &[5.0, v + 5.0]);
            assert!((j - shifted).abs() <= 1e-10);
        }
    }

    #[test]
    fn landscape_unique_sign_change_across_distributions() {
        let grid = GridSpec {
            lo: -10.0,
            hi: 6.0,
            step: 1e-3,
        };
        for p1 in [1.0, 0.9, 0.7, 0.5, 0.3] {
            let report = j_landscape(&[p1, 1.0 - p1], 0, grid).unwrap();
            assert_eq!(report.maxima.len(), 1, "p1 = {p1}");
        }
    }

    fn synonym_task() -> SyntheticTask {
        let table = vec![
            SynonymRow {
                phrases: vec![(vec![2], 0.5), (vec![3, 2], 0.5)],
            },
            SynonymRow {
                phrases: vec![(vec![4], 0.7), (vec![4, 3, 2], 0.3)],
            },
        ];
        SyntheticTask::new(
            TaskKind::SynonymLookup {
                table,
                input_len: 2,
                truncate_prob: 0.0,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn map_optimality_cases() {
        // Case 1: exact match, average aggregation, stochastic task.
        let noisy = SyntheticTask::new(TaskKind::NoisyCopy { len: 2, eps: 0.1 }, 4).unwrap();
        let spec = UtilitySpec {
            similarity: Similarity::ExactMatch,
            aggregation: Aggregation::Average,
        };
        let report = map_optimality_check(&noisy, &spec, 30, 1, DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(report.counterexamples.len(), 0);
        assert_eq!(report.instances_checked, 30);

        // Case 2: deterministic task, any self-maximal similarity.
        let exact = SyntheticTask::new(TaskKind::NoisyCopy { len: 3, eps: 0.0 }, 4).unwrap();
        for similarity in [
            Similarity::ExactMatch,
            Similarity::TokenOverlapF1,
            Similarity::NegNormalizedEditDistance,
        ] {
            let spec = UtilitySpec {
                similarity,
                aggregation: Aggregation::Average,
            };
            let report = map_optimality_check(&exact, &spec, 20, 2, DEFAULT_SUPPORT_CAP).unwrap();
            assert_eq!(report.counterexamples.len(), 0, "{similarity:?}");
        }

        // Case 3: max-over-support aggregation on a multi-utterance task.
        let spec = UtilitySpec {
            similarity: Similarity::NegNormalizedEditDistance,
            aggregation: Aggregation::MaxOverSupport,
        };
        let report =
            map_optimality_check(&synonym_task(), &spec, 30, 3, DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(report.counterexamples.len(), 0);
    }

    #[test]
    fn sampling_soundness_identity_and_monotonicity() {
        let noisy = SyntheticTask::new(TaskKind::NoisyCopy { len: 2, eps: 0.15 }, 4).unwrap();
        let spec = UtilitySpec {
            similarity: Similarity::ExactMatch,
            aggregation: Aggregation::Average,
        };
        let report =
            sampling_soundness_check(&noisy, &spec, 25, 4, &[0.0, 0.25, 0.5], DEFAULT_SUPPORT_CAP)
                .unwrap();
        assert_eq!(report.identity_violations, 0);
        assert_eq!(report.monotonicity_violations, 0);
        assert!((report.mean_gaps[0]).abs() <= 1e-12);
        assert!(report.mean_gaps[2] >= report.mean_gaps[1] - 1e-12);
    }

    #[test]
    fn similarity_self_maximality() {
        let mut rng = RngStream::new(31, 0);
        for _ in 0..200 {
            let len = 1 + rng.next_index(4);
            let y: Vec<Token> = (0..len).map(|_| 1 + rng.next_index(4)).collect();
            let mut a = y.clone();
            if !a.is_empty() {
                let pos = rng.next_index(a.len());
                a[pos] = 1 + rng.next_index(4);
            }
            let mut ye = y.clone();
            ye.push(EOS);
            let mut ae = a.clone();
            ae.push(EOS);
            for sim in [
                Similarity::ExactMatch,
                Similarity::TokenOverlapF1,
                Similarity::NegNormalizedEditDistance,
            ] {
                assert!(sim.delta(&ye, &ye) >= sim.delta(&ae, &ye) - 1e-12);
            }
        }
    }

    #[test]
    fn greedy_rows_agree_across_scorers() {
        let task = SyntheticTask::new(
            TaskKind::Bandit {
                action_probs: vec![0.6, 0.4, 0.0],
            },
            4,
        )
        .unwrap();
        let model = {
            let cfg = TrainConfig::new(1.0, OptimizerKind::Adam { lr: 1e-2 }, 16, 300, 5);
            let m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
            mabe_train(m, &task, &cfg).unwrap().0
        };
        let spec = UtilitySpec {
            similarity: Similarity::ExactMatch,
            aggregation: Aggregation::Average,
        };
        let table = evaluate_decoders(
            &model,
            &task,
            &[Scorer::Softmax, Scorer::Dual],
            &[DecodeRule::Greedy],
            16,
            9,
            &spec,
            DEFAULT_SUPPORT_CAP,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].exact_match, table.rows[1].exact_match);
        assert_eq!(table.rows[0].mean_utility, table.rows[1].mean_utility);
    }

    #[test]
    fn dual_recovers_truth_after_advantage_training() {
        // Advantage-trained bandit: the dual distribution over full
        // sequences approaches the ground truth while the softmax stays
        // away on margin-structured instances.
        let task = SyntheticTask::new(
            TaskKind::Bandit {
                action_probs: vec![0.7, 0.3, 0.0],
            },
            4,
        )
        .unwrap();
        let mut cfg = TrainConfig::new(0.0, OptimizerKind::Sgd { lr: 0.02 }, 256, 8_000, 12);
        cfg.eval_every = 10_000;
        cfg.probe_instances = 0;
        let m = QModel::init(ModelFamily::TabularNGram { context_order: 1 }, 4, 0).unwrap();
        let (model, _) = mabe_train(m, &task, &cfg).unwrap();

        let support = task.enumerate_support(&[], DEFAULT_SUPPORT_CAP).unwrap();
        let (kl_dual, zeros_dual) =
            sequence_kl(&model, &task, &[], Scorer::Dual, &support).unwrap();
        let (kl_soft, zeros_soft) =
            sequence_kl(&model, &task, &[], Scorer::Softmax, &support).unwrap();
        assert_eq!(zeros_dual, 0);
        assert_eq!(zeros_soft, 0);
        assert!(kl_dual <= 1e-3, "dual KL {kl_dual}");
        assert!(kl_soft >= 0.01, "softmax KL {kl_soft}");
    }
}
