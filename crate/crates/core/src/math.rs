//! Pure numerical kernels on per-step utility vectors.
//!
//! Everything here operates on a single decision step: a length-`d` vector of
//! utilities (one per vocabulary token), the softmax and dual distributions it
//! induces, and the gradient-coefficient vectors that express likelihood
//! ascent, the advantage objective, and the covariance perturbation in one
//! frozen-coefficient form `sum_a g_a * dQ_a/dw`.
//!
//! Conventions: natural log everywhere; exact zeros carry log-probability
//! `-inf`; argmax ties break to the lowest token index; f64 throughout.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MathError {
    #[error("q-values must have length >= 2, got {0}")]
    TooShort(usize),
    #[error("non-finite q-value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("token index {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("temperature must be >= 0, got {0}")]
    NegativeTemperature(f64),
    #[error("perturbation coefficient must be finite, got {0}")]
    NonFiniteLambda(f64),
    #[error("label smoothing must lie in [0, 1), got {0}")]
    BadSmoothing(f64),
    #[error("probabilities sum to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),
    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },
}

/// A length-`d` vector of finite utilities, one per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct QValues(Vec<f64>);

impl QValues {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.len() < 2 {
            return Err(MathError::TooShort(values.len()));
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(MathError::NonFinite { index, value });
            }
        }
        Ok(QValues(values))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // construction enforces len >= 2
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry, ties broken to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// The same utilities shifted by a constant (used by shift-invariance
    /// checks; the result is always valid since the shift is finite).
    pub fn shifted(&self, c: f64) -> Result<Self, MathError> {
        QValues::new(self.0.iter().map(|q| q + c).collect())
    }
}

/// Largest-entry index with lowest-index tie-breaking.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A normalized distribution over the vocabulary with its log-domain
/// companion. `log_probs[a] == -inf` if and only if `probs[a] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TokenDistribution {
    /// Build from probabilities, validating normalization. Exact zeros map to
    /// `-inf` log-probabilities; no epsilon flooring.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, MathError> {
        if probs.len() < 2 {
            return Err(MathError::TooShort(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(MathError::NegativeProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MathError::NotNormalized(sum));
        }
        let log_probs = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(TokenDistribution { probs, log_probs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    #[inline]
    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    #[inline]
    pub fn log_prob(&self, token: usize) -> f64 {
        self.log_probs[token]
    }

    /// Highest-probability token, ties broken to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// One-hot distribution at `token`.
    pub fn one_hot(token: usize, len: usize) -> Result<Self, MathError> {
        if token >= len {
            return Err(MathError::TokenOutOfRange { token, vocab: len });
        }
        let mut probs = vec![0.0; len];
        probs[token] = 1.0;
        TokenDistribution::from_probs(probs)
    }

    /// Uniform over all `len` tokens.
    pub fn uniform(len: usize) -> Result<Self, MathError> {
        TokenDistribution::from_probs(vec![1.0 / len as f64; len])
    }
}

/// Per-step gradient coefficients: the weight on `dQ_a/dw` contributed by one
/// decision step. Entries always sum to zero (within 1e-10).
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients(Vec<f64>);

impl StepCoefficients {
    pub fn new(g: Vec<f64>) -> Result<Self, MathError> {
        if g.len() < 2 {
            return Err(MathError::TooShort(g.len()));
        }
        for (index, &value) in g.iter().enumerate() {
            if !value.is_finite() {
                return Err(MathError::NonFinite { index, value });
            }
        }
        let sum: f64 = g.iter().sum();
        if sum.abs() > 1e-10 {
            return Err(MathError::NotNormalized(sum));
        }
        Ok(StepCoefficients(g))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `log sum_a exp(q_a)` via the max shift; exact under single-entry dominance.
pub fn log_sum_exp(q: &QValues) -> f64 {
    let s = q.as_slice();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Softmax distribution of the utilities: `probs[a] = exp(q_a - logsumexp(q))`.
pub fn softmax(q: &QValues) -> TokenDistribution {
    let lse = log_sum_exp(q);
    let log_probs: Vec<f64> = q.as_slice().iter().map(|&v| v - lse).collect();
    let probs: Vec<f64> = log_probs.iter().map(|&l| l.exp()).collect();
    TokenDistribution { probs, log_probs }
}

/// `sum_a p_a q_a`, the expected utility of a token drawn from `p`.
pub fn expected_q(p: &TokenDistribution, q: &QValues) -> Result<f64, MathError> {
    if p.len() != q.len() {
        return Err(MathError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.probs()
        .iter()
        .zip(q.as_slice())
        .map(|(&pa, &qa)| pa * qa)
        .sum())
}

/// The dual transform of a utility vector.
///
/// With `p = softmax(q)` and `EQ = sum_a p_a q_a`, the raw dual value of
/// token `a` is `p_a * (1 + q_a - EQ)`. The raw values sum to exactly 1, so
/// at least one is positive; negative raws are clipped to zero and the rest
/// renormalized by their sum `z`. A raw value above 1 can only occur when
/// some other raw is negative; renormalization already forces every returned
/// probability into [0, 1], so the upper clip never changes the distribution
/// here; `upper_clip_indices` records where it would have engaged.
#[derive(Debug, Clone)]
pub struct DualDistribution {
    pub distribution: TokenDistribution,
    /// Unclipped per-token factors `1 + q_a - EQ` (diagnostic).
    pub factors: Vec<f64>,
    /// Normalizer: the sum of the non-negative raw values.
    pub z: f64,
    /// Tokens whose raw value was negative and got clipped to zero.
    pub clipped_indices: Vec<usize>,
    /// Tokens whose raw value exceeded 1 before normalization.
    pub upper_clip_indices: Vec<usize>,
}

pub fn dual_distribution(q: &QValues) -> DualDistribution {
    let p = softmax(q);
    let eq = expected_q(&p, q).expect("softmax length matches q");
    let factors: Vec<f64> = q.as_slice().iter().map(|&qa| 1.0 + qa - eq).collect();
    let mut clipped_indices = Vec::new();
    let mut upper_clip_indices = Vec::new();
    let mut raw = vec![0.0; q.len()];
    for (a, (&pa, &fa)) in p.probs().iter().zip(&factors).enumerate() {
        let r = pa * fa;
        if r < 0.0 {
            clipped_indices.push(a);
        } else {
            raw[a] = r;
            if r > 1.0 {
                upper_clip_indices.push(a);
            }
        }
    }
    let z: f64 = raw.iter().sum();
    debug_assert!(z > 0.0, "dual normalizer must be positive");
    let probs: Vec<f64> = raw.iter().map(|&r| r / z).collect();
    let log_probs: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    DualDistribution {
        distribution: TokenDistribution { probs, log_probs },
        factors,
        z,
        clipped_indices,
        upper_clip_indices,
    }
}

/// Log-likelihood gradient coefficients: `g_a = 1{a=y} - p_a`.
pub fn mle_coefficients(q: &QValues, y: usize) -> Result<StepCoefficients, MathError> {
    if y >= q.len() {
        return Err(MathError::TokenOutOfRange {
            token: y,
            vocab: q.len(),
        });
    }
    let p = softmax(q);
    let mut g: Vec<f64> = p.probs().iter().map(|&pa| -pa).collect();
    g[y] += 1.0;
    Ok(StepCoefficients(g))
}

/// Label-smoothed variant: the one-hot target is replaced by
/// `(1-s) * onehot(y) + s/d`.
pub fn mle_coefficients_smoothed(
    q: &QValues,
    y: usize,
    smoothing: f64,
) -> Result<StepCoefficients, MathError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(MathError::BadSmoothing(smoothing));
    }
    if y >= q.len() {
        return Err(MathError::TokenOutOfRange {
            token: y,
            vocab: q.len(),
        });
    }
    let d = q.len() as f64;
    let p = softmax(q);
    let mut g: Vec<f64> = p.probs().iter().map(|&pa| smoothing / d - pa).collect();
    g[y] += 1.0 - smoothing;
    Ok(StepCoefficients(g))
}

/// Covariance coefficients: `g_a = p_a * (q_a - EQ)`.
///
/// Weighting `dQ_a/dw` by these reproduces the covariance between the step
/// utility and its parameter derivative under the softmax policy exactly: the
/// centering term drops because `sum_a p_a (q_a - EQ) = 0`.
pub fn cov_coefficients(q: &QValues) -> StepCoefficients {
    let p = softmax(q);
    let eq = expected_q(&p, q).expect("softmax length matches q");
    let g: Vec<f64> = q
        .as_slice()
        .iter()
        .zip(p.probs())
        .map(|(&qa, &pa)| pa * (qa - eq))
        .collect();
    StepCoefficients(g)
}

/// Perturbed-advantage coefficients: `g = mle - (1 - lambda) * cov`.
///
/// `lambda = 1` reproduces [`mle_coefficients`] bit-exactly; `lambda = 0`
/// gives the unperturbed advantage gradient `1{a=y} - p_a (1 + q_a - EQ)`.
pub fn mabe_coefficients(
    q: &QValues,
    y: usize,
    lambda: f64,
) -> Result<StepCoefficients, MathError> {
    if !lambda.is_finite() {
        return Err(MathError::NonFiniteLambda(lambda));
    }
    let mle = mle_coefficients(q, y)?;
    if lambda == 1.0 {
        return Ok(mle);
    }
    let cov = cov_coefficients(q);
    let g: Vec<f64> = mle
        .as_slice()
        .iter()
        .zip(cov.as_slice())
        .map(|(&m, &c)| m - (1.0 - lambda) * c)
        .collect();
    Ok(StepCoefficients(g))
}

/// Temperature rescaling: `softmax(q / beta)` for `beta > 0`, one-hot at the
/// argmax (lowest index on ties) for `beta = 0`.
///
/// The division happens after the max shift so that tiny temperatures never
/// overflow.
pub fn temperature_rescale(q: &QValues, beta: f64) -> Result<TokenDistribution, MathError> {
    if beta.is_nan() || beta < 0.0 {
        return Err(MathError::NegativeTemperature(beta));
    }
    let s = q.as_slice();
    if beta == 0.0 {
        return TokenDistribution::one_hot(argmax(s), s.len());
    }
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = s.iter().map(|&v| (v - m) / beta).collect();
    let lse: f64 = scaled.iter().map(|&v| v.exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = scaled.iter().map(|&v| v - lse).collect();
    let probs: Vec<f64> = log_probs.iter().map(|&l| l.exp()).collect();
    Ok(TokenDistribution { probs, log_probs })
}
