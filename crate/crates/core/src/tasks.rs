//! Synthetic sequence-generation tasks with exactly computable conditionals.
//!
//! Every task exposes three views of the same law: a sampler
//! ([`SyntheticTask::sample_pair`]), the per-step conditional oracle
//! ([`SyntheticTask::true_token_distribution`]), and exhaustive enumeration of
//! the output support ([`SyntheticTask::enumerate_support`]). The three are
//! kept mutually consistent so any probabilistic claim about models trained
//! on these tasks can be verified by brute force.
//!
//! Outputs always end with EOS (token 0). Generation is capped: EOS is forced
//! at step `2 * |x|` (the bandit's single decision step makes its cap 1).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::math::TokenDistribution;
use crate::rng::RngStream;
use crate::{Token, EOS};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("vocabulary size must be >= 2, got {0}")]
    VocabTooSmall(usize),
    #[error("bandit needs one probability per non-EOS token: expected {expected}, got {got}")]
    BanditProbsLength { expected: usize, got: usize },
    #[error("probabilities must be non-negative and sum to 1 (sum = {0})")]
    BadProbabilities(f64),
    #[error("corruption rate must lie in [0, 1), got {0}")]
    BadEps(f64),
    #[error("copy length must be positive")]
    ZeroLength,
    #[error("synonym table is empty or longer than the non-EOS vocabulary")]
    BadTableSize,
    #[error("synonym phrase must have 1..=3 non-EOS tokens in range; row {row}, phrase {phrase}")]
    BadPhrase { row: usize, phrase: usize },
    #[error("truncation probability must lie in [0, 1), got {0}")]
    BadTruncateProb(f64),
    #[error("support size exceeds cap {cap}: at least {lower_bound} members")]
    SupportTooLarge { cap: usize, lower_bound: usize },
    #[error("input token {token} out of range for this task")]
    BadInputToken { token: Token },
}

/// One weighted set of output phrases for a single input token.
#[derive(Debug, Clone)]
pub struct SynonymRow {
    /// `(phrase, weight)`; weights sum to 1, phrases hold 1..=3 non-EOS tokens.
    pub phrases: Vec<(Vec<Token>, f64)>,
}

#[derive(Debug, Clone)]
pub enum TaskKind {
    /// One action drawn from `action_probs` (over tokens `1..d`), then EOS.
    Bandit { action_probs: Vec<f64> },
    /// Copy the input with per-position corruption: emit token `t` with
    /// probability `(1-eps) 1{t = x_pos} + eps / (d-1)` over non-EOS tokens,
    /// then EOS. The correct token can be re-drawn by the corruption.
    NoisyCopy { len: usize, eps: f64 },
    /// Each input token independently expands to one weighted phrase; the
    /// output is the concatenation plus EOS. With probability
    /// `truncate_prob` the output keeps only the first phrase.
    SynonymLookup {
        table: Vec<SynonymRow>,
        input_len: usize,
        truncate_prob: f64,
    },
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    kind: TaskKind,
    vocab_size: usize,
}

/// An `(input, output)` demonstration; the output ends in EOS and contains
/// EOS nowhere else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub input: Vec<Token>,
    pub output: Vec<Token>,
}

/// The conditional oracle's answer for one context. Unreachable contexts get
/// the defined fallback (uniform over non-EOS tokens) and `reachable = false`
/// so decoders can probe off-support prefixes freely.
#[derive(Debug, Clone)]
pub struct TrueConditional {
    pub distribution: TokenDistribution,
    pub reachable: bool,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab_size: usize) -> Result<Self, TaskError> {
        if vocab_size < 2 {
            return Err(TaskError::VocabTooSmall(vocab_size));
        }
        match &kind {
            TaskKind::Bandit { action_probs } => {
                if action_probs.len() != vocab_size - 1 {
                    return Err(TaskError::BanditProbsLength {
                        expected: vocab_size - 1,
                        got: action_probs.len(),
                    });
                }
                validate_probs(action_probs)?;
            }
            TaskKind::NoisyCopy { len, eps } => {
                if *len == 0 {
                    return Err(TaskError::ZeroLength);
                }
                if !(0.0..1.0).contains(eps) {
                    return Err(TaskError::BadEps(*eps));
                }
            }
            TaskKind::SynonymLookup {
                table,
                input_len,
                truncate_prob,
            } => {
                if table.is_empty() || table.len() > vocab_size - 1 {
                    return Err(TaskError::BadTableSize);
                }
                if *input_len == 0 {
                    return Err(TaskError::ZeroLength);
                }
                if !(0.0..1.0).contains(truncate_prob) {
                    return Err(TaskError::BadTruncateProb(*truncate_prob));
                }
                for (row_idx, row) in table.iter().enumerate() {
                    let weights: Vec<f64> = row.phrases.iter().map(|(_, w)| *w).collect();
                    validate_probs(&weights)?;
                    for (phrase_idx, (phrase, _)) in row.phrases.iter().enumerate() {
                        let ok = !phrase.is_empty()
                            && phrase.len() <= 3
                            && phrase.iter().all(|&t| t != EOS && t < vocab_size);
                        if !ok {
                            return Err(TaskError::BadPhrase {
                                row: row_idx,
                                phrase: phrase_idx,
                            });
                        }
                    }
                }
            }
        }
        Ok(SyntheticTask { kind, vocab_size })
    }

    pub fn kind(&self) -> &TaskKind {
        &self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Step index (0-based) at which EOS is forced for input `x`. Decision
    /// steps run over `0..=forced_eos_step`, so outputs never exceed
    /// `forced_eos_step + 1` tokens. The bandit has a single decision step;
    /// the synonym task can expand every input token into a three-token
    /// phrase, so its cap is `3 |x|` to keep the cap above its own law.
    pub fn forced_eos_step(&self, x: &[Token]) -> usize {
        match self.kind {
            TaskKind::Bandit { .. } => 1,
            TaskKind::NoisyCopy { .. } => 2 * x.len(),
            TaskKind::SynonymLookup { .. } => 3 * x.len(),
        }
    }

    /// Draw an input from the task's input law.
    pub fn sample_input(&self, rng: &mut RngStream) -> Vec<Token> {
        match &self.kind {
            TaskKind::Bandit { .. } => Vec::new(),
            TaskKind::NoisyCopy { len, .. } => (0..*len)
                .map(|_| 1 + rng.next_index(self.vocab_size - 1))
                .collect(),
            TaskKind::SynonymLookup {
                table, input_len, ..
            } => (0..*input_len).map(|_| 1 + rng.next_index(table.len())).collect(),
        }
    }

    /// Draw a demonstration pair exactly from the task law.
    pub fn sample_pair(&self, rng: &mut RngStream) -> LabeledPair {
        let input = self.sample_input(rng);
        let output = self.sample_output(&input, rng);
        LabeledPair { input, output }
    }

    fn sample_output(&self, x: &[Token], rng: &mut RngStream) -> Vec<Token> {
        match &self.kind {
            TaskKind::Bandit { action_probs } => {
                let a = rng.sample_weighted(action_probs);
                vec![a + 1, EOS]
            }
            TaskKind::NoisyCopy { eps, .. } => {
                let d = self.vocab_size;
                let mut out = Vec::with_capacity(x.len() + 1);
                for &xt in x {
                    let corrupted = rng.next_f64() < *eps;
                    if corrupted {
                        out.push(1 + rng.next_index(d - 1));
                    } else {
                        out.push(xt);
                    }
                }
                out.push(EOS);
                out
            }
            TaskKind::SynonymLookup {
                table,
                truncate_prob,
                ..
            } => {
                let truncate = rng.next_f64() < *truncate_prob;
                let take = if truncate { 1 } else { x.len() };
                let mut out = Vec::new();
                for &xt in &x[..take] {
                    let row = &table[xt - 1];
                    let weights: Vec<f64> = row.phrases.iter().map(|(_, w)| *w).collect();
                    let choice = rng.sample_weighted(&weights);
                    out.extend_from_slice(&row.phrases[choice].0);
                }
                out.push(EOS);
                out
            }
        }
    }

    /// Exact conditional over all `d` tokens for the context `(x, prefix)`.
    pub fn true_token_distribution(&self, x: &[Token], prefix: &[Token]) -> TrueConditional {
        let d = self.vocab_size;
        let t = prefix.len();
        let forced = self.forced_eos_step(x);
        if t >= forced {
            return TrueConditional {
                distribution: TokenDistribution::one_hot(EOS, d).expect("vocab >= 2"),
                reachable: self.prefix_probability(x, prefix) > 0.0 && t == forced,
            };
        }
        match &self.kind {
            TaskKind::Bandit { action_probs } => {
                // forced = 1, so only t = 0 reaches here.
                let mut probs = vec![0.0; d];
                probs[1..].copy_from_slice(action_probs);
                TrueConditional {
                    distribution: TokenDistribution::from_probs(probs).expect("validated"),
                    reachable: true,
                }
            }
            TaskKind::NoisyCopy { len, eps: _ } => {
                if t < *len {
                    if self.prefix_probability(x, prefix) > 0.0 {
                        TrueConditional {
                            distribution: self.noisy_copy_step(x[t]),
                            reachable: true,
                        }
                    } else {
                        self.unreachable_fallback()
                    }
                } else if t == *len {
                    if self.prefix_probability(x, prefix) > 0.0 {
                        TrueConditional {
                            distribution: TokenDistribution::one_hot(EOS, d).expect("vocab >= 2"),
                            reachable: true,
                        }
                    } else {
                        self.unreachable_fallback()
                    }
                } else {
                    // Past the copy: no true output is this long.
                    self.unreachable_fallback()
                }
            }
            TaskKind::SynonymLookup { .. } => {
                let support = self
                    .enumerate_support(x, DEFAULT_SUPPORT_CAP)
                    .expect("synonym support within default cap");
                let mut mass = vec![0.0; d];
                let mut total = 0.0;
                for (y, p) in &support {
                    if y.len() > t && y[..t] == *prefix {
                        mass[y[t]] += p;
                        total += p;
                    }
                }
                if total > 0.0 {
                    for m in &mut mass {
                        *m /= total;
                    }
                    // Exact renormalization guard for the 1e-12 contract.
                    let sum: f64 = mass.iter().sum();
                    for m in &mut mass {
                        *m /= sum;
                    }
                    TrueConditional {
                        distribution: TokenDistribution::from_probs(mass)
                            .expect("normalized by construction"),
                        reachable: true,
                    }
                } else {
                    self.unreachable_fallback()
                }
            }
        }
    }

    /// Probability that a true output starts with `prefix` given `x`.
    fn prefix_probability(&self, x: &[Token], prefix: &[Token]) -> f64 {
        if prefix.contains(&EOS) {
            return 0.0;
        }
        match &self.kind {
            TaskKind::Bandit { action_probs } => match prefix.len() {
                0 => 1.0,
                1 => action_probs.get(prefix[0] - 1).copied().unwrap_or(0.0),
                _ => 0.0,
            },
            TaskKind::NoisyCopy { len, eps } => {
                if prefix.len() > *len {
                    return 0.0;
                }
                let d = self.vocab_size as f64;
                prefix
                    .iter()
                    .zip(x)
                    .map(|(&p, &xt)| {
                        let base = eps / (d - 1.0);
                        if p == xt {
                            1.0 - eps + base
                        } else {
                            base
                        }
                    })
                    .product()
            }
            TaskKind::SynonymLookup { .. } => {
                let support = self
                    .enumerate_support(x, DEFAULT_SUPPORT_CAP)
                    .expect("synonym support within default cap");
                support
                    .iter()
                    .filter(|(y, _)| y.len() >= prefix.len() && y[..prefix.len()] == *prefix)
                    .map(|(_, p)| p)
                    .sum()
            }
        }
    }

    fn unreachable_fallback(&self) -> TrueConditional {
        let d = self.vocab_size;
        let mut probs = vec![0.0; d];
        for p in probs.iter_mut().skip(1) {
            *p = 1.0 / (d - 1) as f64;
        }
        TrueConditional {
            distribution: TokenDistribution::from_probs(probs).expect("uniform over non-EOS"),
            reachable: false,
        }
    }

    fn noisy_copy_step(&self, correct: Token) -> TokenDistribution {
        let TaskKind::NoisyCopy { eps, .. } = self.kind else {
            unreachable!()
        };
        let d = self.vocab_size;
        let base = eps / (d - 1) as f64;
        let mut probs = vec![base; d];
        probs[EOS] = 0.0;
        probs[correct] += 1.0 - eps;
        // Tidy the sum to keep the 1e-12 normalization contract exact.
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        TokenDistribution::from_probs(probs).expect("normalized by construction")
    }

    /// Exhaustive `(output, probability)` list for input `x`, sorted
    /// lexicographically. Probabilities are positive and sum to 1.
    pub fn enumerate_support(
        &self,
        x: &[Token],
        cap: usize,
    ) -> Result<Vec<(Vec<Token>, f64)>, TaskError> {
        let lower_bound = self.support_size_bound(x)?;
        if lower_bound > cap {
            return Err(TaskError::SupportTooLarge { cap, lower_bound });
        }
        let mut merged: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        match &self.kind {
            TaskKind::Bandit { action_probs } => {
                for (a, &p) in action_probs.iter().enumerate() {
                    if p > 0.0 {
                        merged.insert(vec![a + 1, EOS], p);
                    }
                }
            }
            TaskKind::NoisyCopy { .. } => {
                let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0)];
                for &xt in x {
                    let step = self.noisy_copy_step(xt);
                    let mut next = Vec::with_capacity(stack.len() * (self.vocab_size - 1));
                    for (prefix, p) in &stack {
                        for (tok, &tp) in step.probs().iter().enumerate() {
                            if tp > 0.0 {
                                let mut y = prefix.clone();
                                y.push(tok);
                                next.push((y, p * tp));
                            }
                        }
                    }
                    stack = next;
                }
                for (mut y, p) in stack {
                    y.push(EOS);
                    *merged.entry(y).or_insert(0.0) += p;
                }
            }
            TaskKind::SynonymLookup {
                table,
                truncate_prob,
                ..
            } => {
                for &token in x {
                    if token == EOS || token > table.len() {
                        return Err(TaskError::BadInputToken { token });
                    }
                }
                // Full expansions.
                let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0 - truncate_prob)];
                for &xt in x {
                    let row = &table[xt - 1];
                    let mut next = Vec::with_capacity(stack.len() * row.phrases.len());
                    for (prefix, p) in &stack {
                        for (phrase, w) in &row.phrases {
                            if *w > 0.0 {
                                let mut y = prefix.clone();
                                y.extend_from_slice(phrase);
                                next.push((y, p * w));
                            }
                        }
                    }
                    stack = next;
                }
                for (mut y, p) in stack {
                    if p > 0.0 {
                        y.push(EOS);
                        *merged.entry(y).or_insert(0.0) += p;
                    }
                }
                // Truncated variants: first phrase only.
                if *truncate_prob > 0.0 {
                    let row = &table[x[0] - 1];
                    for (phrase, w) in &row.phrases {
                        if *w > 0.0 {
                            let mut y = phrase.clone();
                            y.push(EOS);
                            *merged.entry(y).or_insert(0.0) += truncate_prob * w;
                        }
                    }
                }
            }
        }
        let support: Vec<(Vec<Token>, f64)> = merged.into_iter().filter(|(_, p)| *p > 0.0).collect();
        debug_assert!(
            (support.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() <= 1e-10,
            "support probabilities must sum to 1"
        );
        Ok(support)
    }

    /// Lower bound on the number of support members (exact for these tasks
    /// up to duplicate merging, which only shrinks it).
    fn support_size_bound(&self, x: &[Token]) -> Result<usize, TaskError> {
        Ok(match &self.kind {
            TaskKind::Bandit { action_probs } => {
                action_probs.iter().filter(|&&p| p > 0.0).count()
            }
            TaskKind::NoisyCopy { eps, .. } => {
                if *eps == 0.0 {
                    1
                } else {
                    (self.vocab_size - 1)
                        .checked_pow(x.len() as u32)
                        .unwrap_or(usize::MAX)
                }
            }
            TaskKind::SynonymLookup { table, .. } => {
                let mut count: usize = 1;
                for &token in x {
                    if token == EOS || token > table.len() {
                        return Err(TaskError::BadInputToken { token });
                    }
                    let choices = table[token - 1]
                        .phrases
                        .iter()
                        .filter(|(_, w)| *w > 0.0)
                        .count();
                    count = count.saturating_mul(choices);
                }
                count
            }
        })
    }

    /// The most likely true output (oracle argmax over the support), ties
    /// broken to the lexicographically smallest sequence.
    pub fn map_output(&self, x: &[Token], cap: usize) -> Result<(Vec<Token>, f64), TaskError> {
        let support = self.enumerate_support(x, cap)?;
        let mut best: Option<(Vec<Token>, f64)> = None;
        for (y, p) in support {
            match &best {
                Some((_, bp)) if p <= *bp => {}
                _ => best = Some((y, p)),
            }
        }
        Ok(best.expect("support is never empty"))
    }
}

fn validate_probs(probs: &[f64]) -> Result<(), TaskError> {
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(TaskError::BadProbabilities(p));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(TaskError::BadProbabilities(sum));
    }
    Ok(())
}

/// Default cap on enumerated support size.
pub const DEFAULT_SUPPORT_CAP: usize = 100_000;

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit(probs: &[f64]) -> SyntheticTask {
        SyntheticTask::new(
            TaskKind::Bandit {
                action_probs: probs.to_vec(),
            },
            probs.len() + 1,
        )
        .unwrap()
    }

    fn noisy_copy(d: usize, len: usize, eps: f64) -> SyntheticTask {
        SyntheticTask::new(TaskKind::NoisyCopy { len, eps }, d).unwrap()
    }

    fn synonym_demo(truncate_prob: f64) -> SyntheticTask {
        // Token 1 -> "2" (0.6) | "2 3" (0.4);  token 2 -> "4" (0.5) | "3 4 2" (0.5)
        let table = vec![
            SynonymRow {
                phrases: vec![(vec![2], 0.6), (vec![2, 3], 0.4)],
            },
            SynonymRow {
                phrases: vec![(vec![4], 0.5), (vec![3, 4, 2], 0.5)],
            },
        ];
        SyntheticTask::new(
            TaskKind::SynonymLookup {
                table,
                input_len: 2,
                truncate_prob,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_bandit_is_deterministic() {
        let task = bandit(&[0.0, 1.0, 0.0]);
        let mut rng = RngStream::new(0, 0);
        for _ in 0..50 {
            let pair = task.sample_pair(&mut rng);
            assert_eq!(pair.input, Vec::<Token>::new());
            assert_eq!(pair.output, vec![2, EOS]);
        }
    }

    #[test]
    fn exact_copy_when_eps_zero() {
        let task = noisy_copy(5, 3, 0.0);
        let mut rng = RngStream::new(1, 0);
        for _ in 0..50 {
            let pair = task.sample_pair(&mut rng);
            let mut expect = pair.input.clone();
            expect.push(EOS);
            assert_eq!(pair.output, expect);
        }
        let support = task.enumerate_support(&[1, 2, 3], 10).unwrap();
        assert_eq!(support.len(), 1);
        assert_eq!(support[0].0, vec![1, 2, 3, EOS]);
        assert_eq!(support[0].1, 1.0);
    }

    #[test]
    fn exact_copy_conditional_is_one_hot() {
        let task = noisy_copy(5, 3, 0.0);
        let x = [2usize, 4, 1];
        for t in 0..3 {
            let cond = task.true_token_distribution(&x, &x[..t]);
            assert!(cond.reachable);
            assert_eq!(cond.distribution.prob(x[t]), 1.0);
        }
        let end = task.true_token_distribution(&x, &x);
        assert_eq!(end.distribution.prob(EOS), 1.0);
    }

    #[test]
    fn noisy_copy_step_distribution() {
        // d=5, eps=0.2: the copied token keeps 0.8 + 0.05 (re-draw), each
        // other non-EOS token gets 0.05, EOS gets 0.
        let task = noisy_copy(5, 3, 0.2);
        let x = [3usize, 1, 4];
        let oracle = task.true_token_distribution(&x, &[3]);
        assert!(oracle.reachable);
        let p = oracle.distribution.probs();
        assert!((p[1] - 0.85).abs() < 1e-12);
        assert!((p[2] - 0.05).abs() < 1e-12);
        assert!((p[3] - 0.05).abs() < 1e-12);
        assert!((p[4] - 0.05).abs() < 1e-12);
        assert_eq!(p[EOS], 0.0);
    }

    #[test]
    fn noisy_copy_corruption_rate_matches_formula() {
        // Emitted token differs from x_t with probability eps (d-2)/(d-1).
        let (d, len, eps) = (5usize, 3usize, 0.2);
        let task = noisy_copy(d, len, eps);
        let mut rng = RngStream::new(7, 0);
        let n = 100_000usize;
        let mut corrupted = 0usize;
        for _ in 0..n {
            let pair = task.sample_pair(&mut rng);
            for (a, b) in pair.input.iter().zip(&pair.output) {
                if a != b {
                    corrupted += 1;
                }
            }
        }
        let rate = corrupted as f64 / (n * len) as f64;
        let expect = eps * (d as f64 - 2.0) / (d as f64 - 1.0);
        let sigma = (expect * (1.0 - expect) / (n * len) as f64).sqrt();
        assert!(
            (rate - expect).abs() <= 3.0 * sigma,
            "rate {rate} vs {expect} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn forced_eos_at_cap_step() {
        let task = noisy_copy(4, 2, 0.1);
        let x = [1usize, 2];
        // Step 2|x| = 4 is one-hot EOS even for off-support prefixes.
        let cond = task.true_token_distribution(&x, &[3, 3, 3, 3]);
        assert_eq!(cond.distribution.prob(EOS), 1.0);
        // Bandit forces EOS right after the action.
        let task = bandit(&[0.7, 0.3]);
        let cond = task.true_token_distribution(&[], &[1]);
        assert_eq!(cond.distribution.prob(EOS), 1.0);
        assert!(cond.reachable);
    }

    #[test]
    fn unreachable_context_is_flagged_not_fatal() {
        let task = noisy_copy(4, 2, 0.0);
        let x = [1usize, 2];
        let cond = task.true_token_distribution(&x, &[3]);
        assert!(!cond.reachable);
        let p = cond.distribution.probs();
        assert_eq!(p[EOS], 0.0);
        for &v in &p[1..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // Longer-than-copy prefixes are unreachable too (before the cap).
        let cond = task.true_token_distribution(&x, &[1, 2, 3]);
        assert!(!cond.reachable);
    }

    #[test]
    fn bandit_support_enumeration() {
        let task = bandit(&[0.7, 0.3, 0.0]);
        let support = task.enumerate_support(&[], 10).unwrap();
        assert_eq!(support.len(), 2);
        assert_eq!(support[0], (vec![1, EOS], 0.7));
        assert_eq!(support[1], (vec![2, EOS], 0.3));
    }

    #[test]
    fn support_probabilities_sum_to_one_and_match_product_rule() {
        let tasks = [
            bandit(&[0.25, 0.5, 0.25]),
            noisy_copy(4, 2, 0.3),
            synonym_demo(0.0),
            synonym_demo(0.1),
        ];
        let mut rng = RngStream::new(3, 0);
        for task in &tasks {
            let x = task.sample_input(&mut rng);
            let support = task.enumerate_support(&x, DEFAULT_SUPPORT_CAP).unwrap();
            let total: f64 = support.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() <= 1e-10);
            for (y, p) in &support {
                assert!(*p > 0.0);
                assert_eq!(*y.last().unwrap(), EOS);
                assert_eq!(y.iter().filter(|&&t| t == EOS).count(), 1);
                // Product of conditional factors along y equals the listed
                // probability.
                let mut product = 1.0;
                for (t, &tok) in y.iter().enumerate() {
                    let cond = task.true_token_distribution(&x, &y[..t]);
                    assert!(cond.reachable, "support member context must be reachable");
                    product *= cond.distribution.prob(tok);
                }
                assert!(
                    (product - p).abs() <= 1e-10,
                    "product rule violated: {product} vs {p}"
                );
            }
        }
    }

    #[test]
    fn small_copy_support_matches_monte_carlo() {
        // d=3, len=2, eps=0.1: four sequences; 10^6 samples agree within
        // 3 sigma per member.
        let task = noisy_copy(3, 2, 0.1);
        let x = [1usize, 2];
        let support = task.enumerate_support(&x, 100).unwrap();
        assert_eq!(support.len(), 4);
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        let mut rng = RngStream::new(9, 0);
        let n = 1_000_000usize;
        for _ in 0..n {
            let y = task.sample_output(&x, &mut rng);
            *counts.entry(y).or_insert(0) += 1;
        }
        for (y, p) in &support {
            let freq = *counts.get(y).unwrap_or(&0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "member {y:?}: freq {freq} vs {p}"
            );
        }
    }

    #[test]
    fn sampler_agrees_with_oracle_chi_square() {
        // Chi-square goodness of fit at significance 0.001 over 10^5 samples
        // on instances with <= 50 support members.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let tasks = [bandit(&[0.6, 0.3, 0.1]), noisy_copy(4, 2, 0.25), synonym_demo(0.15)];
        for (i, task) in tasks.iter().enumerate() {
            let mut rng = RngStream::new(100 + i as u64, 0);
            let x = task.sample_input(&mut rng);
            let support = task.enumerate_support(&x, 50).unwrap();
            assert!(support.len() <= 50);
            let index: BTreeMap<&[Token], usize> = support
                .iter()
                .enumerate()
                .map(|(j, (y, _))| (y.as_slice(), j))
                .collect();
            let n = 100_000usize;
            let mut counts = vec![0usize; support.len()];
            for _ in 0..n {
                let y = task.sample_output(&x, &mut rng);
                counts[*index.get(y.as_slice()).expect("sample outside support")] += 1;
            }
            let mut stat = 0.0;
            for ((_, p), &c) in support.iter().zip(&counts) {
                let expect = p * n as f64;
                stat += (c as f64 - expect).powi(2) / expect;
            }
            let df = (support.len() - 1) as f64;
            let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.999);
            assert!(
                stat <= critical,
                "task {i}: chi-square {stat} > critical {critical} at df {df}"
            );
        }
    }

    #[test]
    fn synonym_truncation_mixes_first_phrase_outputs() {
        let task = synonym_demo(0.1);
        let x = [1usize, 2];
        let support = task.enumerate_support(&x, 100).unwrap();
        // "2 EOS" exists only through truncation.
        let short = support.iter().find(|(y, _)| y == &vec![2, EOS]).unwrap();
        assert!((short.1 - 0.1 * 0.6).abs() < 1e-12);
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn support_cap_is_enforced_with_lower_bound() {
        let task = noisy_copy(6, 5, 0.5);
        let x = [1usize, 2, 3, 4, 5];
        let err = task.enumerate_support(&x, 100).unwrap_err();
        match err {
            TaskError::SupportTooLarge { cap, lower_bound } => {
                assert_eq!(cap, 100);
                assert_eq!(lower_bound, 5usize.pow(5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn map_output_picks_most_likely_member() {
        let task = bandit(&[0.3, 0.7]);
        let (y, p) = task.map_output(&[], 10).unwrap();
        assert_eq!(y, vec![2, EOS]);
        assert!((p - 0.7).abs() < 1e-12);

        let task = noisy_copy(4, 2, 0.2);
        let (y, _) = task.map_output(&[3, 1], 100).unwrap();
        assert_eq!(y, vec![3, 1, EOS]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticTask::new(
            TaskKind::Bandit {
                action_probs: vec![0.5, 0.6]
            },
            3
        )
        .is_err());
        assert!(SyntheticTask::new(TaskKind::NoisyCopy { len: 2, eps: 1.0 }, 4).is_err());
        assert!(SyntheticTask::new(
            TaskKind::SynonymLookup {
                table: vec![SynonymRow {
                    phrases: vec![(vec![EOS], 1.0)]
                }],
                input_len: 1,
                truncate_prob: 0.0
            },
            4
        )
        .is_err());
    }
}
