//! Counter-based splittable random number generator.
//!
//! The generator is SplitMix64 (Vigna's mix function over a Weyl sequence):
//! draw `i` of a stream is `mix64(key + (i+1) * GAMMA)`, so the state is
//! nothing more than a counter and every stream is a pure function of
//! `(seed, stream_id, i)`. This makes runs reproducible across platforms and
//! lets parallel workers own independent streams via [`RngStream::new`]
//! without any coordination.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: bijective bit mix with good avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent random stream, identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    /// Stream `stream_id` of the generator seeded with `seed`.
    ///
    /// The stream key is derived by mixing the seed and the stream id through
    /// two rounds of the finalizer, so nearby ids land far apart on the Weyl
    /// cycle.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(mix64(seed ^ GAMMA) ^ stream_id.wrapping_mul(GAMMA));
        RngStream { state: key }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform integer in [0, n). `n` must be positive.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift; bias is O(n / 2^64), irrelevant at experiment scale.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Sample an index from an (unnormalized is fine) non-negative weight
    /// vector by CDF inversion. Entries with weight exactly 0 are never
    /// selected. Panics if every weight is zero.
    pub fn sample_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "sample_weighted: all weights are zero");
        let mut u = self.next_f64() * total;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = Some(i);
                if u < w {
                    return i;
                }
                u -= w;
            }
        }
        // Rounding can push u past the final bucket; fall back to the last
        // positive-weight index.
        last_positive.expect("sample_weighted: no positive weight")
    }
}
