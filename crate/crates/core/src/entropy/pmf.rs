use super::laplace;
use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

pub const DEFAULT_SUPPORT_MIN: i32 = -127;
pub const DEFAULT_SUPPORT_MAX: i32 = 128;

/// Integer frequency table over `[support_min, support_max]` plus an escape
/// slot for out-of-support symbols. Frequencies total exactly 2^16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscretePmf {
    support_min: i32,
    support_max: i32,
    freq: Vec<u32>,
    overflow_freq: u32,
    /// `cum[i]` is the start of slot `i`; the escape slot is the last one.
    cum: Vec<u32>,
}

impl DiscretePmf {
    /// Builds a table from explicit frequencies. `overflow_freq` may be zero,
    /// in which case out-of-support symbols cannot be coded.
    pub fn from_frequencies(support_min: i32, freq: Vec<u32>, overflow_freq: u32) -> Result<Self> {
        if freq.is_empty() {
            return Err(Error::Config("empty support".into()));
        }
        if freq.contains(&0) {
            return Err(Error::Config("every in-support frequency must be at least 1".into()));
        }
        let total: u64 = freq.iter().map(|&f| f as u64).sum::<u64>() + overflow_freq as u64;
        if total != FREQ_TOTAL as u64 {
            return Err(Error::Config(format!("frequencies sum to {total}, expected {FREQ_TOTAL}")));
        }
        let support_max = support_min + freq.len() as i32 - 1;
        if support_min > 0 || support_max < 0 {
            return Err(Error::Config(format!("support [{support_min}, {support_max}] must contain 0")));
        }
        let mut cum = Vec::with_capacity(freq.len() + 2);
        let mut acc = 0u32;
        for &f in freq.iter().chain(std::iter::once(&overflow_freq)) {
            cum.push(acc);
            acc += f;
        }
        cum.push(acc);
        Ok(Self {
            support_min,
            support_max,
            freq,
            overflow_freq,
            cum,
        })
    }

    /// Equal frequency for every in-support symbol; the remainder goes to the
    /// escape slot.
    pub fn uniform(support_min: i32, support_max: i32) -> Result<Self> {
        let n = (support_max - support_min + 1) as u32;
        let f = FREQ_TOTAL / n;
        Self::from_frequencies(support_min, vec![f; n as usize], FREQ_TOTAL - f * n)
    }

    pub fn support_min(&self) -> i32 {
        self.support_min
    }

    pub fn support_max(&self) -> i32 {
        self.support_max
    }

    pub fn freq(&self) -> &[u32] {
        &self.freq
    }

    pub fn overflow_freq(&self) -> u32 {
        self.overflow_freq
    }

    /// Number of coder slots (in-support symbols plus the escape).
    pub fn slots(&self) -> usize {
        self.freq.len() + 1
    }

    pub fn escape_slot(&self) -> usize {
        self.freq.len()
    }

    pub fn slot_of(&self, symbol: i32) -> Option<usize> {
        (self.support_min..=self.support_max)
            .contains(&symbol)
            .then(|| (symbol - self.support_min) as usize)
    }

    pub fn symbol_of(&self, slot: usize) -> i32 {
        self.support_min + slot as i32
    }

    /// `(cumulative start, frequency)` of a slot.
    pub fn range(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    /// The slot whose cumulative interval contains `target`.
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Code length of an in-support symbol or of the escape slot, in bits.
    pub fn slot_bits(&self, slot: usize) -> f64 {
        let (_, f) = self.range(slot);
        (FREQ_TOTAL as f64 / f as f64).log2()
    }
}

/// Quantizes probabilities to integer frequencies summing to 2^16 with a
/// floor of 1 each, distributing the remainder by largest fractional part.
pub fn quantize_probabilities(probs: &[f64]) -> Vec<u32> {
    let n = probs.len();
    assert!(n > 0 && n <= FREQ_TOTAL as usize);
    let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    let budget = (FREQ_TOTAL as usize - n) as f64;
    let mut freq = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    let mut used = 0u64;
    for (i, &p) in probs.iter().enumerate() {
        let share = if total > 0.0 {
            p.max(0.0) / total * budget
        } else {
            budget / n as f64
        };
        let whole = share.floor();
        freq.push(1 + whole as u32);
        used += 1 + whole as u64;
        remainders.push((share - whole, i));
    }
    let left = FREQ_TOTAL as u64 - used;
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(left as usize) {
        freq[i] += 1;
    }
    freq
}

/// Discretizes a Laplacian onto the integer support, sending tail mass to the
/// escape slot. `log_scale` is clamped to `[-6, 6]`.
pub fn discretize_laplacian(mu: f64, log_scale: f64, support_min: i32, support_max: i32) -> Result<DiscretePmf> {
    if support_min >= support_max {
        return Err(Error::Config(format!("support [{support_min}, {support_max}] is empty")));
    }
    let mut probs = Vec::with_capacity((support_max - support_min + 2) as usize);
    let mu = if mu.is_finite() { mu } else { 0.0 };
    let log_scale = if log_scale.is_finite() { log_scale } else { 0.0 };
    for k in support_min..=support_max {
        probs.push(laplace::interval_prob(k as f64, mu, log_scale));
    }
    let b = laplace::clamp_log_scale(log_scale).exp();
    let tail = laplace::cdf(support_min as f64 - 0.5, mu, b) + (1.0 - laplace::cdf(support_max as f64 + 0.5, mu, b));
    probs.push(tail);
    let mut freq = quantize_probabilities(&probs);
    let overflow = freq.pop().expect("escape slot");
    DiscretePmf::from_frequencies(support_min, freq, overflow)
}

/// Probabilities before frequency quantization, in support order, with the
/// escape mass last.
pub fn laplace_probabilities(mu: f64, log_scale: f64, support_min: i32, support_max: i32) -> Vec<f64> {
    let b = laplace::clamp_log_scale(log_scale).exp();
    let mut probs: Vec<f64> = (support_min..=support_max)
        .map(|k| laplace::interval_prob(k as f64, mu, log_scale))
        .collect();
    probs.push(laplace::cdf(support_min as f64 - 0.5, mu, b) + (1.0 - laplace::cdf(support_max as f64 + 0.5, mu, b)));
    probs
}
