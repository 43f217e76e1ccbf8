//! Counter-based random streams.
//!
//! Every actor draws from `stream_rng(seed, stream, counter)`: worker `l` at
//! cycle `t` uses stream `l`, counter `t`. The master uses [`MASTER_STREAM`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const MASTER_STREAM: u64 = u64::MAX;

/// Words reserved per counter value within one stream.
const WORDS_PER_COUNTER: u128 = 1 << 40;

pub fn stream_rng(seed: u64, stream: u64, counter: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(counter) * WORDS_PER_COUNTER);
    rng
}

/// Draws an index from unnormalized log weights by max-subtraction.
///
/// Consumes exactly one uniform. Returns `None` for an empty slice or when
/// every weight is `-inf`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Option<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        if max == f64::INFINITY {
            return log_weights.iter().position(|&w| w == f64::INFINITY);
        }
        return None;
    }
    let total: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in log_weights.iter().enumerate() {
        let p = (w - max).exp();
        if p > 0.0 {
            last = Some(i);
        }
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    last
}
