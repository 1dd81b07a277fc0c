//! Named, independent random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    BackboneInit = 1,
    PolicyInit = 2,
    DataOrder = 3,
    Masks = 4,
    Noise = 5,
    Synthetic = 6,
    Split = 7,
    Eval = 8,
}

/// Each stream is a separate ChaCha stream under the same key, so drawing
/// from one never shifts another.
pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Per-item stream: `which` advanced to word `index · 2³²`, so item `i`
/// draws the same numbers however items are ordered or sharded.
pub fn substream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = stream(seed, which);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
