//! Named random substreams derived from one global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose of a substream. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init = 1,
    Noise = 2,
    Targets = 3,
    Mixing = 4,
    GeneratorShuffle = 5,
    CriticShuffle = 6,
    Split = 7,
    Protect = 8,
    Attacker = 9,
}

/// Generator for one purpose: same seed, distinct stream.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator keyed by an extra counter, e.g. an epoch index.
pub fn keyed_substream(seed: u64, stream: Stream, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}

/// Serializable position of a stateful substream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub stream: Stream,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

/// The stateful streams consumed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRng {
    pub seed: u64,
    pub noise: ChaCha8Rng,
    pub targets: ChaCha8Rng,
    pub mixing: ChaCha8Rng,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        TrainRng {
            seed,
            noise: substream(seed, Stream::Noise),
            targets: substream(seed, Stream::Targets),
            mixing: substream(seed, Stream::Mixing),
        }
    }

    pub fn state(&self) -> Vec<StreamState> {
        [(Stream::Noise, &self.noise), (Stream::Targets, &self.targets), (Stream::Mixing, &self.mixing)]
            .into_iter()
            .map(|(stream, r)| StreamState {
                stream,
                word_pos: r.get_word_pos().to_string(),
            })
            .collect()
    }

    pub fn restore(seed: u64, states: &[StreamState]) -> Option<Self> {
        let mut out = TrainRng::new(seed);
        for s in states {
            let pos: u128 = s.word_pos.parse().ok()?;
            let r = match s.stream {
                Stream::Noise => &mut out.noise,
                Stream::Targets => &mut out.targets,
                Stream::Mixing => &mut out.mixing,
                _ => return None,
            };
            r.set_word_pos(pos);
        }
        Some(out)
    }
}
