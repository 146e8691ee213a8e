use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Generator behind every [`RngStream`].
pub type StreamRng = ChaCha8Rng;

/// A `(seed, stream)` pair naming one reproducible random sequence.
///
/// ChaCha keeps 2^64 independent streams per seed, so Monte Carlo draw `i`
/// simply uses stream `base + i` and can run on any thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub const fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    pub fn generator(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Stream `i` positions after this one, same seed.
    pub fn offset(self, i: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream: self.stream.wrapping_add(i),
        }
    }

    /// A new seed hashed from this pair and `tag`, used to give independent
    /// subsystems (inputs, weights, splits) disjoint stream families.
    pub fn derive(self, tag: u64) -> Self {
        let h = splitmix64(self.seed ^ splitmix64(self.stream ^ splitmix64(tag)));
        RngStream { seed: h, stream: 0 }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
