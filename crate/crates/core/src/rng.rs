//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 keystream selected by
//! a 64-bit seed (the key) and a 64-bit stream id derived from a path of
//! names, e.g. `train / batch=12 / gumbel / t=5`. ChaCha is counter-based,
//! so streams with distinct ids are independent, and adding a new sampling
//! site under a new name leaves every existing stream unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    id: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed, id: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Substream named `name` under this one.
    pub fn child(&self, name: &str) -> SeedStream {
        let h = fnv1a(0xCBF2_9CE4_8422_2325 ^ self.id, name.as_bytes());
        SeedStream {
            seed: self.seed,
            id: splitmix(h),
        }
    }

    /// Substream `name=index`, for per-step or per-batch sites.
    pub fn indexed(&self, name: &str, index: u64) -> SeedStream {
        self.child(&format!("{name}={index}"))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.id);
        r
    }
}

/// Standard Gumbel draw `-ln(-ln U)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>();
    let u = u.clamp(1e-300, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

/// Index drawn from a discrete distribution given by (not necessarily
/// normalized) non-negative weights.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
