//! Deterministic, labeled random streams.
//!
//! Draw protocol: a stream is a ChaCha20 generator keyed by
//! `SHA-256("lbgen-stream/v1" ‖ seed as u64 LE ‖ stream_id UTF-8)`.
//! Uniform reals use 53-bit mantissa draws in `[0, 1)`, normals use the
//! ziggurat sampler of `rand_distr::StandardNormal`, and bounded integers use
//! `rand`'s unbiased range sampling. ChaCha output is platform independent,
//! so identical `(seed, stream_id)` pairs reproduce identical sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub struct RngStream {
    stream_id: String,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}

/// Independent deterministic stream for `(seed, stream_id)`.
pub fn derive_stream(seed: u64, stream_id: &str) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(b"lbgen-stream/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    RngStream {
        stream_id: stream_id.to_owned(),
        rng: ChaCha20Rng::from_seed(key),
    }
}

impl RngStream {
    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Child stream keyed by this stream's next 64-bit draw.
    pub fn fork(&mut self, label: &str) -> RngStream {
        let seed = self.rng.random::<u64>();
        derive_stream(seed, &format!("{}/{}", self.stream_id, label))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// Uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// SplitMix64 finalizer; a stable 64-bit mixing function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
