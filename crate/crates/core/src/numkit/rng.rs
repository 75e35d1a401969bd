use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw randomness. Each gets its own ChaCha stream so that
/// changing how one stage consumes numbers never shifts the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Data,
    Partition,
    Init,
    Batching,
    Participation,
    Guidance,
    FineTune,
    Test,
}

impl Purpose {
    fn stream_id(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::Partition => 2,
            Purpose::Init => 3,
            Purpose::Batching => 4,
            Purpose::Participation => 5,
            Purpose::Guidance => 6,
            Purpose::FineTune => 7,
            Purpose::Test => 8,
        }
    }
}

/// Seeded, platform-independent random number generator.
///
/// Streams are single-owner; derive a fresh one per worker rather than sharing.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for `purpose`, further keyed by `keys` (e.g. round and client index).
    pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> Self {
        let mut mixed = splitmix64(seed);
        for &k in keys {
            mixed = splitmix64(mixed ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        }
        let mut inner = ChaCha8Rng::seed_from_u64(mixed);
        inner.set_stream(purpose.stream_id());
        Rng { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
