//! Named, seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by a `(key, stream)` pair.
//! Children are derived from the parent's *identity*, never from its
//! consumed state, so `rng.split("noise")` yields the same generator no
//! matter how many values were drawn from `rng` beforehand.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identity of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId {
    pub key: u64,
    pub stream: u64,
}

#[derive(Clone, Debug)]
pub struct Rng {
    id: StreamId,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_id(StreamId {
            key: splitmix64(seed),
            stream: 0,
        })
    }

    fn from_id(id: StreamId) -> Self {
        let mut seed = [0u8; 32];
        let mut k = id.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(id.stream);
        Rng { id, inner }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Child stream addressed by name.
    pub fn split(&self, name: &str) -> Rng {
        self.derive(fnv1a(name))
    }

    /// Child stream addressed by index (e.g. per sample, per trial, per seed).
    pub fn split_index(&self, index: u64) -> Rng {
        self.derive(splitmix64(index ^ 0x5851_f42d_4c95_7f2d))
    }

    fn derive(&self, tag: u64) -> Rng {
        let key = splitmix64(self.id.key ^ splitmix64(self.id.stream.wrapping_add(tag)));
        Rng::from_id(StreamId {
            key,
            stream: splitmix64(tag ^ key),
        })
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normals(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx
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
