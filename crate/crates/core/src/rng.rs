//! Seeded randomness shared by augmentation, sampling and data generation.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of uniform draws. Augmentation code takes this trait so tests can
/// substitute scripted draws.
pub trait Draw {
    /// Uniform real in `[lo, hi)`.
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;

    /// Uniform integer in `[0, n)`; `n` must be positive.
    fn index(&mut self, n: usize) -> usize {
        (self.uniform(0.0, n as f64).floor() as usize).min(n - 1)
    }
}

/// Deterministic generator: identical seed, identical draw sequence.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for a labelled sub-task, e.g. `(epoch, slot)`.
    pub fn child(seed: u64, path: &[u64]) -> Self {
        Rng::seed(derive_seed(seed, path))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates on our own draws so ordering never depends on the rand version.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(0.0, 1.0);
        let u2 = self.uniform(0.0, 1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

impl Draw for Rng {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.0.gen();
        lo + (hi - lo) * u
    }

    fn index(&mut self, n: usize) -> usize {
        self.below(n)
    }
}

/// SplitMix64 mixing of a base seed with a path of labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Replays a fixed list of draws, mapping each scripted value through as-is.
/// Used to pin augmentation arithmetic in tests.
#[derive(Clone, Debug)]
pub struct Scripted {
    values: Vec<f64>,
    next: usize,
}

impl Scripted {
    pub fn new(values: Vec<f64>) -> Self {
        Scripted { values, next: 0 }
    }
}

impl Draw for Scripted {
    fn uniform(&mut self, _lo: f64, _hi: f64) -> f64 {
        let v = self.values[self.next % self.values.len()];
        self.next += 1;
        v
    }
}
