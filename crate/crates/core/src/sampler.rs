//! Mixed weak/salient mini-batches at a fixed ratio.
//!
//! An epoch walks the salient set exactly once, `salient_per_batch` at a
//! time, and tops each batch up with `weak_per_batch` box-supervised
//! samples drawn from a shuffled stream. A ragged last batch is padded with
//! re-drawn salient ids, which are flagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exactly `a` weak and `b` salient samples per batch.
    FixedRatio,
    /// Baseline: `a + b` samples drawn uniformly from the union of both sets.
    RandomUnion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub weak_per_batch: usize,
    pub salient_per_batch: usize,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            weak_per_batch: 9,
            salient_per_batch: 7,
            mode: SamplingMode::FixedRatio,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.weak_per_batch + self.salient_per_batch
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub weak: Vec<usize>,
    pub salient: Vec<usize>,
    /// Parallel to `salient`: `true` for padding duplicates in a ragged last batch.
    pub salient_pad: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.weak.len() + self.salient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: u64,
    pub batches: Vec<Batch>,
}

/// Endless shuffled walk over `0..n` that reshuffles whenever it runs dry.
struct Stream {
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Stream { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Batches for one epoch; deterministic in `(cfg.seed, epoch)`.
pub fn plan_epoch(n_weak: usize, n_salient: usize, cfg: &SamplerConfig, epoch: u64) -> Result<EpochPlan> {
    let (a, b) = (cfg.weak_per_batch, cfg.salient_per_batch);
    if a == 0 || b == 0 {
        return Err(Error::invalid(format!(
            "batch ratio must be positive on both sides, got {a}:{b}"
        )));
    }
    if n_salient < b {
        return Err(Error::invalid(format!(
            "{n_salient} salient samples cannot fill {b} per batch"
        )));
    }
    if n_weak < a {
        return Err(Error::invalid(format!(
            "{n_weak} weak samples cannot fill {a} per batch"
        )));
    }
    let mut rng = Rng::child(cfg.seed, &[0x5341_4d50, epoch]);
    let n_batches = n_salient.div_ceil(b);
    let batches = match cfg.mode {
        SamplingMode::FixedRatio => {
            let mut salient: Vec<usize> = (0..n_salient).collect();
            rng.shuffle(&mut salient);
            let mut weak = Stream::new(n_weak, &mut rng);
            let mut batches = Vec::with_capacity(n_batches);
            for chunk in salient.chunks(b) {
                let mut batch = Batch {
                    weak: (0..a).map(|_| weak.next(&mut rng)).collect(),
                    salient: chunk.to_vec(),
                    salient_pad: vec![false; chunk.len()],
                };
                let used: Vec<usize> = salient[..salient.len() - chunk.len()].to_vec();
                while batch.salient.len() < b {
                    // Redraw from ids already consumed this epoch, avoiding in-batch repeats when possible.
                    let pool: Vec<usize> = used.iter().copied().filter(|i| !batch.salient.contains(i)).collect();
                    let pick = if pool.is_empty() {
                        used[rng.below(used.len())]
                    } else {
                        pool[rng.below(pool.len())]
                    };
                    batch.salient.push(pick);
                    batch.salient_pad.push(true);
                }
                batches.push(batch);
            }
            batches
        }
        SamplingMode::RandomUnion => {
            let mut union = Stream::new(n_weak + n_salient, &mut rng);
            (0..n_batches)
                .map(|_| {
                    let mut batch = Batch::default();
                    for _ in 0..a + b {
                        let id = union.next(&mut rng);
                        if id < n_weak {
                            batch.weak.push(id);
                        } else {
                            batch.salient.push(id - n_weak);
                            batch.salient_pad.push(false);
                        }
                    }
                    batch
                })
                .collect()
        }
    };
    Ok(EpochPlan { epoch, batches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(a: usize, b: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            weak_per_batch: a,
            salient_per_batch: b,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn single_batch() {
        let p = plan_epoch(100, 7, &cfg(9, 7, 1), 0).unwrap();
        assert_eq!(p.batches.len(), 1);
        assert_eq!(p.batches[0].weak.len(), 9);
        let mut s = p.batches[0].salient.clone();
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn two_batches_partition_salient() {
        let p = plan_epoch(100, 14, &cfg(9, 7, 2), 0).unwrap();
        assert_eq!(p.batches.len(), 2);
        let mut all: Vec<usize> = p.batches.iter().flat_map(|b| b.salient.clone()).collect();
        all.sort();
        assert_eq!(all, (0..14).collect::<Vec<_>>());
        assert!(p.batches.iter().all(|b| b.salient_pad.iter().all(|&f| !f)));
    }

    #[test]
    fn minimal_batch() {
        let p = plan_epoch(1, 1, &cfg(1, 1, 3), 0).unwrap();
        assert_eq!(p.batches.len(), 1);
        assert_eq!(p.batches[0].len(), 2);
    }

    #[test]
    fn ragged_last_batch_is_padded_and_flagged() {
        let p = plan_epoch(20, 10, &cfg(9, 7, 4), 0).unwrap();
        assert_eq!(p.batches.len(), 2);
        let last = &p.batches[1];
        assert_eq!(last.salient.len(), 7);
        assert_eq!(last.salient_pad.iter().filter(|&&f| f).count(), 4);
        let mut real: Vec<usize> = p
            .batches
            .iter()
            .flat_map(|b| {
                b.salient
                    .iter()
                    .zip(&b.salient_pad)
                    .filter(|(_, &f)| !f)
                    .map(|(&i, _)| i)
            })
            .collect();
        real.sort();
        assert_eq!(real, (0..10).collect::<Vec<_>>());
        // Weak stream of 20 reshuffles during the 18 draws without repeating inside one pass.
        let weak: Vec<usize> = p.batches.iter().flat_map(|b| b.weak.clone()).collect();
        let mut first = weak.clone();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 18);
    }

    #[test]
    fn errors_and_determinism() {
        assert!(plan_epoch(100, 6, &cfg(9, 7, 0), 0).is_err());
        assert!(plan_epoch(8, 7, &cfg(9, 7, 0), 0).is_err());
        assert!(plan_epoch(8, 7, &cfg(0, 7, 0), 0).is_err());
        assert_eq!(
            plan_epoch(50, 30, &cfg(9, 7, 5), 3).unwrap(),
            plan_epoch(50, 30, &cfg(9, 7, 5), 3).unwrap()
        );
        assert_ne!(
            plan_epoch(50, 30, &cfg(9, 7, 5), 3).unwrap(),
            plan_epoch(50, 30, &cfg(9, 7, 5), 4).unwrap()
        );
    }

    #[test]
    fn random_union_batches_have_full_size() {
        let c = SamplerConfig {
            mode: SamplingMode::RandomUnion,
            ..cfg(9, 7, 6)
        };
        let p = plan_epoch(200, 20, &c, 0).unwrap();
        assert_eq!(p.batches.len(), 3);
        assert!(p.batches.iter().all(|b| b.len() == 16));
    }

    #[test]
    fn plan_serializes() {
        let p = plan_epoch(10, 7, &cfg(2, 7, 0), 0).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: EpochPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
