//! Persistent replay buffer for sampling chains.
//!
//! Chains started from old negative samples keep mixing where earlier
//! batches left off, so the sampler needs far fewer steps per batch. Each
//! draw independently either revives a stored state (probability 1−ρ) or
//! starts fresh from the informative initializer; finished states are
//! pushed back, overwriting random slots once the buffer fills.

use crate::error::{Error, Result};
use crate::init::InformativeInit;
use crate::rng::{stream_rng, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const DEFAULT_CAPACITY: usize = 10_000;
pub const DEFAULT_RHO: f64 = 0.05;

/// Which path produced a drawn chain start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawOrigin {
    /// Copied from an occupied buffer slot.
    Persistent,
    /// Freshly sampled from the initializer.
    Fresh,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<Tensor>,
    rho: f64,
    rng: ChaCha12Rng,
}

impl ReplayBuffer {
    /// `rho` is the per-draw probability of a fresh start instead of a
    /// stored state.
    pub fn new(capacity: usize, rho: f64, seed: u64) -> Result<Self> {
        Self::from_parts(capacity, rho, Vec::new(), stream_rng(seed, stream::BUFFER))
    }

    /// Rebuilds a buffer from persisted pieces (checkpoint restore).
    pub fn from_parts(
        capacity: usize,
        rho: f64,
        slots: Vec<Tensor>,
        rng: ChaCha12Rng,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ShapeMismatch {
                context: "replay buffer capacity",
                expected: vec![1],
                got: vec![0],
            });
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::NonFinite {
                context: "replay buffer reinit probability",
            });
        }
        if slots.len() > capacity {
            return Err(Error::ShapeMismatch {
                context: "replay buffer occupancy",
                expected: vec![capacity],
                got: vec![slots.len()],
            });
        }
        for s in &slots {
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    context: "replay buffer restored state",
                });
            }
        }
        Ok(ReplayBuffer {
            capacity,
            slots,
            rho,
            rng,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    /// Stored states, oldest-inserted first (exposed for checkpointing).
    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn rng(&self) -> &ChaCha12Rng {
        &self.rng
    }

    /// Draws `batch_size` chain starts. Each start independently comes from
    /// a uniformly random occupied slot with probability 1−ρ, otherwise
    /// fresh from the initializer; an empty buffer makes every draw fresh.
    /// Draws copy — slots are sampled with replacement and never removed.
    pub fn draw(
        &mut self,
        init: &InformativeInit,
        batch_size: usize,
    ) -> Result<Vec<(Tensor, DrawOrigin)>> {
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let fresh = if self.slots.is_empty() {
                true
            } else {
                // rho == 0 makes this always false, so the initializer is
                // provably never touched on a warm buffer.
                self.rng.random_range(0.0..1.0) < self.rho
            };
            if fresh {
                let (x, _label) = init.sample_marginal(&mut self.rng)?;
                out.push((x, DrawOrigin::Fresh));
            } else {
                let idx = self.rng.random_range(0..self.slots.len());
                out.push((self.slots[idx].clone(), DrawOrigin::Persistent));
            }
        }
        Ok(out)
    }

    /// Fills every unoccupied slot with a fresh draw from the initializer.
    /// Training starts from a stocked buffer: that way the first batches'
    /// poorly mixed finals overwrite only a sliver of the pool instead of
    /// becoming the only states the next epoch can start from.
    pub fn fill_from(&mut self, init: &InformativeInit) -> Result<()> {
        while self.slots.len() < self.capacity {
            let (x, _label) = init.sample_marginal(&mut self.rng)?;
            self.slots.push(x);
        }
        Ok(())
    }

    /// Stores finished chain states: appends while under capacity, then
    /// overwrites uniformly random slots. All states are validated before
    /// any is stored, so a rejected push leaves the buffer untouched.
    pub fn push(&mut self, states: &[Tensor]) -> Result<()> {
        for s in states {
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    context: "replay buffer push",
                });
            }
            if let Some(first) = self.slots.first() {
                if s.shape() != first.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "replay buffer push",
                        expected: first.shape().to_vec(),
                        got: s.shape().to_vec(),
                    });
                }
            }
        }
        for s in states {
            if self.slots.len() < self.capacity {
                self.slots.push(s.clone());
            } else {
                let idx = self.rng.random_range(0..self.capacity);
                self.slots[idx] = s.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::CovFactor;

    fn point_init(value: f64) -> InformativeInit {
        InformativeInit {
            pi: vec![1.0],
            mu: vec![Tensor::filled(&[2], value)],
            cov_factor: vec![CovFactor::Full(Tensor::zeros(&[2, 2]))],
            jitter: 0.0,
        }
    }

    #[test]
    fn empty_buffer_draws_are_all_fresh() {
        let mut buf = ReplayBuffer::new(4, 0.0, 0).unwrap();
        let init = point_init(0.5);
        let draws = buf.draw(&init, 8).unwrap();
        assert!(draws.iter().all(|(_, o)| *o == DrawOrigin::Fresh));
        assert!(draws.iter().all(|(x, _)| x.data() == [0.5, 0.5]));
        assert!(buf.is_empty(), "draws must not insert");
    }

    #[test]
    fn rho_one_is_always_fresh_even_when_full() {
        let mut buf = ReplayBuffer::new(2, 1.0, 0).unwrap();
        buf.push(&[Tensor::filled(&[2], 9.0), Tensor::filled(&[2], 9.0)])
            .unwrap();
        let init = point_init(-1.0);
        let draws = buf.draw(&init, 50).unwrap();
        assert!(draws.iter().all(|(_, o)| *o == DrawOrigin::Fresh));
        assert!(draws.iter().all(|(x, _)| x.data() == [-1.0, -1.0]));
    }

    #[test]
    fn rho_zero_on_a_warm_buffer_never_calls_the_initializer() {
        let mut buf = ReplayBuffer::new(3, 0.0, 1).unwrap();
        buf.push(&[
            Tensor::filled(&[2], 7.0),
            Tensor::filled(&[2], 7.0),
            Tensor::filled(&[2], 7.0),
        ])
        .unwrap();
        // An initializer whose draws would be unmistakable.
        let init = point_init(-7.0);
        let draws = buf.draw(&init, 200).unwrap();
        assert!(draws.iter().all(|(_, o)| *o == DrawOrigin::Persistent));
        assert!(draws.iter().all(|(x, _)| x.data() == [7.0, 7.0]));
    }

    #[test]
    fn fresh_fraction_concentrates_at_rho() {
        let mut buf = ReplayBuffer::new(50, 0.05, 2).unwrap();
        let states: Vec<Tensor> = (0..50).map(|i| Tensor::filled(&[2], i as f64)).collect();
        buf.push(&states).unwrap();
        let init = point_init(0.0);
        let draws = buf.draw(&init, 100_000).unwrap();
        let fresh = draws
            .iter()
            .filter(|(_, o)| *o == DrawOrigin::Fresh)
            .count() as f64;
        let frac = fresh / draws.len() as f64;
        assert!((0.045..=0.055).contains(&frac), "fresh fraction {frac}");
    }

    #[test]
    fn fill_tops_up_to_capacity_and_respects_existing_slots() {
        let mut buf = ReplayBuffer::new(6, 0.0, 9).unwrap();
        buf.push(&[Tensor::filled(&[2], 3.0)]).unwrap();
        buf.fill_from(&point_init(0.5)).unwrap();
        assert!(buf.is_full());
        assert_eq!(buf.slots()[0].data(), [3.0, 3.0], "occupied slot kept");
        for s in &buf.slots()[1..] {
            assert_eq!(s.data(), [0.5, 0.5]);
        }
        // Refilling a full buffer is a no-op.
        buf.fill_from(&point_init(-9.0)).unwrap();
        assert!(buf.slots().iter().all(|s| s.data() != [-9.0, -9.0]));
    }

    #[test]
    fn push_caps_occupancy_and_overwrites_in_place() {
        let mut buf = ReplayBuffer::new(2, 0.0, 3).unwrap();
        buf.push(&[
            Tensor::filled(&[1], 1.0),
            Tensor::filled(&[1], 2.0),
            Tensor::filled(&[1], 3.0),
        ])
        .unwrap();
        assert_eq!(buf.len(), 2);
        // The third state replaced one of the first two.
        let stored: Vec<f64> = buf.slots().iter().map(|s| s.data()[0]).collect();
        assert!(stored.contains(&3.0));
    }

    #[test]
    fn single_slot_round_trips_exactly() {
        let mut buf = ReplayBuffer::new(1, 0.0, 4).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        buf.push(std::slice::from_ref(&x)).unwrap();
        let init = point_init(0.0);
        let draws = buf.draw(&init, 3).unwrap();
        for (got, origin) in &draws {
            assert_eq!(origin, &DrawOrigin::Persistent);
            assert_eq!(got.data(), x.data());
        }
    }

    #[test]
    fn non_finite_or_misshapen_pushes_are_rejected_atomically() {
        let mut buf = ReplayBuffer::new(4, 0.0, 5).unwrap();
        buf.push(&[Tensor::filled(&[2], 0.0)]).unwrap();
        let bad = Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        let good = Tensor::filled(&[2], 1.0);
        match buf.push(&[good.clone(), bad]) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected non-finite rejection, got {other:?}"),
        }
        assert_eq!(buf.len(), 1, "rejected push must not partially apply");

        let misshapen = Tensor::filled(&[3], 0.0);
        match buf.push(&[misshapen]) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected shape rejection, got {other:?}"),
        }
        assert_eq!(buf.len(), 1);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Arbitrary push/draw interleavings never breach the occupancy
            // bound, whatever the capacity, rho, or seed.
            #[test]
            fn occupancy_never_exceeds_capacity(
                capacity in 1usize..12,
                rho in 0.0f64..=1.0,
                seed in 0u64..1000,
                ops in proptest::collection::vec((0usize..2, 1usize..8), 1..60),
            ) {
                let init = point_init(0.0);
                let mut buf = ReplayBuffer::new(capacity, rho, seed).unwrap();
                let mut next = 0.0;
                for (kind, count) in ops {
                    if kind == 0 {
                        let states: Vec<Tensor> = (0..count)
                            .map(|_| {
                                next += 1.0;
                                Tensor::filled(&[2], next)
                            })
                            .collect();
                        buf.push(&states).unwrap();
                    } else {
                        buf.draw(&init, count).unwrap();
                    }
                    prop_assert!(buf.len() <= buf.capacity());
                }
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_draws_and_replacements() {
        let init = point_init(0.25);
        let run = || {
            let mut buf = ReplayBuffer::new(3, 0.5, 42).unwrap();
            let mut seen = Vec::new();
            for round in 0..5 {
                let draws = buf.draw(&init, 4).unwrap();
                for (x, o) in &draws {
                    seen.push((x.data().to_vec(), *o));
                }
                let states: Vec<Tensor> = (0..4)
                    .map(|i| Tensor::filled(&[2], (round * 4 + i) as f64 * 0.1))
                    .collect();
                buf.push(&states).unwrap();
            }
            let slots: Vec<Vec<f64>> = buf.slots().iter().map(|s| s.data().to_vec()).collect();
            (seen, slots)
        };
        assert_eq!(run(), run());
    }
}
