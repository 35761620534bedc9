//! Deterministic batch schedule: seeded per-epoch shuffles, exact epoch
//! coverage, and a constructive guarantee that every batch carries at
//! least two distinct users when the dispersion loss needs negatives.
//!
//! The schedule is stateless: `batch(step)` recomputes its epoch's
//! permutation from the seed, so resuming from a checkpoint replays the
//! identical sequence.

use super::TrainError;
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the flat sample list the schedule was built over.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchSchedule {
    user_of: Vec<u32>,
    batch_size: usize,
    require_distinct_users: bool,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(
        user_of: Vec<u32>,
        batch_size: usize,
        require_distinct_users: bool,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if user_of.is_empty() || batch_size == 0 {
            return Err(TrainError::Config(
                "batch schedule needs samples and a positive batch size".into(),
            ));
        }
        if require_distinct_users {
            let mut users: Vec<u32> = user_of.clone();
            users.sort_unstable();
            users.dedup();
            if users.len() < 2 {
                return Err(TrainError::Config(format!(
                    "distinct-user batches impossible: dataset has {} user(s)",
                    users.len()
                )));
            }
            if batch_size < 2 {
                return Err(TrainError::Config(
                    "distinct-user batches impossible with batch_size 1".into(),
                ));
            }
        }
        let schedule = BatchSchedule {
            user_of,
            batch_size,
            require_distinct_users,
            seed,
        };
        if require_distinct_users {
            // Pigeonhole feasibility: every batch needs a sample outside the
            // most frequent user, so off-modal samples must cover all batches.
            let mut counts = std::collections::BTreeMap::new();
            for &u in &schedule.user_of {
                *counts.entry(u).or_insert(0usize) += 1;
            }
            let c_max = counts.values().copied().max().unwrap_or(0);
            let off_modal = schedule.user_of.len() - c_max;
            if off_modal < schedule.batches_per_epoch() {
                return Err(TrainError::Config(format!(
                    "distinct-user batches impossible: {} off-modal samples for {} batches",
                    off_modal,
                    schedule.batches_per_epoch()
                )));
            }
        }
        Ok(schedule)
    }

    pub fn samples(&self) -> usize {
        self.user_of.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.user_of.len();
        let full = n / self.batch_size;
        let rem = n % self.batch_size;
        if rem == 0 {
            full.max(1)
        } else if self.require_distinct_users && rem == 1 && full > 0 {
            // a lone trailing sample joins the previous batch
            full
        } else {
            full + 1
        }
    }

    /// The whole epoch's batches, each sample exactly once.
    pub fn epoch(&self, epoch_index: u64) -> Vec<Batch> {
        let n = self.user_of.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::seed_from(derive_seed(self.seed, &[0xb17c, epoch_index]));
        rng.shuffle(&mut order);

        let mut chunks: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect();
        if self.require_distinct_users && chunks.len() > 1 {
            if chunks.last().map(|c| c.len()) == Some(1) {
                let lone = chunks.pop().unwrap();
                chunks.last_mut().unwrap().extend(lone);
            }
            self.repair(&mut chunks);
        }
        chunks.into_iter().map(|indices| Batch { indices }).collect()
    }

    /// Swap samples between chunks until every chunk holds two distinct
    /// users. A donor swap is accepted only when it leaves the donor valid.
    fn repair(&self, chunks: &mut [Vec<usize>]) {
        for ci in 0..chunks.len() {
            if self.distinct_users(&chunks[ci]) >= 2 {
                continue;
            }
            let lone_user = self.user_of[chunks[ci][0]];
            let mut swapped = false;
            'donor: for cj in 0..chunks.len() {
                if cj == ci {
                    continue;
                }
                let foreign: Vec<usize> = (0..chunks[cj].len())
                    .filter(|&k| self.user_of[chunks[cj][k]] != lone_user)
                    .collect();
                // donor must keep a non-lone user after giving one away
                if foreign.len() < 2 {
                    continue;
                }
                let k = foreign[0];
                let give = chunks[cj][k];
                let take = *chunks[ci].last().unwrap();
                chunks[cj][k] = take;
                let last = chunks[ci].len() - 1;
                chunks[ci][last] = give;
                swapped = true;
                break 'donor;
            }
            debug_assert!(swapped, "schedule constructed under feasible constraints");
        }
    }

    fn distinct_users(&self, chunk: &[usize]) -> usize {
        let mut users: Vec<u32> = chunk.iter().map(|&i| self.user_of[i]).collect();
        users.sort_unstable();
        users.dedup();
        users.len()
    }

    /// The batch for a global step index.
    pub fn batch(&self, step: u64) -> Batch {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        self.epoch(epoch).swap_remove(slot)
    }

    pub fn satisfies_distinct(&self, batch: &Batch) -> bool {
        !self.require_distinct_users || self.distinct_users(&batch.indices) >= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn users(spec: &[(u32, usize)]) -> Vec<u32> {
        spec.iter()
            .flat_map(|&(u, n)| std::iter::repeat(u).take(n))
            .collect()
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        let schedule = BatchSchedule::new(users(&[(0, 5), (1, 5), (2, 6)]), 4, true, 7).unwrap();
        let batches = schedule.epoch(3);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn every_batch_has_two_users_when_required() {
        // heavily skewed user distribution to exercise the repair pass
        let schedule = BatchSchedule::new(users(&[(0, 30), (1, 10)]), 4, true, 9).unwrap();
        for epoch in 0..20 {
            for batch in schedule.epoch(epoch) {
                assert!(schedule.satisfies_distinct(&batch), "epoch {epoch}");
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_sequence() {
        let a = BatchSchedule::new(users(&[(0, 7), (1, 9)]), 4, true, 42).unwrap();
        let b = BatchSchedule::new(users(&[(0, 7), (1, 9)]), 4, true, 42).unwrap();
        for step in 0..40 {
            assert_eq!(a.batch(step), b.batch(step));
        }
        let c = BatchSchedule::new(users(&[(0, 7), (1, 9)]), 4, true, 43).unwrap();
        assert!((0..40).any(|s| a.batch(s) != c.batch(s)));
    }

    #[test]
    fn impossible_constraints_rejected() {
        assert!(BatchSchedule::new(users(&[(0, 8)]), 4, true, 1).is_err());
        assert!(BatchSchedule::new(users(&[(0, 4), (1, 4)]), 1, true, 1).is_err());
        assert!(BatchSchedule::new(vec![], 4, false, 1).is_err());
        // one off-modal sample cannot serve three batches
        assert!(BatchSchedule::new(users(&[(0, 5), (1, 1)]), 2, true, 1).is_err());
        // fine without the distinct-user requirement
        assert!(BatchSchedule::new(users(&[(0, 8)]), 4, false, 1).is_ok());
    }

    #[test]
    fn lone_trailing_sample_merges() {
        let schedule = BatchSchedule::new(users(&[(0, 5), (1, 4)]), 4, true, 3).unwrap();
        assert_eq!(schedule.batches_per_epoch(), 2);
        let batches = schedule.epoch(0);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches.iter().map(|b| b.indices.len()).sum::<usize>(), 9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn schedule_invariants(
            n_users in 2u32..6,
            per_user in 1usize..9,
            extra in 0usize..5,
            batch_size in 2usize..7,
            seed in 0u64..1000,
        ) {
            let mut user_of = Vec::new();
            for u in 0..n_users {
                let count = per_user + if u == 0 { extra } else { 0 };
                user_of.extend(std::iter::repeat(u).take(count));
            }
            let n = user_of.len();
            let schedule = match BatchSchedule::new(user_of.clone(), batch_size, true, seed) {
                Ok(s) => s,
                Err(_) => {
                    // constructor may only refuse genuinely infeasible splits
                    let c_max = (0..n_users)
                        .map(|u| user_of.iter().filter(|&&x| x == u).count())
                        .max()
                        .unwrap();
                    prop_assert!(n - c_max < n.div_ceil(batch_size));
                    return Ok(());
                }
            };
            for epoch in 0..3u64 {
                let batches = schedule.epoch(epoch);
                let mut seen: Vec<usize> =
                    batches.iter().flat_map(|b| b.indices.clone()).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
                for batch in &batches {
                    prop_assert!(schedule.satisfies_distinct(batch));
                }
            }
        }
    }
}
