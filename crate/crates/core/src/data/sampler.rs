use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Resumable position of a [`Sampler`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub len: usize,
    pub seed: u64,
    pub stream: u64,
    pub epoch: u64,
    pub pos: usize,
}

/// Draws indices epoch by epoch, each epoch a fresh seeded permutation of
/// `0..len`. The permutation of an epoch depends only on `(seed, stream,
/// epoch)`, so the state is three counters.
#[derive(Clone, Debug)]
pub struct Sampler {
    state: SamplerState,
    perm: Vec<usize>,
}

impl Sampler {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        Self::from_state(SamplerState {
            len,
            seed,
            stream,
            epoch: 0,
            pos: 0,
        })
    }

    pub fn from_state(state: SamplerState) -> Self {
        assert!(state.len > 0, "sampler over an empty split");
        Sampler {
            perm: Self::permutation(&state),
            state,
        }
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    /// The permutation used for `state.epoch`.
    pub fn permutation(state: &SamplerState) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ state.epoch);
        let mut p: Vec<usize> = (0..state.len).collect();
        p.shuffle(&mut rng);
        p
    }

    pub fn next_index(&mut self) -> usize {
        if self.state.pos == self.state.len {
            self.state.epoch += 1;
            self.state.pos = 0;
            self.perm = Self::permutation(&self.state);
        }
        let i = self.perm[self.state.pos];
        self.state.pos += 1;
        i
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next_index()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Sampler::new(17, 3, 1);
        let mut b = Sampler::new(17, 3, 1);
        let sa: Vec<usize> = (0..60).map(|_| a.next_index()).collect();
        let sb: Vec<usize> = (0..60).map(|_| b.next_index()).collect();
        assert_eq!(sa, sb);
        let mut c = Sampler::new(17, 3, 2);
        let sc: Vec<usize> = (0..60).map(|_| c.next_index()).collect();
        assert_ne!(sa, sc);
    }

    #[test]
    fn restored_state_continues_sequence() {
        let mut a = Sampler::new(9, 1, 0);
        for _ in 0..13 {
            a.next_index();
        }
        let mut b = Sampler::from_state(a.state());
        for _ in 0..30 {
            assert_eq!(a.next_index(), b.next_index());
        }
    }

    proptest! {
        #[test]
        fn every_epoch_covers_each_index_once(len in 1usize..80, seed in any::<u64>(), epochs in 1usize..4) {
            let mut s = Sampler::new(len, seed, 7);
            for _ in 0..epochs {
                let mut seen: Vec<usize> = (0..len).map(|_| s.next_index()).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
            }
        }
    }
}
