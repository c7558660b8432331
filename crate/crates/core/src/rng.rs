//! Seeded random streams.
//!
//! Every consumer draws from `ChaCha8Rng` keyed by a seed, a domain tag and
//! an index, so independent uses never share a subsequence and any stream
//! can be recreated without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sv2p_autodiff::{Real, Tensor};

/// Stream domains. Kept distinct so that e.g. iteration 3 of training and
/// video 3 of a dataset draw unrelated numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Video,
    Train,
    Init,
    Eval,
    Sample,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Video => 0x7669_6465_6f00_0001,
            Domain::Train => 0x7472_6169_6e00_0002,
            Domain::Init => 0x696e_6974_0000_0003,
            Domain::Eval => 0x6576_616c_0000_0004,
            Domain::Sample => 0x7361_6d70_6c65_0005,
        }
    }
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.tag());
    rng.set_stream(index);
    rng
}

/// Position of a stream, enough to recreate it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamState {
    /// Seed after domain mixing, as passed to `seed_from_u64`.
    pub key: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl StreamState {
    pub fn of(seed: u64, domain: Domain, rng: &ChaCha8Rng) -> Self {
        Self {
            key: seed ^ domain.tag(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn normal_vec<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        })
        .collect()
}

pub fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn state_round_trip() {
        let mut rng = stream(11, Domain::Train, 5);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let state = StreamState::of(11, Domain::Train, &rng);
        let mut a = state.restore();
        let b: Vec<u64> = (0..4).map(|_| rng.random()).collect();
        let c: Vec<u64> = (0..4).map(|_| a.random()).collect();
        assert_eq!(b, c);
    }

    #[test]
    fn domains_and_indices_differ() {
        let a: u64 = stream(1, Domain::Train, 0).random();
        let b: u64 = stream(1, Domain::Video, 0).random();
        let c: u64 = stream(1, Domain::Train, 1).random();
        assert!(a != b && a != c && b != c);
    }
}
