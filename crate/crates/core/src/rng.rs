//! Named, explicitly seeded random streams.
//!
//! Every random draw in the crate comes from a [`Rng`] derived from a run
//! seed and a [`Stream`] label, so that e.g. changing the number of slope
//! sample points never perturbs the SGD shuffling order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    SlopeSample,
    Subset,
    Sphere,
    Directions,
    Gaussian,
    PowerIteration,
    Centers,
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::SlopeSample => 3,
            Stream::Subset => 4,
            Stream::Sphere => 5,
            Stream::Directions => 6,
            Stream::Gaussian => 7,
            Stream::PowerIteration => 8,
            Stream::Centers => 9,
            Stream::Custom(n) => 0x1000 + n,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64, stream: Stream) -> Rng {
    let mixed = splitmix64(splitmix64(seed) ^ stream.id().wrapping_mul(0xd1b5_4a32_d192_ed03));
    Rng::seed_from_u64(mixed)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
