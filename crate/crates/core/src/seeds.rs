//! Seed derivation for independent deterministic random streams.
//!
//! Every source of randomness in a run draws from its own stream derived
//! from the master seed plus a purpose tag and position indices. Streams
//! never interleave, so adding a measurement-only consumer (or running
//! clients in parallel) cannot perturb the training trajectory.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod purpose {
    pub const PARAM_INIT: u64 = 1;
    pub const TASK_STREAMS: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    pub const BATCHING: u64 = 4;
    pub const MEMORY_FILL: u64 = 5;
    pub const MIXSTYLE: u64 = 6;
    pub const PROTO_EPISODE: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a tag path.
pub fn child_seed(master: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(master);
    for &t in tags {
        acc = splitmix(acc ^ splitmix(t));
    }
    acc
}

/// A ChaCha stream for the given master seed and tag path.
pub fn rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(master, tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_seeds_differ_across_tags() {
        let a = child_seed(7, &[purpose::BATCHING, 0, 0, 1]);
        let b = child_seed(7, &[purpose::BATCHING, 0, 0, 2]);
        let c = child_seed(7, &[purpose::MEMORY_FILL, 0, 0, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(
            child_seed(42, &[purpose::PARAM_INIT]),
            child_seed(42, &[purpose::PARAM_INIT])
        );
    }
}
