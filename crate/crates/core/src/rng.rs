//! Deterministic, labelled pseudo-random streams.
//!
//! Every random draw in the crate comes from [`rng_stream`]. A stream is
//! identified by the run seed plus a tuple of `u64` labels (a purpose tag
//! from [`tag`] followed by indices such as epoch, level or trial), so
//! parallel and serial executions draw identical numbers.
//!
//! Algorithm:
//!
//! ```text
//! mix(z)   = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!            z ^= z >> 27; z *= 0x94d049bb133111eb; z ^ (z >> 31)
//! key      = mix(seed + φ)                      φ = 0x9e3779b97f4a7c15
//! key      = mix(key ^ mix(label + φ))          for each label, in order
//! s[i]     = mix(key + (i + 1)·φ)               i = 0..4 (SplitMix64 stream)
//! generator: xoshiro256++ with state s, little-endian word order
//! ```

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

const PHI: u64 = 0x9e37_79b9_7f4a_7c15;

/// Purpose tags used as the first stream label.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const SHADOW: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const TARGET: u64 = 7;
    pub const RANDOM_FLIP: u64 = 8;
    pub const SAMPLE: u64 = 9;
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_key(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix(seed.wrapping_add(PHI)), |key, &l| mix(key ^ mix(l.wrapping_add(PHI))))
}

/// Generator for the stream `(seed, labels...)`.
pub fn rng_stream(seed: u64, labels: &[u64]) -> StreamRng {
    let key = stream_key(seed, labels);
    let mut bytes = [0u8; 32];
    for i in 0..4u64 {
        let word = mix(key.wrapping_add((i + 1).wrapping_mul(PHI)));
        bytes[i as usize * 8..i as usize * 8 + 8].copy_from_slice(&word.to_le_bytes());
    }
    StreamRng::from_seed(bytes)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::{Rng, RngCore};

    use super::*;

    #[test]
    fn same_labels_same_sequence() {
        let a: Vec<u64> = (0..16).map({
            let mut r = rng_stream(7, &[tag::PROBE, 3, 9]);
            move |_| r.next_u64()
        }).collect();
        let mut r = rng_stream(7, &[tag::PROBE, 3, 9]);
        let b: Vec<u64> = (0..16).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn golden_seed_one() {
        // Generated once by an independent Python transcription of the
        // algorithm in the module docs (SplitMix64 key schedule + xoshiro256++).
        let mut r = rng_stream(1, &[]);
        let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(got, GOLDEN_SEED_1);
    }

    const GOLDEN_SEED_1: [u64; 4] = [
        8089978747140965633,
        5687923198772495674,
        15915821081677751511,
        16148157984598114124,
    ];

    #[test]
    fn label_order_matters() {
        let mut a = rng_stream(1, &[1, 2]);
        let mut b = rng_stream(1, &[2, 1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn ten_thousand_trial_streams_have_distinct_prefixes() {
        let mut seen = HashSet::new();
        for trial in 0..10_000u64 {
            let mut r = rng_stream(42, &[tag::PROBE, 0, 5, trial]);
            let prefix: [u64; 8] = std::array::from_fn(|_| r.next_u64());
            assert!(seen.insert(prefix), "collision at trial {trial}");
        }
    }

    #[test]
    fn uniform_mean_is_reasonable() {
        let mut r = rng_stream(3, &[tag::SAMPLE]);
        let mean: f64 = (0..100_000).map(|_| r.random::<f64>()).sum::<f64>() / 100_000.0;
        assert!((mean - 0.5).abs() < 0.01);
    }
}
