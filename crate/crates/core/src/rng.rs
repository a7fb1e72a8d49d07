//! Seed derivation.
//!
//! Every source of randomness draws from its own stream, keyed by a fixed
//! label and derived from the run's master seed. Changing one hyperparameter
//! (say K) therefore never perturbs the data or the initialization of modes
//! that exist under both settings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of the stream named `label` from `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(master) ^ h)
}

pub fn stream(master: u64, label: &str) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, label))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stream labels used by the simulator.
pub mod labels {
    pub const DATA: &str = "data";
    pub const CENTERS: &str = "centers";
    pub const STRATA: &str = "strata";
    pub const SPLIT: &str = "split";
    pub const PARTITION: &str = "partition";

    pub fn init(mode: usize) -> String {
        format!("init_{mode}")
    }

    pub fn schedule(age: usize) -> String {
        format!("schedule_{age}")
    }

    pub fn selection(age: usize, round: usize) -> String {
        format!("selection_{age}_{round}")
    }

    pub fn batches(age: usize, round: usize, client: usize) -> String {
        format!("batches_{age}_{round}_{client}")
    }

    pub fn repeat(j: usize) -> String {
        format!("repeat_{j}")
    }
}
