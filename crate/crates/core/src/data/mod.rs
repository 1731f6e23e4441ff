//! Deterministic datasets, epoch schedules and stateless augmentation.
//!
//! Every random choice is a pure function of a seed and the identifiers
//! involved (epoch, worker, sample), so any batch can be rebuilt on demand.

mod augment;
mod dataset;
mod idx;
mod schedule;
mod synth;

pub use augment::{augment, AugmentSpec};
pub use dataset::{Batch, Dataset};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use schedule::{next_batch, sample_epoch, SampleSchedule};
pub use synth::{synth_dataset, SynthKind, SynthSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a key tuple; order-sensitive.
pub fn hash_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Generator keyed by `parts`, independent of any other generator's state.
pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_key(parts))
}
