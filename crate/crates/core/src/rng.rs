//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is derived from the
//! root seed, a stream name and an index:
//!
//! ```text
//! h     = FNV-1a-64(stream name bytes)
//! seed  = splitmix64(splitmix64(root ^ h) ^ index)
//! ```
//!
//! and expanded to a ChaCha key with `SeedableRng::seed_from_u64`. Streams
//! are therefore independent of the order in which they are created, which
//! lets a resumed training run draw exactly the numbers an uninterrupted one
//! would have drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const DATA_STREAM: &str = "data";
pub const INIT_STREAM: &str = "init";
pub const AUGMENT_STREAM: &str = "augment";
pub const BATCHING_STREAM: &str = "batching";
pub const DROPOUT_STREAM: &str = "dropout";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(stream.as_bytes())) ^ index)
}

/// Generator for `(root, stream, index)`.
pub fn stream(root: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, index))
}
