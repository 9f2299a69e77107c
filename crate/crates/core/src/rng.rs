//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness asks for a stream by name (`"data"`,
//! `"init/m1"`, `"shuffle/s3"`, ...). The stream seed is a hash of the run
//! seed and the name, so adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Seed for the stream `name` under run seed `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let h = fnv1a(&seed.to_le_bytes(), FNV_OFFSET);
    let h = fnv1a(name.as_bytes(), h);
    // splitmix finalizer so nearby names land far apart
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}
