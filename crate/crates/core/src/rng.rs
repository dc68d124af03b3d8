//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `name` under `seed`. Different names give
/// uncorrelated streams, so adding draws to one component never shifts
/// another.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, then splitmix64 with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
