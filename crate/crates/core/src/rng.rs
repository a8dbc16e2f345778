//! Seed splitting.
//!
//! A global seed expands to independent substreams keyed by a label and a
//! list of indices: FNV-1a over the label bytes and the little-endian index
//! words, xor the seed, then one splitmix64 finalization. The result seeds a
//! ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn substream_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    for b in label.bytes() {
        feed(b);
    }
    // Separator so ("ab", [..]) and ("a", [b..]) cannot collide.
    feed(0xff);
    for i in indices {
        for b in i.to_le_bytes() {
            feed(b);
        }
    }
    splitmix64(h ^ seed)
}

pub fn substream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, label, indices))
}
