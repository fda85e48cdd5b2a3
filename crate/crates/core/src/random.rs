//! Seed derivation so that Monte-Carlo work is reproducible independently of
//! how it is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SampleRng = ChaCha8Rng;

/// RNG for stream `index` under a master `seed`.
pub fn stream_rng(seed: u64, index: u64) -> SampleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a tag into a seed so that unrelated consumers of one master seed
/// do not share streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded into the seed with a splitmix finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
