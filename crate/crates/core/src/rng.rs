//! Counter-based random substreams.
//!
//! Every random draw in the toolkit comes from a ChaCha8 generator addressed
//! by a [`StreamKey`] and a stream index. Keys are derived from a master seed
//! by hashing a path of tags, so a parallel loop that asks for
//! `key.rng(i)` inside iteration `i` sees the same numbers no matter how the
//! iterations are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Address of an independent random substream family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x6a09_e667_f3bc_c909))
    }

    /// Derives a child key; distinct tags give unrelated streams.
    pub fn child(self, tag: u64) -> Self {
        StreamKey(splitmix64(self.0.rotate_left(17) ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    /// Derives a child key from a string tag.
    pub fn named(self, tag: &str) -> Self {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.child(h)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Generator for substream `index` of this key.
    pub fn rng(self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(index);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
