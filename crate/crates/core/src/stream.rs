//! Keyed deterministic random streams.
//!
//! Every random draw in the simulator comes from a stream keyed by a SHA-256
//! digest of `(master seed, user, round, purpose)`. Each sub-vector gets its
//! own Xoshiro256++ generator whose state is the digest mixed with the
//! sub-vector index through SplitMix64, so streams are derivable in any order
//! and on any thread without handing state around, at a few nanoseconds each.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

/// The RNG type handed out by [`derive_stream`].
pub type Stream = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Separates the independent uses of randomness so that, for example, the
/// codebook and the randomized-response draws of one sub-vector never share
/// bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Codebook = 1,
    NestedCodebook = 2,
    Dither = 3,
    Response = 4,
    NestedResponse = 5,
    Attack = 6,
    LocalSgd = 7,
    Laplace = 8,
    SignResponse = 9,
    Partition = 10,
    Dataset = 11,
    Init = 12,
    AttackerSelection = 13,
    MonteCarlo = 14,
}

/// Key material for all sub-vector streams of one `(user, round, purpose)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn new(master_seed: u64, user_id: u32, round: u32, purpose: Purpose) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"cpa-stream-v1");
        hasher.update(master_seed.to_le_bytes());
        hasher.update(user_id.to_le_bytes());
        hasher.update(round.to_le_bytes());
        hasher.update([purpose as u8]);
        StreamKey(hasher.finalize().into())
    }

    /// Stream for one sub-vector; cheap, no hashing.
    pub fn stream(&self, subvec_index: u64) -> Stream {
        let tweak = splitmix64(subvec_index);
        let mut seed = [0u8; 32];
        for (lane, (out, key)) in seed
            .chunks_exact_mut(8)
            .zip(self.0.chunks_exact(8))
            .enumerate()
        {
            let k = u64::from_le_bytes(key.try_into().expect("8-byte lane"));
            let v = splitmix64(k ^ tweak.rotate_left(16 * lane as u32));
            out.copy_from_slice(&v.to_le_bytes());
        }
        Xoshiro256PlusPlus::from_seed(seed)
    }
}

/// Derive the stream for `(master_seed, user_id, round, subvec_index, purpose)`.
pub fn derive_stream(
    master_seed: u64,
    user_id: u32,
    round: u32,
    subvec_index: u64,
    purpose: Purpose,
) -> Stream {
    StreamKey::new(master_seed, user_id, round, purpose).stream(subvec_index)
}
