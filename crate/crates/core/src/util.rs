//! Small shared utilities: seed derivation, stable hashing, and the
//! worker-pool setup honoring `NEUROENS_THREADS`.

use std::sync::OnceLock;

/// SplitMix64 round; the standard way to turn loosely related integers
/// into well-mixed 64-bit values.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a base seed and a stream tag.
///
/// Used wherever one configured seed has to drive several independent
/// random streams (per-layer init, per-replica augmentation, per-epoch
/// shuffles) without the streams overlapping.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// Derives a child seed from a base seed and two stream tags.
pub fn derive_seed2(base: u64, tag1: u64, tag2: u64) -> u64 {
    derive_seed(derive_seed(base, tag1), tag2)
}

/// FNV-1a 64-bit hash, used for content hashes in provenance records.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Returns the shared worker pool.
///
/// The pool size is taken from `NEUROENS_THREADS` when set to a positive
/// integer, otherwise rayon's default (one worker per logical CPU). All
/// parallel sections in the crate write disjoint outputs or reduce in a
/// fixed order, so results are identical for any pool size.
pub fn worker_pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var("NEUROENS_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool construction cannot fail")
    })
}
