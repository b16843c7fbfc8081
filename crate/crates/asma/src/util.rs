//! Small shared helpers: seed derivation, atomic file writes, hex digests.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;

use crate::Rng;

/// Mix a base seed with stream identifiers into a fresh 64-bit seed.
///
/// SplitMix64 finalizer applied over the concatenated words; used so that
/// per-(sample, epoch) RNG streams are independent of each other and of the
/// batch order.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = splitmix64(h);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded RNG for a derived stream.
pub fn rng_for(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(mix_seed(parts))
}

/// Deterministic 80/20 train/eval split by sample index hash.
///
/// Seed-independent so every stage of an experiment sees the same split.
pub fn is_train_index(idx: usize) -> bool {
    // top 3 bits give 8 buckets; buckets 0..6 are train (80%), 6.4 rounded down
    splitmix64(idx as u64) % 10 < 8
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile_path(path);
    let mut n = 0u32;
    while tmp.exists() {
        n += 1;
        tmp = path.with_extension(format!("tmp{n}"));
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn tempfile_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("tmp")
}

/// Lowercase hex encoding of a byte slice.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker-count cap from the `ASMA_THREADS` environment variable,
/// defaulting to the number of available cores.
pub fn thread_cap() -> usize {
    std::env::var("ASMA_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
