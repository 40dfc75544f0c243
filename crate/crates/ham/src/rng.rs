//! Reproducible random streams keyed by `(master seed, cell, replicate)`.
//!
//! The ChaCha key holds the master seed and a cell tag, and the replicate
//! index selects the 64-bit stream. Every replicate therefore owns an
//! independent generator and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream slot reserved for draws that are frozen for a whole cell.
pub const FROZEN: u64 = u64::MAX;

pub fn stream(master: u64, cell: u64, replicate: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&cell.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replicate);
    rng
}

/// FNV-1a, used to turn cell labels into stable tags.
pub fn tag(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
