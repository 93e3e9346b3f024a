//! Seeded randomness. One root seed fans out into independent child streams
//! via a label hash, so adding a consumer never shifts the draws another
//! consumer sees.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used both for seed derivation and cheap structural hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a root seed and a purpose label.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    seed ^ fnv1a(label.as_bytes())
}

/// Deterministic stream for one labeled purpose.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, label))
}

/// Standard normal draw via Box-Muller. One value per call keeps the
/// consumption pattern obvious and reproducible.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64], std: f64) {
    for v in out {
        *v = normal(rng) * std;
    }
}
