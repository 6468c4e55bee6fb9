//! Hint functions: suggest the slot where an in-bucket probe starts.
//!
//! Hints only move the start of the cyclic probe. Lookups and inserts are
//! correct for any hint, including a constant one.

use serde::{Deserialize, Serialize};

use crate::model::Key;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintKind {
    /// `k mod C`.
    Mod,
    /// Carry-less-multiply mixer followed by `mod C`.
    ClMul,
    /// Linear interpolation between the bucket's pivot and its successor's.
    #[serde(rename = "endpoint")]
    EndpointLinear,
    /// Always slot 0. Degenerate on purpose; used to exercise long probe chains.
    Constant,
}

impl std::str::FromStr for HintKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mod" => Ok(Self::Mod),
            "clmul" | "cl" => Ok(Self::ClMul),
            "endpoint" | "linear" => Ok(Self::EndpointLinear),
            "constant" | "zero" => Ok(Self::Constant),
            other => Err(format!("unknown hint kind `{other}`")),
        }
    }
}

impl std::fmt::Display for HintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mod => "mod",
            Self::ClMul => "clmul",
            Self::EndpointLinear => "endpoint",
            Self::Constant => "constant",
        })
    }
}

/// A hint function bound to one bucket's parameters.
///
/// `lo`/`hi` are fixed when the bucket is created, so the hint for a key never
/// changes over the bucket's lifetime even if its pivot is later lowered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HintFn {
    pub kind: HintKind,
    pub lo: Key,
    /// Exclusive; `2^64` stands for an open right end.
    pub hi: u128,
}

impl HintFn {
    pub fn new(kind: HintKind, lo: Key, hi: u128) -> Self {
        Self { kind, lo, hi }
    }

    #[inline]
    pub fn slot(&self, key: Key, capacity: usize) -> usize {
        match self.kind {
            HintKind::Mod => mod_hint(key, capacity),
            HintKind::ClMul => clmul_hint(key, capacity),
            HintKind::EndpointLinear => endpoint_linear_hint_wide(key, self.lo, self.hi, capacity),
            HintKind::Constant => 0,
        }
    }
}

#[inline]
pub fn mod_hint(key: Key, capacity: usize) -> usize {
    debug_assert!(capacity >= 1);
    (key % capacity as u64) as usize
}

#[inline]
pub fn clmul_hint(key: Key, capacity: usize) -> usize {
    debug_assert!(capacity >= 1);
    (clmul_mix(key) % capacity as u64) as usize
}

/// `clamp(floor(C * (k - lo) / (hi - lo)), 0, C - 1)`; a degenerate range maps to 0.
#[inline]
pub fn endpoint_linear_hint(key: Key, lo: Key, hi: Key, capacity: usize) -> usize {
    endpoint_linear_hint_wide(key, lo, u128::from(hi), capacity)
}

#[inline]
fn endpoint_linear_hint_wide(key: Key, lo: Key, hi: u128, capacity: usize) -> usize {
    let lo = u128::from(lo);
    let key = u128::from(key);
    if hi <= lo || key <= lo {
        return 0;
    }
    // (k - lo) < 2^64 and C < 2^32, so the product fits.
    let slot = (capacity as u128 * (key - lo)) / (hi - lo);
    (slot as usize).min(capacity - 1)
}

const MIX_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_CLMUL: u64 = 0xC2B2_AE3D_27D4_EB4F;
const MIX_MUL: u64 = 0xFF51_AFD7_ED55_8CCD;

/// 64-bit mixer: carry-less product folded to 64 bits, then a multiply-xorshift
/// round. The carry-less step alone is GF(2)-linear; the integer multiply
/// supplies the non-linearity needed for avalanche.
#[inline]
pub fn clmul_mix(key: Key) -> u64 {
    let (lo, hi) = clmul64(key ^ MIX_SEED, MIX_CLMUL);
    let mut x = lo ^ hi;
    x ^= x >> 33;
    x = x.wrapping_mul(MIX_MUL);
    x ^= x >> 29;
    x = x.wrapping_mul(MIX_CLMUL);
    x ^ (x >> 32)
}

/// Carry-less 64x64 -> 128 multiply as (low, high) words. Uses PCLMULQDQ when
/// the CPU has it; the portable path computes the identical product.
#[inline]
pub fn clmul64(a: u64, b: u64) -> (u64, u64) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("pclmulqdq") {
            // SAFETY: feature checked at runtime just above.
            return unsafe { clmul64_pclmul(a, b) };
        }
    }
    clmul64_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2")]
unsafe fn clmul64_pclmul(a: u64, b: u64) -> (u64, u64) {
    use std::arch::x86_64::*;
    let va = _mm_set_epi64x(0, a as i64);
    let vb = _mm_set_epi64x(0, b as i64);
    let p = _mm_clmulepi64_si128(va, vb, 0x00);
    let lo = _mm_cvtsi128_si64(p) as u64;
    let hi = _mm_cvtsi128_si64(_mm_unpackhi_epi64(p, p)) as u64;
    (lo, hi)
}

pub fn clmul64_portable(a: u64, b: u64) -> (u64, u64) {
    let mut lo = 0u64;
    let mut hi = 0u64;
    let mut bits = b;
    while bits != 0 {
        let i = bits.trailing_zeros();
        lo ^= a << i;
        if i != 0 {
            hi ^= a >> (64 - i);
        }
        bits &= bits - 1;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand::rngs::StdRng;

    #[test]
    fn mod_examples() {
        assert_eq!(mod_hint(2333, 4), 1);
        assert_eq!(mod_hint(2187, 4), 3);
        assert_eq!(mod_hint(0, 17), 0);
    }

    #[test]
    fn endpoint_examples() {
        assert_eq!(endpoint_linear_hint(2187, 2187, 2586, 4), 0);
        assert_eq!(endpoint_linear_hint(2585, 2187, 2586, 4), 3);
        assert_eq!(endpoint_linear_hint(2300, 2187, 2586, 4), 1);
        // degenerate range
        assert_eq!(endpoint_linear_hint(5, 5, 5, 8), 0);
        // below lo (pivot lowered after creation) clamps to 0
        assert_eq!(endpoint_linear_hint(1, 5, 10, 8), 0);
        // open right end
        let h = HintFn::new(HintKind::EndpointLinear, 0, 1u128 << 64);
        assert_eq!(h.slot(u64::MAX, 256), 255);
    }

    #[test]
    fn clmul_single_slot_and_determinism() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..1000 {
            let k: u64 = rng.gen();
            assert_eq!(clmul_hint(k, 1), 0);
            assert_eq!(clmul_hint(k, 256), clmul_hint(k, 256));
        }
    }

    #[test]
    fn portable_clmul_matches_hardware() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..10_000 {
            let (a, b): (u64, u64) = (rng.gen(), rng.gen());
            assert_eq!(clmul64(a, b), clmul64_portable(a, b));
        }
        assert_eq!(clmul64_portable(0b11, 0b11), (0b101, 0));
        assert_eq!(clmul64_portable(1 << 63, 1 << 1), (0, 1));
    }

    #[test]
    fn clmul_avalanche() {
        let mut rng = StdRng::seed_from_u64(3);
        let trials = 100_000;
        let mut flips = [[0u32; 64]; 64];
        for _ in 0..trials {
            let k: u64 = rng.gen();
            let base = clmul_mix(k);
            for (i, row) in flips.iter_mut().enumerate() {
                let diff = base ^ clmul_mix(k ^ (1 << i));
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell += ((diff >> j) & 1) as u32;
                }
            }
        }
        for (i, row) in flips.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let p = c as f64 / trials as f64;
                assert!((0.45..=0.55).contains(&p), "in {i} -> out {j}: {p}");
            }
        }
    }

    #[test]
    fn clmul_uniformity() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 1_000_000;
        let mut counts = vec![0u32; 256];
        for _ in 0..n {
            counts[clmul_hint(rng.gen(), 256)] += 1;
        }
        let mean = n as f64 / 256.0;
        let max = *counts.iter().max().unwrap() as f64;
        assert!(max <= 1.1 * mean, "max {max} mean {mean}");
    }

    #[test]
    fn parse_kinds() {
        for k in [HintKind::Mod, HintKind::ClMul, HintKind::EndpointLinear, HintKind::Constant] {
            assert_eq!(k.to_string().parse::<HintKind>().unwrap(), k);
        }
        assert!("bogus".parse::<HintKind>().is_err());
    }
}
