//! Carry-less multiplication primitives.
//!
//! On x86_64 the `pclmulqdq` instruction is used when the CPU advertises it;
//! everywhere else a 4-bit windowed software multiply is used. Both produce
//! identical results and are cross-checked in the tests below.

#[inline]
pub(crate) fn clmul64(a: u64, b: u64) -> u128 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("pclmulqdq") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { clmul64_pclmul(a, b) };
        }
    }
    clmul64_soft(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2")]
unsafe fn clmul64_pclmul(a: u64, b: u64) -> u128 {
    use std::arch::x86_64::{__m128i, _mm_clmulepi64_si128, _mm_set_epi64x, _mm_storeu_si128};
    let x = _mm_set_epi64x(0, a as i64);
    let y = _mm_set_epi64x(0, b as i64);
    let r = _mm_clmulepi64_si128(x, y, 0x00);
    let mut out = 0u128;
    _mm_storeu_si128(&mut out as *mut u128 as *mut __m128i, r);
    out
}

pub(crate) fn clmul64_soft(a: u64, b: u64) -> u128 {
    let a = a as u128;
    let mut table = [0u128; 16];
    for i in 1..16 {
        table[i] = (table[i >> 1] << 1) ^ if i & 1 == 1 { a } else { 0 };
    }
    let mut acc = 0u128;
    for nibble in (0..16).rev() {
        acc = (acc << 4) ^ table[((b >> (4 * nibble)) & 0xF) as usize];
    }
    acc
}

/// Full 256-bit carry-less product of two 128-bit operands, as `(hi, lo)`.
#[inline]
pub(crate) fn clmul128(a: u128, b: u128) -> (u128, u128) {
    let (a0, a1) = (a as u64, (a >> 64) as u64);
    let (b0, b1) = (b as u64, (b >> 64) as u64);
    let low = clmul64(a0, b0);
    let high = clmul64(a1, b1);
    let mid = clmul64(a0, b1) ^ clmul64(a1, b0);
    (high ^ (mid >> 64), low ^ (mid << 64))
}

/// Carry-less product of two little-endian limb vectors. `out` must hold
/// `a.len() + b.len()` limbs and is overwritten.
pub(crate) fn clmul_limbs(a: &[u64], b: &[u64], out: &mut [u64]) {
    debug_assert!(out.len() >= a.len() + b.len());
    out.iter_mut().for_each(|w| *w = 0);
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            let p = clmul64(x, y);
            out[i + j] ^= p as u64;
            out[i + j + 1] ^= (p >> 64) as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clmul64_bitwise(a: u64, b: u64) -> u128 {
        let mut acc = 0u128;
        for i in 0..64 {
            if (b >> i) & 1 == 1 {
                acc ^= (a as u128) << i;
            }
        }
        acc
    }

    #[test]
    fn small_products() {
        // (x + 1)^2 = x^2 + 1 over GF(2)
        assert_eq!(clmul64(0b11, 0b11), 0b101);
        assert_eq!(clmul64_soft(0b11, 0b11), 0b101);
        assert_eq!(clmul64(u64::MAX, 1), u64::MAX as u128);
        assert_eq!(clmul64(1 << 63, 1 << 63), 1u128 << 126);
    }

    proptest! {
        #[test]
        fn soft_and_hardware_agree(a: u64, b: u64) {
            let expected = clmul64_bitwise(a, b);
            prop_assert_eq!(clmul64_soft(a, b), expected);
            prop_assert_eq!(clmul64(a, b), expected);
        }

        #[test]
        fn limbs_match_u128(a: u128, b: u128) {
            let (hi, lo) = clmul128(a, b);
            let mut out = [0u64; 4];
            clmul_limbs(&[a as u64, (a >> 64) as u64], &[b as u64, (b >> 64) as u64], &mut out);
            prop_assert_eq!(out[0] as u128 | (out[1] as u128) << 64, lo);
            prop_assert_eq!(out[2] as u128 | (out[3] as u128) << 64, hi);
        }
    }
}
