//! Arithmetic in binary extension fields GF(2^n).
//!
//! A [`FieldSpec`] fixes the width `n` and the reduction polynomial; a
//! [`FieldElement`] is an `n`-bit value tied to one spec. Bit `i` of the stored
//! value is the coefficient of `x^i`, and byte encodings are little-endian in
//! that order (byte 0 holds the coefficients of `x^0..x^7`).
//!
//! Widths up to 128 bits run on a packed `u128` path; wider fields (up to
//! 1024 bits) use a limb-vector path with the same reduction strategy.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use smallvec::SmallVec;
use thiserror::Error;

use crate::clmul::{clmul128, clmul_limbs};

/// Largest supported field width.
pub const MAX_BITS: u32 = 1024;

/// Widths at or below this are checked for irreducibility by trial division.
const EXHAUSTIVE_CHECK_MAX_BITS: u32 = 16;

pub(crate) type Limbs = SmallVec<[u64; 2]>;

/// Low-weight irreducible polynomials accepted without an exhaustive check.
/// Each entry is `(n, tail)` where the polynomial is `x^n + tail(x)`.
const KNOWN_IRREDUCIBLE: &[(u32, u64)] = &[
    (8, 0x1b),    // x^8 + x^4 + x^3 + x + 1
    (16, 0x2b),   // x^16 + x^5 + x^3 + x + 1
    (32, 0x8d),   // x^32 + x^7 + x^3 + x^2 + 1
    (64, 0x1b),   // x^64 + x^4 + x^3 + x + 1
    (128, 0x87),  // x^128 + x^7 + x^2 + x + 1
    (192, 0x87),  // x^192 + x^7 + x^2 + x + 1
    (256, 0x425), // x^256 + x^10 + x^5 + x^2 + 1
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("field width {0} is outside 1..={MAX_BITS}")]
    InvalidWidth(u32),
    #[error("reduction polynomial tail has terms at or above x^{0}")]
    TailTooWide(u32),
    #[error("reduction polynomial {0} is reducible")]
    Reducible(String),
    #[error("reduction polynomial {0} is not on the known irreducible list")]
    Unverified(String),
    #[error("no standard reduction polynomial for width {0}")]
    NoStandardPolynomial(u32),
    #[error("operands belong to different fields")]
    FieldMismatch,
    #[error("zero has no multiplicative inverse")]
    NonInvertible,
    #[error("element encoding is {got} bytes, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("element encoding has bits set at or above x^{0}")]
    NonCanonical(u32),
}

/// Width and reduction polynomial of a binary field.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FieldSpec {
    bits: u32,
    /// Reduction polynomial without its leading `x^bits` term.
    tail: Limbs,
}

impl FieldSpec {
    /// Builds a field from its width and the polynomial tail (little-endian
    /// limbs, leading term implied). Irreducibility is verified by trial
    /// division for `bits <= 16`; wider polynomials must be on the known list.
    pub fn new(bits: u32, tail: &[u64]) -> Result<Arc<Self>, FieldError> {
        if bits == 0 || bits > MAX_BITS {
            return Err(FieldError::InvalidWidth(bits));
        }
        let limbs = limb_len(bits);
        if tail.iter().skip(limbs).any(|&w| w != 0) {
            return Err(FieldError::TailTooWide(bits));
        }
        let mut padded: Limbs = SmallVec::from_elem(0, limbs);
        for (dst, src) in padded.iter_mut().zip(tail) {
            *dst = *src;
        }
        if padded[limbs - 1] & !top_mask(bits) != 0 {
            return Err(FieldError::TailTooWide(bits));
        }
        let spec = FieldSpec { bits, tail: padded };
        if bits <= EXHAUSTIVE_CHECK_MAX_BITS {
            if !is_irreducible_small(bits, spec.tail[0] as u32) {
                return Err(FieldError::Reducible(spec.polynomial_string()));
            }
        } else {
            let known = KNOWN_IRREDUCIBLE
                .iter()
                .any(|&(n, t)| n == bits && spec.tail[0] == t && spec.tail[1..].iter().all(|&w| w == 0));
            if !known {
                return Err(FieldError::Unverified(spec.polynomial_string()));
            }
        }
        Ok(Arc::new(spec))
    }

    /// The field of the given width with its standard low-weight polynomial.
    pub fn standard(bits: u32) -> Result<Arc<Self>, FieldError> {
        KNOWN_IRREDUCIBLE
            .iter()
            .find(|&&(n, _)| n == bits)
            .ok_or(FieldError::NoStandardPolynomial(bits))
            .and_then(|&(n, t)| Self::new(n, &[t]))
    }

    /// GF(2^8) modulo x^8 + x^4 + x^3 + x + 1.
    pub fn gf2_8() -> Arc<Self> {
        Self::standard(8).expect("GF(2^8) polynomial is irreducible")
    }

    /// GF(2^128) modulo x^128 + x^7 + x^2 + x + 1.
    pub fn gf2_128() -> Arc<Self> {
        Self::standard(128).expect("GF(2^128) polynomial is on the known list")
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Bytes in the canonical encoding of one element.
    pub fn byte_len(&self) -> usize {
        self.bits.div_ceil(8) as usize
    }

    pub fn limb_len(&self) -> usize {
        self.tail.len()
    }

    pub fn tail(&self) -> &[u64] {
        &self.tail
    }

    /// Polynomial tail in the same little-endian byte order as elements.
    pub fn tail_bytes(&self) -> Vec<u8> {
        limbs_to_bytes(&self.tail, self.byte_len())
    }

    pub fn from_tail_bytes(bits: u32, bytes: &[u8]) -> Result<Arc<Self>, FieldError> {
        if bits == 0 || bits > MAX_BITS {
            return Err(FieldError::InvalidWidth(bits));
        }
        let expected = bits.div_ceil(8) as usize;
        if bytes.len() != expected {
            return Err(FieldError::BadLength { expected, got: bytes.len() });
        }
        Self::new(bits, &bytes_to_limbs(bytes, limb_len(bits)))
    }

    /// Human-readable polynomial, highest term first.
    pub fn polynomial_string(&self) -> String {
        let mut terms = vec![format!("x^{}", self.bits)];
        for i in (0..self.bits).rev() {
            if (self.tail[(i / 64) as usize] >> (i % 64)) & 1 == 1 {
                terms.push(match i {
                    0 => "1".to_string(),
                    1 => "x".to_string(),
                    _ => format!("x^{i}"),
                });
            }
        }
        terms.join(" + ")
    }

    pub fn zero(self: &Arc<Self>) -> FieldElement {
        FieldElement { spec: Arc::clone(self), limbs: SmallVec::from_elem(0, self.limb_len()) }
    }

    pub fn one(self: &Arc<Self>) -> FieldElement {
        let mut e = self.zero();
        e.limbs[0] = 1;
        e
    }

    /// Element from an integer whose bit `i` is the coefficient of `x^i`.
    pub fn element(self: &Arc<Self>, value: u128) -> Result<FieldElement, FieldError> {
        let mut limbs: Limbs = SmallVec::from_elem(0, self.limb_len());
        limbs[0] = value as u64;
        if limbs.len() > 1 {
            limbs[1] = (value >> 64) as u64;
        } else if value >> 64 != 0 {
            return Err(FieldError::NonCanonical(self.bits));
        }
        self.from_limbs(limbs)
    }

    /// Decodes the canonical little-endian encoding.
    pub fn element_from_bytes(self: &Arc<Self>, bytes: &[u8]) -> Result<FieldElement, FieldError> {
        let expected = self.byte_len();
        if bytes.len() != expected {
            return Err(FieldError::BadLength { expected, got: bytes.len() });
        }
        self.from_limbs(bytes_to_limbs(bytes, self.limb_len()))
    }

    fn from_limbs(self: &Arc<Self>, limbs: Limbs) -> Result<FieldElement, FieldError> {
        let last = limbs.len() - 1;
        if limbs[last] & !top_mask(self.bits) != 0 {
            return Err(FieldError::NonCanonical(self.bits));
        }
        Ok(FieldElement { spec: Arc::clone(self), limbs })
    }

    fn mul_limbs(&self, a: &[u64], b: &[u64]) -> Limbs {
        if self.bits <= 128 {
            let r = reduce_u128(clmul128(pack(a), pack(b)), self.bits, pack(&self.tail));
            unpack(r, self.limb_len())
        } else {
            mul_generic(a, b, self.bits, &self.tail)
        }
    }
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GF(2^{}) mod {}", self.bits, self.polynomial_string())
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// An element of GF(2^n). Immutable; cheap to clone.
#[derive(Clone)]
pub struct FieldElement {
    spec: Arc<FieldSpec>,
    limbs: Limbs,
}

impl FieldElement {
    pub fn spec(&self) -> &Arc<FieldSpec> {
        &self.spec
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|&w| w == 0)
    }

    pub fn is_one(&self) -> bool {
        self.limbs[0] == 1 && self.limbs[1..].iter().all(|&w| w == 0)
    }

    /// Value as an integer, when the field is at most 128 bits wide.
    pub fn to_u128(&self) -> Option<u128> {
        (self.spec.bits <= 128).then(|| pack(&self.limbs))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        limbs_to_bytes(&self.limbs, self.spec.byte_len())
    }

    /// Writes the canonical encoding into `out`, which must be `byte_len` long.
    pub fn write_bytes(&self, out: &mut [u8]) {
        debug_assert_eq!(out.len(), self.spec.byte_len());
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = (self.limbs[i / 8] >> (8 * (i % 8))) as u8;
        }
    }

    pub fn bit(&self, i: u32) -> bool {
        i < self.spec.bits && (self.limbs[(i / 64) as usize] >> (i % 64)) & 1 == 1
    }

    /// Copy with the coefficient of `x^i` flipped.
    pub fn with_bit_flipped(&self, i: u32) -> FieldElement {
        assert!(i < self.spec.bits, "bit {i} outside a {}-bit field", self.spec.bits);
        let mut out = self.clone();
        out.limbs[(i / 64) as usize] ^= 1 << (i % 64);
        out
    }

    fn check_same_field(&self, other: &FieldElement) -> Result<(), FieldError> {
        if Arc::ptr_eq(&self.spec, &other.spec) || self.spec == other.spec {
            Ok(())
        } else {
            Err(FieldError::FieldMismatch)
        }
    }

    /// Field addition, which is bitwise XOR.
    pub fn add(&self, other: &FieldElement) -> Result<FieldElement, FieldError> {
        self.check_same_field(other)?;
        let limbs = self.limbs.iter().zip(&other.limbs).map(|(a, b)| a ^ b).collect();
        Ok(FieldElement { spec: Arc::clone(&self.spec), limbs })
    }

    /// Carry-less product reduced modulo the field polynomial.
    pub fn mul(&self, other: &FieldElement) -> Result<FieldElement, FieldError> {
        self.check_same_field(other)?;
        Ok(self.mul_same_field(other))
    }

    pub(crate) fn mul_same_field(&self, other: &FieldElement) -> FieldElement {
        FieldElement { spec: Arc::clone(&self.spec), limbs: self.spec.mul_limbs(&self.limbs, &other.limbs) }
    }

    pub fn square(&self) -> FieldElement {
        self.mul_same_field(self)
    }

    /// Multiplicative inverse, computed as `a^(2^n - 2)`.
    pub fn inv(&self) -> Result<FieldElement, FieldError> {
        if self.is_zero() {
            return Err(FieldError::NonInvertible);
        }
        // a^(2^n - 2) = a^2 * a^4 * ... * a^(2^(n-1))
        let mut power = self.clone();
        let mut acc = self.spec.one();
        for _ in 1..self.spec.bits {
            power = power.square();
            acc = acc.mul_same_field(&power);
        }
        Ok(acc)
    }
}

impl PartialEq for FieldElement {
    fn eq(&self, other: &Self) -> bool {
        self.check_same_field(other).is_ok() && self.limbs == other.limbs
    }
}

impl Eq for FieldElement {}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldElement({self})")
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digits = self.spec.bits.div_ceil(4) as usize;
        let mut hex = String::with_capacity(digits + 2);
        hex.push_str("0x");
        for i in (0..digits).rev() {
            let nibble = (self.limbs[i / 16] >> (4 * (i % 16))) & 0xf;
            hex.push(char::from_digit(nibble as u32, 16).unwrap());
        }
        f.write_str(&hex)
    }
}

/// Draws a uniform element, or a uniform nonzero element when `nonzero` is
/// set (zero draws are rejected and resampled).
pub fn random_element<R: RngCore + ?Sized>(
    rng: &mut R,
    spec: &Arc<FieldSpec>,
    nonzero: bool,
) -> FieldElement {
    let mut buf: SmallVec<[u8; 16]> = SmallVec::from_elem(0, spec.byte_len());
    loop {
        rng.fill_bytes(&mut buf);
        let mut limbs = bytes_to_limbs(&buf, spec.limb_len());
        let last = limbs.len() - 1;
        limbs[last] &= top_mask(spec.bits);
        let e = FieldElement { spec: Arc::clone(spec), limbs };
        if !nonzero || !e.is_zero() {
            return e;
        }
    }
}

/// Inverts every element with one field inversion and three multiplications
/// per element (Montgomery's trick). Fails if any element is zero or the
/// elements do not share a field.
pub fn batch_invert(elements: &[FieldElement]) -> Result<Vec<FieldElement>, FieldError> {
    let Some(first) = elements.first() else {
        return Ok(Vec::new());
    };
    let mut prefix = Vec::with_capacity(elements.len());
    let mut acc = first.spec.one();
    for e in elements {
        e.check_same_field(first)?;
        if e.is_zero() {
            return Err(FieldError::NonInvertible);
        }
        prefix.push(acc.clone());
        acc = acc.mul_same_field(e);
    }
    let mut inv_acc = acc.inv()?;
    let mut out = vec![first.spec.zero(); elements.len()];
    for i in (0..elements.len()).rev() {
        out[i] = inv_acc.mul_same_field(&prefix[i]);
        inv_acc = inv_acc.mul_same_field(&elements[i]);
    }
    Ok(out)
}

fn limb_len(bits: u32) -> usize {
    bits.div_ceil(64) as usize
}

fn top_mask(bits: u32) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn pack(limbs: &[u64]) -> u128 {
    limbs[0] as u128 | limbs.get(1).map_or(0, |&w| (w as u128) << 64)
}

fn unpack(v: u128, limbs: usize) -> Limbs {
    let mut out: Limbs = SmallVec::from_elem(0, limbs);
    out[0] = v as u64;
    if limbs > 1 {
        out[1] = (v >> 64) as u64;
    }
    out
}

fn bytes_to_limbs(bytes: &[u8], limbs: usize) -> Limbs {
    let mut out: Limbs = SmallVec::from_elem(0, limbs);
    for (i, &b) in bytes.iter().enumerate() {
        out[i / 8] |= (b as u64) << (8 * (i % 8));
    }
    out
}

fn limbs_to_bytes(limbs: &[u64], len: usize) -> Vec<u8> {
    (0..len).map(|i| (limbs[i / 8] >> (8 * (i % 8))) as u8).collect()
}

/// Reduces a 256-bit product `(hi, lo)` of degree < 2n - 1 modulo
/// `x^n + tail` for `n <= 128`. Each fold replaces the part above `x^n` by
/// its product with the tail, lowering the degree by at least `n - deg(tail)`.
fn reduce_u128((mut hi, mut lo): (u128, u128), n: u32, tail: u128) -> u128 {
    loop {
        let (quotient, rem) =
            if n == 128 { (hi, lo) } else { ((lo >> n) | (hi << (128 - n)), lo & ((1u128 << n) - 1)) };
        if quotient == 0 {
            return rem;
        }
        let (h, l) = clmul128(quotient, tail);
        hi = h;
        lo = rem ^ l;
    }
}

fn mul_generic(a: &[u64], b: &[u64], n: u32, tail: &[u64]) -> Limbs {
    let limbs = a.len();
    let mut product = vec![0u64; 2 * limbs];
    clmul_limbs(a, b, &mut product);
    let mut scratch = vec![0u64; 2 * limbs];
    loop {
        let quotient = shr_bits(&product, n);
        if quotient.iter().all(|&w| w == 0) {
            break;
        }
        clmul_limbs(&quotient[..limbs], tail, &mut scratch);
        truncate_bits(&mut product, n);
        product.iter_mut().zip(&scratch).for_each(|(p, s)| *p ^= s);
    }
    product.truncate(limbs);
    product.into_iter().collect()
}

fn shr_bits(v: &[u64], shift: u32) -> Vec<u64> {
    let (words, bits) = ((shift / 64) as usize, shift % 64);
    (0..v.len())
        .map(|i| {
            let lo = v.get(i + words).copied().unwrap_or(0);
            let hi = v.get(i + words + 1).copied().unwrap_or(0);
            if bits == 0 {
                lo
            } else {
                (lo >> bits) | (hi << (64 - bits))
            }
        })
        .collect()
}

fn truncate_bits(v: &mut [u64], n: u32) {
    let full = (n / 64) as usize;
    for (i, w) in v.iter_mut().enumerate() {
        if i == full {
            *w &= (1u64 << (n % 64)).wrapping_sub(1);
        } else if i > full {
            *w = 0;
        }
    }
}

/// Trial division by every polynomial of degree 1..=n/2.
fn is_irreducible_small(bits: u32, tail: u32) -> bool {
    let f = (1u32 << bits) | tail;
    for degree in 1..=bits / 2 {
        for g in (1u32 << degree)..(1u32 << (degree + 1)) {
            if poly_mod_u32(f, g) == 0 {
                return false;
            }
        }
    }
    true
}

fn poly_mod_u32(mut a: u32, b: u32) -> u32 {
    let db = 31 - b.leading_zeros();
    while a != 0 && 31 - a.leading_zeros() >= db {
        a ^= b << (31 - a.leading_zeros() - db);
    }
    a
}
