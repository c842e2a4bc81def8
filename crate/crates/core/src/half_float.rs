//! Software IEEE binary16.
//!
//! Arithmetic is carried out by widening to `f32`, operating there, and
//! narrowing once with round-to-nearest-even. For `+ - * /` this is exactly
//! the correctly rounded binary16 result: binary32 carries 24 significand
//! bits, which is at least `2 * 11 + 2`, so the intermediate rounding can
//! never produce a double-rounding error.
//!
//! The bit-composition helpers at the bottom (`compose_magic`, the paired
//! `half2_*` lane operations) are what the fast dequantize paths are built
//! from.

use std::fmt;

/// A 16-bit IEEE binary16 bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Half(u16);

/// FP16 encoding of 1024.0: exponent field set so the 10 mantissa bits count
/// units of 1.0.
pub const MAGIC_1024: u16 = 0x6400;

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3c00);
    pub const INFINITY: Half = Half(0x7c00);
    pub const NEG_INFINITY: Half = Half(0xfc00);
    /// Canonical quiet NaN produced by every conversion.
    pub const NAN: Half = Half(0x7e00);
    pub const MAX: Half = Half(0x7bff);
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Self {
        f32_to_half(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        half_to_f32(self)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & 0x7c00 == 0x7c00 && self.0 & 0x03ff != 0
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & 0x7c00 != 0x7c00
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }

    #[inline]
    pub fn abs(self) -> Self {
        Half(self.0 & 0x7fff)
    }
}

impl std::ops::Neg for Half {
    type Output = Half;

    #[inline]
    fn neg(self) -> Half {
        Half(self.0 ^ 0x8000)
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        h.to_f32()
    }
}

/// Narrow an `f32` to binary16, round-to-nearest-even, with gradual
/// underflow. Overflow saturates to infinity; NaN becomes [`Half::NAN`].
pub fn f32_to_half(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        return if man != 0 { Half::NAN } else { Half(sign | 0x7c00) };
    }

    let e = exp - 127;
    if e > 15 {
        return Half(sign | 0x7c00);
    }

    if e >= -14 {
        let kept = man >> 13;
        let rem = man & 0x1fff;
        let round_up = rem > 0x1000 || (rem == 0x1000 && kept & 1 == 1);
        // A mantissa carry rolls into the exponent; from 0x7bff it lands on
        // infinity, which is the correct overflow result.
        let out = (((e + 15) as u32) << 10) + kept + round_up as u32;
        return Half(sign | out as u16);
    }

    // Below the binary16 normal range. f32 subnormals (exp == 0) are far
    // below 2^-25 and round to zero.
    if e < -25 || exp == 0 {
        return Half(sign);
    }
    let full = man | 0x0080_0000;
    // value / 2^-24 == full * 2^(e + 1), with e + 1 in [-24, -14].
    let shift = (-(e + 1)) as u32;
    let kept = full >> shift;
    let rem = full & ((1 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    let round_up = rem > halfway || (rem == halfway && kept & 1 == 1);
    Half(sign | (kept + round_up as u32) as u16)
}

/// Exact widening of binary16 to binary32.
pub fn half_to_f32(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1f;
    let man = bits & 0x03ff;

    match exp {
        0x1f if man != 0 => f32::from_bits(sign | 0x7fc0_0000),
        0x1f => f32::from_bits(sign | 0x7f80_0000),
        0 if man == 0 => f32::from_bits(sign),
        0 => {
            // man * 2^-24; both factors and the product are exact in f32.
            let mag = man as f32 * f32::from_bits(0x3380_0000);
            if sign != 0 {
                -mag
            } else {
                mag
            }
        }
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

/// Returns the FP16 value `y + 1024` by OR-ing `y` into the mantissa of 1024.
///
/// Panics if `y >= 1024`.
#[inline]
pub fn compose_magic(y: u16) -> Half {
    assert!(y < 1024, "compose_magic: {y} does not fit the 10-bit mantissa");
    Half(MAGIC_1024 | y)
}

#[inline]
pub fn half_add(a: Half, b: Half) -> Half {
    f32_to_half(a.to_f32() + b.to_f32())
}

#[inline]
pub fn half_sub(a: Half, b: Half) -> Half {
    f32_to_half(a.to_f32() - b.to_f32())
}

#[inline]
pub fn half_mul(a: Half, b: Half) -> Half {
    f32_to_half(a.to_f32() * b.to_f32())
}

/// Two FP16 lanes in one 32-bit word: lane 0 in the low half.
#[inline]
pub fn half2_from_lanes(lo: Half, hi: Half) -> u32 {
    lo.0 as u32 | (hi.0 as u32) << 16
}

#[inline]
pub fn half2_lanes(word: u32) -> [Half; 2] {
    [Half(word as u16), Half((word >> 16) as u16)]
}

/// Lane-wise FP16 subtraction of two packed pairs.
#[inline]
pub fn half2_sub(a: u32, b: u32) -> u32 {
    let [a0, a1] = half2_lanes(a);
    let [b0, b1] = half2_lanes(b);
    half2_from_lanes(half_sub(a0, b0), half_sub(a1, b1))
}
