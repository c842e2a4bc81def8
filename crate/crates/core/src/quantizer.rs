//! Symmetric, range-based, per-output-channel weight-only quantization.
//!
//! Stored values are in unsigned offset form (`q + 128` for int8, `q + 8` for
//! int4) so the fast dequantize path can OR them straight into an FP16
//! mantissa without any sign extension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::half_float::Half;
use crate::tensor::{ExpertTensor, ExpertWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bits {
    Int4,
    Int8,
}

impl Bits {
    pub fn from_width(width: u32) -> Result<Self> {
        match width {
            4 => Ok(Bits::Int4),
            8 => Ok(Bits::Int8),
            other => Err(Error::Invalid(format!("unsupported quantization width {other}"))),
        }
    }

    #[inline]
    pub fn width(self) -> u32 {
        match self {
            Bits::Int4 => 4,
            Bits::Int8 => 8,
        }
    }

    /// Largest magnitude of a signed quantized value.
    #[inline]
    pub fn qmax(self) -> i32 {
        match self {
            Bits::Int4 => 7,
            Bits::Int8 => 127,
        }
    }

    /// Added to the signed value before storage.
    #[inline]
    pub fn offset(self) -> i32 {
        1 << (self.width() - 1)
    }

    /// Packed bytes needed for `elements` values.
    #[inline]
    pub fn packed_len(self, elements: usize) -> usize {
        elements * self.width() as usize / 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Linear,
    Int4Interleaved,
}

/// Physical nibble slot -> logical element index within a group of 8.
pub const INT4_STORAGE_ORDER: [usize; 8] = [0, 2, 4, 6, 1, 3, 5, 7];

/// Packed expert weights `W+` of logical shape `(E, M, N)` with FP16 scales
/// of shape `(E, 1, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedExpertWeights {
    bits: Bits,
    experts: usize,
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
    scales: Vec<Half>,
    layout: Layout,
}

impl QuantizedExpertWeights {
    /// Reassembles weights from their stored parts, checking every invariant.
    pub fn from_parts(
        bits: Bits,
        (experts, rows, cols): (usize, usize, usize),
        packed: Vec<u8>,
        scales: Vec<Half>,
        layout: Layout,
    ) -> Result<Self> {
        if experts == 0 || rows == 0 || cols == 0 {
            return Err(shape_err("quantized weights need E, M, N >= 1"));
        }
        let expected_layout = match bits {
            Bits::Int4 => Layout::Int4Interleaved,
            Bits::Int8 => Layout::Linear,
        };
        if layout != expected_layout {
            return Err(Error::Invalid(format!("{bits:?} weights cannot use {layout:?} layout")));
        }
        if bits == Bits::Int4 && cols % 8 != 0 {
            return Err(Error::UnalignedInt4(cols));
        }
        let want = bits.packed_len(experts * rows * cols);
        if packed.len() != want {
            return Err(shape_err(format!("packed length {} != {want}", packed.len())));
        }
        if scales.len() != experts * cols {
            return Err(shape_err(format!("{} scales for {experts}x{cols} channels", scales.len())));
        }
        if let Some(i) = scales.iter().position(|s| !s.is_finite() || s.to_f32() <= 0.0) {
            return Err(Error::Invalid(format!("scale {i} is {:?}, must be positive", scales[i])));
        }
        let lo = 1u8;
        let hi = ((1u32 << bits.width()) - 1) as u8;
        let in_range = |v: u8| (lo..=hi).contains(&v);
        let ok = match bits {
            Bits::Int8 => packed.iter().all(|&b| in_range(b)),
            Bits::Int4 => packed.iter().all(|&b| in_range(b & 0x0f) && in_range(b >> 4)),
        };
        if !ok {
            return Err(Error::Invalid("stored weight outside the symmetric offset range".into()));
        }
        Ok(QuantizedExpertWeights { bits, experts, rows, cols, packed, scales, layout })
    }

    #[inline]
    pub fn bits(&self) -> Bits {
        self.bits
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.experts, self.rows, self.cols)
    }

    #[inline]
    pub fn experts(&self) -> usize {
        self.experts
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    #[inline]
    pub fn scales(&self) -> &[Half] {
        &self.scales
    }

    /// Bytes of one expert's packed `(M, N)` slab.
    #[inline]
    pub fn expert_packed_len(&self) -> usize {
        self.bits.packed_len(self.rows * self.cols)
    }

    #[inline]
    pub fn expert_packed(&self, e: usize) -> &[u8] {
        let n = self.expert_packed_len();
        &self.packed[e * n..(e + 1) * n]
    }

    #[inline]
    pub fn expert_scales(&self, e: usize) -> &[Half] {
        &self.scales[e * self.cols..(e + 1) * self.cols]
    }

    /// Packed bytes plus FP16 scale bytes for one expert.
    #[inline]
    pub fn expert_payload_bytes(&self) -> usize {
        self.expert_packed_len() + 2 * self.cols
    }

    /// Packed bytes plus FP16 scale bytes for the whole tensor.
    #[inline]
    pub fn payload_bytes(&self) -> usize {
        self.packed.len() + 2 * self.scales.len()
    }
}

/// Quantizes FP16 expert weights per `(expert, output channel)`.
///
/// `scale = max_m |W[e, m, n]| / qmax` is computed in f32 and stored as FP16;
/// elements are `clamp(round(W / scale), -qmax, qmax)` with ties rounded away
/// from zero, using the stored FP16 scale so dequantization sees the same
/// number. An all-zero channel gets scale 1.0.
pub fn quantize(weights: &ExpertWeights, bits: Bits) -> Result<QuantizedExpertWeights> {
    let (experts, rows, cols) = weights.shape();
    if experts == 0 || rows == 0 || cols == 0 {
        return Err(shape_err("quantize needs E, M, N >= 1"));
    }
    if bits == Bits::Int4 && cols % 8 != 0 {
        return Err(Error::UnalignedInt4(cols));
    }
    if let Some(i) = weights.as_slice().iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFiniteWeight { expert: i / (rows * cols), row: (i / cols) % rows, col: i % cols });
    }

    let per_expert: Vec<(Vec<u8>, Vec<Half>)> = (0..experts)
        .into_par_iter()
        .map(|e| {
            let slab = weights.expert(e);
            let scales: Vec<Half> = (0..cols).map(|n| channel_scale(slab, rows, cols, n, bits)).collect();
            let unsigned: Vec<u8> =
                slab.iter().enumerate().map(|(i, &w)| quantize_value(w, scales[i % cols], bits)).collect();
            let packed = match bits {
                Bits::Int8 => unsigned,
                Bits::Int4 => pack_int4_interleaved(&unsigned).expect("cols is a multiple of 8"),
            };
            (packed, scales)
        })
        .collect();

    let mut packed = Vec::with_capacity(bits.packed_len(experts * rows * cols));
    let mut scales = Vec::with_capacity(experts * cols);
    for (p, s) in per_expert {
        packed.extend_from_slice(&p);
        scales.extend_from_slice(&s);
    }
    let layout = match bits {
        Bits::Int4 => Layout::Int4Interleaved,
        Bits::Int8 => Layout::Linear,
    };
    Ok(QuantizedExpertWeights { bits, experts, rows, cols, packed, scales, layout })
}

fn channel_scale(slab: &[Half], rows: usize, cols: usize, n: usize, bits: Bits) -> Half {
    let max_abs = (0..rows).map(|m| slab[m * cols + n].to_f32().abs()).fold(0.0f32, f32::max);
    if max_abs == 0.0 {
        return Half::ONE;
    }
    let scale = Half::from_f32(max_abs / bits.qmax() as f32);
    // A channel whose range is below the FP16 subnormal floor still needs a
    // positive scale; its elements all clamp to +-qmax or 0.
    if scale.to_f32() == 0.0 {
        Half::MIN_POSITIVE_SUBNORMAL
    } else {
        scale
    }
}

#[inline]
fn quantize_value(w: Half, scale: Half, bits: Bits) -> u8 {
    let qmax = bits.qmax();
    // f32::round rounds half away from zero.
    let q = (w.to_f32() / scale.to_f32()).round().clamp(-qmax as f32, qmax as f32) as i32;
    (q + bits.offset()) as u8
}

/// Packs unsigned 4-bit values, reordering each group of 8 as
/// `[e0, e2, e4, e6, e1, e3, e5, e7]`, two per byte, low nibble first.
pub fn pack_int4_interleaved(elements: &[u8]) -> Result<Vec<u8>> {
    if !elements.len().is_multiple_of(8) {
        return Err(Error::UnalignedInt4(elements.len()));
    }
    if let Some(i) = elements.iter().position(|&v| v > 0x0f) {
        return Err(Error::Invalid(format!("element {i} = {} does not fit in 4 bits", elements[i])));
    }
    let mut out = Vec::with_capacity(elements.len() / 2);
    for group in elements.chunks_exact(8) {
        let stored = INT4_STORAGE_ORDER.map(|i| group[i]);
        for pair in stored.chunks_exact(2) {
            out.push(pair[0] | pair[1] << 4);
        }
    }
    Ok(out)
}

/// Inverse of [`pack_int4_interleaved`].
pub fn unpack_int4_interleaved(packed: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(packed.len() * 2);
    for word in packed.chunks(4) {
        let mut nibbles = [0u8; 8];
        for (slot, &b) in word.iter().enumerate() {
            nibbles[2 * slot] = b & 0x0f;
            nibbles[2 * slot + 1] = b >> 4;
        }
        let mut logical = [0u8; 8];
        for (slot, &i) in INT4_STORAGE_ORDER.iter().enumerate() {
            logical[i] = nibbles[slot];
        }
        out.extend_from_slice(&logical[..word.len() * 2]);
    }
    out
}

/// Logical unsigned values `W+` of one expert, un-reordered and unpacked.
pub fn unpack(qw: &QuantizedExpertWeights, e: usize) -> Result<ExpertTensor<u8>> {
    if e >= qw.experts {
        return Err(Error::IndexOutOfRange { index: e, len: qw.experts });
    }
    let bytes = qw.expert_packed(e);
    let values = match qw.bits {
        Bits::Int8 => bytes.to_vec(),
        Bits::Int4 => unpack_int4_interleaved(bytes),
    };
    ExpertTensor::from_vec(1, qw.rows, qw.cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f32]) -> ExpertWeights {
        // (1, len, 1) is not int4-packable, so int4 tests use 8 channels.
        ExpertWeights::from_f32(1, values.len(), 1, values).unwrap()
    }

    #[test]
    fn int8_column_example() {
        let qw = quantize(&column(&[1.0, -1.0, 0.5]), Bits::Int8).unwrap();
        assert_eq!(qw.scales()[0], Half::from_f32(1.0 / 127.0));
        assert_eq!(qw.packed(), &[255, 1, 192]);
    }

    #[test]
    fn int4_column_example() {
        // Channel 0 holds [0.7, -0.7]; the other seven channels are zero.
        let mut values = vec![0.0f32; 16];
        values[0] = 0.7;
        values[8] = -0.7;
        let w = ExpertWeights::from_f32(1, 2, 8, &values).unwrap();
        let qw = quantize(&w, Bits::Int4).unwrap();
        assert_eq!(qw.scales()[0], Half::from_f32(Half::from_f32(0.7).to_f32() / 7.0));
        assert!((qw.scales()[0].to_f32() - 0.1).abs() < 1e-4);
        let logical = unpack(&qw, 0).unwrap();
        assert_eq!(logical.get(0, 0, 0), 15);
        assert_eq!(logical.get(0, 1, 0), 1);
        assert!(qw.scales()[1..].iter().all(|&s| s == Half::ONE));
    }

    #[test]
    fn all_zero_channels() {
        for bits in [Bits::Int4, Bits::Int8] {
            let w = ExpertWeights::from_f32(2, 3, 8, &[0.0; 48]).unwrap();
            let qw = quantize(&w, bits).unwrap();
            assert!(qw.scales().iter().all(|&s| s == Half::ONE));
            for e in 0..2 {
                let u = unpack(&qw, e).unwrap();
                assert!(u.as_slice().iter().all(|&v| v as i32 == bits.offset()));
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut values = vec![0.5f32; 2 * 3 * 8];
        values[8 * 3 + 8 + 5] = f32::INFINITY; // (1, 1, 5)
        let w = ExpertWeights::from_f32(2, 3, 8, &values).unwrap();
        match quantize(&w, Bits::Int8) {
            Err(Error::NonFiniteWeight { expert: 1, row: 1, col: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn int4_requires_aligned_channels() {
        let w = ExpertWeights::from_f32(1, 2, 6, &[0.1; 12]).unwrap();
        assert!(matches!(quantize(&w, Bits::Int4), Err(Error::UnalignedInt4(6))));
        assert!(quantize(&w, Bits::Int8).is_ok());
    }

    #[test]
    fn interleave_examples() {
        let packed = pack_int4_interleaved(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let nibbles: Vec<u8> = packed.iter().flat_map(|b| [b & 0x0f, b >> 4]).collect();
        assert_eq!(nibbles, [0, 2, 4, 6, 1, 3, 5, 7]);
        assert_eq!(unpack_int4_interleaved(&packed), [0, 1, 2, 3, 4, 5, 6, 7]);

        let packed = pack_int4_interleaved(&[9; 8]).unwrap();
        assert_eq!(packed, [0x99; 4]);

        assert!(matches!(pack_int4_interleaved(&[1; 12]), Err(Error::UnalignedInt4(12))));
        assert!(pack_int4_interleaved(&[16, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn unpack_bounds() {
        let w = ExpertWeights::from_f32(2, 1, 8, &[0.25; 16]).unwrap();
        let qw = quantize(&w, Bits::Int4).unwrap();
        assert!(matches!(unpack(&qw, 2), Err(Error::IndexOutOfRange { index: 2, len: 2 })));
    }

    #[test]
    fn from_parts_validates() {
        let ok = QuantizedExpertWeights::from_parts(
            Bits::Int8,
            (1, 1, 3),
            vec![255, 1, 192],
            vec![Half::ONE; 3],
            Layout::Linear,
        );
        assert!(ok.is_ok());
        let zero_byte = QuantizedExpertWeights::from_parts(
            Bits::Int8,
            (1, 1, 3),
            vec![0, 1, 192],
            vec![Half::ONE; 3],
            Layout::Linear,
        );
        assert!(zero_byte.is_err());
        let bad_scale = QuantizedExpertWeights::from_parts(
            Bits::Int8,
            (1, 1, 3),
            vec![1, 1, 1],
            vec![Half::ONE, Half::ZERO, Half::ONE],
            Layout::Linear,
        );
        assert!(bad_scale.is_err());
        let wrong_layout = QuantizedExpertWeights::from_parts(
            Bits::Int4,
            (1, 1, 8),
            vec![0x88; 4],
            vec![Half::ONE; 8],
            Layout::Linear,
        );
        assert!(wrong_layout.is_err());
    }
}
