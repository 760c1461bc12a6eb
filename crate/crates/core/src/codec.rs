//! The s-level stochastic quantizer and its wire encoding.
//!
//! Each entry of `v` is mapped to `||v|| * sgn(v_i) * level_i / s` where
//! `level_i` is `h` or `h + 1` for `h = min(floor(|v_i| s / ||v||), s - 1)`,
//! rounded up with probability `|v_i| s / ||v|| - h`. The result is an
//! unbiased estimate of `v`.
//!
//! Wire layout (all little-endian):
//!
//! ```text
//! d: u32 | s: u32 | norm: f64 | d fields of b bits, MSB-first, zero padded
//! field = sign bit (1 = negative) followed by a (b-1)-bit level
//! ```

use thiserror::Error;

use crate::rng::Stream;

/// Bytes before the packed fields: `d`, `s`, `norm`.
pub const PAYLOAD_HEADER_LEN: usize = 16;
/// Widest supported field.
pub const MAX_BITS: u32 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bits per entry must be in 2..={MAX_BITS}, got {0}")]
    InvalidBits(u32),
    #[error("invalid level count s = {0}")]
    InvalidLevelCount(u32),
    #[error("input vector has a non-finite entry or norm")]
    NonFinite,
    #[error("entry {index}: level {level} does not fit in {bits} bits")]
    LevelOverflow { index: usize, level: u32, bits: u32 },
    #[error("level count {s} needs more than {bits} bits per entry")]
    LevelCountTooLarge { s: u32, bits: u32 },
    #[error("malformed quantized vector: {0}")]
    Invalid(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("oversized payload: expected {expected} bytes, got {got}")]
    Oversized { expected: usize, got: usize },
    #[error("non-zero padding bits")]
    NonZeroPadding,
    #[error("non-canonical field at entry {0}")]
    NonCanonical(usize),
    #[error("vector length {0} does not fit the u32 length field")]
    TooLong(usize),
}

/// A quantized vector: norm, per-entry sign in {-1, 0, 1} and level in `[0, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub norm: f64,
    pub signs: Vec<i8>,
    pub levels: Vec<u32>,
    pub s: u32,
}

impl QuantizedVector {
    pub fn zero(d: usize, s: u32) -> Self {
        QuantizedVector {
            norm: 0.0,
            signs: vec![0; d],
            levels: vec![0; d],
            s,
        }
    }

    pub fn d(&self) -> usize {
        self.signs.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.s == 0 {
            return Err(CodecError::InvalidLevelCount(0));
        }
        if self.levels.len() != self.signs.len() {
            return Err(CodecError::Invalid(format!(
                "{} signs but {} levels",
                self.signs.len(),
                self.levels.len()
            )));
        }
        if !(self.norm.is_finite() && self.norm >= 0.0) {
            return Err(CodecError::Invalid(format!(
                "norm {} is not finite and non-negative",
                self.norm
            )));
        }
        for (i, (&sign, &level)) in self.signs.iter().zip(&self.levels).enumerate() {
            if !(-1..=1).contains(&sign) {
                return Err(CodecError::Invalid(format!("entry {i}: sign {sign}")));
            }
            if level > self.s {
                return Err(CodecError::Invalid(format!(
                    "entry {i}: level {level} > s = {}",
                    self.s
                )));
            }
            if sign == 0 && level != 0 {
                return Err(CodecError::Invalid(format!(
                    "entry {i}: zero sign with level {level}"
                )));
            }
            if self.norm == 0.0 && level != 0 {
                return Err(CodecError::Invalid(format!(
                    "entry {i}: zero norm with level {level}"
                )));
            }
        }
        Ok(())
    }
}

/// `s = 2^(b-1) - 1`: one sign bit plus `b - 1` magnitude bits.
pub fn levels_for_bits(bits: u32) -> Result<u32, CodecError> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(CodecError::InvalidBits(bits));
    }
    Ok(((1u64 << (bits - 1)) - 1) as u32)
}

/// Stochastically quantizes `v` to `s` levels, consuming one uniform draw
/// per entry in index order (none for the zero vector).
pub fn quantize(v: &[f64], s: u32, rng: &mut Stream) -> Result<QuantizedVector, CodecError> {
    if s == 0 {
        return Err(CodecError::InvalidLevelCount(0));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(CodecError::NonFinite);
    }
    let norm = crate::planted::norm(v);
    if !norm.is_finite() {
        return Err(CodecError::NonFinite);
    }
    if norm == 0.0 {
        return Ok(QuantizedVector::zero(v.len(), s));
    }
    let s_f = f64::from(s);
    let mut signs = Vec::with_capacity(v.len());
    let mut levels = Vec::with_capacity(v.len());
    for &x in v {
        let r = (x.abs() * s_f / norm).min(s_f);
        let h = r.floor().min(s_f - 1.0);
        let up = rng.uniform() < r - h;
        let level = h as u32 + u32::from(up);
        let sign = if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        };
        signs.push(if level == 0 { 0 } else { sign });
        levels.push(level);
    }
    Ok(QuantizedVector {
        norm,
        signs,
        levels,
        s,
    })
}

/// `norm * sign_i * level_i / s` for each entry.
pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    let s = f64::from(q.s);
    q.signs
        .iter()
        .zip(&q.levels)
        .map(|(&sign, &level)| {
            let magnitude = q.norm * f64::from(level) / s;
            match sign {
                1 => magnitude,
                -1 => -magnitude,
                _ => 0.0,
            }
        })
        .collect()
}

/// `min(d / s^2, sqrt(d) / s)`, the variance inflation of the quantizer.
pub fn variance_factor(d: usize, s: u32) -> f64 {
    let d = d as f64;
    let s = f64::from(s);
    (d / (s * s)).min(d.sqrt() / s)
}

/// Encoded size of a `d`-entry vector at `bits` per entry.
pub fn encoded_len(d: usize, bits: u32) -> usize {
    PAYLOAD_HEADER_LEN + (d * bits as usize).div_ceil(8)
}

pub fn encode(q: &QuantizedVector, bits: u32) -> Result<Vec<u8>, CodecError> {
    let max_level = levels_for_bits(bits)?;
    q.validate()?;
    if q.s > max_level {
        return Err(CodecError::LevelCountTooLarge { s: q.s, bits });
    }
    let d = u32::try_from(q.d()).map_err(|_| CodecError::TooLong(q.d()))?;
    let mut out = Vec::with_capacity(encoded_len(q.d(), bits));
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&q.s.to_le_bytes());
    out.extend_from_slice(&q.norm.to_le_bytes());

    let mut acc: u64 = 0;
    let mut pending: u32 = 0;
    for (i, (&sign, &level)) in q.signs.iter().zip(&q.levels).enumerate() {
        if level > max_level {
            return Err(CodecError::LevelOverflow {
                index: i,
                level,
                bits,
            });
        }
        let sign_bit = u64::from(sign < 0);
        let field = (sign_bit << (bits - 1)) | u64::from(level);
        acc = (acc << bits) | field;
        pending += bits;
        while pending >= 8 {
            pending -= 8;
            out.push((acc >> pending) as u8);
        }
        acc &= (1u64 << pending) - 1;
    }
    if pending > 0 {
        out.push((acc << (8 - pending)) as u8);
    }
    Ok(out)
}

/// Exact inverse of [`encode`] for the same `bits`.
pub fn decode(bytes: &[u8], bits: u32) -> Result<QuantizedVector, CodecError> {
    let max_level = levels_for_bits(bits)?;
    if bytes.len() < PAYLOAD_HEADER_LEN {
        return Err(CodecError::Truncated {
            expected: PAYLOAD_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let s = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let norm = f64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = encoded_len(d, bits);
    if bytes.len() < expected {
        return Err(CodecError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CodecError::Oversized {
            expected,
            got: bytes.len(),
        });
    }
    if s == 0 {
        return Err(CodecError::InvalidLevelCount(0));
    }
    if s > max_level {
        return Err(CodecError::LevelCountTooLarge { s, bits });
    }

    let packed = &bytes[PAYLOAD_HEADER_LEN..];
    let mut signs = Vec::with_capacity(d);
    let mut levels = Vec::with_capacity(d);
    let level_mask = (1u64 << (bits - 1)) - 1;
    let mut acc: u64 = 0;
    let mut available: u32 = 0;
    let mut next = packed.iter();
    for i in 0..d {
        while available < bits {
            acc = (acc << 8) | u64::from(*next.next().expect("length checked above"));
            available += 8;
        }
        available -= bits;
        let field = acc >> available;
        acc &= (1u64 << available) - 1;
        let negative = (field >> (bits - 1)) & 1 == 1;
        let level = (field & level_mask) as u32;
        if level == 0 && negative {
            return Err(CodecError::NonCanonical(i));
        }
        let sign = match (level, negative) {
            (0, _) => 0,
            (_, true) => -1,
            (_, false) => 1,
        };
        signs.push(sign);
        levels.push(level);
    }
    if acc != 0 {
        return Err(CodecError::NonZeroPadding);
    }
    let q = QuantizedVector {
        norm,
        signs,
        levels,
        s,
    };
    q.validate()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use proptest::prelude::*;

    fn stream() -> Stream {
        Stream::new(5, Purpose::Quant, 0)
    }

    #[test]
    fn levels_for_bits_examples() {
        assert_eq!(levels_for_bits(7), Ok(63));
        assert_eq!(levels_for_bits(8), Ok(127));
        assert_eq!(levels_for_bits(2), Ok(1));
        assert_eq!(levels_for_bits(32), Ok(i32::MAX as u32));
        assert_eq!(levels_for_bits(1), Err(CodecError::InvalidBits(1)));
        assert_eq!(levels_for_bits(33), Err(CodecError::InvalidBits(33)));
    }

    #[test]
    fn zero_vector_quantizes_to_zero() {
        let q = quantize(&[0.0; 6], 4, &mut stream()).unwrap();
        assert_eq!(q, QuantizedVector::zero(6, 4));
        assert_eq!(dequantize(&q), vec![0.0; 6]);
    }

    #[test]
    fn one_hot_is_exact() {
        for s in [1, 2, 7, 63] {
            let v = [0.0, 0.0, 5.0, 0.0];
            let q = quantize(&v, s, &mut stream()).unwrap();
            assert_eq!(q.levels, vec![0, 0, s, 0]);
            assert_eq!(dequantize(&q), v.to_vec());
        }
        let q = quantize(&[0.0, -5.0], 3, &mut stream()).unwrap();
        assert_eq!(dequantize(&q), vec![0.0, -5.0]);
    }

    #[test]
    fn grid_points_are_deterministic() {
        for seed in 0..20 {
            let q = quantize(&[3.0, 4.0], 5, &mut Stream::from_seed(seed)).unwrap();
            assert_eq!(q.levels, vec![3, 4]);
            assert_eq!(dequantize(&q), vec![3.0, 4.0]);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert_eq!(
            quantize(&[1.0, f64::NAN], 3, &mut stream()),
            Err(CodecError::NonFinite)
        );
        assert_eq!(
            quantize(&[f64::INFINITY], 3, &mut stream()),
            Err(CodecError::NonFinite)
        );
        assert_eq!(
            quantize(&[1.0], 0, &mut stream()),
            Err(CodecError::InvalidLevelCount(0))
        );
    }

    #[test]
    fn dequantize_hand_example() {
        let q = QuantizedVector {
            norm: 5.0,
            signs: vec![1],
            levels: vec![3],
            s: 5,
        };
        assert_eq!(dequantize(&q), vec![3.0]);
    }

    #[test]
    fn variance_factor_examples() {
        assert!((variance_factor(1000, 63) - 1000.0 / 3969.0).abs() < 1e-15);
        assert!((variance_factor(1000, 63) - 0.251953).abs() < 1e-6);
        assert_eq!(variance_factor(4, 1), 2.0);
        assert_eq!(variance_factor(16, 4), 1.0);
        assert_eq!(16.0 / 16.0, 16f64.sqrt() / 4.0);
    }

    #[test]
    fn encode_size_and_zero_packing() {
        let q = quantize(&[1.0, -2.0, 0.5], 127, &mut stream()).unwrap();
        let bytes = encode(&q, 8).unwrap();
        assert_eq!(bytes.len(), 19);
        assert_eq!(decode(&bytes, 8).unwrap(), q);

        for bits in 2..=12 {
            let z = QuantizedVector::zero(5, levels_for_bits(bits).unwrap());
            let bytes = encode(&z, bits).unwrap();
            assert_eq!(bytes.len(), encoded_len(5, bits));
            assert!(bytes[PAYLOAD_HEADER_LEN..].iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn encode_bit_layout() {
        // b = 4: fields 1|011 (-3) and 0|010 (+2), then 0|000.
        let q = QuantizedVector {
            norm: 1.0,
            signs: vec![-1, 1, 0],
            levels: vec![3, 2, 0],
            s: 7,
        };
        let bytes = encode(&q, 4).unwrap();
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &7u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[16..], &[0b1011_0010, 0b0000_0000]);
    }

    #[test]
    fn encode_rejects_overflow() {
        let q = QuantizedVector {
            norm: 1.0,
            signs: vec![1],
            levels: vec![8],
            s: 8,
        };
        assert_eq!(
            encode(&q, 4),
            Err(CodecError::LevelCountTooLarge { s: 8, bits: 4 })
        );
        assert_eq!(encode(&q, 1), Err(CodecError::InvalidBits(1)));
    }

    #[test]
    fn decode_error_kinds() {
        let q = quantize(&[1.0, -2.0, 0.5], 127, &mut stream()).unwrap();
        let bytes = encode(&q, 8).unwrap();
        assert!(matches!(
            decode(&bytes[..18], 8),
            Err(CodecError::Truncated {
                expected: 19,
                got: 18
            })
        ));
        assert!(matches!(
            decode(&bytes[..7], 8),
            Err(CodecError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode(&long, 8),
            Err(CodecError::Oversized { .. })
        ));
        let mut zero_s = bytes.clone();
        zero_s[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode(&zero_s, 8), Err(CodecError::InvalidLevelCount(0)));

        // d = 1, b = 4: the low nibble of the only packed byte is padding.
        let one = encode(
            &QuantizedVector {
                norm: 2.0,
                signs: vec![1],
                levels: vec![7],
                s: 7,
            },
            4,
        )
        .unwrap();
        let mut padded = one.clone();
        *padded.last_mut().unwrap() |= 0x01;
        assert_eq!(decode(&padded, 4), Err(CodecError::NonZeroPadding));
        let mut neg_zero = one;
        *neg_zero.last_mut().unwrap() = 0b1000_0000;
        assert_eq!(decode(&neg_zero, 4), Err(CodecError::NonCanonical(0)));
    }

    proptest! {
        #[test]
        fn dequantized_entries_bracket_the_input(
            v in prop::collection::vec(-1e3f64..1e3, 1..40),
            s in 1u32..200,
            seed in any::<u64>(),
        ) {
            let q = quantize(&v, s, &mut Stream::from_seed(seed)).unwrap();
            q.validate().unwrap();
            let out = dequantize(&q);
            let nrm = crate::planted::norm(&v);
            let mut err2 = 0.0;
            for (x, y) in v.iter().zip(&out) {
                prop_assert!((x - y).abs() <= nrm / f64::from(s) * (1.0 + 1e-12));
                prop_assert!(x * y >= 0.0);
                err2 += (x - y) * (x - y);
            }
            let bound = (v.len() as f64).sqrt() / f64::from(s) * nrm;
            prop_assert!(err2.sqrt() <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn encode_decode_round_trip(
            d in 1usize..64,
            bits in 2u32..=12,
            seed in any::<u64>(),
        ) {
            let mut rng = Stream::from_seed(seed);
            let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let q = quantize(&v, levels_for_bits(bits).unwrap(), &mut rng).unwrap();
            let bytes = encode(&q, bits).unwrap();
            prop_assert_eq!(bytes.len(), encoded_len(d, bits));
            prop_assert_eq!(decode(&bytes, bits).unwrap(), q);
        }
    }
}
