//! Number formats for deployment: binary16 codebooks and affine int8 tensors.
//!
//! Affine int8 follows `r = S (q - Z)` with a per-tensor scale `S` and an
//! int8 zero point `Z`; real zero always maps to an integer exactly.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::pool::{GroupId, WeightGroup};
use crate::pq::{CodebookPair, GroupCodebook, SubCodebook};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("codeword value {value} (group {group:?}, sub {sub}, index {index}) does not fit in binary16")]
    F16Overflow {
        group: GroupId,
        sub: usize,
        index: usize,
        value: f32,
    },
    #[error("cannot calibrate: {0}")]
    Calibration(&'static str),
}

/// Per-tensor affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    /// Parameters covering `[min, max]`, widened to include zero.
    pub fn from_range(min: f32, max: f32) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        if hi == lo {
            // Only zeros: any positive scale works; pick a small one centred on zero.
            let c = if min != 0.0 { min.abs() } else { max.abs() };
            return Self {
                scale: c.max(1.0) / 256.0,
                zero_point: 0,
            };
        }
        let scale = (hi - lo) / 255.0;
        // Z from the unrounded scale, so symmetric ranges land exactly on Z = 0.
        let z = round_half_away(-(lo as f64) * 255.0 / (hi as f64 - lo as f64)) - 128.0;
        Self {
            scale,
            zero_point: z.clamp(-128.0, 127.0) as i8,
        }
    }

    /// Real values representable without saturation.
    pub fn range(&self) -> (f64, f64) {
        let s = self.scale as f64;
        let z = self.zero_point as f64;
        (s * (-128.0 - z), s * (127.0 - z))
    }

    #[inline]
    pub fn quantize_value(&self, r: f32) -> i8 {
        let q = round_half_away(r as f64 / self.scale as f64) + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    /// `S (q - Z)` evaluated exactly (f32 scale times a 9-bit integer fits in f64).
    #[inline]
    pub fn dequantize_exact(&self, q: i8) -> f64 {
        self.scale as f64 * (q as i32 - self.zero_point as i32) as f64
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.dequantize_exact(q) as f32
    }
}

#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero.
    x.round()
}

/// Calibrates per-tensor parameters from the data's min/max.
pub fn calibrate(values: &[f32]) -> Result<QuantParams, QuantError> {
    if values.is_empty() {
        return Err(QuantError::Calibration("empty tensor"));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(QuantError::Calibration("non-finite value"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(QuantParams::from_range(lo, hi))
}

pub fn quantize(values: &[f32], qp: QuantParams) -> Vec<i8> {
    values.iter().map(|&v| qp.quantize_value(v)).collect()
}

pub fn dequantize(values: &[i8], qp: QuantParams) -> Vec<f32> {
    values.iter().map(|&q| qp.dequantize_value(q)).collect()
}

/// A real multiplier expressed as `m0 · 2^(shift − 31)` with `|m0| ∈ [2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub m0: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn new(real: f64) -> Self {
        if real == 0.0 || !real.is_finite() {
            return Self { m0: 0, shift: 0 };
        }
        let mut shift = real.abs().log2().floor() as i32 + 1;
        let mut q = real.abs() / 2f64.powi(shift);
        // log2 can be off by one at exact powers of two.
        while q >= 1.0 {
            q /= 2.0;
            shift += 1;
        }
        while q < 0.5 {
            q *= 2.0;
            shift -= 1;
        }
        let mut m0 = (q * 2f64.powi(31)).round() as i64;
        if m0 == 1 << 31 {
            m0 /= 2;
            shift += 1;
        }
        let m0 = if real < 0.0 { -m0 } else { m0 };
        Self {
            m0: m0 as i32,
            shift,
        }
    }

    /// `round(x · m)` with ties away from zero, saturated to i32.
    #[inline]
    pub fn apply(&self, x: i32) -> i32 {
        let prod = x as i64 * self.m0 as i64;
        let right = 31 - self.shift;
        let v = if right <= 0 {
            (prod as i128) << (-right).min(64)
        } else if right >= 63 {
            0
        } else {
            let half = 1i64 << (right - 1);
            let mag = (prod.unsigned_abs() as i64 + half) >> right;
            (if prod < 0 { -mag } else { mag }) as i128
        };
        v.clamp(i32::MIN as i128, i32::MAX as i128) as i32
    }
}

/// One sub-codebook in binary16.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct F16SubCodebook {
    pub k: usize,
    pub dsub: usize,
    /// Raw binary16 bit patterns, `k × dsub`.
    pub bits: Vec<u16>,
}

impl F16SubCodebook {
    pub fn widen(&self) -> Vec<f32> {
        self.bits
            .iter()
            .map(|&b| f16::from_bits(b).to_f32())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct F16GroupCodebook {
    pub group: WeightGroup,
    pub subs: Vec<F16SubCodebook>,
}

impl F16GroupCodebook {
    pub fn k(&self) -> usize {
        self.subs.first().map_or(0, |s| s.k)
    }

    pub fn storage_bytes(&self) -> usize {
        self.subs.iter().map(|s| s.bits.len() * 2).sum()
    }
}

/// The codebook pair as stored for deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct F16CodebookPair {
    pub g3x3: F16GroupCodebook,
    pub g1x1fc: F16GroupCodebook,
}

impl F16CodebookPair {
    pub fn group(&self, id: GroupId) -> &F16GroupCodebook {
        match id {
            GroupId::G3x3 => &self.g3x3,
            GroupId::G1x1Fc => &self.g1x1fc,
        }
    }

    pub fn storage_bytes(&self) -> usize {
        self.g3x3.storage_bytes() + self.g1x1fc.storage_bytes()
    }

    /// Back to f32 codewords (exact: every binary16 value is an f32).
    pub fn widen(&self) -> CodebookPair {
        let g = |id: GroupId| {
            let src = self.group(id);
            if src.subs.is_empty() {
                return GroupCodebook::empty(src.group);
            }
            let subs = src
                .subs
                .iter()
                .map(|s| {
                    SubCodebook::new(s.k, s.dsub, s.widen())
                        .expect("lengths checked at construction")
                })
                .collect();
            GroupCodebook::new(src.group, subs).expect("shape checked at construction")
        };
        CodebookPair::new(g(GroupId::G3x3), g(GroupId::G1x1Fc))
    }
}

/// Rounds every codeword to binary16 (nearest, ties to even).
pub fn to_f16(pair: &CodebookPair) -> Result<F16CodebookPair, QuantError> {
    let conv = |id: GroupId| -> Result<F16GroupCodebook, QuantError> {
        let g = pair.group(id);
        let mut subs = Vec::with_capacity(g.subs().len());
        for (s, sub) in g.subs().iter().enumerate() {
            let mut bits = Vec::with_capacity(sub.codewords().len());
            for (index, &value) in sub.codewords().iter().enumerate() {
                let h = f16::from_f32(value);
                if !h.is_finite() {
                    return Err(QuantError::F16Overflow {
                        group: id,
                        sub: s,
                        index,
                        value,
                    });
                }
                bits.push(h.to_bits());
            }
            subs.push(F16SubCodebook {
                k: sub.k(),
                dsub: sub.dsub(),
                bits,
            });
        }
        Ok(F16GroupCodebook {
            group: g.group(),
            subs,
        })
    };
    Ok(F16CodebookPair {
        g3x3: conv(GroupId::G3x3)?,
        g1x1fc: conv(GroupId::G1x1Fc)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight software binary16 rounding (normal and subnormal range).
    fn f16_oracle(x: f32) -> f32 {
        if x == 0.0 {
            return x;
        }
        let a = x.abs() as f64;
        let e = a.log2().floor().max(-14.0);
        let ulp = 2f64.powf(e - 10.0);
        let q = a / ulp;
        let fl = q.floor();
        let r = if q - fl > 0.5 || (q - fl == 0.5 && fl % 2.0 == 1.0) {
            fl + 1.0
        } else {
            fl
        };
        (r * ulp).copysign(x as f64) as f32
    }

    #[test]
    fn f16_matches_software_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let x: f32 = rng.random_range(-4.0f32..4.0) * 10f32.powi(rng.random_range(-6..4));
            assert_eq!(f16::from_f32(x).to_f32(), f16_oracle(x), "{x}");
        }
        assert_eq!(f16::from_f32(1.0).to_f32(), 1.0);
        let tenth = f16::from_f32(0.1).to_f32();
        assert!(((tenth - 0.1f32).abs() as f64) <= 2f64.powi(-11) * 0.1);
    }

    #[test]
    fn calibration_examples() {
        let qp = calibrate(&[-1.0, 0.3, 1.0]).unwrap();
        assert_eq!(qp.scale, 2.0 / 255.0);
        assert_eq!(qp.zero_point, 0);
        let zeros = calibrate(&[0.0; 5]).unwrap();
        assert!(dequantize(&quantize(&[0.0; 5], zeros), zeros)
            .iter()
            .all(|&v| v == 0.0));
        // Positive-only data still represents zero exactly.
        let pos = calibrate(&[0.5, 2.0]).unwrap();
        assert_eq!(pos.zero_point, -128);
        assert_eq!(pos.dequantize_value(pos.quantize_value(0.0)), 0.0);
        assert!(calibrate(&[]).is_err());
        assert!(calibrate(&[f32::NAN]).is_err());
    }

    #[test]
    fn affine_substitution() {
        let qp = QuantParams {
            scale: 0.5,
            zero_point: 0,
        };
        assert_eq!(qp.dequantize_value(4), 2.0);
        assert_eq!(qp.quantize_value(2.0), 4);
        // Halves round away from zero.
        assert_eq!(qp.quantize_value(0.25), 1);
        assert_eq!(qp.quantize_value(-0.25), -1);
        // Saturation.
        assert_eq!(qp.quantize_value(1000.0), 127);
        assert_eq!(qp.quantize_value(-1000.0), -128);
    }

    #[test]
    fn round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let lo: f32 = rng.random_range(-5.0..0.5);
            let hi: f32 = lo + rng.random_range(0.01..6.0);
            let qp = QuantParams::from_range(lo, hi);
            let (rlo, rhi) = qp.range();
            for _ in 0..2000 {
                let r: f32 = rng.random_range(rlo as f32..rhi as f32);
                let q = qp.quantize_value(r);
                assert!((r as f64 - qp.dequantize_exact(q)).abs() <= qp.scale as f64 / 2.0);
            }
        }
    }

    #[test]
    fn fixed_multiplier_matches_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let m: f64 = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..3));
            let fm = FixedMultiplier::new(m);
            assert!(fm.m0.unsigned_abs() >= 1 << 30);
            let x: i32 = rng.random_range(-100_000..100_000);
            let want = (x as f64 * m).round();
            let got = fm.apply(x) as f64;
            assert!((got - want).abs() <= 1.0, "{x} * {m}: {got} vs {want}");
        }
        assert_eq!(FixedMultiplier::new(0.5).apply(3), 2);
        assert_eq!(FixedMultiplier::new(0.5).apply(-3), -2);
        assert_eq!(FixedMultiplier::new(1.0).apply(7), 7);
        assert_eq!(FixedMultiplier::new(4.0).apply(-7), -28);
        assert_eq!(FixedMultiplier::new(0.0).apply(99), 0);
    }
}
