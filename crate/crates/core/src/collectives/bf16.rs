//! bfloat16 emulation on top of `f32` storage.

use serde::{Deserialize, Serialize};

/// Round `x` to the nearest bfloat16 value, ties to even. NaN is returned
/// unchanged; infinities pass through and finite values past the bf16
/// range overflow to infinity.
pub fn bf16_round(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits(bits.wrapping_add(0x7fff + lsb) & 0xffff_0000)
}

/// Whether `x` survives a bf16 round trip unchanged.
pub fn is_bf16_exact(x: f32) -> bool {
    x.is_nan() || x.to_bits() & 0xffff == 0
}

/// Element type tag of a payload. Storage is always `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    #[default]
    F32,
    Bf16,
}

impl ElemType {
    /// Bytes per element on the wire.
    pub fn width(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::Bf16 => 2,
        }
    }

    #[inline]
    pub fn round(self, x: f32) -> f32 {
        match self {
            ElemType::F32 => x,
            ElemType::Bf16 => bf16_round(x),
        }
    }
}
