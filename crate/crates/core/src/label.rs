//! Label vectors: fixed-length numeric encodings of class ids.

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    OneHot,
    /// Base-2 digits, most significant bit first, left-padded with zeros.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    OneHot,
    Binary,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    values: Array,
    encoding: Encoding,
}

impl LabelVector {
    /// The "label unknown" vector.
    pub fn zero(len: usize) -> Self {
        LabelVector {
            values: Array::zeros(&[len]),
            encoding: Encoding::Zero,
        }
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn is_zero(&self) -> bool {
        self.values.is_all_zero()
    }
}

/// Largest id representable by `scheme` at length `len`, exclusive.
pub fn capacity(scheme: LabelScheme, len: usize) -> usize {
    match scheme {
        LabelScheme::OneHot => len,
        LabelScheme::Binary => 1usize.checked_shl(len as u32).unwrap_or(usize::MAX),
    }
}

pub fn encode_label(id: usize, scheme: LabelScheme, len: usize) -> Result<LabelVector> {
    if len == 0 {
        return Err(Error::Encoding {
            id,
            reason: "label length must be positive".into(),
        });
    }
    if id >= capacity(scheme, len) {
        return Err(Error::Encoding {
            id,
            reason: format!("{scheme:?} encoding of length {len} holds ids below {}", capacity(scheme, len)),
        });
    }
    let mut v = vec![0.0; len];
    let encoding = match scheme {
        LabelScheme::OneHot => {
            v[id] = 1.0;
            Encoding::OneHot
        }
        LabelScheme::Binary => {
            for (bit, slot) in v.iter_mut().rev().enumerate() {
                if (id >> bit) & 1 == 1 {
                    *slot = 1.0;
                }
            }
            Encoding::Binary
        }
    };
    Ok(LabelVector {
        values: Array::from_parts(vec![len], v),
        encoding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot() {
        let y = encode_label(5, LabelScheme::OneHot, 10).unwrap();
        let mut expected = vec![0.0; 10];
        expected[5] = 1.0;
        assert_eq!(y.values().data(), expected.as_slice());
        assert_eq!(y.encoding(), Encoding::OneHot);
        assert!(encode_label(10, LabelScheme::OneHot, 10).is_err());
    }

    #[test]
    fn binary_msb_first() {
        let y = encode_label(5, LabelScheme::Binary, 15).unwrap();
        let mut expected = vec![0.0; 12];
        expected.extend([1.0, 0.0, 1.0]);
        assert_eq!(y.values().data(), expected.as_slice());
        assert!(encode_label(1 << 15, LabelScheme::Binary, 15).is_err());
        assert!(encode_label((1 << 15) - 1, LabelScheme::Binary, 15).is_ok());
    }

    #[test]
    fn zero_label() {
        let y = LabelVector::zero(7);
        assert_eq!(y.len(), 7);
        assert!(y.is_zero());
        assert_eq!(y.encoding(), Encoding::Zero);
    }
}
