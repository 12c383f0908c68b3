//! Dense tensors and checkpoints.
//!
//! Every tensor is held as `f32` regardless of its stored dtype. Values are
//! snapped to the dtype's representable set on construction, so narrowing back
//! to the stored dtype on write is exact and a write/read cycle is lossless.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use half::{bf16, f16};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F32, DType::F16, DType::BF16];

    /// The dtype tag used in the safetensors header.
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Round `v` to the nearest value representable in this dtype.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            DType::F32 => v,
            DType::F16 => f16::from_f32(v).to_f32(),
            DType::BF16 => bf16::from_f32(v).to_f32(),
        }
    }

    /// Little-endian encoding of `v`; `v` is rounded to the dtype first.
    pub fn encode(self, v: f32, out: &mut Vec<u8>) {
        match self {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
            DType::BF16 => out.extend_from_slice(&bf16::from_f32(v).to_le_bytes()),
        }
    }

    /// Decode one element from exactly `size_bytes()` little-endian bytes.
    pub fn decode(self, bytes: &[u8]) -> f32 {
        match self {
            DType::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            DType::F16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f32(),
            DType::BF16 => bf16::from_le_bytes([bytes[0], bytes[1]]).to_f32(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, rounding `data` to `dtype`.
    ///
    /// The shape must be nonempty with positive extents and its product must
    /// equal `data.len()`.
    pub fn new(dtype: DType, shape: Vec<usize>, mut data: Vec<f32>) -> Result<Tensor> {
        check_shape("", &shape, data.len())?;
        if dtype != DType::F32 {
            for v in &mut data {
                *v = dtype.quantize(*v);
            }
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f64(dtype: DType, shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
        Tensor::new(dtype, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(dtype, shape, alloc::vec![0.0; n])
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Bitwise equality of dtype, shape and data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn check_shape(name: &str, shape: &[usize], len: usize) -> Result<()> {
    let invalid = |reason: String| {
        Err(Error::InvalidTensor {
            name: name.to_owned(),
            reason,
        })
    };
    if shape.is_empty() {
        return invalid("shape is empty".to_string());
    }
    if shape.contains(&0) {
        return invalid(alloc::format!("shape {shape:?} has zero elements"));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidTensor {
            name: name.to_owned(),
            reason: alloc::format!("shape {shape:?} overflows"),
        })?;
    if expected != len {
        return invalid(alloc::format!(
            "shape {shape:?} needs {expected} elements, buffer has {len}"
        ));
    }
    Ok(())
}

/// An ordered set of named tensors plus free-form string metadata.
///
/// Names iterate in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Bitwise equality on every tensor plus exact equality of names and metadata.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn ensure_compatible(&self, other: &Checkpoint) -> Result<()> {
        ensure_same_layout(
            self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())),
            other.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())),
        )
    }
}

/// Compare two name-sorted `(name, shape)` listings, reporting missing and
/// extra names first and then the first shape disagreement.
pub(crate) fn ensure_same_layout<'a, 'b>(
    expected: impl Iterator<Item = (&'a str, &'a [usize])>,
    found: impl Iterator<Item = (&'b str, &'b [usize])>,
) -> Result<()> {
    let expected: BTreeMap<&str, &[usize]> = expected.collect();
    let found: BTreeMap<&str, &[usize]> = found.collect();
    let missing: Vec<String> = expected
        .keys()
        .filter(|k| !found.contains_key(*k))
        .map(|k| (*k).to_owned())
        .collect();
    let extra: Vec<String> = found
        .keys()
        .filter(|k| !expected.contains_key(*k))
        .map(|k| (*k).to_owned())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::KeysetMismatch { missing, extra });
    }
    for (name, shape) in &expected {
        let other = found[name];
        if *shape != other {
            return Err(Error::ShapeMismatch {
                name: (*name).to_owned(),
                expected: shape.to_vec(),
                found: other.to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(DType::F32, vec![], vec![]).is_err());
        assert!(Tensor::new(DType::F32, vec![0], vec![]).is_err());
        assert!(Tensor::new(DType::F32, vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(DType::F32, vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::new(DType::F32, vec![2, 1], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn half_dtypes_snap_on_construction() {
        let t = Tensor::new(DType::F16, vec![1], vec![0.1]).unwrap();
        assert_eq!(t.data()[0], f16::from_f32(0.1).to_f32());
        let t = Tensor::new(DType::BF16, vec![1], vec![0.1]).unwrap();
        assert_eq!(t.data()[0], bf16::from_f32(0.1).to_f32());
        // representable values pass through unchanged
        let t = Tensor::new(DType::F16, vec![2], vec![1.5, -2.0]).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn encode_decode_is_exact_on_snapped_values() {
        for dtype in DType::ALL {
            let v = dtype.quantize(-2.71875);
            let mut buf = Vec::new();
            dtype.encode(v, &mut buf);
            assert_eq!(buf.len(), dtype.size_bytes());
            assert_eq!(dtype.decode(&buf).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn compatibility_reports_missing_extra_and_shape() {
        let t = |n| Tensor::zeros(DType::F32, vec![n]).unwrap();
        let mut a = Checkpoint::new();
        a.insert("x", t(2));
        a.insert("y", t(3));
        let mut b = Checkpoint::new();
        b.insert("x", t(2));
        b.insert("z", t(3));
        match a.ensure_compatible(&b) {
            Err(Error::KeysetMismatch { missing, extra }) => {
                assert_eq!(missing, vec!["y".to_string()]);
                assert_eq!(extra, vec!["z".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut c = Checkpoint::new();
        c.insert("x", t(2));
        c.insert("y", t(4));
        assert!(matches!(
            a.ensure_compatible(&c),
            Err(Error::ShapeMismatch { ref name, .. }) if name == "y"
        ));
    }
}
