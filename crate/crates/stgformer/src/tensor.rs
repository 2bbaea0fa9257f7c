//! Dense row-major f64 tensors and the "STGT" flat binary format used for
//! checkpoints and datasets.
//!
//! A `Tensor` is a plain value; gradient tracking happens on the [`crate::tape::Tape`],
//! which stores tensors as node values and hands gradients back to leaves.

use std::io::{Read, Write};

use crate::error::{Result, StgError};
use crate::rng::SplitMix64;

/// Dense n-dimensional array of f64, row-major (last axis fastest).
///
/// Invariants: `shape.iter().product() == data.len()`; `grad`, when present,
/// has the same length as `data`; all stored values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(StgError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(StgError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Trainable tensor with Xavier-uniform init over `fan_in + fan_out`.
    pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Self::rand_uniform(shape, -bound, bound, rng);
        t.requires_grad = true;
        t
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(StgError::Contract(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate a gradient of matching length into `grad`.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    // ---- STGT binary format -------------------------------------------------
    // magic "STGT", u32 version, u32 rank, rank x u64 extents, then
    // little-endian f64 payload.

    pub fn write_stgt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"STGT")?;
        w.write_all(&STGT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_stgt<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"STGT" {
            return Err(StgError::Format(format!("bad magic {magic:?}, expected STGT")));
        }
        let version = read_u32(r)?;
        if version != STGT_VERSION {
            return Err(StgError::Format(format!("unsupported STGT version {version}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(StgError::Format(format!("unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor::from_vec(shape, data)
    }

    pub fn save_stgt(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_stgt(&mut buf)?;
        crate::util::atomic_write(path, &buf)
    }

    pub fn load_stgt(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_stgt(&mut &bytes[..])
    }
}

pub const STGT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, StgError::Shape(_)));
    }

    #[test]
    fn from_vec_rejects_nan() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, StgError::NonFinite(_)));
    }

    #[test]
    fn stgt_rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        let err = Tensor::read_stgt(&mut &bytes[..]).unwrap_err();
        assert!(matches!(err, StgError::Format(_)));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
    }

    proptest! {
        #[test]
        fn stgt_round_trip(rank in 0usize..4, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.next_usize(5)).collect();
            let t = Tensor::rand_uniform(&shape, -10.0, 10.0, &mut rng);
            let mut buf = Vec::new();
            t.write_stgt(&mut buf).unwrap();
            let back = Tensor::read_stgt(&mut &buf[..]).unwrap();
            prop_assert_eq!(back.shape, t.shape);
            prop_assert_eq!(back.data, t.data);
        }
    }
}
