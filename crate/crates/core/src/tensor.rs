//! Weight tensor and container types.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor dimensions must be at least 1x1, got {rows}x{cols}")]
    EmptyShape { rows: u32, cols: u32 },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: u32, cols: u32, len: usize },
    #[error("tensor '{name}' contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name '{0}' in container")]
    DuplicateName(String),
    #[error("tensor name is {0} bytes; the container format caps names at 65535")]
    NameTooLong(usize),
}

/// A named 2-D row-major matrix of finite 32-bit-float weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    name: String,
    rows: u32,
    cols: u32,
    data: Vec<f32>,
}

impl WeightTensor {
    /// Builds a tensor, validating shape, length, and finiteness.
    pub fn new(
        name: impl Into<String>,
        rows: u32,
        cols: u32,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(TensorError::NameTooLong(name.len()));
        }
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        let expected = rows as usize * cols as usize;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(TensorError::NonFinite { name, index });
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    /// Total number of weights.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // rows, cols >= 1 by construction
    }

    /// Row-major weight data.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: u32) -> &[f32] {
        let c = self.cols as usize;
        &self.data[r as usize * c..(r as usize + 1) * c]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// An ordered collection of uniquely named tensors, as stored in a WTS1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub format_version: u32,
    tensors: Vec<WeightTensor>,
}

impl TensorContainer {
    pub fn new(tensors: Vec<WeightTensor>) -> Result<Self, TensorError> {
        Self::with_version(crate::io::WTS1_VERSION, tensors)
    }

    pub fn with_version(
        format_version: u32,
        tensors: Vec<WeightTensor>,
    ) -> Result<Self, TensorError> {
        for (i, t) in tensors.iter().enumerate() {
            if tensors[..i].iter().any(|p| p.name == t.name) {
                return Err(TensorError::DuplicateName(t.name.clone()));
            }
        }
        Ok(Self {
            format_version,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[WeightTensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<WeightTensor> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub(crate) fn first_non_finite(data: &[f32]) -> Option<usize> {
    // Chunked so the scan parallelizes on large payloads; the first
    // offending index is still reported deterministically.
    const CHUNK: usize = 1 << 16;
    let hits = crate::parallel::map_chunks(data, CHUNK, |c| {
        c.iter().position(|v| !v.is_finite())
    });
    hits.iter()
        .enumerate()
        .find_map(|(ci, hit)| hit.map(|off| ci * CHUNK + off))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims() {
        assert!(WeightTensor::new("t", 0, 3, vec![]).is_err());
        assert!(WeightTensor::new("t", 3, 0, vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(WeightTensor::new("t", 2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = WeightTensor::new("t", 1, 3, vec![1.0, f32::NAN, 0.0]).unwrap_err();
        match err {
            TensorError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error: {other}"),
        }
        assert!(WeightTensor::new("t", 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn rejects_oversized_name() {
        let name = "x".repeat(u16::MAX as usize + 1);
        assert!(matches!(
            WeightTensor::new(name, 1, 1, vec![0.0]),
            Err(TensorError::NameTooLong(_))
        ));
    }

    #[test]
    fn rejects_duplicate_names() {
        let a = WeightTensor::new("w", 1, 1, vec![0.0]).unwrap();
        let b = WeightTensor::new("w", 1, 1, vec![1.0]).unwrap();
        assert!(TensorContainer::new(vec![a, b]).is_err());
    }

    #[test]
    fn row_access() {
        let t = WeightTensor::new("t", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn finds_first_non_finite_across_chunks() {
        let mut data = vec![0.0f32; 100_000];
        data[70_001] = f32::NEG_INFINITY;
        data[90_000] = f32::NAN;
        assert_eq!(first_non_finite(&data), Some(70_001));
        assert_eq!(first_non_finite(&[1.0, 2.0]), None);
    }
}
