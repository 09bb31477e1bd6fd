use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Cloning shares the underlying buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Scalar value of a one-element tensor, regardless of rank.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a different shape; element count must not change.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Flat index of the largest element along `axis` for every position of
    /// the remaining axes, ties resolved to the lowest index.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.shape.len() {
            return Err(Error::Domain {
                op: "argmax",
                detail: format!("axis {axis} out of range for rank {}", self.shape.len()),
            });
        }
        let extent = self.shape[axis];
        if extent == 0 {
            return Err(Error::EmptyReduction { op: "argmax" });
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut best = 0usize;
                let mut best_v = self.data[base];
                for k in 1..extent {
                    let v = self.data[base + k * inner];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        Ok(out)
    }
}

/// Output shape of a leading-axes broadcast, or an error when neither shape
/// is a suffix of the other after stripping leading 1-extents.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let strip = |s: &[usize]| {
        let k = s.iter().take_while(|&&e| e == 1).count();
        s[k..].to_vec()
    };
    let sa = strip(a);
    let sb = strip(b);
    let (long, short) = if sa.len() >= sb.len() { (&sa, &sb) } else { (&sb, &sa) };
    if !long.ends_with(short) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    // Left-pad to equal rank, take the per-axis maximum.
    let rank = a.len().max(b.len());
    let ext = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad { 1 } else { s[i - pad] }
    };
    Ok((0..rank).map(|i| ext(a, i).max(ext(b, i))).collect())
}
