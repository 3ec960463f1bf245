//! Dense row-major `f64` arrays and the raw kernels behind the tape ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense n-dimensional array. Rank-0 tensors (shape `[]`) hold one scalar.
///
/// Serializes as `{"shape": [...], "data": [...]}`, the snapshot format used by
/// checkpoints and fixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `src` viewed inside the broadcast shape `target` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides_of(src);
    let offset = target.len() - src.len();
    (0..target.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, src_offset)` for every element of `target`, where the
/// source is broadcast with `strides`.
fn for_each_broadcast(target: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel_of(target);
    if target.is_empty() {
        f(0, 0);
        return;
    }
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for out in 0..n {
        f(out, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel_of(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let strides = strides_of(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).map_err(|_| {
            Error::shape(
                op,
                format!(
                    "operands {:?} and {:?} do not broadcast",
                    self.shape, other.shape
                ),
            )
        })?;
        if other.numel() == 1 {
            let b = other.data[0];
            let src = self.broadcast_to(&shape)?;
            return Ok(src.map(|a| f(a, b)));
        }
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = vec![0.0; numel_of(&shape)];
        let mut offsets_a = Vec::with_capacity(data.len());
        for_each_broadcast(&shape, &sa, |_, off| offsets_a.push(off));
        for_each_broadcast(&shape, &sb, |out, off| {
            data[out] = f(self.data[offsets_a[out]], other.data[off]);
        });
        Ok(Tensor { shape, data })
    }

    pub(crate) fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(&self.shape, shape)?;
        if target != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {:?}", self.shape, shape),
            ));
        }
        let strides = broadcast_strides(&self.shape, shape);
        let mut data = vec![0.0; numel_of(shape)];
        for_each_broadcast(shape, &strides, |out, off| data[out] = self.data[off]);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums broadcast axes away so the result has `shape` (the adjoint of `broadcast_to`).
    pub(crate) fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(shape, &self.shape)?;
        if target != self.shape {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} cannot be reduced to {:?}", self.shape, shape),
            ));
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut data = vec![0.0; numel_of(shape)];
        for_each_broadcast(&self.shape, &strides, |src, off| {
            data[off] += self.data[src]
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Matrix product over the last two axes; leading axes must agree exactly.
    pub(crate) fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape[..ra - 2] != other.shape[..rb - 2] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}",
                    self.shape, other.shape
                ),
            ));
        }
        let batch: usize = numel_of(&self.shape[..ra - 2]);
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a = &self.data[bi * m * k..(bi + 1) * m * k];
            let b = &other.data[bi * k * n..(bi + 1) * k * n];
            let c = &mut data[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        let mut shape = self.shape[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor { shape, data })
    }

    pub(crate) fn permuted(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let src_strides = strides_of(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = vec![0.0; self.numel()];
        for_each_broadcast(&shape, &strides, |out, off| data[out] = self.data[off]);
        Ok(Tensor { shape, data })
    }

    fn axis_blocks(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    pub(crate) fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            ));
        }
        let (outer, extent, inner) = self.axis_blocks(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Zero-pads along `axis` so this block sits at `start` inside an extent of `full`.
    pub(crate) fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.axis_blocks(axis);
        if start + extent > full {
            return Err(Error::shape(
                "pad",
                format!("block of {extent} at {start} exceeds {full}"),
            ));
        }
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            data[dst..dst + extent * inner]
                .copy_from_slice(&self.data[o * extent * inner..(o + 1) * extent * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = full;
        Ok(Tensor { shape, data })
    }

    pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        if axis >= first.rank() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {:?}", first.shape),
            ));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "{:?} does not match {:?} off axis {axis}",
                        p.shape, first.shape
                    ),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let outer = numel_of(&first.shape[..axis]);
        let inner = numel_of(&first.shape[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Selects rows (axis 0) by index.
    pub(crate) fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 || idx.is_empty() {
            return Err(Error::shape(
                "gather",
                "need a non-scalar source and at least one index",
            ));
        }
        let rows = self.shape[0];
        let inner = self.numel() / rows;
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(
                    "gather",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Adds row `k` into row `idx[k]` of a zero tensor with `rows` rows.
    pub(crate) fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        let inner = self.numel() / self.shape[0];
        let mut data = vec![0.0; rows * inner];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape(
                    "scatter_add",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            for (d, s) in data[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&self.data[k * inner..(k + 1) * inner])
            {
                *d += s;
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    /// Maximum along the last axis, keeping it as extent 1.
    pub(crate) fn max_last(&self) -> Tensor {
        let last = *self.shape.last().unwrap_or(&1);
        let data: Vec<f64> = self
            .data
            .chunks(last)
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut shape = self.shape.clone();
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0]);
        let b = a.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = b.sum_to(&[3]).unwrap();
        assert_eq!(s.data(), &[2.0, 4.0, 6.0]);
        let col = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let m = col.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(m.sum_to(&[2, 1]).unwrap().data(), &[3.0, 6.0]);
        assert_eq!(m.sum_to(&[]).unwrap().item(), 9.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn permute_slice_pad_concat() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = t.permuted(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = t.slice_axis(1, 1, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
        let back = s.pad_axis(1, 1, 3).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let c = Tensor::concat(&[&t, &s], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(
            c.data(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]
        );
    }

    #[test]
    fn batched_matmul() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 6.0]);
    }
}
