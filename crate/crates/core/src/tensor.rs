//! Dense row-major `f64` tensors and the handful of layout primitives the
//! rest of the crate is built on.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Result, VatError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            advance(&mut idx, shape);
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..numel(shape))
            .map(|_| std * normal.sample(rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new(lo, hi).expect("valid uniform range");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if axes.len() != r {
            return shape_err(format!("permutation {axes:?} for rank {r}"));
        }
        let mut seen = vec![false; r];
        for &a in axes {
            if a >= r || seen[a] {
                return shape_err(format!("invalid permutation {axes:?}"));
            }
            seen[a] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        if r == 0 {
            return Ok(self.clone());
        }
        // Innermost output axis is iterated in a tight loop.
        let last = r - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let outer_shape = &out_shape[..last];
        let outer = numel(outer_shape);
        let mut idx = vec![0usize; last];
        for _ in 0..outer {
            let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[base..base + inner]);
            } else {
                data.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            advance(&mut idx, outer_shape);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Circular roll: `out[i] = in[(i - shift) mod dim]` along each axis.
    pub fn roll(&self, shifts: &[isize]) -> Result<Tensor> {
        if shifts.len() != self.rank() {
            return shape_err(format!("roll shifts {shifts:?} for shape {:?}", self.shape));
        }
        let maps: Vec<Vec<usize>> = self
            .shape
            .iter()
            .zip(shifts)
            .map(|(&d, &s)| {
                let d_i = d as isize;
                (0..d_i)
                    .map(|i| (i - s).rem_euclid(d_i.max(1)) as usize)
                    .collect()
            })
            .collect();
        Ok(self.gather_axes(&self.shape.clone(), &maps))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return shape_err(format!(
                "narrow axis {axis} [{start}, {}) out of {:?}",
                start + len,
                self.shape
            ));
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let maps: Vec<Vec<usize>> = out_shape
            .iter()
            .enumerate()
            .map(|(a, &d)| {
                if a == axis {
                    (start..start + len).collect()
                } else {
                    (0..d).collect()
                }
            })
            .collect();
        Ok(self.gather_axes(&out_shape, &maps))
    }

    /// Zero-pad at the end of every axis up to `shape`.
    pub fn pad_end(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank() || shape.iter().zip(&self.shape).any(|(n, o)| n < o) {
            return shape_err(format!("cannot pad {:?} to {:?}", self.shape, shape));
        }
        let mut out = Tensor::zeros(shape);
        let inner = *self.shape.last().unwrap_or(&1);
        let outer_shape = &self.shape[..self.rank().saturating_sub(1)];
        let mut idx = vec![0usize; outer_shape.len()];
        let out_strides = strides(shape);
        for o in 0..numel(outer_shape) {
            let dst: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            out.data[dst..dst + inner].copy_from_slice(&self.data[o * inner..(o + 1) * inner]);
            advance(&mut idx, outer_shape);
        }
        Ok(out)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| VatError::Shape("concat of nothing".into()))?;
        let r = first.rank();
        if axis >= r {
            return shape_err(format!("concat axis {axis} for rank {r}"));
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            if p.rank() != r
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(a, &d)| a != axis && d != first.shape[a])
            {
                return shape_err(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    first.shape, p.shape
                ));
            }
            out_shape[axis] += p.shape[axis];
        }
        let outer = numel(&out_shape[..axis]);
        let inner = numel(&out_shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    fn gather_axes(&self, out_shape: &[usize], maps: &[Vec<usize>]) -> Tensor {
        let in_strides = strides(&self.shape);
        let n = numel(out_shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let off: usize = idx
                .iter()
                .enumerate()
                .map(|(a, &i)| maps[a][i] * in_strides[a])
                .sum();
            data.push(self.data[off]);
            advance(&mut idx, out_shape);
        }
        Tensor {
            shape: out_shape.to_vec(),
            data,
        }
    }
}

/// Row-major odometer increment.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// `c = beta * c + a · b` with optional transposition of `a` (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn permute_matches_index_formula() {
        let t = ramp(&[2, 3, 4]);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), t.get(&[a, b, c]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn roll_moves_origin() {
        let t = ramp(&[4, 3]);
        let r = t.roll(&[1, -1]).unwrap();
        assert_eq!(r.get(&[1, 0]), t.get(&[0, 1]));
        assert_eq!(r.roll(&[-1, 1]).unwrap(), t);
    }

    #[test]
    fn narrow_pad_concat() {
        let t = ramp(&[3, 4]);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        let p = n.pad_end(&[4, 3]).unwrap();
        assert_eq!(p.get(&[0, 2]), 0.0);
        assert_eq!(p.get(&[2, 1]), 10.0);
        assert_eq!(p.get(&[3, 0]), 0.0);
        let c = Tensor::concat(
            &[&t.narrow(1, 0, 1).unwrap(), &t.narrow(1, 1, 3).unwrap()],
            1,
        )
        .unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn gemm_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2 = [[1,4],[2,5],[3,6]]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);
    }
}
