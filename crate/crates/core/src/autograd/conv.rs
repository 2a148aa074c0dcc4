//! Channels-last N-d convolution, max-pooling and linear resizing.
//!
//! Tensors are laid out `[s_1, .., s_N, C]`; convolution weights are
//! `[k_1, .., k_N, C_in, C_out]`, so a flattened weight is the `[K, C_out]`
//! matrix matching an im2col row of length `K = Π k_a · C_in`.

use std::rc::Rc;

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{advance, gemm, numel, strides, Tensor};

/// Rows of im2col materialised at once.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Debug)]
struct ConvGeom {
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    kernel: Vec<usize>,
    stride: Vec<usize>,
    pad: Vec<usize>,
    cin: usize,
    cout: usize,
}

impl ConvGeom {
    fn new(x_shape: &[usize], w_shape: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self> {
        let nd = stride.len();
        if x_shape.len() != nd + 1 || w_shape.len() != nd + 2 || pad.len() != nd {
            return shape_err(format!(
                "conv: input {x_shape:?}, weight {w_shape:?}, stride {stride:?}, pad {pad:?}"
            ));
        }
        let cin = x_shape[nd];
        if w_shape[nd] != cin {
            return shape_err(format!("conv: input channels {cin} vs weight {w_shape:?}"));
        }
        if stride.iter().any(|&s| s == 0) {
            return shape_err("conv: zero stride");
        }
        let mut out_spatial = Vec::with_capacity(nd);
        for a in 0..nd {
            let padded = x_shape[a] + 2 * pad[a];
            if w_shape[a] == 0 || w_shape[a] > padded {
                return shape_err(format!(
                    "conv: kernel {} larger than padded input {padded} on axis {a}",
                    w_shape[a]
                ));
            }
            out_spatial.push((padded - w_shape[a]) / stride[a] + 1);
        }
        Ok(Self {
            in_spatial: x_shape[..nd].to_vec(),
            out_spatial,
            kernel: w_shape[..nd].to_vec(),
            stride: stride.to_vec(),
            pad: pad.to_vec(),
            cin,
            cout: w_shape[nd + 1],
        })
    }

    fn row_len(&self) -> usize {
        numel(&self.kernel) * self.cin
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.out_spatial.clone();
        s.push(self.cout);
        s
    }

    /// Appends the input offset (in units of channel vectors) of every
    /// kernel tap of output position `out_idx` to `table`, built axis by
    /// axis in row-major kernel order. Taps in padding get [`NO_TAP`].
    fn push_taps(
        &self,
        out_idx: &[usize],
        in_strides: &[usize],
        table: &mut Vec<usize>,
        scratch: &mut [Vec<usize>; 2],
    ) {
        let [cur, next] = scratch;
        cur.clear();
        cur.push(0);
        for a in 0..self.kernel.len() {
            next.clear();
            for &base in cur.iter() {
                for k in 0..self.kernel[a] {
                    let c = (out_idx[a] * self.stride[a] + k).wrapping_sub(self.pad[a]);
                    next.push(if base == NO_TAP || c >= self.in_spatial[a] {
                        NO_TAP
                    } else {
                        base + c * in_strides[a]
                    });
                }
            }
            std::mem::swap(cur, next);
        }
        table.extend_from_slice(cur);
    }

    /// Iterates im2col in row chunks: `f(first_row, rows, tap_table)`, where
    /// the table holds `rows × Π k_a` offsets.
    fn for_chunks(&self, mut f: impl FnMut(usize, usize, &[usize])) {
        let n_out = numel(&self.out_spatial);
        let chunk = (COL_BUDGET / self.row_len().max(1)).clamp(1, n_out.max(1));
        let in_strides = strides(&self.in_spatial);
        let mut out_idx = vec![0usize; self.out_spatial.len()];
        let mut table = Vec::with_capacity(chunk * numel(&self.kernel));
        let mut scratch = [Vec::new(), Vec::new()];
        let mut start = 0;
        while start < n_out {
            let rows = chunk.min(n_out - start);
            table.clear();
            for _ in 0..rows {
                self.push_taps(&out_idx, &in_strides, &mut table, &mut scratch);
                advance(&mut out_idx, &self.out_spatial);
            }
            f(start, rows, &table);
            start += rows;
        }
    }
}

/// Tap offset marking a kernel position in padding.
const NO_TAP: usize = usize::MAX;

fn im2col(x: &[f64], cin: usize, table: &[usize], col: &mut Vec<f64>) {
    col.clear();
    col.reserve(table.len() * cin);
    for &off in table {
        if off == NO_TAP {
            col.extend(std::iter::repeat_n(0.0, cin));
        } else {
            col.extend_from_slice(&x[off * cin..(off + 1) * cin]);
        }
    }
}

/// Forward N-d convolution (cross-correlation) on plain tensors.
pub fn conv_nd_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: &[usize],
    pad: &[usize],
) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [geom.cout] {
            return shape_err(format!(
                "conv bias {:?} for {} outputs",
                b.shape(),
                geom.cout
            ));
        }
    }
    Ok(conv_forward(&geom, x, w, bias))
}

fn conv_forward(geom: &ConvGeom, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (k, n) = (geom.row_len(), geom.cout);
    let mut out = vec![0.0; numel(&geom.out_spatial) * n];
    let mut col = Vec::new();
    geom.for_chunks(|start, rows, table| {
        im2col(x.data(), geom.cin, table, &mut col);
        gemm(
            rows,
            k,
            n,
            &col,
            false,
            w.data(),
            false,
            0.0,
            &mut out[start * n..(start + rows) * n],
        );
    });
    if let Some(b) = bias {
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    Tensor::new(&geom.out_shape(), out).expect("conv output shape")
}

fn conv_backward(
    geom: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor) {
    let (k, n, cin) = (geom.row_len(), geom.cout, geom.cin);
    let mut dw = vec![0.0; k * n];
    let mut dx = if need_x {
        Some(vec![0.0; x.len()])
    } else {
        None
    };
    let (mut col, mut dcol) = (Vec::new(), Vec::new());
    geom.for_chunks(|start, rows, table| {
        let dy_rows = &dy.data()[start * n..(start + rows) * n];
        im2col(x.data(), cin, table, &mut col);
        gemm(k, rows, n, &col, true, dy_rows, false, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            dcol.resize(rows * k, 0.0);
            gemm(rows, n, k, dy_rows, false, w.data(), true, 0.0, &mut dcol);
            for (src, &off) in dcol.chunks(cin).zip(table) {
                if off != NO_TAP {
                    for (d, s) in dx[off * cin..(off + 1) * cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    });
    (
        dx.map(|d| Tensor::new(x.shape(), d).expect("dx")),
        Tensor::new(w.shape(), dw).expect("dw"),
    )
}

/// Per-axis output size of a pooling window without padding.
fn pool_out(in_spatial: &[usize], window: &[usize], stride: &[usize]) -> Result<Vec<usize>> {
    if window.len() != in_spatial.len() || stride.len() != in_spatial.len() {
        return shape_err(format!(
            "pool: window {window:?} / stride {stride:?} for {in_spatial:?}"
        ));
    }
    in_spatial
        .iter()
        .zip(window.iter().zip(stride))
        .map(|(&d, (&w, &s))| {
            if w == 0 || s == 0 || w > d {
                shape_err(format!("pool: window {w} stride {s} on axis of size {d}"))
            } else {
                Ok((d - w) / s + 1)
            }
        })
        .collect()
}

/// Max-pool forward on plain tensors; also returns the flat argmax per output.
pub fn maxpool_nd_forward(
    x: &Tensor,
    window: &[usize],
    stride: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape();
    let Some((&c, spatial)) = shape.split_last() else {
        return shape_err("maxpool on a scalar");
    };
    let out_spatial = pool_out(spatial, window, stride)?;
    let in_strides = strides(spatial);
    let n_out = numel(&out_spatial);
    let mut out = Vec::with_capacity(n_out * c);
    let mut arg = Vec::with_capacity(n_out * c);
    let mut o_idx = vec![0usize; spatial.len()];
    let mut k_idx = vec![0usize; spatial.len()];
    let taps = numel(window);
    let mut offs = Vec::with_capacity(taps);
    for _ in 0..n_out {
        offs.clear();
        k_idx.iter_mut().for_each(|k| *k = 0);
        for _ in 0..taps {
            let off: usize = (0..spatial.len())
                .map(|a| (o_idx[a] * stride[a] + k_idx[a]) * in_strides[a])
                .sum();
            offs.push(off);
            advance(&mut k_idx, window);
        }
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = offs[0] * c + ch;
            for &off in &offs {
                let v = x.data()[off * c + ch];
                if v > best {
                    best = v;
                    best_at = off * c + ch;
                }
            }
            out.push(best);
            arg.push(best_at);
        }
        advance(&mut o_idx, &out_spatial);
    }
    let mut out_shape = out_spatial;
    out_shape.push(c);
    Ok((Tensor::new(&out_shape, out)?, arg))
}

/// Interpolation taps `(i0, i1, frac)` for align-corners linear resizing.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Align-corners linear resize of one axis on a plain tensor.
pub fn resize_linear_forward(x: &Tensor, axis: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || shape[axis] == 0 {
        return shape_err(format!("resize axis {axis} to {len} for {shape:?}"));
    }
    if shape[axis] == len {
        return Ok(x.clone());
    }
    let outer = numel(&shape[..axis]);
    let src = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let taps = resize_taps(src, len);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for (i, &(i0, i1, f)) in taps.iter().enumerate() {
            let dst = &mut out[(o * len + i) * inner..(o * len + i + 1) * inner];
            let a = &x.data()[(o * src + i0) * inner..(o * src + i0 + 1) * inner];
            let b = &x.data()[(o * src + i1) * inner..(o * src + i1 + 1) * inner];
            for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                *d = va * (1.0 - f) + vb * f;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, out)
}

fn resize_linear_backward(dy: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let len = dy.shape()[axis];
    let outer = numel(&in_shape[..axis]);
    let src = in_shape[axis];
    let inner = numel(&in_shape[axis + 1..]);
    let taps = resize_taps(src, len);
    let mut dx = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        for (i, &(i0, i1, f)) in taps.iter().enumerate() {
            let g = &dy.data()[(o * len + i) * inner..(o * len + i + 1) * inner];
            for (j, &gv) in g.iter().enumerate() {
                dx[(o * src + i0) * inner + j] += gv * (1.0 - f);
                dx[(o * src + i1) * inner + j] += gv * f;
            }
        }
    }
    Tensor::new(in_shape, dx).expect("resize grad")
}

impl Graph {
    /// Channels-last N-d convolution with zero padding.
    pub fn conv_nd(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let geom = Rc::new(ConvGeom::new(&self.shape(x), &self.shape(w), stride, pad)?);
        let b_val = bias.map(|b| self.value(b));
        if let Some(b) = &b_val {
            if b.shape() != [geom.cout] {
                return shape_err(format!(
                    "conv bias {:?} for {} outputs",
                    b.shape(),
                    geom.cout
                ));
            }
        }
        let out = conv_forward(&geom, &self.value(x), &self.value(w), b_val.as_deref());
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let need_x = self.requires_grad(x);
        Ok(self.push(out, &inputs, move |g, ins, _| {
            let (dx, dw) = conv_backward(&geom, &ins[0], &ins[1], g, need_x);
            let mut grads = vec![dx, Some(dw)];
            if has_bias {
                let n = geom.cout;
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                grads.push(Some(Tensor::new(&[n], db).expect("db")));
            }
            grads
        }))
    }

    pub fn maxpool_nd(&self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let (out, arg) = maxpool_nd_forward(&self.value(x), window, stride)?;
        let in_shape = self.shape(x);
        Ok(self.push(out, &[x], move |g, _, _| {
            let mut dx = Tensor::zeros(&in_shape);
            for (&src, &gv) in arg.iter().zip(g.data()) {
                dx.data_mut()[src] += gv;
            }
            vec![Some(dx)]
        }))
    }

    /// Align-corners linear interpolation of one axis to length `len`.
    pub fn resize_linear(&self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(x);
        if in_shape.get(axis) == Some(&len) {
            return Ok(x);
        }
        let out = resize_linear_forward(&self.value(x), axis, len)?;
        Ok(self.push(out, &[x], move |g, _, _| {
            vec![Some(resize_linear_backward(g, &in_shape, axis))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop 2-D convolution.
    fn conv2d_loops(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2));
        let (kh, kw, cout) = (w.dim(0), w.dim(1), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[oh, ow, cout], |i| {
            let mut s = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    let y = (i[0] * stride + a) as isize - pad as isize;
                    let xx = (i[1] * stride + b) as isize - pad as isize;
                    if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
                        continue;
                    }
                    for c in 0..cin {
                        s += x.get(&[y as usize, xx as usize, c]) * w.get(&[a, b, c, i[2]]);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv2d_matches_loops() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[7, 6, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 3, 4], 1.0, &mut r);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 2)] {
            let got = conv_nd_forward(&x, &w, None, &[stride, stride], &[pad, pad]).unwrap();
            let want = conv2d_loops(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[2, 2, 1]);
        let w = Tensor::zeros(&[5, 5, 1, 1]);
        assert!(conv_nd_forward(&x, &w, None, &[1, 1], &[1, 1]).is_err());
    }

    #[test]
    fn resize_ramp_align_corners() {
        let x = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let y = resize_linear_forward(&x, 0, 4).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_pool_resize_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 4, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 2, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        assert_gradcheck(GradCheck::default(), &[x.clone(), w, b], |g, v| {
            g.conv_nd(v[0], v[1], Some(v[2]), &[2, 1], &[1, 1])
        });
        assert_gradcheck(GradCheck::default(), &[x.clone()], |g, v| {
            g.maxpool_nd(v[0], &[2, 2], &[2, 1])
        });
        assert_gradcheck(GradCheck::default(), &[x], |g, v| {
            let y = g.resize_linear(v[0], 0, 9)?;
            g.resize_linear(y, 1, 7)
        });
    }
}
