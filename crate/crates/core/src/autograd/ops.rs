//! Elementwise, layout, dense and reduction ops.

use std::rc::Rc;

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, numel, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return shape_err(format!("{op}: shape mismatch {sa:?} vs {sb:?}"));
    }
    Ok(())
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, &[a, b], |g, ins, _| {
            let ga = g.zip_map(&ins[1], |d, y| d * y).expect("same shape");
            let gb = g.zip_map(&ins[0], |d, x| d * x).expect("same shape");
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, &[a], move |g, _, _| vec![Some(g.scale(c))])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, &[a], |g, ins, _| {
            vec![Some(
                g.zip_map(&ins[0], |d, x| if x > 0.0 { d } else { 0.0 })
                    .expect("shape"),
            )]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + crate::fastmath::tanh(GELU_C * (x + 0.044715 * x * x * x))));
        self.push(out, &[a], |g, ins, _| {
            let d = g
                .zip_map(&ins[0], |d, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = crate::fastmath::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .expect("shape");
            vec![Some(d)]
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = numel(&self.shape(a)).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&self, a: Var, w: &Tensor) -> Result<Var> {
        if self.shape(a) != w.shape() {
            return shape_err(format!(
                "weighted_sum: {:?} vs {:?}",
                self.shape(a),
                w.shape()
            ));
        }
        let out = Tensor::scalar(self.value(a).dot(w));
        let w = w.clone();
        Ok(self.push(out, &[a], move |g, _, _| vec![Some(w.scale(g.item()))]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a);
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], move |g, _, _| {
            vec![Some(g.reshape(&in_shape).expect("reshape back"))]
        }))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push(out, &[a], move |g, _, _| {
            vec![Some(g.permute(&inverse).expect("inverse"))]
        }))
    }

    pub fn roll(&self, a: Var, shifts: &[isize]) -> Result<Var> {
        let out = self.value(a).roll(shifts)?;
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        Ok(self.push(out, &[a], move |g, _, _| {
            vec![Some(g.roll(&back).expect("roll back"))]
        }))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(a);
        let out = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(out, &[a], move |g, _, _| {
            let mut parts = Vec::new();
            let mut before_shape = in_shape.clone();
            before_shape[axis] = start;
            let mut after_shape = in_shape.clone();
            after_shape[axis] = in_shape[axis] - start - len;
            let before = Tensor::zeros(&before_shape);
            let after = Tensor::zeros(&after_shape);
            if start > 0 {
                parts.push(&before);
            }
            parts.push(g);
            if after_shape[axis] > 0 {
                parts.push(&after);
            }
            vec![Some(Tensor::concat(&parts, axis).expect("narrow grad"))]
        }))
    }

    /// Crop to the leading `shape` block on every axis.
    pub fn crop(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut v = a;
        for (axis, &d) in shape.iter().enumerate() {
            if self.shape(v)[axis] != d {
                v = self.narrow(v, axis, 0, d)?;
            }
        }
        Ok(v)
    }

    pub fn pad_end(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a);
        let out = self.value(a).pad_end(shape)?;
        Ok(self.push(out, &[a], move |g, _, _| {
            let mut t = g.clone();
            for (axis, &d) in in_shape.iter().enumerate() {
                if t.shape()[axis] != d {
                    t = t.narrow(axis, 0, d).expect("crop");
                }
            }
            vec![Some(t)]
        }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push(out, parts, move |g, _, _| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&s| {
                    let piece = g.narrow(axis, start, s).expect("concat grad");
                    start += s;
                    Some(piece)
                })
                .collect()
        }))
    }

    /// Affine map over the last axis: `x · w + b` with `w` of shape `[in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let Some(&k) = xs.last() else {
            return shape_err("linear on a scalar");
        };
        if ws.len() != 2 || ws[0] != k {
            return shape_err(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("linear: bias {:?} for width {n}", self.shape(b)));
            }
        }
        let m = numel(&xs) / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), false, wv.data(), false, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(out, &inputs, move |g, ins, _| {
            let (xv, wv) = (&ins[0], &ins[1]);
            let mut dx = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, wv.data(), true, 0.0, &mut dx);
            let mut dw = vec![0.0; k * n];
            gemm(k, m, n, xv.data(), true, g.data(), false, 0.0, &mut dw);
            let mut grads = vec![
                Some(Tensor::new(xv.shape(), dx).expect("dx")),
                Some(Tensor::new(wv.shape(), dw).expect("dw")),
            ];
            if has_bias {
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

    /// Mean over one axis, which is removed from the output shape.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return shape_err(format!("mean_axis {axis} for shape {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &av.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, &[a], move |g, _, _| {
            let inv = 1.0 / len as f64;
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (x, s) in dst.iter_mut().zip(src) {
                        *x = s * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, d).expect("mean grad"))]
        }))
    }

    /// Rows of `table` (`[R, C]`) selected by `index`, giving `[index.len(), C]`.
    pub fn gather_rows(&self, table: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return shape_err(format!("gather_rows: table must be 2-D, got {ts:?}"));
        }
        let (rows, c) = (ts[0], ts[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather_rows: index {bad} out of {rows} rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&tv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[index.len(), c], out)?;
        Ok(self.push(out, &[table], move |g, _, _| {
            let mut d = Tensor::zeros(&[rows, c]);
            for (r, &i) in index.iter().enumerate() {
                let src = &g.data()[r * c..(r + 1) * c];
                for (x, s) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *x += s;
                }
            }
            vec![Some(d)]
        }))
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let Some(&c) = shape.last() else {
            return shape_err("norm_last on a scalar");
        };
        let av = self.value(a);
        let norms: Vec<f64> = av
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(&shape[..shape.len() - 1], norms)?;
        Ok(self.push(out, &[a], move |g, ins, out| {
            let mut d = Tensor::zeros(&shape);
            for (r, (row, dst)) in ins[0]
                .data()
                .chunks(c)
                .zip(d.data_mut().chunks_mut(c))
                .enumerate()
            {
                let n = out.data()[r];
                if n > 0.0 {
                    for (x, v) in dst.iter_mut().zip(row) {
                        *x = g.data()[r] * v / n;
                    }
                }
            }
            vec![Some(d)]
        }))
    }

    /// Mean two-class cross-entropy of `logits` (`[..., 2]`, background first)
    /// against a binary `target` of the leading shape. Equivalent to binary
    /// cross-entropy on the logit difference.
    pub fn cross_entropy2(&self, logits: Var, target: &Tensor) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.last() != Some(&2) || ls[..ls.len() - 1] != *target.shape() {
            return shape_err(format!(
                "cross_entropy2: logits {ls:?} vs target {:?}",
                target.shape()
            ));
        }
        let lv = self.value(logits);
        let n = target.len();
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(2 * n);
        for (row, &t) in lv.data().chunks(2).zip(target.data()) {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            let lse = m + (e0 + e1).ln();
            let pick = if t > 0.5 { row[1] } else { row[0] };
            loss += lse - pick;
            probs.push(e0 / (e0 + e1));
            probs.push(e1 / (e0 + e1));
        }
        let out = Tensor::scalar(loss / n.max(1) as f64);
        let target = target.clone();
        Ok(self.push(out, &[logits], move |g, _, _| {
            let scale = g.item() / n.max(1) as f64;
            let mut d = probs.clone();
            for (row, &t) in d.chunks_mut(2).zip(target.data()) {
                let cls = usize::from(t > 0.5);
                row[cls] -= 1.0;
                row[0] *= scale;
                row[1] *= scale;
            }
            vec![Some(Tensor::new(&ls, d).expect("ce grad"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_forward_matches_loops() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 2], 1.0, &mut r);
        let b = Tensor::randn(&[2], 1.0, &mut r);
        let g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.value(g.linear(xv, wv, Some(bv)).unwrap());
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 =
                    (0..4).map(|k| x.get(&[i, k]) * w.get(&[k, j])).sum::<f64>() + b.get(&[j]);
                assert!((y.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_and_layout_grads() {
        let mut r = rng();
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        assert_gradcheck(GradCheck::default(), &[a.clone(), b.clone()], |g, v| {
            let s = g.mul(v[0], v[1])?;
            let s = g.add(s, v[0])?;
            let s = g.sub(s, v[1])?;
            let s = g.gelu(s);
            let p = g.permute(s, &[2, 0, 1])?;
            let p = g.roll(p, &[1, 0, -1])?;
            let n = g.narrow(p, 0, 1, 2)?;
            let c = g.concat(&[n, p], 0)?;
            let padded = g.pad_end(c, &[7, 3, 3])?;
            g.mean_axis(padded, 1)
        });
        assert_gradcheck(GradCheck::default(), &[a], |g, v| g.norm_last(v[0]));
    }

    #[test]
    fn linear_gather_ce_grads() {
        let mut r = rng();
        let x = Tensor::randn(&[5, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2], 1.0, &mut r);
        let b = Tensor::randn(&[2], 1.0, &mut r);
        let table = Tensor::randn(&[4, 2], 1.0, &mut r);
        let target = Tensor::new(&[5], vec![1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_gradcheck(GradCheck::default(), &[x, w, b, table], move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let t = g.gather_rows(v[3], Rc::new(vec![0, 3, 3, 1, 2]))?;
            let y = g.add(y, t)?;
            g.cross_entropy2(y, &target)
        });
    }

    #[test]
    fn cross_entropy_is_bce_on_logit_difference() {
        let g = Graph::new();
        let logits = g.constant(Tensor::new(&[2, 2], vec![0.3, 1.1, -0.4, 0.2]).unwrap());
        let target = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let loss = g.value(g.cross_entropy2(logits, &target).unwrap()).item();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want = -(sig(0.8).ln() + (1.0 - sig(0.6)).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }
}
