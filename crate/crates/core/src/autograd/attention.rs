//! Fused multi-head scaled dot-product attention over batches of windows.

use std::rc::Rc;

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

/// Boolean attention mask of shape `[windows, T, T]`; `true` means the key is
/// visible to the query. A single-window mask is shared by every batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub windows: usize,
    pub tokens: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn window(&self, b: usize) -> &[bool] {
        let t2 = self.tokens * self.tokens;
        let w = if self.windows == 1 { 0 } else { b };
        &self.allowed[w * t2..(w + 1) * t2]
    }

    pub fn is_trivial(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

struct AttnDims {
    batch: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
}

fn check_dims(
    q: &[usize],
    k: &[usize],
    v: &[usize],
    bias: Option<&[usize]>,
    mask: Option<&AttnMask>,
) -> Result<AttnDims> {
    if q.len() != 4 || q != k || q != v {
        return shape_err(format!(
            "attention: q {q:?}, k {k:?}, v {v:?} must agree and be [B, H, T, d]"
        ));
    }
    let dims = AttnDims {
        batch: q[0],
        heads: q[1],
        tokens: q[2],
        head_dim: q[3],
    };
    if let Some(b) = bias {
        if b != [dims.heads, dims.tokens, dims.tokens] {
            return shape_err(format!(
                "attention: bias {b:?} for {} heads x {} tokens",
                dims.heads, dims.tokens
            ));
        }
    }
    if let Some(m) = mask {
        if m.tokens != dims.tokens || (m.windows != 1 && m.windows != dims.batch) {
            return shape_err(format!(
                "attention: mask for {} windows x {} tokens vs batch {} x {} tokens",
                m.windows, m.tokens, dims.batch, dims.tokens
            ));
        }
    }
    Ok(dims)
}

/// Forward pass on plain tensors. Returns the output `[B, H, T, d]` and the
/// attention probabilities `[B, H, T, T]`.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&AttnMask>,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let d = check_dims(
        q.shape(),
        k.shape(),
        v.shape(),
        bias.map(|b| b.shape()),
        mask,
    )?;
    let (t, dh) = (d.tokens, d.head_dim);
    let mut probs = vec![0.0; d.batch * d.heads * t * t];
    let mut out = vec![0.0; d.batch * d.heads * t * dh];
    for b in 0..d.batch {
        let allowed = mask.map(|m| m.window(b));
        for h in 0..d.heads {
            let slot = b * d.heads + h;
            let qs = &q.data()[slot * t * dh..(slot + 1) * t * dh];
            let ks = &k.data()[slot * t * dh..(slot + 1) * t * dh];
            let vs = &v.data()[slot * t * dh..(slot + 1) * t * dh];
            let p = &mut probs[slot * t * t..(slot + 1) * t * t];
            gemm(t, dh, t, qs, false, ks, true, 0.0, p);
            for x in p.iter_mut() {
                *x *= scale;
            }
            if let Some(bias) = bias {
                for (x, bb) in p.iter_mut().zip(&bias.data()[h * t * t..(h + 1) * t * t]) {
                    *x += bb;
                }
            }
            for (i, row) in p.chunks_mut(t).enumerate() {
                let vis = allowed.map(|a| &a[i * t..(i + 1) * t]);
                softmax_row(row, vis);
            }
            gemm(
                t,
                t,
                dh,
                p,
                false,
                vs,
                false,
                0.0,
                &mut out[slot * t * dh..(slot + 1) * t * dh],
            );
        }
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::new(&shape, out)?,
        Tensor::new(&[d.batch, d.heads, t, t], probs)?,
    ))
}

fn softmax_row(row: &mut [f64], visible: Option<&[bool]>) {
    let Some(vis) = visible else {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut()
            .for_each(|x| *x = crate::fastmath::exp(*x - m));
        let inv = 1.0 / row.iter().sum::<f64>();
        row.iter_mut().for_each(|x| *x *= inv);
        return;
    };
    let mut m = f64::NEG_INFINITY;
    for (&x, &v) in row.iter().zip(vis) {
        if v && x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for (x, &v) in row.iter_mut().zip(vis) {
        if v {
            *x = crate::fastmath::exp(*x - m);
            s += *x;
        } else {
            *x = 0.0;
        }
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|x| *x *= inv);
}

impl Graph {
    /// Multi-head attention over `[B, H, T, d]` queries/keys/values with an
    /// optional additive bias `[H, T, T]` and visibility mask.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<Rc<AttnMask>>,
        scale: f64,
    ) -> Result<Var> {
        let bias_val = bias.map(|b| self.value(b));
        let (out, probs) = attention_forward(
            &self.value(q),
            &self.value(k),
            &self.value(v),
            bias_val.as_deref(),
            mask.as_deref(),
            scale,
        )?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(out, &inputs, move |g, ins, _| {
            let shape = ins[0].shape();
            let (batch, heads, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
            let mut dq = vec![0.0; g.len()];
            let mut dk = vec![0.0; g.len()];
            let mut dv = vec![0.0; g.len()];
            let mut dbias = if has_bias {
                vec![0.0; heads * t * t]
            } else {
                Vec::new()
            };
            let mut dp = vec![0.0; t * t];
            for slot in 0..batch * heads {
                let h = slot % heads;
                let span = slot * t * dh..(slot + 1) * t * dh;
                let p = &probs.data()[slot * t * t..(slot + 1) * t * t];
                let go = &g.data()[span.clone()];
                gemm(
                    t,
                    dh,
                    t,
                    go,
                    false,
                    &ins[2].data()[span.clone()],
                    true,
                    0.0,
                    &mut dp,
                );
                gemm(t, t, dh, p, true, go, false, 0.0, &mut dv[span.clone()]);
                for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                    let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dprow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                if has_bias {
                    for (acc, &s) in dbias[h * t * t..(h + 1) * t * t].iter_mut().zip(&dp) {
                        *acc += s;
                    }
                }
                dp.iter_mut().for_each(|x| *x *= scale);
                gemm(
                    t,
                    t,
                    dh,
                    &dp,
                    false,
                    &ins[1].data()[span.clone()],
                    false,
                    0.0,
                    &mut dq[span.clone()],
                );
                gemm(
                    t,
                    t,
                    dh,
                    &dp,
                    true,
                    &ins[0].data()[span.clone()],
                    false,
                    0.0,
                    &mut dk[span],
                );
            }
            let mut grads = vec![
                Some(Tensor::new(shape, dq).expect("dq")),
                Some(Tensor::new(shape, dk).expect("dk")),
                Some(Tensor::new(shape, dv).expect("dv")),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(&[heads, t, t], dbias).expect("dbias")));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_keys_get_zero_weight_and_rows_normalise() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut r);
        let k = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut r);
        let v = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut r);
        let allowed: Vec<bool> = (0..16).map(|i| (i / 4) % 2 == (i % 4) % 2).collect();
        let mask = AttnMask {
            windows: 1,
            tokens: 4,
            allowed: allowed.clone(),
        };
        let (_, p) = attention_forward(&q, &k, &v, None, Some(&mask), 0.5).unwrap();
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (i, &pv) in p.data().iter().enumerate() {
            if !allowed[i % 16] {
                assert_eq!(pv, 0.0);
            }
        }
    }

    #[test]
    fn attention_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let shape = [3, 2, 5, 4];
        let inputs = vec![
            Tensor::randn(&shape, 1.0, &mut r),
            Tensor::randn(&shape, 1.0, &mut r),
            Tensor::randn(&shape, 1.0, &mut r),
            Tensor::randn(&[2, 5, 5], 1.0, &mut r),
        ];
        let allowed: Vec<bool> = (0..75)
            .map(|i| {
                let (r, c) = ((i / 5) % 5, i % 5);
                r == c || (r + 2 * c + i / 25) % 3 != 0
            })
            .collect();
        let mask = Rc::new(AttnMask {
            windows: 3,
            tokens: 5,
            allowed,
        });
        assert_gradcheck(GradCheck::default(), &inputs, move |g, v| {
            g.attention(v[0], v[1], v[2], Some(v[3]), Some(mask.clone()), 0.5)
        });
    }
}
