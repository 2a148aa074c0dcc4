use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

/// Vectors with a norm below this are treated as zero: their cosine with
/// anything is 0.
pub const ZERO_NORM: f64 = 1e-12;

fn normalize_rows(x: &Tensor, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.len() / c.max(1));
    for row in unit.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < ZERO_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
    }
    (unit, norms)
}

fn check(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return shape_err(format!(
            "cosine: expected [N, C] x [M, C], got {a:?} x {b:?}"
        ));
    }
    Ok((a[0], b[0], a[1]))
}

/// `ReLU(cos(a_i, b_j))` for every row pair of `a` (`[N, C]`) and `b` (`[M, C]`).
pub fn cosine_relu_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m, c) = check(a.shape(), b.shape())?;
    let (ua, _) = normalize_rows(a, c);
    let (ub, _) = normalize_rows(b, c);
    let mut out = vec![0.0; n * m];
    gemm(n, c, m, &ua, false, &ub, true, 0.0, &mut out);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[n, m], out)
}

/// Gradient of unit-normalisation: `(g - u (u·g)) / |x|`, zero for null rows.
fn unnormalize_grad(gu: &mut [f64], unit: &[f64], norms: &[f64], c: usize) {
    for ((g, u), &n) in gu.chunks_mut(c).zip(unit.chunks(c)).zip(norms) {
        if n < ZERO_NORM {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for (gv, uv) in g.iter_mut().zip(u) {
            *gv = (*gv - uv * dot) / n;
        }
    }
}

impl Graph {
    /// Rectified cosine similarity between all rows of `a` and `b`.
    pub fn cosine_relu(&self, a: Var, b: Var) -> Result<Var> {
        let (n, m, c) = check(&self.shape(a), &self.shape(b))?;
        let out = cosine_relu_forward(&self.value(a), &self.value(b))?;
        Ok(self.push(out, &[a, b], move |g, ins, out| {
            let (ua, na) = normalize_rows(&ins[0], c);
            let (ub, nb) = normalize_rows(&ins[1], c);
            let gated: Vec<f64> = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(&d, &y)| if y > 0.0 && y < 1.0 { d } else { 0.0 })
                .collect();
            let mut da = vec![0.0; n * c];
            gemm(n, m, c, &gated, false, &ub, false, 0.0, &mut da);
            let mut db = vec![0.0; m * c];
            gemm(m, n, c, &gated, true, &ua, false, 0.0, &mut db);
            unnormalize_grad(&mut da, &ua, &na, c);
            unnormalize_grad(&mut db, &ub, &nb, c);
            vec![
                Some(Tensor::new(&[n, c], da).expect("da")),
                Some(Tensor::new(&[m, c], db).expect("db")),
            ]
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
    fn cosine_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[5, 3], 1.0, &mut r);
        assert_gradcheck(GradCheck::default(), &[a, b], |g, v| {
            g.cosine_relu(v[0], v[1])
        });
    }
}
