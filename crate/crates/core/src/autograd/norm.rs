//! Layer and group normalisation over channels-last tensors.

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Statistics layout over a flat `[positions, channels]` buffer. Layer norm
/// is one group per row; group norm pools every position of a channel group.
struct NormPlan {
    positions: usize,
    channels: usize,
    groups: usize,
    /// Statistics per (position, group) when true; per group over all positions otherwise.
    per_row: bool,
}

impl NormPlan {
    fn group_count(&self) -> usize {
        if self.per_row {
            self.positions * self.groups
        } else {
            self.groups
        }
    }

    fn group_of(&self, pos: usize, ch: usize) -> usize {
        let g = ch / (self.channels / self.groups);
        if self.per_row {
            pos * self.groups + g
        } else {
            g
        }
    }

    fn forward(&self, x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ng = self.group_count();
        let mut sum = vec![0.0; ng];
        let mut count = vec![0usize; ng];
        for (p, row) in x.chunks(self.channels).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let g = self.group_of(p, c);
                sum[g] += v;
                count[g] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut var = vec![0.0; ng];
        for (p, row) in x.chunks(self.channels).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let g = self.group_of(p, c);
                let d = v - mean[g];
                var[g] += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .zip(&count)
            .map(|(v, &n)| 1.0 / (v / n as f64 + NORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (p, (row, (xh, o))) in x
            .chunks(self.channels)
            .zip(
                xhat.chunks_mut(self.channels)
                    .zip(out.chunks_mut(self.channels)),
            )
            .enumerate()
        {
            for c in 0..self.channels {
                let g = self.group_of(p, c);
                xh[c] = (row[c] - mean[g]) * inv_std[g];
                o[c] = xh[c] * gamma[c] + beta[c];
            }
        }
        (out, xhat, inv_std)
    }

    fn backward(
        &self,
        dy: &[f64],
        xhat: &[f64],
        inv_std: &[f64],
        gamma: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ng = self.group_count();
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut m1 = vec![0.0; ng];
        let mut m2 = vec![0.0; ng];
        let mut count = vec![0usize; ng];
        for (p, (dyr, xr)) in dy
            .chunks(self.channels)
            .zip(xhat.chunks(self.channels))
            .enumerate()
        {
            for c in 0..self.channels {
                dgamma[c] += dyr[c] * xr[c];
                dbeta[c] += dyr[c];
                let g = self.group_of(p, c);
                let dxh = dyr[c] * gamma[c];
                m1[g] += dxh;
                m2[g] += dxh * xr[c];
                count[g] += 1;
            }
        }
        for g in 0..ng {
            m1[g] /= count[g] as f64;
            m2[g] /= count[g] as f64;
        }
        let mut dx = vec![0.0; dy.len()];
        for (p, ((dyr, xr), dxr)) in dy
            .chunks(self.channels)
            .zip(xhat.chunks(self.channels))
            .zip(dx.chunks_mut(self.channels))
            .enumerate()
        {
            for c in 0..self.channels {
                let g = self.group_of(p, c);
                dxr[c] = inv_std[g] * (dyr[c] * gamma[c] - m1[g] - xr[c] * m2[g]);
            }
        }
        (dx, dgamma, dbeta)
    }
}

impl Graph {
    /// Layer normalisation over the last axis with per-channel affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let Some(&c) = shape.last() else {
            return shape_err("layer_norm on a scalar");
        };
        let plan = NormPlan {
            positions: self.value(x).len() / c.max(1),
            channels: c,
            groups: 1,
            per_row: true,
        };
        self.normalize(x, gamma, beta, plan)
    }

    /// Group normalisation: statistics per channel group over every position.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let Some(&c) = shape.last() else {
            return shape_err("group_norm on a scalar");
        };
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {groups} groups for {c} channels"));
        }
        let plan = NormPlan {
            positions: self.value(x).len() / c.max(1),
            channels: c,
            groups,
            per_row: false,
        };
        self.normalize(x, gamma, beta, plan)
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, plan: NormPlan) -> Result<Var> {
        let c = plan.channels;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "norm affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let shape = self.shape(x);
        let (out, xhat, inv_std) = plan.forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x, gamma, beta], move |g, ins, _| {
            let (dx, dgamma, dbeta) = plan.backward(g.data(), &xhat, &inv_std, ins[1].data());
            vec![
                Some(Tensor::new(&shape, dx).expect("dx")),
                Some(Tensor::new(&[c], dgamma).expect("dgamma")),
                Some(Tensor::new(&[c], dbeta).expect("dbeta")),
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
    fn group_norm_of_groupwise_constant_is_beta() {
        let g = Graph::new();
        let x = Tensor::from_fn(&[3, 3, 4], |i| if i[2] < 2 { 5.0 } else { -1.5 });
        let gamma = g.constant(Tensor::full(&[4], 2.0));
        let beta = g.constant(Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.value(g.group_norm(g.constant(x), 2, gamma, beta).unwrap());
        for row in y.data().chunks(4) {
            for (v, b) in row.iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let x = g.constant(Tensor::randn(&[5, 8], 3.0, &mut r));
        let y = g.value(
            g.layer_norm(
                x,
                g.constant(Tensor::full(&[8], 1.0)),
                g.constant(Tensor::zeros(&[8])),
            )
            .unwrap(),
        );
        for row in y.data().chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn norm_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 2, 6], 1.0, &mut r);
        let gamma = Tensor::randn(&[6], 1.0, &mut r);
        let beta = Tensor::randn(&[6], 1.0, &mut r);
        assert_gradcheck(
            GradCheck::default(),
            &[x.clone(), gamma.clone(), beta.clone()],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        );
        assert_gradcheck(GradCheck::default(), &[x, gamma, beta], |g, v| {
            g.group_norm(v[0], 3, v[1], v[2])
        });
    }
}
