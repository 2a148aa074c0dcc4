//! Mask decoding from the aggregated volume.
//!
//! The support axes are averaged out, giving a query-resolution map. Each
//! decoder stage concatenates a projected query feature map of the same
//! resolution, refines the result with 2D shifted-window blocks, projects
//! the channels and doubles the resolution. A final linear head produces
//! two logits (background, foreground) at image resolution.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, VatError};
use crate::nn::{Linear, ParamSet};
use crate::swin4d::{SwinConfig, Vtm};
use crate::tensor::Tensor;

/// Mean over the two support axes: `(h_q, w_q, h_s, w_s, D) → (h_q, w_q, D)`.
pub fn pool_support(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 5 {
        return shape_err(format!("pool_support: expected a 5-D volume, got {s:?}"));
    }
    let (hq, wq, ns, d) = (s[0], s[1], s[2] * s[3], s[4]);
    let mut out = vec![0.0; hq * wq * d];
    for (q, dst) in out.chunks_mut(d).enumerate() {
        for k in 0..ns {
            let src = &a.data()[(q * ns + k) * d..(q * ns + k + 1) * d];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|o| *o /= ns as f64);
    }
    Tensor::new(&[hq, wq, d], out)
}

/// Graph version of [`pool_support`].
pub fn pool_support_var(g: &Graph, a: Var) -> Result<Var> {
    let s = g.shape(a);
    if s.len() != 5 {
        return shape_err(format!("pool_support: expected a 5-D volume, got {s:?}"));
    }
    g.mean_axis(g.reshape(a, &[s[0], s[1], s[2] * s[3], s[4]])?, 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Channels of the query feature map fed to this stage.
    pub feature_channels: usize,
    /// Width of its projected appearance embedding.
    pub appearance_dim: usize,
    /// Channels after the stage's output projection.
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub in_dim: usize,
    pub stages: Vec<StageConfig>,
    pub swin: SwinConfig,
}

#[derive(Debug)]
pub struct DecoderStage {
    pub appearance: Linear,
    pub vtm: Vtm,
    pub proj: Linear,
}

impl DecoderStage {
    /// `x` is `(h, w, C)` and `features` the `(h, w, C_f)` query map; returns
    /// `(out.0, out.1, out_dim)`, normally `out = (2h, 2w)`.
    pub fn forward(&self, g: &Graph, x: Var, features: Var, out: (usize, usize)) -> Result<Var> {
        let xs = g.shape(x);
        let fs = g.shape(features);
        if xs.len() != 3 || fs.len() != 3 || xs[..2] != fs[..2] {
            return shape_err(format!(
                "decoder stage: volume {xs:?} and appearance {fs:?} resolutions differ"
            ));
        }
        let app = self.appearance.forward(g, features)?;
        let h = g.concat(&[x, app], 2)?;
        let h = self.vtm.forward(g, h)?;
        let h = g.relu(self.proj.forward(g, h)?);
        let h = g.resize_linear(h, 0, out.0)?;
        g.resize_linear(h, 1, out.1)
    }
}

#[derive(Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    pub head: Linear,
}

impl Decoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.stages.is_empty() {
            return Err(VatError::Config("decoder needs at least one stage".into()));
        }
        let mut width = cfg.in_dim;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let cat = width + s.appearance_dim;
            if cat % cfg.swin.heads != 0 {
                return Err(VatError::Config(format!(
                    "decoder stage {i}: {cat} channels cannot be split into {} heads",
                    cfg.swin.heads
                )));
            }
            stages.push(DecoderStage {
                appearance: Linear::new(
                    params,
                    &format!("{name}.{i}.appearance"),
                    s.feature_channels,
                    s.appearance_dim,
                    true,
                    rng,
                ),
                vtm: Vtm::new(params, &format!("{name}.{i}.vtm"), cat, 2, cfg.swin, rng)?,
                proj: Linear::new(
                    params,
                    &format!("{name}.{i}.proj"),
                    cat,
                    s.out_dim,
                    true,
                    rng,
                ),
            });
            width = s.out_dim;
        }
        let head = Linear::new(params, &format!("{name}.head"), width, 2, true, rng);
        Ok(Self { stages, head })
    }

    /// `aggregated` is the finest `(h_q, w_q, h_s, w_s, D)` volume,
    /// `features` one query map per stage (coarse to fine). Returns
    /// `(H, W, 2)` logits.
    pub fn forward(
        &self,
        g: &Graph,
        aggregated: Var,
        features: &[Var],
        image: (usize, usize),
    ) -> Result<Var> {
        if features.len() != self.stages.len() {
            return shape_err(format!(
                "decoder: {} appearance maps for {} stages",
                features.len(),
                self.stages.len()
            ));
        }
        let mut x = pool_support_var(g, aggregated)?;
        for (i, (stage, &f)) in self.stages.iter().zip(features).enumerate() {
            let out = match features.get(i + 1) {
                Some(&next) => {
                    let s = g.shape(next);
                    (s[0], s[1])
                }
                None => {
                    let s = g.shape(f);
                    (2 * s[0], 2 * s[1])
                }
            };
            x = stage.forward(g, x, f, out)?;
        }
        let logits = self.head.forward(g, x)?;
        let logits = g.resize_linear(logits, 0, image.0)?;
        g.resize_linear(logits, 1, image.1)
    }
}

/// Foreground where the foreground logit is strictly larger.
pub fn predict_mask(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 || s[2] != 2 {
        return shape_err(format!(
            "predict_mask: expected (H, W, 2) logits, got {s:?}"
        ));
    }
    let data = logits
        .data()
        .chunks(2)
        .map(|p| f64::from(p[1] > p[0]))
        .collect();
    Tensor::new(&s[..2], data)
}

/// Mean binary cross-entropy between `(H, W, 2)` logits and a binary mask.
pub fn mask_loss(g: &Graph, logits: Var, target: &Tensor) -> Result<Var> {
    g.cross_entropy2(logits, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck, assert_gradcheck_params, GradCheck};
    use crate::nn::eval_with;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_support_averages() {
        let a = Tensor::from_fn(&[2, 1, 2, 2, 1], |i| (i[0] * 10 + i[2] * 2 + i[3]) as f64);
        let p = pool_support(&a).unwrap();
        assert_eq!(p.data(), &[1.5, 11.5]);
        let c = Tensor::full(&[2, 3, 4, 2, 5], 2.5);
        assert_eq!(pool_support(&c).unwrap(), Tensor::full(&[2, 3, 5], 2.5));
    }

    #[test]
    fn pool_support_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 2, 3, 2, 3], 1.0, &mut r);
        assert_gradcheck(GradCheck::default(), &[x.clone()], |g, v| {
            pool_support_var(g, v[0])
        });
        let g = Graph::new();
        let v = pool_support_var(&g, g.constant(x.clone())).unwrap();
        assert!(g.value(v).max_abs_diff(&pool_support(&x).unwrap()) < 1e-15);
    }

    #[test]
    fn prediction_ties_go_to_background() {
        let l = Tensor::new(&[1, 3, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(predict_mask(&l).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    fn tiny_decoder(params: &mut ParamSet) -> Decoder {
        let cfg = DecoderConfig {
            in_dim: 4,
            stages: vec![
                StageConfig {
                    feature_channels: 3,
                    appearance_dim: 4,
                    out_dim: 4,
                },
                StageConfig {
                    feature_channels: 2,
                    appearance_dim: 2,
                    out_dim: 2,
                },
            ],
            swin: SwinConfig {
                window: 2,
                heads: 2,
                depth: 2,
                mlp_ratio: 2,
            },
        };
        Decoder::new(params, "dec", &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn decoder_shapes_and_errors() {
        let mut params = ParamSet::new();
        let dec = tiny_decoder(&mut params);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let agg = Tensor::randn(&[2, 2, 2, 2, 4], 1.0, &mut r);
        let f1 = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let f2 = Tensor::randn(&[4, 4, 2], 1.0, &mut r);
        let out = eval_with(&params, |g| {
            let fs = [g.constant(f1.clone()), g.constant(f2.clone())];
            dec.forward(g, g.constant(agg.clone()), &fs, (8, 8))
        })
        .unwrap();
        assert_eq!(out.shape(), &[8, 8, 2]);
        let bad = eval_with(&params, |g| {
            let fs = [g.constant(f2.clone()), g.constant(f1.clone())];
            dec.forward(g, g.constant(agg.clone()), &fs, (8, 8))
        });
        assert!(bad.is_err());
    }

    #[test]
    fn decoder_stage_grads() {
        let mut params = ParamSet::new();
        let dec = tiny_decoder(&mut params);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
        let f = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        assert_gradcheck_params(GradCheck::default(), &params, &[x, f], |g, v| {
            dec.stages[0].forward(g, v[0], v[1], (4, 4))
        });
    }
}
