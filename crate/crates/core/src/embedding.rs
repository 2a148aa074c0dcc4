//! Reduction of stacked correlation volumes to a `D`-channel embedding.
//!
//! Two embedders are provided. [`Vem`] is a non-overlapping 4D patch
//! projection (one strided linear map per patch). [`Vcm`] is the default: a
//! stack of overlapping 4D convolutions, each optionally preceded by max
//! pooling and followed by ReLU and group normalisation, which keeps the
//! output translation equivariant up to its total stride.

use rand::Rng;

use crate::autograd::{conv_nd_forward, maxpool_nd_forward, Graph, Var};
use crate::correlation::{ChannelKind, CorrelationVolume};
use crate::error::{shape_err, Result, VatError};
use crate::nn::{kaiming, GroupNorm, ParamId, ParamSet};
use crate::tensor::Tensor;

/// `(h_q, w_q, h_s, w_s, D)` volume produced by an embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedVolume(pub Tensor);

impl EmbeddedVolume {
    pub fn spatial(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn dim(&self) -> usize {
        self.0.dim(4)
    }

    pub fn into_volume(self) -> Result<CorrelationVolume> {
        CorrelationVolume::new(self.0, ChannelKind::Embedded)
    }
}

fn check_rank5(x: &[usize], what: &str) -> Result<()> {
    if x.len() != 5 {
        return shape_err(format!(
            "{what}: expected (h_q, w_q, h_s, w_s, C), got {x:?}"
        ));
    }
    Ok(())
}

/// 4D convolution, channels last. `kernel` is `(m0, m1, m2, m3, C_in, C_out)`;
/// output size per axis is `floor((in + 2·pad − m) / stride) + 1`.
pub fn conv4d(
    x: &Tensor,
    kernel: &Tensor,
    stride: [usize; 4],
    padding: [usize; 4],
) -> Result<Tensor> {
    check_rank5(x.shape(), "conv4d")?;
    if kernel.rank() != 6 {
        return shape_err(format!(
            "conv4d: kernel must be 6-D, got {:?}",
            kernel.shape()
        ));
    }
    conv_nd_forward(x, kernel, None, &stride, &padding)
}

/// 4D max pooling without padding.
pub fn maxpool4d(x: &Tensor, window: [usize; 4], stride: [usize; 4]) -> Result<Tensor> {
    check_rank5(x.shape(), "maxpool4d")?;
    Ok(maxpool_nd_forward(x, &window, &stride)?.0)
}

/// Non-overlapping patch embedding: a `patch⁴` strided linear projection.
#[derive(Clone, Debug)]
pub struct Vem {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: [usize; 4],
    pub in_channels: usize,
    pub out_dim: usize,
}

impl Vem {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        patch: [usize; 4],
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = patch.iter().product::<usize>() * in_channels;
        let shape = [patch[0], patch[1], patch[2], patch[3], in_channels, out_dim];
        Self {
            weight: params.add(format!("{name}.weight"), kaiming(&shape, fan_in, rng)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            patch,
            in_channels,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        check_rank5(&shape, "vem")?;
        for (a, (&d, &p)) in shape.iter().zip(&self.patch).enumerate() {
            if d % p != 0 {
                return shape_err(format!(
                    "vem: axis {a} of size {d} is not divisible by patch {p}"
                ));
            }
        }
        g.conv_nd(
            x,
            g.param(self.weight),
            Some(g.param(self.bias)),
            &self.patch,
            &[0; 4],
        )
    }

    pub fn embed(&self, params: &ParamSet, vol: &CorrelationVolume) -> Result<EmbeddedVolume> {
        let g = Graph::with_params(params, false);
        let x = g.constant(vol.values().clone());
        let y = self.forward(&g, x)?;
        Ok(EmbeddedVolume(g.value(y).as_ref().clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: [usize; 4],
    pub stride: [usize; 4],
}

/// One pool → conv → ReLU → GroupNorm stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VcmStage {
    pub pool: Option<PoolSpec>,
    pub kernel: [usize; 4],
    pub stride: [usize; 4],
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VcmConfig {
    pub stages: Vec<VcmStage>,
    pub groups: usize,
}

impl VcmConfig {
    /// Two `3⁴` stride-1 convolutions to `D/2` then `D` channels with four
    /// norm groups. With `pool_support`, a `2×2` max pool over the support
    /// axes precedes the first convolution.
    pub fn standard(dim: usize, pool_support: bool) -> Self {
        let pool = pool_support.then_some(PoolSpec {
            window: [1, 1, 2, 2],
            stride: [1, 1, 2, 2],
        });
        Self {
            stages: vec![
                VcmStage {
                    pool,
                    kernel: [3; 4],
                    stride: [1; 4],
                    out_channels: dim / 2,
                },
                VcmStage {
                    pool: None,
                    kernel: [3; 4],
                    stride: [1; 4],
                    out_channels: dim,
                },
            ],
            groups: 4,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Product of pooling and convolution strides along each axis.
    pub fn total_stride(&self) -> [usize; 4] {
        let mut t = [1; 4];
        for s in &self.stages {
            for a in 0..4 {
                t[a] *= s.stride[a] * s.pool.map_or(1, |p| p.stride[a]);
            }
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(VatError::Config("VCM needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel.iter().any(|&m| m < 3 || m % 2 == 0) {
                return Err(VatError::Config(format!(
                    "VCM stage {i}: kernel sizes must be odd and >= 3, got {:?}",
                    s.kernel
                )));
            }
            if s.stride.contains(&0) || s.out_channels == 0 {
                return Err(VatError::Config(format!(
                    "VCM stage {i}: zero stride or width"
                )));
            }
            if self.groups == 0 || s.out_channels % self.groups != 0 {
                return Err(VatError::Config(format!(
                    "VCM stage {i}: {} channels not divisible into {} groups",
                    s.out_channels, self.groups
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct VcmLayer {
    spec: VcmStage,
    weight: ParamId,
    bias: ParamId,
    norm: GroupNorm,
}

/// Overlapping convolutional volume embedding.
#[derive(Clone, Debug)]
pub struct Vcm {
    layers: Vec<VcmLayer>,
    config: VcmConfig,
    in_channels: usize,
}

impl Vcm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        config: VcmConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut cin = in_channels;
        let mut layers = Vec::with_capacity(config.stages.len());
        for (i, spec) in config.stages.iter().enumerate() {
            let k = spec.kernel;
            let fan_in = k.iter().product::<usize>() * cin;
            let weight = params.add(
                format!("{name}.{i}.conv.weight"),
                kaiming(
                    &[k[0], k[1], k[2], k[3], cin, spec.out_channels],
                    fan_in,
                    rng,
                ),
            );
            let bias = params.add(
                format!("{name}.{i}.conv.bias"),
                Tensor::zeros(&[spec.out_channels]),
            );
            let norm = GroupNorm::new(
                params,
                &format!("{name}.{i}.norm"),
                spec.out_channels,
                config.groups,
            );
            layers.push(VcmLayer {
                spec: *spec,
                weight,
                bias,
                norm,
            });
            cin = spec.out_channels;
        }
        Ok(Self {
            layers,
            config,
            in_channels,
        })
    }

    pub fn config(&self) -> &VcmConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        check_rank5(&shape, "vcm")?;
        if shape[4] != self.in_channels {
            return shape_err(format!(
                "vcm: expected {} input channels, got {}",
                self.in_channels, shape[4]
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            if let Some(pool) = layer.spec.pool {
                h = g.maxpool_nd(h, &pool.window, &pool.stride)?;
            }
            let pad: Vec<usize> = layer.spec.kernel.iter().map(|m| (m - 1) / 2).collect();
            h = g.conv_nd(
                h,
                g.param(layer.weight),
                Some(g.param(layer.bias)),
                &layer.spec.stride,
                &pad,
            )?;
            h = g.relu(h);
            h = layer.norm.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn embed(&self, params: &ParamSet, vol: &CorrelationVolume) -> Result<EmbeddedVolume> {
        let g = Graph::with_params(params, false);
        let x = g.constant(vol.values().clone());
        let y = self.forward(&g, x)?;
        Ok(EmbeddedVolume(g.value(y).as_ref().clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck, assert_gradcheck_params, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Nested-loop 4D convolution.
    fn conv4d_loops(x: &Tensor, w: &Tensor, stride: [usize; 4], pad: [usize; 4]) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let out: Vec<usize> = (0..4)
            .map(|a| (xs[a] + 2 * pad[a] - ws[a]) / stride[a] + 1)
            .collect();
        let (cin, cout) = (ws[4], ws[5]);
        Tensor::from_fn(&[out[0], out[1], out[2], out[3], cout], |o| {
            let mut acc = 0.0;
            for k0 in 0..ws[0] {
                for k1 in 0..ws[1] {
                    for k2 in 0..ws[2] {
                        for k3 in 0..ws[3] {
                            let k = [k0, k1, k2, k3];
                            let mut pos = [0usize; 4];
                            let mut inside = true;
                            for a in 0..4 {
                                let p = (o[a] * stride[a] + k[a]) as isize - pad[a] as isize;
                                if p < 0 || p >= xs[a] as isize {
                                    inside = false;
                                }
                                pos[a] = p.max(0) as usize;
                            }
                            if !inside {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.get(&[pos[0], pos[1], pos[2], pos[3], ci])
                                    * w.get(&[k0, k1, k2, k3, ci, o[4]]);
                            }
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv4d_matches_loops() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 4, 3, 6, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 1, 3, 2, 3], 1.0, &mut r);
        for (stride, pad) in [([1; 4], [1, 1, 0, 1]), ([2, 1, 1, 2], [1, 0, 0, 1])] {
            let got = conv4d(&x, &w, stride, pad).unwrap();
            let want = conv4d_loops(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv4d_all_ones_counts_taps() {
        let x = Tensor::full(&[5, 5, 5, 5, 1], 1.0);
        let w = Tensor::full(&[3, 3, 3, 3, 1, 1], 1.0);
        let y = conv4d(&x, &w, [1; 4], [1; 4]).unwrap();
        assert_eq!(y.shape(), &[5, 5, 5, 5, 1]);
        assert_eq!(y.get(&[2, 2, 2, 2, 0]), 81.0);
        assert_eq!(y.get(&[0, 0, 0, 0, 0]), 16.0);
    }

    #[test]
    fn conv4d_oversized_kernel_rejected() {
        let x = Tensor::zeros(&[2, 2, 2, 2, 1]);
        let w = Tensor::zeros(&[5, 1, 1, 1, 1, 1]);
        assert!(conv4d(&x, &w, [1; 4], [1; 4]).is_err());
        assert!(conv4d(&x, &w, [1; 4], [2, 0, 0, 0]).is_ok());
    }

    #[test]
    fn vem_shapes() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let vem = Vem::new(&mut params, "vem", 3, [2; 4], 16, &mut r);
        let vol = CorrelationVolume::new(
            Tensor::uniform(&[8, 8, 8, 8, 3], 0.0, 1.0, &mut r),
            ChannelKind::StackedLevels,
        )
        .unwrap();
        let e = vem.embed(&params, &vol).unwrap();
        assert_eq!(e.0.shape(), &[4, 4, 4, 4, 16]);
        let odd =
            CorrelationVolume::new(Tensor::zeros(&[7, 8, 8, 8, 3]), ChannelKind::StackedLevels)
                .unwrap();
        assert!(vem.embed(&params, &odd).is_err());
    }

    #[test]
    fn vcm_standard_shapes() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let vcm = Vcm::new(&mut params, "vcm", 2, VcmConfig::standard(8, true), &mut r).unwrap();
        let vol = CorrelationVolume::new(
            Tensor::uniform(&[4, 3, 6, 4, 2], 0.0, 1.0, &mut r),
            ChannelKind::StackedLevels,
        )
        .unwrap();
        let e = vcm.embed(&params, &vol).unwrap();
        assert_eq!(e.0.shape(), &[4, 3, 3, 2, 8]);
        assert_eq!(vcm.config().total_stride(), [1, 1, 2, 2]);
    }

    #[test]
    fn vcm_config_validation() {
        let mut bad = VcmConfig::standard(8, false);
        bad.stages[0].kernel = [2, 3, 3, 3];
        assert!(bad.validate().is_err());
        let mut groups = VcmConfig::standard(8, false);
        groups.groups = 3;
        assert!(groups.validate().is_err());
    }

    #[test]
    fn conv4d_and_pool_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 3, 4, 3, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 3, 3, 2, 2], 0.3, &mut r);
        assert_gradcheck(GradCheck::default(), &[x.clone(), w], |g, v| {
            g.conv_nd(v[0], v[1], None, &[1; 4], &[1; 4])
        });
        assert_gradcheck(GradCheck::default(), &[x], |g, v| {
            g.maxpool_nd(v[0], &[1, 2, 2, 2], &[1, 1, 2, 1])
        });
    }

    #[test]
    fn vcm_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let vcm = Vcm::new(&mut params, "vcm", 2, VcmConfig::standard(8, true), &mut r).unwrap();
        let x = Tensor::uniform(&[3, 3, 4, 4, 2], 0.0, 1.0, &mut r);
        assert_gradcheck_params(GradCheck::default(), &params, &[x], |g, v| {
            vcm.forward(g, v[0])
        });
    }
}
