//! Coarse-to-fine aggregation across pyramid levels.
//!
//! Each level embeds its correlation volume with a [`Vcm`], adds the
//! upsampled output of the next coarser level, and refines the sum with a
//! [`Vtm`]. The finest level's output is the encoder result.

use rand::Rng;

use crate::autograd::{resize_linear_forward, Graph, Var};
use crate::embedding::{Vcm, VcmConfig};
use crate::error::{shape_err, Result, VatError};
use crate::nn::ParamSet;
use crate::swin4d::{SwinConfig, Vtm};
use crate::tensor::Tensor;

fn check_target(src: &[usize], target: [usize; 4]) -> Result<()> {
    if src.len() != 5 {
        return shape_err(format!("upsample: expected a 5-D volume, got {src:?}"));
    }
    if src[..4].iter().zip(&target).any(|(s, t)| t < s) {
        return shape_err(format!(
            "upsample: target {target:?} is smaller than source {:?}",
            &src[..4]
        ));
    }
    Ok(())
}

/// Separable align-corners linear interpolation over the four spatial axes.
pub fn upsample_volume(a: &Tensor, target: [usize; 4]) -> Result<Tensor> {
    check_target(a.shape(), target)?;
    let mut out = a.clone();
    for (axis, &len) in target.iter().enumerate() {
        if out.dim(axis) != len {
            out = resize_linear_forward(&out, axis, len)?;
        }
    }
    Ok(out)
}

/// Graph version of [`upsample_volume`].
pub fn upsample_var(g: &Graph, a: Var, target: [usize; 4]) -> Result<Var> {
    check_target(&g.shape(a), target)?;
    let mut out = a;
    for (axis, &len) in target.iter().enumerate() {
        out = g.resize_linear(out, axis, len)?;
    }
    Ok(out)
}

/// Configuration of one pyramid level: input channel count (stacked feature
/// levels) and its volume embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub in_channels: usize,
    pub vcm: VcmConfig,
}

#[derive(Debug)]
pub struct EncoderLevel {
    pub vcm: Vcm,
    pub vtm: Vtm,
}

/// Encoder over pyramid levels ordered coarsest first.
#[derive(Debug)]
pub struct PyramidEncoder {
    pub levels: Vec<EncoderLevel>,
    pub dim: usize,
}

impl PyramidEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        levels: &[LevelConfig],
        swin: SwinConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(VatError::Config("encoder needs at least one level".into()));
        };
        let dim = first.vcm.out_dim();
        if levels.iter().any(|l| l.vcm.out_dim() != dim) {
            return Err(VatError::Config(
                "every encoder level must embed to the same width".into(),
            ));
        }
        let levels = levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(EncoderLevel {
                    vcm: Vcm::new(
                        params,
                        &format!("{name}.{i}.vcm"),
                        l.in_channels,
                        l.vcm.clone(),
                        rng,
                    )?,
                    vtm: Vtm::new(params, &format!("{name}.{i}.vtm"), dim, 4, swin, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels, dim })
    }

    /// Aggregates one level: `VTM(VCM(volume) + guidance)`, where `guidance`
    /// must already have the embedded volume's shape.
    pub fn level(
        &self,
        g: &Graph,
        index: usize,
        volume: Var,
        guidance: Option<Var>,
    ) -> Result<Var> {
        let level = self
            .levels
            .get(index)
            .ok_or_else(|| VatError::InvalidInput(format!("encoder has no level {index}")))?;
        let mut e = level.vcm.forward(g, volume)?;
        if let Some(guide) = guidance {
            e = g.add(e, guide)?;
        }
        level.vtm.forward(g, e)
    }

    /// Runs every level coarse to fine and returns all aggregated volumes.
    pub fn encode_all(&self, g: &Graph, volumes: &[Var]) -> Result<Vec<Var>> {
        if volumes.len() != self.levels.len() {
            return shape_err(format!(
                "encoder: {} volumes for {} levels",
                volumes.len(),
                self.levels.len()
            ));
        }
        let mut outs: Vec<Var> = Vec::with_capacity(volumes.len());
        for (i, &vol) in volumes.iter().enumerate() {
            let guidance = match outs.last() {
                None => None,
                Some(&prev) => {
                    let e_shape = self.embedded_shape(g, i, vol)?;
                    Some(upsample_var(
                        g,
                        prev,
                        [e_shape[0], e_shape[1], e_shape[2], e_shape[3]],
                    )?)
                }
            };
            outs.push(self.level(g, i, vol, guidance)?);
        }
        Ok(outs)
    }

    /// Finest-level aggregation.
    pub fn encode(&self, g: &Graph, volumes: &[Var]) -> Result<Var> {
        Ok(*self
            .encode_all(g, volumes)?
            .last()
            .expect("at least one level"))
    }

    /// Spatial shape of level `index`'s embedding for a given input volume.
    fn embedded_shape(&self, g: &Graph, index: usize, vol: Var) -> Result<Vec<usize>> {
        let shape = g.shape(vol);
        if shape.len() != 5 {
            return shape_err(format!("encoder: volume {shape:?} is not 5-D"));
        }
        let mut dims: Vec<usize> = shape[..4].to_vec();
        for stage in &self.levels[index].vcm.config().stages {
            for a in 0..4 {
                if let Some(p) = stage.pool {
                    if dims[a] < p.window[a] {
                        return shape_err(format!(
                            "encoder: axis {a} of size {} is smaller than pool window",
                            dims[a]
                        ));
                    }
                    dims[a] = (dims[a] - p.window[a]) / p.stride[a] + 1;
                }
                let pad = (stage.kernel[a] - 1) / 2;
                dims[a] = (dims[a] + 2 * pad - stage.kernel[a]) / stage.stride[a] + 1;
            }
        }
        Ok(dims)
    }
}
