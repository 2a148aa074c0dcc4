//! The assembled few-shot segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{BackboneFeatures, TinyBackbone, WIDTHS};
use super::config::RunConfig;
use crate::autograd::{Graph, Var};
use crate::correlation::stack_levels_graph;
use crate::decoder::{predict_mask, Decoder, DecoderConfig, StageConfig};
use crate::embedding::VcmConfig;
use crate::encoder::{LevelConfig, PyramidEncoder};
use crate::error::{shape_err, Result};
use crate::metrics::kshot_vote;
use crate::nn::ParamSet;
use crate::swin4d::SwinConfig;
use crate::tensor::Tensor;

/// Backbone outputs held as tensors: the stem map and six stage maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensors {
    pub stem: Tensor,
    pub maps: Vec<Tensor>,
}

impl FeatureTensors {
    /// Binds the maps as graph constants after checking channel widths and resolutions.
    pub fn bind(&self, g: &Graph) -> Result<BackboneFeatures> {
        if self.maps.len() != 6 {
            return shape_err(format!("expected 6 stage maps, got {}", self.maps.len()));
        }
        let check = |t: &Tensor, c: usize, what: &str| {
            if t.rank() != 3 || t.dim(2) != c {
                return shape_err(format!("{what}: expected (h, w, {c}), got {:?}", t.shape()));
            }
            Ok(())
        };
        check(&self.stem, WIDTHS[0], "stem")?;
        for (i, m) in self.maps.iter().enumerate() {
            check(m, WIDTHS[i / 2 + 1], &format!("map {i}"))?;
        }
        Ok(BackboneFeatures {
            stem: g.constant(self.stem.clone()),
            maps: self.maps.iter().map(|m| g.constant(m.clone())).collect(),
        })
    }
}

/// Backbone, pyramid encoder and decoder sharing one [`ParamSet`].
#[derive(Debug)]
pub struct VatModel {
    pub backbone: TinyBackbone,
    pub encoder: PyramidEncoder,
    pub decoder: Decoder,
    /// Backbone stages feeding the encoder, coarsest first.
    stages: Vec<usize>,
    image_size: usize,
}

fn stage_size(image: usize, stage: usize) -> usize {
    let mut s = image.div_ceil(2);
    for _ in 0..=stage {
        s = s.div_ceil(2);
    }
    s
}

/// Largest power-of-two fraction of `window` not exceeding `min_dim`.
fn fitted_window(window: usize, min_dim: usize) -> usize {
    let mut n = window;
    while n > 1 && min_dim < n {
        n /= 2;
    }
    n
}

impl VatModel {
    /// Builds the network and its parameters; initialisation is a pure function of `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let backbone = TinyBackbone::new(&mut params, "backbone", &mut rng);
        if cfg.freeze_backbone {
            params.set_trainable("backbone.", false);
        }
        let stages: Vec<usize> = (0..cfg.levels).rev().collect();
        let levels: Vec<LevelConfig> = stages
            .iter()
            .map(|&s| LevelConfig {
                in_channels: 2,
                vcm: VcmConfig::standard(cfg.dim, s == 0),
            })
            .collect();
        // Windows shrink on levels too small for the configured size.
        let coarse = stage_size(cfg.image_size, stages[0]);
        let swin = SwinConfig {
            window: fitted_window(cfg.window, coarse),
            heads: cfg.heads,
            depth: cfg.depth,
            mlp_ratio: cfg.mlp_ratio,
        };
        let encoder = PyramidEncoder::new(&mut params, "encoder", &levels, swin, &mut rng)?;
        let dec_cfg = DecoderConfig {
            in_dim: cfg.dim,
            stages: vec![
                StageConfig {
                    feature_channels: WIDTHS[1],
                    appearance_dim: cfg.appearance[1],
                    out_dim: cfg.dim,
                },
                StageConfig {
                    feature_channels: WIDTHS[0],
                    appearance_dim: cfg.appearance[0],
                    out_dim: cfg.dim / 2,
                },
            ],
            swin: SwinConfig {
                window: fitted_window(cfg.window, stage_size(cfg.image_size, 0)),
                ..swin
            },
        };
        let decoder = Decoder::new(&mut params, "decoder", &dec_cfg, &mut rng)?;
        Ok((
            Self {
                backbone,
                encoder,
                decoder,
                stages,
                image_size: cfg.image_size,
            },
            params,
        ))
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn features(&self, g: &Graph, image: &Tensor) -> Result<BackboneFeatures> {
        let s = image.shape();
        if s != [self.image_size, self.image_size, 3] {
            return shape_err(format!(
                "model expects {0}×{0}×3 images, got {s:?}",
                self.image_size
            ));
        }
        self.backbone.forward(g, g.constant(image.clone()))
    }

    /// `(H, W, 2)` logits for one support shot from precomputed features.
    pub fn forward_features(
        &self,
        g: &Graph,
        query: &BackboneFeatures,
        support: &BackboneFeatures,
        mask: &Tensor,
    ) -> Result<Var> {
        let volumes = self
            .stages
            .iter()
            .map(|&s| stack_levels_graph(g, query.stage(s), support.stage(s), mask))
            .collect::<Result<Vec<_>>>()?;
        let aggregated = self.encoder.encode(g, &volumes)?;
        let appearance = [query.maps[1], query.stem];
        self.decoder.forward(
            g,
            aggregated,
            &appearance,
            (self.image_size, self.image_size),
        )
    }

    pub fn forward(
        &self,
        g: &Graph,
        query: &Tensor,
        support: &Tensor,
        mask: &Tensor,
    ) -> Result<Var> {
        let fq = self.features(g, query)?;
        let fs = self.features(g, support)?;
        self.forward_features(g, &fq, &fs, mask)
    }

    /// K-shot prediction: one forward pass per shot, then a vote at `tau`.
    pub fn predict(
        &self,
        params: &ParamSet,
        query: &Tensor,
        support: &[(Tensor, Tensor)],
        tau: f64,
    ) -> Result<Tensor> {
        let g = Graph::with_params(params, false);
        let fq = self.features(&g, query)?;
        let shots = support
            .iter()
            .map(|(img, mask)| Ok((self.features(&g, img)?, mask)))
            .collect::<Result<Vec<_>>>()?;
        self.vote(&g, &fq, &shots, tau)
    }

    /// Backbone outputs of `image` as plain tensors.
    pub fn extract(&self, params: &ParamSet, image: &Tensor) -> Result<FeatureTensors> {
        let g = Graph::with_params(params, false);
        let f = self.features(&g, image)?;
        Ok(FeatureTensors {
            stem: g.value(f.stem).as_ref().clone(),
            maps: f
                .maps
                .iter()
                .map(|&m| g.value(m).as_ref().clone())
                .collect(),
        })
    }

    /// [`VatModel::predict`] from precomputed backbone outputs.
    pub fn predict_features(
        &self,
        params: &ParamSet,
        query: &FeatureTensors,
        support: &[(FeatureTensors, Tensor)],
        tau: f64,
    ) -> Result<Tensor> {
        let g = Graph::with_params(params, false);
        let fq = query.bind(&g)?;
        let shots = support
            .iter()
            .map(|(f, mask)| Ok((f.bind(&g)?, mask)))
            .collect::<Result<Vec<_>>>()?;
        self.vote(&g, &fq, &shots, tau)
    }

    fn vote(
        &self,
        g: &Graph,
        query: &BackboneFeatures,
        shots: &[(BackboneFeatures, &Tensor)],
        tau: f64,
    ) -> Result<Tensor> {
        let mut masks = Vec::with_capacity(shots.len());
        for (fs, mask) in shots {
            if mask.shape() != [self.image_size, self.image_size] {
                return shape_err(format!(
                    "support mask {:?} does not match the {n}×{n} image size",
                    mask.shape(),
                    n = self.image_size
                ));
            }
            let logits = self.forward_features(g, query, fs, mask)?;
            masks.push(predict_mask(&g.value(logits))?);
        }
        kshot_vote(&masks, tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_windows() {
        assert_eq!(stage_size(64, 0), 16);
        assert_eq!(stage_size(64, 2), 4);
        assert_eq!(stage_size(417, 0), 105);
        assert_eq!(fitted_window(4, 4), 4);
        assert_eq!(fitted_window(4, 2), 2);
        assert_eq!(fitted_window(4, 1), 1);
    }
}
