//! Small strided convolutional feature extractor.
//!
//! A stride-2 stem followed by three stages. Each stage halves the
//! resolution with its first convolution and keeps it with the second; both
//! outputs are emitted, so a 64×64 image yields two maps each at 16×16,
//! 8×8 and 4×4 (strides 4, 8 and 16).

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::correlation::{FeatureMap, FeaturePyramid};
use crate::error::{shape_err, Result};
use crate::nn::{kaiming, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Pyramid-layer ids of the three stages, finest first.
pub const LAYER_IDS: [usize; 3] = [3, 4, 5];
/// Total downsampling of the deepest stage.
pub const TOTAL_STRIDE: usize = 16;

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: params.add(
                format!("{name}.weight"),
                kaiming(&[3, 3, cin, cout], 9 * cin, rng),
            ),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let s = self.stride;
        Ok(g.relu(g.conv_nd(
            x,
            g.param(self.weight),
            Some(g.param(self.bias)),
            &[s, s],
            &[1, 1],
        )?))
    }
}

/// Channel widths of the stem and the three stages.
pub const WIDTHS: [usize; 4] = [16, 32, 48, 64];

#[derive(Clone, Debug)]
pub struct TinyBackbone {
    stem: Conv,
    stages: Vec<[Conv; 2]>,
}

/// Backbone outputs on a graph: the stem map and six stage maps (finest first).
#[derive(Clone, Debug)]
pub struct BackboneFeatures {
    pub stem: Var,
    pub maps: Vec<Var>,
}

impl BackboneFeatures {
    /// Maps of one stage (0 = finest).
    pub fn stage(&self, s: usize) -> &[Var] {
        &self.maps[2 * s..2 * s + 2]
    }
}

impl TinyBackbone {
    pub fn new(params: &mut ParamSet, name: &str, rng: &mut impl Rng) -> Self {
        let stem = Conv::new(params, &format!("{name}.stem"), 3, WIDTHS[0], 2, rng);
        let stages = (0..3)
            .map(|s| {
                let (cin, cout) = (WIDTHS[s], WIDTHS[s + 1]);
                [
                    Conv::new(params, &format!("{name}.stage{s}.down"), cin, cout, 2, rng),
                    Conv::new(params, &format!("{name}.stage{s}.conv"), cout, cout, 1, rng),
                ]
            })
            .collect();
        Self { stem, stages }
    }

    /// `image` is `(H, W, 3)` with values in `[0, 1]`.
    pub fn forward(&self, g: &Graph, image: Var) -> Result<BackboneFeatures> {
        let s = g.shape(image);
        if s.len() != 3 || s[2] != 3 {
            return shape_err(format!("backbone: expected an (H, W, 3) image, got {s:?}"));
        }
        if s[0] < TOTAL_STRIDE || s[1] < TOTAL_STRIDE {
            return shape_err(format!(
                "backbone: image {}×{} is smaller than the total stride {TOTAL_STRIDE}",
                s[0], s[1]
            ));
        }
        let centred = g.add(image, g.constant(Tensor::full(&s, -0.5)))?;
        let stem = self.stem.forward(g, centred)?;
        let mut maps = Vec::with_capacity(6);
        let mut h = stem;
        for [down, conv] in &self.stages {
            let a = down.forward(g, h)?;
            let b = conv.forward(g, a)?;
            maps.push(a);
            maps.push(b);
            h = b;
        }
        Ok(BackboneFeatures { stem, maps })
    }
}

/// Evaluates the backbone on a plain image and groups the six maps into
/// pyramid layers 3, 4 and 5.
pub fn tiny_backbone(
    image: &Tensor,
    params: &ParamSet,
    backbone: &TinyBackbone,
) -> Result<FeaturePyramid> {
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(crate::VatError::InvalidInput(
            "image values must lie in [0, 1]".into(),
        ));
    }
    let g = Graph::with_params(params, false);
    let feats = backbone.forward(&g, g.constant(image.clone()))?;
    let levels = feats
        .maps
        .iter()
        .enumerate()
        .map(|(i, &v)| FeatureMap::new(g.value(v).as_ref().clone(), i))
        .collect::<Result<Vec<_>>>()?;
    let groups: BTreeMap<usize, Vec<usize>> = LAYER_IDS
        .iter()
        .enumerate()
        .map(|(s, &p)| (p, vec![2 * s, 2 * s + 1]))
        .collect();
    FeaturePyramid::new(levels, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strides_and_determinism() {
        let mut params = ParamSet::new();
        let bb = TinyBackbone::new(&mut params, "backbone", &mut ChaCha8Rng::seed_from_u64(1));
        let img = Tensor::uniform(&[64, 64, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let pyr = tiny_backbone(&img, &params, &bb).unwrap();
        let sizes: Vec<(usize, usize)> = pyr
            .levels()
            .iter()
            .map(|l| (l.height(), l.width()))
            .collect();
        assert_eq!(
            sizes,
            vec![(16, 16), (16, 16), (8, 8), (8, 8), (4, 4), (4, 4)]
        );
        assert_eq!(pyr.group(4).unwrap(), &[2, 3]);
        assert_eq!(pyr, tiny_backbone(&img, &params, &bb).unwrap());
        assert!(tiny_backbone(&Tensor::zeros(&[8, 64, 3]), &params, &bb).is_err());
        assert!(tiny_backbone(&Tensor::full(&[16, 16, 3], 2.0), &params, &bb).is_err());
    }
}
