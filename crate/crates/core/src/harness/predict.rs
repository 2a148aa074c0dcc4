//! Prediction requests stored in tensor containers.
//!
//! A request holds the query and `K` support shots, either as images or as
//! precomputed backbone outputs:
//!
//! ```text
//! images:    query/image, support/<k>/image, support/<k>/mask
//! features:  query/stem, query/map/<i>, support/<k>/stem, support/<k>/map/<i>, support/<k>/mask
//! ```
//!
//! with `i` in `0..6`, finest first. The response holds one `mask` entry of
//! dtype u8 and shape `(H, W)`.

use super::container::{Entry, TensorContainer, TensorData};
use super::model::{FeatureTensors, VatModel};
use crate::error::{Result, VatError};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum PredictRequest {
    Images {
        query: Tensor,
        support: Vec<(Tensor, Tensor)>,
    },
    Features {
        query: FeatureTensors,
        support: Vec<(FeatureTensors, Tensor)>,
    },
}

fn read_features(c: &TensorContainer, prefix: &str) -> Result<FeatureTensors> {
    Ok(FeatureTensors {
        stem: c.tensor(&format!("{prefix}/stem"))?,
        maps: (0..6)
            .map(|i| c.tensor(&format!("{prefix}/map/{i}")))
            .collect::<Result<_>>()?,
    })
}

fn write_features(c: &mut TensorContainer, prefix: &str, f: &FeatureTensors) -> Result<()> {
    c.insert_tensor(format!("{prefix}/stem"), &f.stem)?;
    for (i, m) in f.maps.iter().enumerate() {
        c.insert_tensor(format!("{prefix}/map/{i}"), m)?;
    }
    Ok(())
}

impl PredictRequest {
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let shots = (0..)
            .take_while(|k| c.get(&format!("support/{k}/mask")).is_some())
            .count();
        if shots == 0 {
            return Err(VatError::Format(
                "request has no support/0/mask entry".into(),
            ));
        }
        let masks = (0..shots)
            .map(|k| c.tensor(&format!("support/{k}/mask")))
            .collect::<Result<Vec<_>>>()?;
        if c.get("query/image").is_some() {
            let support = (0..shots)
                .map(|k| c.tensor(&format!("support/{k}/image")))
                .zip(masks)
                .map(|(img, m)| Ok((img?, m)))
                .collect::<Result<_>>()?;
            Ok(Self::Images {
                query: c.tensor("query/image")?,
                support,
            })
        } else if c.get("query/stem").is_some() {
            let support = (0..shots)
                .map(|k| read_features(c, &format!("support/{k}")))
                .zip(masks)
                .map(|(f, m)| Ok((f?, m)))
                .collect::<Result<_>>()?;
            Ok(Self::Features {
                query: read_features(c, "query")?,
                support,
            })
        } else {
            Err(VatError::Format(
                "request needs either query/image or query/stem".into(),
            ))
        }
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        match self {
            Self::Images { query, support } => {
                c.insert_tensor("query/image", query)?;
                for (k, (img, mask)) in support.iter().enumerate() {
                    c.insert_tensor(format!("support/{k}/image"), img)?;
                    c.insert_tensor(format!("support/{k}/mask"), mask)?;
                }
            }
            Self::Features { query, support } => {
                write_features(&mut c, "query", query)?;
                for (k, (f, mask)) in support.iter().enumerate() {
                    write_features(&mut c, &format!("support/{k}"), f)?;
                    c.insert_tensor(format!("support/{k}/mask"), mask)?;
                }
            }
        }
        Ok(c)
    }

    /// Replaces images by the backbone outputs of `model`.
    pub fn into_features(self, model: &VatModel, params: &ParamSet) -> Result<Self> {
        match self {
            Self::Images { query, support } => Ok(Self::Features {
                query: model.extract(params, &query)?,
                support: support
                    .into_iter()
                    .map(|(img, m)| Ok((model.extract(params, &img)?, m)))
                    .collect::<Result<_>>()?,
            }),
            f @ Self::Features { .. } => Ok(f),
        }
    }

    pub fn run(&self, model: &VatModel, params: &ParamSet, tau: f64) -> Result<Tensor> {
        match self {
            Self::Images { query, support } => model.predict(params, query, support, tau),
            Self::Features { query, support } => {
                model.predict_features(params, query, support, tau)
            }
        }
    }
}

/// Response container with the binary mask stored as u8.
pub fn mask_container(mask: &Tensor) -> Result<TensorContainer> {
    let dims = mask.shape().iter().map(|&d| d as u64).collect();
    let bytes = mask.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    let mut c = TensorContainer::new();
    c.insert(Entry::new("mask", dims, TensorData::U8(bytes))?)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::harness::synth::{episode_at, Split};

    #[test]
    fn image_and_feature_requests_agree() {
        let cfg = RunConfig {
            image_size: 32,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            appearance: vec![4, 4, 4],
            ..RunConfig::desk()
        };
        let (model, params) = VatModel::new(&cfg).unwrap();
        let ep = episode_at(1, 0, 2, 32, Split::Train).unwrap();
        let req = PredictRequest::Images {
            query: ep.query_image.clone(),
            support: ep.support.clone(),
        };
        let back = PredictRequest::from_container(
            &TensorContainer::from_bytes(&req.to_container().unwrap().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, req);
        let feats = req.clone().into_features(&model, &params).unwrap();
        let feats = PredictRequest::from_container(&feats.to_container().unwrap()).unwrap();
        assert!(matches!(feats, PredictRequest::Features { .. }));
        let a = req.run(&model, &params, cfg.tau).unwrap();
        let b = feats.run(&model, &params, cfg.tau).unwrap();
        assert_eq!(a, b);
        let out = mask_container(&a).unwrap();
        assert_eq!(out.get("mask").unwrap().dims, vec![32, 32]);
    }

    #[test]
    fn malformed_requests_fail() {
        let mut c = TensorContainer::new();
        assert!(PredictRequest::from_container(&c).is_err());
        c.insert_tensor("support/0/mask", &Tensor::zeros(&[32, 32]))
            .unwrap();
        assert!(PredictRequest::from_container(&c).is_err());
        let bad = FeatureTensors {
            stem: Tensor::zeros(&[4, 4, 3]),
            maps: vec![],
        };
        let g = crate::autograd::Graph::new();
        assert!(bad.bind(&g).is_err());
    }
}
