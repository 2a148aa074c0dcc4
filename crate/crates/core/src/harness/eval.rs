//! K-shot evaluation and the metrics report.

use std::fmt::Write as _;

use super::model::VatModel;
use super::synth::EpisodeSample;
use crate::error::{Result, VatError};
use crate::metrics::{mba, IouAccumulator};
use crate::nn::ParamSet;

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub fb_iou: f64,
    pub mba: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReport {
    /// One `key: value` line per field, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "episodes: {}", self.episodes);
        let _ = writeln!(out, "fb_iou: {:.6}", self.fb_iou);
        let _ = writeln!(out, "mba: {:.6}", self.mba);
        let _ = writeln!(out, "miou: {:.6}", self.miou);
        let _ = writeln!(out, "seed: {}", self.seed);
        out
    }
}

/// Runs K-shot inference on every episode with all of its support shots.
/// mBA averages over episodes whose ground truth has a boundary.
pub fn evaluate(
    model: &VatModel,
    params: &ParamSet,
    episodes: &[EpisodeSample],
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(VatError::InvalidInput(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut acc = IouAccumulator::new();
    let (mut mba_sum, mut mba_count) = (0.0, 0usize);
    for ep in episodes {
        ep.validate()?;
        let pred = model.predict(params, &ep.query_image, &ep.support, tau)?;
        acc.add(ep.class_id, &pred, &ep.query_mask)?;
        match mba(&pred, &ep.query_mask) {
            Ok(v) => {
                mba_sum += v;
                mba_count += 1;
            }
            Err(VatError::EmptyBoundary) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        miou: acc.miou(),
        fb_iou: acc.fbiou(),
        mba: if mba_count == 0 {
            0.0
        } else {
            mba_sum / mba_count as f64
        },
        episodes: episodes.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_keys_are_sorted_and_exact() {
        let r = EvalReport {
            miou: 0.5,
            fb_iou: 0.75,
            mba: 0.25,
            episodes: 3,
            seed: 9,
        };
        let text = r.to_text();
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(": ").next().unwrap())
            .collect();
        assert_eq!(keys, ["episodes", "fb_iou", "mba", "miou", "seed"]);
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.contains("miou: 0.500000\n"));
    }
}
