//! K-shot mask voting and evaluation metrics.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, VatError};
use crate::tensor::Tensor;

fn check_binary(m: &Tensor, what: &str) -> Result<()> {
    if m.rank() != 2 || m.is_empty() {
        return shape_err(format!(
            "{what}: expected a non-empty (H, W) mask, got {:?}",
            m.shape()
        ));
    }
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(VatError::InvalidInput(format!(
            "{what}: mask entries must be 0 or 1"
        )));
    }
    Ok(())
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    if pred.shape() != gt.shape() {
        return shape_err(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        ));
    }
    Ok(())
}

/// Pixel-wise vote over per-shot binary masks: foreground where the mean
/// exceeds `tau`.
pub fn kshot_vote(masks: &[Tensor], tau: f64) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(VatError::InvalidInput(
            "k-shot vote over an empty list".into(),
        ));
    };
    for m in masks {
        check_binary(m, "k-shot vote")?;
        if m.shape() != first.shape() {
            return shape_err(format!(
                "k-shot vote: shapes {:?} and {:?} differ",
                first.shape(),
                m.shape()
            ));
        }
    }
    let k = masks.len() as f64;
    Ok(Tensor::from_fn(first.shape(), |i| {
        let mean = masks.iter().map(|m| m.get(i)).sum::<f64>() / k;
        f64::from(mean > tau)
    }))
}

/// Intersection and union of the pixels labelled `value` in both masks.
fn inter_union(pred: &Tensor, gt: &Tensor, value: f64) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (p == value, g == value);
        inter += u64::from(a && b);
        union += u64::from(a || b);
    }
    (inter, union)
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground IoU of one mask pair; `1` when both masks are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, u) = inter_union(pred, gt, 1.0);
    Ok(ratio(i, u))
}

/// Accumulates intersections and unions per class and for foreground and
/// background overall.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    per_class: std::collections::BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: usize, pred: &Tensor, gt: &Tensor) -> Result<()> {
        check_pair(pred, gt)?;
        let fg = inter_union(pred, gt, 1.0);
        let bg = inter_union(pred, gt, 0.0);
        let e = self.per_class.entry(class).or_default();
        e.0 += fg.0;
        e.1 += fg.1;
        self.fg.0 += fg.0;
        self.fg.1 += fg.1;
        self.bg.0 += bg.0;
        self.bg.1 += bg.1;
        Ok(())
    }

    /// Mean over classes of the class's aggregated foreground IoU.
    pub fn miou(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class
            .values()
            .map(|&(i, u)| ratio(i, u))
            .sum::<f64>()
            / self.per_class.len() as f64
    }

    /// Mean of pooled foreground and background IoU.
    pub fn fbiou(&self) -> f64 {
        0.5 * (ratio(self.fg.0, self.fg.1) + ratio(self.bg.0, self.bg.1))
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }
}

/// mIoU over `(class, prediction, ground truth)` triples.
pub fn miou(pairs: &[(usize, Tensor, Tensor)]) -> Result<f64> {
    let mut acc = IouAccumulator::new();
    for (c, p, g) in pairs {
        acc.add(*c, p, g)?;
    }
    Ok(acc.miou())
}

/// Foreground-background IoU over `(prediction, ground truth)` pairs.
pub fn fbiou(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut acc = IouAccumulator::new();
    for (p, g) in pairs {
        acc.add(0, p, g)?;
    }
    Ok(acc.fbiou())
}

/// Pixels with a 4-neighbour of a different ground-truth value.
pub fn boundary(gt: &Tensor) -> Vec<(usize, usize)> {
    let (h, w) = (gt.dim(0), gt.dim(1));
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = gt.get(&[y, x]);
            let differs = (y > 0 && gt.get(&[y - 1, x]) != v)
                || (y + 1 < h && gt.get(&[y + 1, x]) != v)
                || (x > 0 && gt.get(&[y, x - 1]) != v)
                || (x + 1 < w && gt.get(&[y, x + 1]) != v);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Chebyshev distance from every pixel to the nearest boundary pixel.
fn boundary_distance(h: usize, w: usize, pts: &[(usize, usize)]) -> Vec<usize> {
    // Separable: row pass then column pass of the L∞ distance transform.
    let inf = usize::MAX / 4;
    let mut row = vec![inf; h * w];
    for &(y, x) in pts {
        row[y * w + x] = 0;
    }
    let mut best_x = vec![inf; h * w];
    for y in 0..h {
        let r = &row[y * w..(y + 1) * w];
        for x in 0..w {
            best_x[y * w + x] = (0..w)
                .filter(|&j| r[j] == 0)
                .map(|j| j.abs_diff(x))
                .min()
                .unwrap_or(inf);
        }
    }
    let mut dist = vec![inf; h * w];
    for y in 0..h {
        for x in 0..w {
            dist[y * w + x] = (0..h)
                .map(|i| best_x[i * w + x].max(i.abs_diff(y)))
                .min()
                .unwrap_or(inf);
        }
    }
    dist
}

/// Number of radii averaged by [`mba`].
pub const MBA_RADII: usize = 5;

/// Radii evenly spaced over `[3, (w + h) / 300]`; all 3 when the upper end is at most 3.
pub fn mba_radii(h: usize, w: usize) -> [f64; MBA_RADII] {
    let upper = (w + h) as f64 / 300.0;
    let mut radii = [3.0; MBA_RADII];
    if upper > 3.0 {
        for (i, r) in radii.iter_mut().enumerate() {
            *r = 3.0 + (upper - 3.0) * i as f64 / (MBA_RADII - 1) as f64;
        }
    }
    radii
}

/// Boundary-band accuracy averaged over [`mba_radii`]. The band at radius
/// `r` holds pixels within Chebyshev distance `r` of a ground-truth boundary.
pub fn mba(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (gt.dim(0), gt.dim(1));
    let pts = boundary(gt);
    if pts.is_empty() {
        return Err(VatError::EmptyBoundary);
    }
    Ok(band_accuracy(pred, gt, &pts, &mba_radii(h, w)))
}

/// Mean band accuracy over explicit radii.
pub fn band_accuracy(pred: &Tensor, gt: &Tensor, pts: &[(usize, usize)], radii: &[f64]) -> f64 {
    let (h, w) = (gt.dim(0), gt.dim(1));
    let dist = boundary_distance(h, w, pts);
    let mut total = 0.0;
    for &r in radii {
        let mut band = 0usize;
        let mut correct = 0usize;
        for (i, &d) in dist.iter().enumerate() {
            if d as f64 <= r {
                band += 1;
                correct += usize::from(pred.data()[i] == gt.data()[i]);
            }
        }
        total += correct as f64 / band as f64;
    }
    total / radii.len() as f64
}

/// Fraction of keypoints within `alpha · max(H, W)` (inclusive) of the target.
pub fn pck(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    alpha: f64,
    image: (usize, usize),
) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(VatError::InvalidInput(format!(
            "pck: {} predicted vs {} ground-truth keypoints",
            pred.len(),
            gt.len()
        )));
    }
    let thresh = alpha * image.0.max(image.1) as f64;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= thresh)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_flow(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred != gt || pred.len() != 3 || pred[2] != 2 || pred[0] * pred[1] == 0 {
        return shape_err(format!(
            "aepe: flows {pred:?} and {gt:?} must both be (H, W, 2)"
        ));
    }
    Ok(())
}

/// Mean Euclidean distance between two `(H, W, 2)` flow fields.
pub fn aepe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_flow(pred.shape(), gt.shape())?;
    let n = pred.len() / 2;
    let total: f64 = pred
        .data()
        .chunks(2)
        .zip(gt.data().chunks(2))
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(total / n as f64)
}

/// Differentiable [`aepe`].
pub fn aepe_var(g: &Graph, pred: Var, gt: Var) -> Result<Var> {
    check_flow(&g.shape(pred), &g.shape(gt))?;
    Ok(g.mean(g.norm_last(g.sub(pred, gt)?)?))
}
