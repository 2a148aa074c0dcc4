//! Masked, multi-level cosine correlation volumes.
//!
//! Support features are multiplied by the support mask (resized to each
//! level by area averaging), every query position is compared with every
//! support position by rectified cosine similarity, and levels of equal
//! resolution are stacked along a trailing channel axis.

use std::collections::BTreeMap;

use crate::autograd::{cosine_relu_forward, Graph, Var};
use crate::error::{shape_err, Result, VatError};
use crate::tensor::Tensor;

/// One backbone activation map `(H, W, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
    level: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, level: usize) -> Result<Self> {
        if values.rank() != 3 || values.shape().iter().any(|&d| d == 0) {
            return shape_err(format!(
                "feature map must be (H, W, C) with dims >= 1, got {:?}",
                values.shape()
            ));
        }
        if !values.all_finite() {
            return Err(VatError::InvalidInput(format!(
                "feature map at level {level} has non-finite entries"
            )));
        }
        Ok(Self { values, level })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(2)
    }
}

/// Feature maps of one image plus the grouping of levels into pyramid layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
    groups: BTreeMap<usize, Vec<usize>>,
}

impl FeaturePyramid {
    /// `groups` maps a pyramid layer id to positions in `levels`. Indices are
    /// kept in ascending order, which fixes the channel order of stacked volumes.
    pub fn new(levels: Vec<FeatureMap>, groups: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut groups = groups;
        for (p, idx) in groups.iter_mut() {
            idx.sort_unstable();
            idx.dedup();
            if idx.is_empty() {
                return Err(VatError::InvalidInput(format!(
                    "pyramid layer {p} has no levels"
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= levels.len()) {
                return Err(VatError::InvalidInput(format!(
                    "pyramid layer {p} refers to level {bad}, only {} exist",
                    levels.len()
                )));
            }
            let (h, w) = (levels[idx[0]].height(), levels[idx[0]].width());
            if idx
                .iter()
                .any(|&i| levels[i].height() != h || levels[i].width() != w)
            {
                return shape_err(format!("pyramid layer {p} mixes spatial sizes"));
            }
        }
        Ok(Self { levels, groups })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn groups(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.groups
    }

    pub fn group(&self, p: usize) -> Result<&[usize]> {
        self.groups
            .get(&p)
            .map(Vec::as_slice)
            .ok_or_else(|| VatError::InvalidInput(format!("no pyramid layer {p}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// One channel per stacked feature level; entries in `[0, 1]`.
    StackedLevels,
    /// Channels are an embedding of width `D`.
    Embedded,
}

/// `(h_q, w_q, h_s, w_s, channels)` matching scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    values: Tensor,
    kind: ChannelKind,
}

impl CorrelationVolume {
    pub fn new(values: Tensor, kind: ChannelKind) -> Result<Self> {
        if values.rank() != 5 || values.shape().iter().any(|&d| d == 0) {
            return shape_err(format!(
                "correlation volume must be 5-D with dims >= 1, got {:?}",
                values.shape()
            ));
        }
        if !values.all_finite() {
            return Err(VatError::InvalidInput(
                "correlation volume has non-finite entries".into(),
            ));
        }
        if kind == ChannelKind::StackedLevels
            && values.data().iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(VatError::InvalidInput(
                "stacked correlation entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn spatial(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.values.dim(4)
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 || mask.is_empty() {
        return Err(VatError::InvalidInput(format!(
            "mask must be a non-empty (H, W) tensor, got {:?}",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(VatError::InvalidInput("mask entries must be 0 or 1".into()));
    }
    Ok(())
}

/// Overlap weights of source cells `[j, j+1)` with the target cell
/// `[i·s/t, (i+1)·s/t)`, normalised to sum to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((j, overlap / ratio));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Area-average resize of a 2-D map to `(h, w)`.
pub fn area_resize(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if map.rank() != 2 || map.is_empty() || h == 0 || w == 0 {
        return shape_err(format!("area_resize {:?} -> ({h}, {w})", map.shape()));
    }
    let (sh, sw) = (map.dim(0), map.dim(1));
    let rows = area_weights(sh, h);
    let cols = area_weights(sw, w);
    Ok(Tensor::from_fn(&[h, w], |i| {
        let mut acc = 0.0;
        for &(r, wr) in &rows[i[0]] {
            for &(c, wc) in &cols[i[1]] {
                acc += wr * wc * map.get(&[r, c]);
            }
        }
        acc
    }))
}

/// Resizes a binary image mask to the target's resolution by area averaging
/// and repeats it along the target's channels.
pub fn mask_project(mask: &Tensor, target: &FeatureMap) -> Result<Tensor> {
    check_binary(mask)?;
    let small = area_resize(mask, target.height(), target.width())?;
    let c = target.channels();
    Ok(Tensor::from_fn(
        &[target.height(), target.width(), c],
        |i| small.get(&[i[0], i[1]]).clamp(0.0, 1.0),
    ))
}

/// Hadamard product of support features and their projected mask.
pub fn mask_support_features(support: &FeatureMap, mask: &Tensor) -> Result<FeatureMap> {
    let projected = mask_project(mask, support)?;
    let values = support.values().zip_map(&projected, |f, m| f * m)?;
    FeatureMap::new(values, support.level())
}

/// Rectified cosine correlation `(h_q, w_q, h_s, w_s)` between a query map
/// and a (masked) support map.
pub fn correlate(query: &FeatureMap, support: &FeatureMap) -> Result<Tensor> {
    if query.channels() != support.channels() {
        return shape_err(format!(
            "correlate: query has {} channels, support {}",
            query.channels(),
            support.channels()
        ));
    }
    let (hq, wq, hs, ws, c) = (
        query.height(),
        query.width(),
        support.height(),
        support.width(),
        query.channels(),
    );
    let q = query.values().reshape(&[hq * wq, c])?;
    let s = support.values().reshape(&[hs * ws, c])?;
    cosine_relu_forward(&q, &s)?.into_shape(&[hq, wq, hs, ws])
}

/// Stacked correlation volume of pyramid layer `p`.
pub fn stack_levels(
    query: &FeaturePyramid,
    support: &FeaturePyramid,
    mask: &Tensor,
    p: usize,
) -> Result<CorrelationVolume> {
    let q_idx = query.group(p)?;
    let s_idx = support.group(p)?;
    if q_idx.len() != s_idx.len() {
        return shape_err(format!(
            "pyramid layer {p}: query has {} levels, support {}",
            q_idx.len(),
            s_idx.len()
        ));
    }
    let mut maps = Vec::with_capacity(q_idx.len());
    for (&qi, &si) in q_idx.iter().zip(s_idx) {
        let masked = mask_support_features(&support.levels()[si], mask)?;
        let c = correlate(&query.levels()[qi], &masked)?;
        let shape = c.shape().to_vec();
        maps.push(c.into_shape(&[shape[0], shape[1], shape[2], shape[3], 1])?);
    }
    let refs: Vec<&Tensor> = maps.iter().collect();
    CorrelationVolume::new(Tensor::concat(&refs, 4)?, ChannelKind::StackedLevels)
}

/// Differentiable counterpart of [`stack_levels`] on graph variables.
/// `query` and `support` hold `(H, W, C)` maps of one pyramid layer, in order;
/// `mask` is the binary image-resolution support mask.
pub fn stack_levels_graph(g: &Graph, query: &[Var], support: &[Var], mask: &Tensor) -> Result<Var> {
    if query.is_empty() || query.len() != support.len() {
        return shape_err(format!(
            "stack: {} query vs {} support levels",
            query.len(),
            support.len()
        ));
    }
    check_binary(mask)?;
    let (hq, wq) = {
        let s = g.shape(query[0]);
        (s[0], s[1])
    };
    let (hs, ws) = {
        let s = g.shape(support[0]);
        (s[0], s[1])
    };
    let small = area_resize(mask, hs, ws)?;
    let mut parts = Vec::with_capacity(query.len());
    for (&q, &s) in query.iter().zip(support) {
        let (qs, ss) = (g.shape(q), g.shape(s));
        if qs.len() != 3
            || ss.len() != 3
            || qs[..2] != [hq, wq]
            || ss[..2] != [hs, ws]
            || qs[2] != ss[2]
        {
            return shape_err(format!("stack: level shapes {qs:?} / {ss:?} disagree"));
        }
        let c = qs[2];
        let m = g.constant(Tensor::from_fn(&[hs, ws, c], |i| {
            small.get(&[i[0], i[1]]).clamp(0.0, 1.0)
        }));
        let masked = g.mul(s, m)?;
        let corr = g.cosine_relu(
            g.reshape(q, &[hq * wq, c])?,
            g.reshape(masked, &[hs * ws, c])?,
        )?;
        parts.push(g.reshape(corr, &[hq * wq * hs * ws, 1])?);
    }
    let stacked = g.concat(&parts, 1)?;
    g.reshape(stacked, &[hq, wq, hs, ws, query.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Tensor::randn(&[h, w, c], 1.0, &mut r), 0).unwrap()
    }

    fn vec_map(v: &[f64]) -> FeatureMap {
        FeatureMap::new(Tensor::new(&[1, 1, v.len()], v.to_vec()).unwrap(), 0).unwrap()
    }

    #[test]
    fn constant_masks_project_exactly() {
        let target = fmap(4, 4, 3, 1);
        let ones = mask_project(&Tensor::full(&[8, 8], 1.0), &target).unwrap();
        assert_eq!(ones, Tensor::full(&[4, 4, 3], 1.0));
        let zeros = mask_project(&Tensor::zeros(&[8, 8]), &target).unwrap();
        assert_eq!(zeros, Tensor::zeros(&[4, 4, 3]));
    }

    #[test]
    fn single_hot_pixel_area_average() {
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let target = fmap(1, 1, 2, 2);
        let p = mask_project(&mask, &target).unwrap();
        assert_eq!(p.data(), &[0.25, 0.25]);
    }

    #[test]
    fn area_resize_non_integer_ratio_preserves_mass() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::uniform(&[7, 5], 0.0, 1.0, &mut r);
        let s = area_resize(&m, 3, 2).unwrap();
        let mass = m.sum() / 35.0;
        let small_mass = s.sum() / 6.0;
        assert!((mass - small_mass).abs() < 1e-12);
    }

    #[test]
    fn mask_project_rejects_bad_masks() {
        let target = fmap(2, 2, 1, 4);
        assert!(mask_project(&Tensor::zeros(&[0, 3]), &target).is_err());
        assert!(mask_project(&Tensor::full(&[2, 2], 0.5), &target).is_err());
    }

    #[test]
    fn masking_scales_features() {
        let fs = FeatureMap::new(Tensor::full(&[1, 1, 1], 2.0), 0).unwrap();
        let mask = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            mask_support_features(&fs, &mask).unwrap().values().data(),
            &[0.5]
        );
        let any = fmap(3, 3, 4, 5);
        assert_eq!(
            &mask_support_features(&any, &Tensor::full(&[6, 6], 1.0)).unwrap(),
            &any
        );
        assert_eq!(
            mask_support_features(&any, &Tensor::zeros(&[6, 6]))
                .unwrap()
                .values(),
            &Tensor::zeros(&[3, 3, 4])
        );
    }

    #[test]
    fn correlate_examples() {
        assert_eq!(
            correlate(&vec_map(&[0.3, -2.0]), &vec_map(&[0.3, -2.0]))
                .unwrap()
                .item(),
            1.0
        );
        assert_eq!(
            correlate(&vec_map(&[1.0, 0.0]), &vec_map(&[-1.0, 0.0]))
                .unwrap()
                .item(),
            0.0
        );
        let c = correlate(&vec_map(&[3.0, 4.0]), &vec_map(&[4.0, 3.0]))
            .unwrap()
            .item();
        assert!((c - 24.0 / 25.0).abs() < 1e-15);
        assert_eq!(
            correlate(&vec_map(&[0.0, 0.0]), &vec_map(&[1.0, 2.0]))
                .unwrap()
                .item(),
            0.0
        );
        assert!(correlate(&vec_map(&[1.0]), &vec_map(&[1.0, 2.0])).is_err());
    }

    fn pyramid(
        shapes: &[(usize, usize, usize)],
        groups: &[(usize, Vec<usize>)],
        seed: u64,
    ) -> FeaturePyramid {
        let levels = shapes
            .iter()
            .enumerate()
            .map(|(i, &(h, w, c))| fmap(h, w, c, seed + i as u64))
            .collect();
        FeaturePyramid::new(levels, groups.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn stacking_shapes_and_channels() {
        let shapes = [(4, 4, 3), (4, 4, 5), (4, 4, 2), (2, 2, 3)];
        let q = pyramid(&shapes, &[(3, vec![0, 1, 2]), (4, vec![3])], 10);
        let s = pyramid(&shapes, &[(3, vec![0, 1, 2]), (4, vec![3])], 20);
        let mask = Tensor::from_fn(&[8, 8], |i| f64::from(i[0] < 5 && i[1] > 1));
        let vol = stack_levels(&q, &s, &mask, 3).unwrap();
        assert_eq!(vol.values().shape(), &[4, 4, 4, 4, 3]);
        for t in 0..3 {
            let masked = mask_support_features(&s.levels()[t], &mask).unwrap();
            let want = correlate(&q.levels()[t], &masked).unwrap();
            let got = Tensor::from_fn(&[4, 4, 4, 4], |i| {
                vol.values().get(&[i[0], i[1], i[2], i[3], t])
            });
            assert_eq!(got, want);
        }
        let single = stack_levels(&q, &s, &mask, 4).unwrap();
        let masked = mask_support_features(&s.levels()[3], &mask).unwrap();
        assert_eq!(
            single.values().data(),
            correlate(&q.levels()[3], &masked).unwrap().data()
        );
        assert_eq!(single.channels(), 1);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let levels = vec![fmap(4, 4, 2, 1), fmap(2, 2, 2, 2)];
        let groups = [(3usize, vec![0usize, 1])].into_iter().collect();
        assert!(FeaturePyramid::new(levels, groups).is_err());
    }

    #[test]
    fn graph_stack_matches_plain() {
        let shapes = [(3, 2, 4), (3, 2, 4)];
        let q = pyramid(&shapes, &[(3, vec![0, 1])], 30);
        let s = pyramid(&shapes, &[(3, vec![0, 1])], 40);
        let mask = Tensor::from_fn(&[6, 4], |i| f64::from((i[0] + i[1]) % 3 == 0));
        let plain = stack_levels(&q, &s, &mask, 3).unwrap();
        let g = Graph::new();
        let qv: Vec<Var> = q
            .levels()
            .iter()
            .map(|l| g.constant(l.values().clone()))
            .collect();
        let sv: Vec<Var> = s
            .levels()
            .iter()
            .map(|l| g.constant(l.values().clone()))
            .collect();
        let v = stack_levels_graph(&g, &qv, &sv, &mask).unwrap();
        assert!(g.value(v).max_abs_diff(plain.values()) < 1e-15);
    }

    proptest! {
        #[test]
        fn correlation_invariants(seed in 0u64..1000, scale in 0.01f64..100.0, hq in 1usize..4, hs in 1usize..4) {
            let a = fmap(hq, 2, 3, seed);
            let b = fmap(hs, 3, 3, seed + 7);
            let ab = correlate(&a, &b).unwrap();
            let ba = correlate(&b, &a).unwrap();
            prop_assert!(ab.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let ba_t = ba.permute(&[2, 3, 0, 1]).unwrap();
            prop_assert!(ab.max_abs_diff(&ba_t) < 1e-15);
            let scaled = FeatureMap::new(a.values().scale(scale), 0).unwrap();
            prop_assert!(correlate(&scaled, &b).unwrap().max_abs_diff(&ab) < 1e-12);
        }

        #[test]
        fn masked_out_support_columns_are_zero(seed in 0u64..1000) {
            let q = fmap(3, 3, 4, seed);
            let s = fmap(4, 4, 4, seed + 1);
            let mask = Tensor::from_fn(&[4, 4], |i| f64::from(i[1] >= 2));
            let masked = mask_support_features(&s, &mask).unwrap();
            let c = correlate(&q, &masked).unwrap();
            for (i, &v) in c.data().iter().enumerate() {
                let sx = i % 4;
                if sx < 2 {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
}
