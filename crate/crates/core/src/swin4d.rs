//! Shifted-window self-attention over N-dimensional token grids.
//!
//! The grid is zero-padded at the end of each spatial axis to a multiple of
//! the window size `n`, split into non-overlapping `nᴺ` windows, and every
//! window runs multi-head attention with a learned relative position bias.
//! Shifted blocks roll the grid by `−⌊n/2⌋` first and mask key/query pairs
//! that were not adjacent before the roll. Padded tokens never influence
//! real ones. The 4D functions are the public face; the decoder reuses the
//! same machinery in 2D.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{attention_forward, AttnMask, Graph, Var};
use crate::error::{shape_err, Result, VatError};
use crate::nn::{trunc_normal, LayerNorm, Linear, ParamId, ParamSet};
use crate::tensor::{numel, Tensor};

/// Window side length and the per-axis cyclic shift (`0` or `⌊n/2⌋`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(size: usize, shifted: bool) -> Result<Self> {
        if size == 0 {
            return Err(VatError::Config("window size must be positive".into()));
        }
        Ok(Self {
            size,
            shift: if shifted { size / 2 } else { 0 },
        })
    }

    pub fn tokens(&self, nd: usize) -> usize {
        self.size.pow(nd as u32)
    }
}

/// Hyper-parameters of a stack of shifted-window blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwinConfig {
    pub window: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            window: 4,
            heads: 4,
            depth: 2,
            mlp_ratio: 4,
        }
    }
}

fn window_split_shape(spatial: &[usize], n: usize, c: usize) -> (Vec<usize>, Vec<usize>) {
    let nd = spatial.len();
    let mut split = Vec::with_capacity(2 * nd + 1);
    for &s in spatial {
        split.push(s / n);
        split.push(n);
    }
    split.push(c);
    let mut perm: Vec<usize> = (0..nd).map(|a| 2 * a).collect();
    perm.extend((0..nd).map(|a| 2 * a + 1));
    perm.push(2 * nd);
    (split, perm)
}

fn check_divisible(spatial: &[usize], n: usize) -> Result<()> {
    if n == 0 || spatial.iter().any(|&s| s == 0 || s % n != 0) {
        return shape_err(format!(
            "window partition: grid {spatial:?} is not divisible by window {n}"
        ));
    }
    Ok(())
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `(s_1, …, s_N, C)` into `(windows, nᴺ, C)`; windows are ordered
/// lexicographically by their grid position, tokens row-major within a window.
pub fn partition(x: &Tensor, n: usize) -> Result<Tensor> {
    let Some((&c, spatial)) = x.shape().split_last() else {
        return shape_err("partition of a scalar");
    };
    check_divisible(spatial, n)?;
    let (split, perm) = window_split_shape(spatial, n, c);
    let t = n.pow(spatial.len() as u32);
    x.reshape(&split)?
        .permute(&perm)?
        .into_shape(&[x.len() / (t * c), t, c])
}

/// Inverse of [`partition`] for a grid of `spatial` size.
pub fn reverse(windows: &Tensor, spatial: &[usize], n: usize) -> Result<Tensor> {
    check_divisible(spatial, n)?;
    let ws = windows.shape();
    let t = n.pow(spatial.len() as u32);
    if ws.len() != 3 || ws[1] != t || ws[0] * t != numel(spatial) {
        return shape_err(format!(
            "reverse: windows {ws:?} do not tile grid {spatial:?} with window {n}"
        ));
    }
    let c = ws[2];
    let (split, perm) = window_split_shape(spatial, n, c);
    let permuted: Vec<usize> = perm.iter().map(|&p| split[p]).collect();
    let mut out_shape = spatial.to_vec();
    out_shape.push(c);
    windows
        .reshape(&permuted)?
        .permute(&inverse_perm(&perm))?
        .into_shape(&out_shape)
}

/// Splits a `(h_q, w_q, h_s, w_s, D)` grid into `n⁴` windows of shape `(n, n, n, n, D)`.
pub fn partition4d(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    if x.rank() != 5 {
        return shape_err(format!(
            "partition4d: expected a 5-D tensor, got {:?}",
            x.shape()
        ));
    }
    let flat = partition(x, n)?;
    let (nw, t, c) = (flat.dim(0), flat.dim(1), flat.dim(2));
    (0..nw)
        .map(|w| {
            Tensor::new(
                &[n, n, n, n, c],
                flat.data()[w * t * c..(w + 1) * t * c].to_vec(),
            )
        })
        .collect()
}

/// Reassembles windows from [`partition4d`] into a grid of size `dims`.
pub fn reverse4d(windows: &[Tensor], dims: [usize; 4], n: usize) -> Result<Tensor> {
    let Some(first) = windows.first() else {
        return shape_err("reverse4d: no windows");
    };
    let c = first.shape().last().copied().unwrap_or(0);
    let mut data = Vec::with_capacity(windows.len() * n.pow(4) * c);
    for w in windows {
        if w.shape() != [n, n, n, n, c] {
            return shape_err(format!(
                "reverse4d: window {:?}, expected {:?}",
                w.shape(),
                [n, n, n, n, c]
            ));
        }
        data.extend_from_slice(w.data());
    }
    let flat = Tensor::new(&[windows.len(), n.pow(4), c], data)?;
    reverse(&flat, &dims, n)
}

/// Circular roll of each spatial axis by `−shift[a]`: token `p` moves to
/// `p − shift (mod size)`. Negating the shift undoes it.
pub fn cyclic_shift4d(x: &Tensor, shift: [isize; 4]) -> Result<Tensor> {
    if x.rank() != 5 {
        return shape_err(format!(
            "cyclic_shift4d: expected a 5-D tensor, got {:?}",
            x.shape()
        ));
    }
    x.roll(&[-shift[0], -shift[1], -shift[2], -shift[3], 0])
}

/// Index of the bias entry for query token `u` and key token `v` in an
/// `nᴺ` window: offsets `u_a − v_a + n − 1` read as base-`(2n−1)` digits.
pub fn relative_position_index(n: usize, nd: usize) -> Vec<usize> {
    let t = n.pow(nd as u32);
    let coords = |mut i: usize| {
        let mut c = vec![0; nd];
        for a in (0..nd).rev() {
            c[a] = i % n;
            i /= n;
        }
        c
    };
    let mut index = Vec::with_capacity(t * t);
    for q in 0..t {
        let cq = coords(q);
        for k in 0..t {
            let ck = coords(k);
            let mut idx = 0;
            for a in 0..nd {
                idx = idx * (2 * n - 1) + (cq[a] + n - 1 - ck[a]);
            }
            index.push(idx);
        }
    }
    index
}

/// Learned bias table with `(2n−1)ᴺ` rows and one column per head.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    index: Rc<Vec<usize>>,
    tokens: usize,
    heads: usize,
}

impl RelPosBias {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        n: usize,
        nd: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = (2 * n - 1).pow(nd as u32);
        Self {
            table: params.add(
                format!("{name}.table"),
                trunc_normal(&[rows, heads], 0.02, rng),
            ),
            index: Rc::new(relative_position_index(n, nd)),
            tokens: n.pow(nd as u32),
            heads,
        }
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// `(heads, T, T)` bias for one window.
    pub fn forward(&self, g: &Graph) -> Result<Var> {
        let rows = g.gather_rows(g.param(self.table), self.index.clone())?;
        let t = self.tokens;
        g.permute(g.reshape(rows, &[t, t, self.heads])?, &[2, 0, 1])
    }
}

/// Visibility mask for the windows of a grid padded to `padded` whose real
/// extent is `valid`, after rolling by `−shift`. Returns `None` when every
/// pair is visible.
pub fn window_mask(
    padded: &[usize],
    valid: &[usize],
    n: usize,
    shift: usize,
) -> Result<Option<AttnMask>> {
    check_divisible(padded, n)?;
    if valid.len() != padded.len() || valid.iter().zip(padded).any(|(v, p)| v > p) {
        return shape_err(format!(
            "window_mask: valid extent {valid:?} exceeds {padded:?}"
        ));
    }
    if shift == 0 && valid == padded {
        return Ok(None);
    }
    let nd = padded.len();
    // Per axis and shifted coordinate: (segment, is_padding).
    let labels: Vec<Vec<(u8, bool)>> = (0..nd)
        .map(|a| {
            let size = padded[a];
            let s = shift % size;
            (0..size)
                .map(|c| {
                    let seg = if s == 0 || c < size - n {
                        0
                    } else if c < size - s {
                        1
                    } else {
                        2
                    };
                    (seg, (c + s) % size >= valid[a])
                })
                .collect()
        })
        .collect();
    let mut grid_label = vec![(0u32, false); numel(padded)];
    let mut idx = vec![0usize; nd];
    for slot in grid_label.iter_mut() {
        let mut seg = 0u32;
        let mut pad = false;
        for a in 0..nd {
            let (s, p) = labels[a][idx[a]];
            seg = seg * 3 + u32::from(s);
            pad |= p;
        }
        *slot = (seg, pad);
        crate::tensor::advance(&mut idx, padded);
    }
    let lab = Tensor::new(
        &[grid_label.len()],
        (0..grid_label.len()).map(|i| i as f64).collect(),
    )?;
    let mut shape = padded.to_vec();
    shape.push(1);
    let order = partition(&lab.into_shape(&shape)?, n)?;
    let t = n.pow(nd as u32);
    let windows = order.dim(0);
    let mut allowed = Vec::with_capacity(windows * t * t);
    for w in 0..windows {
        let toks = &order.data()[w * t..(w + 1) * t];
        for &q in toks {
            let lq = grid_label[q as usize];
            for &k in toks {
                allowed.push(grid_label[k as usize] == lq);
            }
        }
    }
    let mask = AttnMask {
        windows,
        tokens: t,
        allowed,
    };
    Ok((!mask.is_trivial()).then_some(mask))
}

/// Multi-head self-attention inside windows with relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias: RelPosBias,
    pub heads: usize,
    pub dim: usize,
}

/// Output and attention probabilities of one [`WindowAttention::attend`] call.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// `(windows, T, D)`.
    pub output: Tensor,
    /// `(windows, heads, T, T)`.
    pub probs: Tensor,
}

impl WindowAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        n: usize,
        nd: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(VatError::Config(format!(
                "{dim} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(params, &format!("{name}.proj"), dim, dim, true, rng),
            bias: RelPosBias::new(params, &format!("{name}.bias"), n, nd, heads, rng),
            heads,
            dim,
        })
    }

    fn project_qkv(&self, g: &Graph, windows: Var) -> Result<(Var, Var, Var, [usize; 3])> {
        let s = g.shape(windows);
        if s.len() != 3 || s[2] != self.dim || s[1] != self.bias.tokens {
            return shape_err(format!(
                "window attention: expected (windows, {}, {}), got {s:?}",
                self.bias.tokens, self.dim
            ));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let dh = c / self.heads;
        let qkv = self.qkv.forward(g, windows)?;
        let qkv = g.permute(
            g.reshape(qkv, &[b, t, 3, self.heads, dh])?,
            &[2, 0, 3, 1, 4],
        )?;
        let part = |i| g.reshape(g.narrow(qkv, 0, i, 1)?, &[b, self.heads, t, dh]);
        Ok((part(0)?, part(1)?, part(2)?, [b, t, dh]))
    }

    fn merge_heads(&self, g: &Graph, o: Var, b: usize, t: usize) -> Result<Var> {
        let merged = g.reshape(g.permute(o, &[0, 2, 1, 3])?, &[b, t, self.dim])?;
        self.proj.forward(g, merged)
    }

    /// `windows` is `(windows, T, D)`; the mask, if any, has one entry per window.
    pub fn forward(&self, g: &Graph, windows: Var, mask: Option<Rc<AttnMask>>) -> Result<Var> {
        let (q, k, v, [b, t, dh]) = self.project_qkv(g, windows)?;
        let bias = self.bias.forward(g)?;
        let o = g.attention(q, k, v, Some(bias), mask, 1.0 / (dh as f64).sqrt())?;
        self.merge_heads(g, o, b, t)
    }

    /// Evaluates the layer on plain tensors, also returning the probabilities.
    pub fn attend(
        &self,
        params: &ParamSet,
        windows: &Tensor,
        mask: Option<&AttnMask>,
    ) -> Result<AttentionResult> {
        let g = Graph::with_params(params, false);
        let (q, k, v, [b, t, dh]) = self.project_qkv(&g, g.constant(windows.clone()))?;
        let bias = g.value(self.bias.forward(&g)?);
        let (o, probs) = attention_forward(
            &g.value(q),
            &g.value(k),
            &g.value(v),
            Some(&bias),
            mask,
            1.0 / (dh as f64).sqrt(),
        )?;
        let out = self.merge_heads(&g, g.constant(o), b, t)?;
        Ok(AttentionResult {
            output: g.value(out).as_ref().clone(),
            probs,
        })
    }
}

/// Pre-norm transformer block on an N-d grid: windowed (or shifted-window)
/// attention followed by a GELU MLP, each with a residual connection.
#[derive(Debug)]
pub struct VtmBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub window: WindowSpec,
    nd: usize,
    masks: RefCell<HashMap<Vec<usize>, Option<Rc<AttnMask>>>>,
}

impl VtmBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        nd: usize,
        window: WindowSpec,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(
                params,
                &format!("{name}.attn"),
                dim,
                window.size,
                nd,
                heads,
                rng,
            )?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            fc1: Linear::new(
                params,
                &format!("{name}.mlp.fc1"),
                dim,
                mlp_ratio * dim,
                true,
                rng,
            ),
            fc2: Linear::new(
                params,
                &format!("{name}.mlp.fc2"),
                mlp_ratio * dim,
                dim,
                true,
                rng,
            ),
            window,
            nd,
            masks: RefCell::new(HashMap::new()),
        })
    }

    fn mask_for(&self, padded: &[usize], valid: &[usize]) -> Result<Option<Rc<AttnMask>>> {
        let mut key = padded.to_vec();
        key.extend_from_slice(valid);
        if let Some(m) = self.masks.borrow().get(&key) {
            return Ok(m.clone());
        }
        let m = window_mask(padded, valid, self.window.size, self.window.shift)?.map(Rc::new);
        self.masks.borrow_mut().insert(key, m.clone());
        Ok(m)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != self.nd + 1 || shape[self.nd] != self.attn.dim {
            return shape_err(format!(
                "transformer block: expected {}-D grid with {} channels, got {shape:?}",
                self.nd, self.attn.dim
            ));
        }
        let n = self.window.size;
        let valid = &shape[..self.nd];
        let padded: Vec<usize> = valid.iter().map(|&s| s.div_ceil(n) * n).collect();
        let mut padded_shape = padded.clone();
        padded_shape.push(self.attn.dim);

        let mut h = self.norm1.forward(g, x)?;
        h = g.pad_end(h, &padded_shape)?;
        let s = self.window.shift as isize;
        let mut roll: Vec<isize> = vec![-s; self.nd];
        roll.push(0);
        if s != 0 {
            h = g.roll(h, &roll)?;
        }
        let (split, perm) = window_split_shape(&padded, n, self.attn.dim);
        let t = self.window.tokens(self.nd);
        let nw = numel(&padded) / t;
        let windows = g.reshape(
            g.permute(g.reshape(h, &split)?, &perm)?,
            &[nw, t, self.attn.dim],
        )?;
        let attended = self
            .attn
            .forward(g, windows, self.mask_for(&padded, valid)?)?;
        let permuted: Vec<usize> = perm.iter().map(|&p| split[p]).collect();
        h = g.reshape(
            g.permute(g.reshape(attended, &permuted)?, &inverse_perm(&perm))?,
            &padded_shape,
        )?;
        if s != 0 {
            let back: Vec<isize> = roll.iter().map(|r| -r).collect();
            h = g.roll(h, &back)?;
        }
        h = g.crop(h, &shape)?;
        let x = g.add(x, h)?;
        let m = self
            .fc2
            .forward(g, g.gelu(self.fc1.forward(g, self.norm2.forward(g, x)?)?))?;
        g.add(x, m)
    }
}

/// Stack of blocks alternating unshifted and shifted windows.
#[derive(Debug)]
pub struct Vtm {
    pub blocks: Vec<VtmBlock>,
}

impl Vtm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        nd: usize,
        cfg: SwinConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| {
                let window = WindowSpec::new(cfg.window, i % 2 == 1)?;
                VtmBlock::new(
                    params,
                    &format!("{name}.{i}"),
                    dim,
                    nd,
                    window,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(g, h))
    }
}

/// Attention-score entries (per head) of windowed attention over a grid:
/// windows × (nᴺ)², after padding to multiples of `n`.
pub fn windowed_score_elements(dims: &[usize], n: usize) -> usize {
    let t = n.pow(dims.len() as u32);
    let windows: usize = dims.iter().map(|&d| d.div_ceil(n)).product();
    windows * t * t
}

/// Attention-score entries (per head) of dense attention over a grid.
pub fn dense_score_elements(dims: &[usize]) -> usize {
    let t = numel(dims);
    t * t
}

/// Runs single-head attention on a random grid, windowed and dense, and
/// returns the number of score entries each actually materialised.
pub fn measure_score_elements(dims: &[usize], n: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let padded: Vec<usize> = dims.iter().map(|&d| d.div_ceil(n) * n).collect();
    let mut shape = padded.clone();
    shape.push(1);
    let grid = Tensor::randn(&shape, 1.0, &mut rng);
    let w = partition(&grid, n)?;
    let (nw, t) = (w.dim(0), w.dim(1));
    let qkv = w.into_shape(&[nw, 1, t, 1])?;
    let (_, windowed) = attention_forward(&qkv, &qkv, &qkv, None, None, 1.0)?;
    let tokens = numel(dims);
    let flat = Tensor::randn(&[1, 1, tokens, 1], 1.0, &mut rng);
    let (_, dense) = attention_forward(&flat, &flat, &flat, None, None, 1.0)?;
    Ok((windowed.len(), dense.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{assert_gradcheck_params, GradCheck};
    use crate::nn::eval_with;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shift_example() {
        let mut x = Tensor::zeros(&[4, 4, 4, 4, 1]);
        x.set(&[0, 0, 0, 0, 0], 1.0);
        let y = cyclic_shift4d(&x, [2; 4]).unwrap();
        assert_eq!(y.get(&[2, 2, 2, 2, 0]), 1.0);
        assert_eq!(y.sum(), 1.0);
        let mut z = Tensor::zeros(&[4, 5, 4, 4, 1]);
        z.set(&[3, 1, 0, 0, 0], 1.0);
        assert_eq!(
            cyclic_shift4d(&z, [1, 2, 0, 0])
                .unwrap()
                .get(&[2, 4, 0, 0, 0]),
            1.0
        );
    }

    #[test]
    fn partition_order_and_errors() {
        let x = Tensor::from_fn(&[4, 4, 4, 4, 1], |i| {
            (i[0] * 64 + i[1] * 16 + i[2] * 4 + i[3]) as f64
        });
        let w = partition4d(&x, 2).unwrap();
        assert_eq!(w.len(), 16);
        assert_eq!(w[1].get(&[0, 0, 0, 0, 0]), x.get(&[0, 0, 0, 2, 0]));
        assert_eq!(w[15].get(&[1, 1, 1, 1, 0]), x.get(&[3, 3, 3, 3, 0]));
        assert!(partition4d(&Tensor::zeros(&[4, 4, 3, 4, 1]), 2).is_err());
        assert_eq!(partition4d(&x, 1).unwrap().len(), 256);
    }

    #[test]
    fn bias_table_size_and_index_injectivity() {
        let mut p = ParamSet::new();
        let b = RelPosBias::new(&mut p, "b", 4, 4, 4, &mut rng(1));
        assert_eq!(p.value(b.table).shape(), &[2401, 4]);
        let idx = relative_position_index(3, 4);
        let t = 81;
        let mut seen = HashMap::new();
        for q in 0..t {
            for k in 0..t {
                let off: Vec<isize> = (0..4)
                    .map(|a| {
                        let p = 3usize.pow(3 - a as u32);
                        ((q / p) % 3) as isize - ((k / p) % 3) as isize
                    })
                    .collect();
                let prev = seen.insert(idx[q * t + k], off.clone());
                assert!(prev.is_none_or(|o| o == off));
            }
        }
        assert_eq!(seen.len(), 625);
    }

    #[test]
    fn single_token_window_is_value_then_output_projection() {
        let mut p = ParamSet::new();
        let attn = WindowAttention::new(&mut p, "a", 8, 1, 4, 2, &mut rng(2)).unwrap();
        let x = Tensor::randn(&[3, 1, 8], 1.0, &mut rng(3));
        let got = attn.attend(&p, &x, None).unwrap().output;
        let want = eval_with(&p, |g| {
            let qkv = attn.qkv.forward(g, g.constant(x.clone()))?;
            let v = g.narrow(qkv, 2, 16, 8)?;
            attn.proj.forward(g, v)
        })
        .unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(WindowAttention::new(&mut p, "bad", 6, 2, 4, 4, &mut rng(4)).is_err());
    }

    #[test]
    fn zero_queries_and_bias_give_uniform_weights() {
        let mut p = ParamSet::new();
        let attn = WindowAttention::new(&mut p, "a", 4, 2, 4, 2, &mut rng(5)).unwrap();
        let w = p.value_mut(attn.qkv.weight);
        for i in 0..4 {
            for j in 0..4 {
                w.set(&[i, j], 0.0);
            }
        }
        *p.value_mut(attn.bias.table) = Tensor::zeros(&[81, 2]);
        let x = Tensor::randn(&[2, 16, 4], 1.0, &mut rng(6));
        let probs = attn.attend(&p, &x, None).unwrap().probs;
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn shifted_mask_blocks_wrapped_pairs() {
        // 8-wide axis, window 4, shift 2: after the roll the last window holds
        // original tokens {6, 7} and {0, 1}, which must not see each other.
        let m = window_mask(&[8], &[8], 4, 2).unwrap().unwrap();
        assert_eq!(m.windows, 2);
        assert!(m.window(0).iter().all(|&a| a));
        let last = m.window(1);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(last[q * 4 + k], (q < 2) == (k < 2));
            }
        }
        assert!(window_mask(&[8, 8], &[8, 8], 4, 0).unwrap().is_none());
        let pad = window_mask(&[4], &[3], 4, 0).unwrap().unwrap();
        assert!(!pad.window(0)[3] && pad.window(0)[3 * 4 + 3]);
    }

    #[test]
    fn masked_attention_weights_are_exactly_zero() {
        let mut p = ParamSet::new();
        let attn = WindowAttention::new(&mut p, "a", 4, 2, 4, 1, &mut rng(7)).unwrap();
        let m = window_mask(&[4; 4], &[4, 3, 4, 4], 2, 1).unwrap().unwrap();
        let x = Tensor::randn(&[16, 16, 4], 1.0, &mut rng(8));
        let probs = attn.attend(&p, &x, Some(&m)).unwrap().probs;
        for w in 0..16 {
            let allowed = m.window(w);
            for (i, &pv) in probs.data()[w * 256..(w + 1) * 256].iter().enumerate() {
                if !allowed[i] {
                    assert_eq!(pv, 0.0);
                }
            }
        }
    }

    fn zero_out_projections(p: &mut ParamSet, b: &VtmBlock) {
        for id in [b.attn.proj.weight, b.fc2.weight] {
            let shape = p.value(id).shape().to_vec();
            *p.value_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn zero_projections_make_the_block_identity() {
        let mut p = ParamSet::new();
        let b = VtmBlock::new(
            &mut p,
            "b",
            8,
            4,
            WindowSpec::new(2, true).unwrap(),
            2,
            4,
            &mut rng(9),
        )
        .unwrap();
        zero_out_projections(&mut p, &b);
        let x = Tensor::randn(&[3, 2, 4, 2, 8], 1.0, &mut rng(10));
        let y = eval_with(&p, |g| b.forward(g, g.constant(x.clone()))).unwrap();
        assert_eq!(y, x);
    }

    /// Dense pre-norm block over all tokens of a single window, written with loops.
    fn dense_block_oracle(p: &ParamSet, b: &VtmBlock, x: &Tensor) -> Tensor {
        let (t, c) = (x.len() / x.dim(4), x.dim(4));
        let heads = b.attn.heads;
        let dh = c / heads;
        let rows = x.reshape(&[t, c]).unwrap();
        let ln = |v: &[f64], gamma: &Tensor, beta: &Tensor| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / c as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
            v.iter()
                .enumerate()
                .map(|(i, a)| (a - m) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i])
                .collect()
        };
        let lin = |v: &[f64], l: &Linear| -> Vec<f64> {
            let w = p.value(l.weight);
            let bias = p.value(l.bias.unwrap());
            (0..l.out_dim)
                .map(|o| bias.data()[o] + (0..l.in_dim).map(|i| v[i] * w.get(&[i, o])).sum::<f64>())
                .collect()
        };
        let n = b.window.size;
        let coord =
            |i: usize| -> Vec<usize> { (0..4).map(|a| (i / n.pow(3 - a as u32)) % n).collect() };
        let table = p.value(b.attn.bias.table);
        let qkv: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                lin(
                    &ln(
                        &rows.data()[i * c..(i + 1) * c],
                        p.value(b.norm1.gamma),
                        p.value(b.norm1.beta),
                    ),
                    &b.attn.qkv,
                )
            })
            .collect();
        let mut out = rows.data().to_vec();
        for i in 0..t {
            let mut merged = vec![0.0; c];
            for h in 0..heads {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let (ci, cj) = (coord(i), coord(j));
                        let row =
                            (0..4).fold(0, |acc, a| acc * (2 * n - 1) + ci[a] + n - 1 - cj[a]);
                        let dot: f64 = (0..dh)
                            .map(|d| qkv[i][h * dh + d] * qkv[j][c + h * dh + d])
                            .sum();
                        dot / (dh as f64).sqrt() + table.get(&[row, h])
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    merged[h * dh + d] =
                        (0..t).map(|j| e[j] / z * qkv[j][2 * c + h * dh + d]).sum();
                }
            }
            let a = lin(&merged, &b.attn.proj);
            for k in 0..c {
                out[i * c + k] += a[k];
            }
        }
        for i in 0..t {
            let r = out[i * c..(i + 1) * c].to_vec();
            let hdn: Vec<f64> = lin(
                &ln(&r, p.value(b.norm2.gamma), p.value(b.norm2.beta)),
                &b.fc1,
            )
            .into_iter()
            .map(|v| {
                0.5 * v
                    * (1.0
                        + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
            })
            .collect();
            let m = lin(&hdn, &b.fc2);
            for k in 0..c {
                out[i * c + k] += m[k];
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }

    #[test]
    fn single_window_block_matches_dense_oracle() {
        let mut p = ParamSet::new();
        let b = VtmBlock::new(
            &mut p,
            "b",
            8,
            4,
            WindowSpec::new(2, false).unwrap(),
            2,
            2,
            &mut rng(11),
        )
        .unwrap();
        *p.value_mut(b.attn.bias.table) = Tensor::randn(&[81, 2], 0.5, &mut rng(12));
        let x = Tensor::randn(&[2, 2, 2, 2, 8], 1.0, &mut rng(13));
        let y = eval_with(&p, |g| b.forward(g, g.constant(x.clone()))).unwrap();
        assert!(y.max_abs_diff(&dense_block_oracle(&p, &b, &x)) < 1e-10);
    }

    #[test]
    fn padded_tokens_do_not_leak() {
        let mut p = ParamSet::new();
        let vtm = Vtm::new(
            &mut p,
            "v",
            4,
            4,
            SwinConfig {
                window: 2,
                heads: 1,
                depth: 2,
                mlp_ratio: 2,
            },
            &mut rng(14),
        )
        .unwrap();
        let x = Tensor::randn(&[3, 2, 3, 2, 4], 1.0, &mut rng(15));
        let y = eval_with(&p, |g| vtm.forward(g, g.constant(x.clone()))).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn efficiency_counts() {
        assert_eq!(windowed_score_elements(&[8; 4], 4), 1_048_576);
        assert_eq!(dense_score_elements(&[8; 4]), 16_777_216);
        assert_eq!(windowed_score_elements(&[5, 8, 8, 9], 4), 24 * 65_536);
    }

    #[test]
    fn vtm_block_grads() {
        let mut p = ParamSet::new();
        let b = VtmBlock::new(
            &mut p,
            "b",
            8,
            4,
            WindowSpec::new(2, true).unwrap(),
            2,
            2,
            &mut rng(16),
        )
        .unwrap();
        let x = Tensor::randn(&[2, 2, 2, 2, 8], 1.0, &mut rng(17));
        assert_gradcheck_params(GradCheck::default(), &p, &[x], |g, v| b.forward(g, v[0]));
    }

    proptest! {
        #[test]
        fn partition_and_shift_round_trip(n in 1usize..4, g in proptest::collection::vec(1usize..4, 4), c in 1usize..3, s in proptest::collection::vec(-5isize..6, 4)) {
            let dims = [g[0] * n, g[1] * n, g[2] * n, g[3] * n];
            let x = Tensor::from_fn(&[dims[0], dims[1], dims[2], dims[3], c], |i| i.iter().fold(0.0, |a, &v| a * 7.0 + v as f64));
            let w = partition4d(&x, n).unwrap();
            prop_assert_eq!(&reverse4d(&w, dims, n).unwrap(), &x);
            let shift = [s[0], s[1], s[2], s[3]];
            let back = [-s[0], -s[1], -s[2], -s[3]];
            prop_assert_eq!(&cyclic_shift4d(&cyclic_shift4d(&x, shift).unwrap(), back).unwrap(), &x);
        }
    }
}
