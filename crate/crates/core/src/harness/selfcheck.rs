//! Fast runtime checks of the core invariants, for the `selfcheck` command.
//!
//! Each check compares an optimized routine against a direct computation or
//! an exact identity on small random inputs.

use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::container::TensorContainer;
use crate::autograd::check::{gradcheck, GradCheck};
use crate::autograd::Graph;
use crate::decoder::pool_support_var;
use crate::embedding::{Vcm, VcmConfig};
use crate::encoder::{LevelConfig, PyramidEncoder};
use crate::error::Result;
use crate::metrics::{aepe_var, kshot_vote, miou};
use crate::nn::ParamSet;
use crate::swin4d::{
    cyclic_shift4d, dense_score_elements, measure_score_elements, partition4d, reverse4d,
    windowed_score_elements, SwinConfig, VtmBlock, WindowAttention, WindowSpec,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check; deterministic for a given `seed`.
pub fn run_selfcheck(seed: u64) -> Vec<CheckOutcome> {
    vec![
        outcome("window round trips", window_round_trips(seed)),
        outcome("window attention", window_attention(seed)),
        outcome("gradients", gradients(seed)),
        outcome("attention score counts", score_counts()),
        outcome("zero guidance", zero_guidance(seed)),
        outcome("metrics", metrics(seed)),
        outcome("container round trip", container(seed)),
    ]
}

fn window_round_trips(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let n = rng.random_range(1..4);
        let dims: [usize; 4] = std::array::from_fn(|_| n * rng.random_range(1..3));
        let c = rng.random_range(1..4);
        let x = Tensor::randn(&[dims[0], dims[1], dims[2], dims[3], c], 1.0, &mut rng);
        if reverse4d(&partition4d(&x, n)?, dims, n)? != x {
            return Ok((
                false,
                format!("partition/reverse differs on {dims:?}, n = {n}"),
            ));
        }
        let s: [isize; 4] = std::array::from_fn(|_| rng.random_range(-3i32..4) as isize);
        let back = cyclic_shift4d(&cyclic_shift4d(&x, s)?, s.map(|v| -v))?;
        if back != x {
            return Ok((false, format!("shift by {s:?} does not invert on {dims:?}")));
        }
    }
    Ok((true, "50 shapes".into()))
}

/// Direct per-head loop for one window: softmax(q kᵀ / √d + bias) v, then the output projection.
fn attention_loop(p: &ParamSet, a: &WindowAttention, x: &Tensor) -> Tensor {
    let (t, c) = (x.dim(0), x.dim(1));
    let dh = c / a.heads;
    let wq = p.value(a.qkv.weight);
    let bq = p.value(a.qkv.bias.expect("qkv bias"));
    let table = p.value(a.bias.table);
    let index = a.bias.index();
    let qkv = |i: usize, j: usize| {
        (0..c)
            .map(|k| x.get(&[i, k]) * wq.get(&[k, j]))
            .sum::<f64>()
            + bq.data()[j]
    };
    let mut merged = Tensor::zeros(&[t, c]);
    for h in 0..a.heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..dh)
                        .map(|d| qkv(i, h * dh + d) * qkv(j, c + h * dh + d))
                        .sum();
                    dot / (dh as f64).sqrt() + table.get(&[index[i * t + j], h])
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                let v: f64 = (0..t).map(|j| e[j] / z * qkv(j, 2 * c + h * dh + d)).sum();
                merged.set(&[i, h * dh + d], v);
            }
        }
    }
    let wp = p.value(a.proj.weight);
    let bp = p.value(a.proj.bias.expect("proj bias"));
    Tensor::from_fn(&[t, c], |ix| {
        (0..c)
            .map(|k| merged.get(&[ix[0], k]) * wp.get(&[k, ix[1]]))
            .sum::<f64>()
            + bp.data()[ix[1]]
    })
}

fn window_attention(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let mut p = ParamSet::new();
        let a = WindowAttention::new(&mut p, "a", 8, 2, 4, 2, &mut rng)?;
        let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let r = a.attend(&p, &x.reshape(&[1, 16, 8])?, None)?;
        worst = worst.max(
            r.output
                .reshape(&[16, 8])?
                .max_abs_diff(&attention_loop(&p, &a, &x)),
        );
        for row in r.probs.data().chunks(16) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((
        worst <= 1e-6 && worst_row <= 1e-6,
        format!("max diff {worst:.2e}, max row-sum error {worst_row:.2e}"),
    ))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let cfg = GradCheck {
        max_probes: 24,
        ..GradCheck::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let mut worst = 0.0f64;

    let mut p = ParamSet::new();
    let vcm = Vcm::new(&mut p, "vcm", 2, VcmConfig::standard(8, true), &mut rng)?;
    let x = Tensor::randn(&[3, 3, 4, 4, 2], 1.0, &mut rng);
    worst = worst.max(gradcheck(cfg, &p, &[x], |g, v| vcm.forward(g, v[0]))?.max_rel_err);

    let mut p = ParamSet::new();
    let block = VtmBlock::new(
        &mut p,
        "blk",
        4,
        4,
        WindowSpec::new(2, true)?,
        2,
        2,
        &mut rng,
    )?;
    let x = Tensor::randn(&[3, 2, 2, 3, 4], 1.0, &mut rng);
    worst = worst.max(gradcheck(cfg, &p, &[x], |g, v| block.forward(g, v[0]))?.max_rel_err);

    let x = Tensor::randn(&[2, 2, 3, 2, 3], 1.0, &mut rng);
    worst = worst.max(
        gradcheck(cfg, &ParamSet::new(), &[x], |g, v| {
            pool_support_var(g, v[0])
        })?
        .max_rel_err,
    );

    let a = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
    worst = worst.max(
        gradcheck(cfg, &ParamSet::new(), &[a, b], |g, v| {
            aepe_var(g, v[0], v[1])
        })?
        .max_rel_err,
    );

    Ok((worst <= cfg.tol, format!("max relative error {worst:.2e}")))
}

fn score_counts() -> Result<(bool, String)> {
    let dims = [8; 4];
    let (windowed, dense) = measure_score_elements(&dims, 4, 0)?;
    let ok = windowed == 1_048_576
        && dense == 16_777_216
        && windowed == windowed_score_elements(&dims, 4)
        && dense == dense_score_elements(&dims);
    Ok((ok, format!("windowed {windowed}, dense {dense}")))
}

fn zero_guidance(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut p = ParamSet::new();
    let levels = [LevelConfig {
        in_channels: 2,
        vcm: VcmConfig::standard(8, false),
    }];
    let swin = SwinConfig {
        window: 2,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
    };
    let enc = PyramidEncoder::new(&mut p, "enc", &levels, swin, &mut rng)?;
    let vol = Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut rng);
    let g = Graph::with_params(&p, false);
    let v = g.constant(vol);
    let plain = g.value(enc.level(&g, 0, v, None)?);
    let shape = g.shape(enc.levels[0].vcm.forward(&g, v)?);
    let zero = g.value(enc.level(&g, 0, v, Some(g.constant(Tensor::zeros(&shape))))?);
    Ok((plain == zero, "guided by zeros vs unguided".into()))
}

fn metrics(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let mask = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[8, 8], |_| f64::from(rng.random_bool(0.4)));
    let gt = mask(&mut rng);
    let perfect = miou(&[(0, gt.clone(), gt.clone())])?;
    let single = kshot_vote(std::slice::from_ref(&gt), 0.5)? == gt;
    // Two agreeing shots out of three win at tau = 0.5.
    let (a, b) = (mask(&mut rng), mask(&mut rng));
    let vote = kshot_vote(&[a.clone(), a.clone(), b], 0.5)? == a;
    Ok((
        perfect == 1.0 && single && vote,
        format!("perfect mIoU {perfect}"),
    ))
}

fn container(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let mut c = TensorContainer::new();
    c.insert_tensor("scalar", &Tensor::scalar(-0.0))?;
    c.insert_tensor("empty", &Tensor::zeros(&[3, 0]))?;
    c.insert_tensor("values", &Tensor::randn(&[2, 3, 4], 1.0, &mut rng))?;
    c.insert_bytes("bytes", b"\x00\xff")?;
    let back = TensorContainer::from_bytes(&c.to_bytes())?;
    Ok((back.bits_eq(&c), format!("{} entries", c.len())))
}

/// Table of attention-score entries per head, windowed vs dense, for cubic grids of side `sides`.
pub fn bench_attn_table(sides: &[usize], window: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>6} {:>16} {:>16} {:>8}",
        "grid", "window", "windowed", "dense", "ratio"
    );
    for &s in sides {
        let dims = [s; 4];
        let w = windowed_score_elements(&dims, window);
        let d = dense_score_elements(&dims);
        let _ = writeln!(
            out,
            "{:>5}⁴ {:>6} {:>16} {:>16} {:>8.1}",
            s,
            window,
            w,
            d,
            d as f64 / w as f64
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selfcheck(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn bench_table_rows() {
        let t = bench_attn_table(&[4, 8], 4);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("1048576") && t.contains("16777216"));
    }
}
