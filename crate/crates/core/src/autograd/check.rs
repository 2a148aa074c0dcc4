//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that gradients which are
    /// zero analytically are compared in absolute terms.
    pub floor: f64,
    /// Probe at most this many entries per tensor (sampled deterministically).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_probes: 256,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of `Σ w ⊙ f(inputs, params)` (random fixed `w`)
/// against central differences, for every input tensor and every trainable
/// parameter.
pub fn gradcheck<F>(
    cfg: GradCheck,
    params: &ParamSet,
    inputs: &[Tensor],
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe_shape = {
        let g = Graph::with_params(params, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        g.shape(f(&g, &vars)?)
    };
    let weights = Tensor::randn(&probe_shape, 1.0, &mut rng);

    let objective = |params: &ParamSet, inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::with_params(params, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).dot(&weights))
    };

    let g = Graph::with_params(params, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let loss = g.weighted_sum(out, &weights)?;
    let grads = g.backward(loss)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    let param_grads = grads.param_grads(&g, params);

    let mut report = GradReport {
        max_rel_err: 0.0,
        probes: 0,
        worst: None,
    };
    let mut record = |label: String, idx: usize, analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let err = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((label, idx, analytic, numeric));
        }
    };

    for (t, (input, grad)) in inputs.iter().zip(&input_grads).enumerate() {
        for idx in probe_indices(input.len(), cfg.max_probes, &mut rng) {
            let mut work = inputs.to_vec();
            let x0 = input.data()[idx];
            work[t].data_mut()[idx] = x0 + cfg.eps;
            let plus = objective(params, &work)?;
            work[t].data_mut()[idx] = x0 - cfg.eps;
            let minus = objective(params, &work)?;
            record(
                format!("input{t}"),
                idx,
                grad.data()[idx],
                (plus - minus) / (2.0 * cfg.eps),
            );
        }
    }
    for ((id, p), grad) in params.iter().zip(&param_grads) {
        if !p.trainable {
            continue;
        }
        for idx in probe_indices(p.value.len(), cfg.max_probes, &mut rng) {
            let mut work = params.clone();
            let x0 = p.value.data()[idx];
            work.value_mut(id).data_mut()[idx] = x0 + cfg.eps;
            let plus = objective(&work, inputs)?;
            work.value_mut(id).data_mut()[idx] = x0 - cfg.eps;
            let minus = objective(&work, inputs)?;
            record(
                p.name.clone(),
                idx,
                grad.data()[idx],
                (plus - minus) / (2.0 * cfg.eps),
            );
        }
    }
    Ok(report)
}

fn probe_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Panicking wrapper over [`gradcheck`] for inputs only.
pub fn assert_gradcheck<F>(cfg: GradCheck, inputs: &[Tensor], f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    assert_gradcheck_params(cfg, &ParamSet::new(), inputs, f)
}

pub fn assert_gradcheck_params<F>(cfg: GradCheck, params: &ParamSet, inputs: &[Tensor], f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let report = gradcheck(cfg, params, inputs, f).expect("gradcheck evaluation");
    assert!(
        report.passed(cfg.tol),
        "gradcheck failed: max rel err {:.3e} over {} probes, worst {:?}",
        report.max_rel_err,
        report.probes,
        report.worst
    );
}
