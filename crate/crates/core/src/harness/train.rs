//! Episodic training loop, AdamW and checkpoints.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::container::TensorContainer;
use super::model::VatModel;
use super::synth::{episode_at, EpisodeSample, Split};
use crate::autograd::Graph;
use crate::decoder::mask_loss;
use crate::error::{Result, VatError};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Salts separating the random streams derived from one run seed.
const TRAIN_STREAM: u64 = 0x7261_696e;
const ORDER_STREAM: u64 = 0x6f72_6465;
const HELD_OUT_STREAM: u64 = 0x6865_6c64;

/// Seed of the training-episode pool of a run.
pub fn train_stream_seed(seed: u64) -> u64 {
    seed ^ TRAIN_STREAM
}

/// Seed of the held-out evaluation episodes of a run.
pub fn held_out_stream_seed(seed: u64) -> u64 {
    seed ^ HELD_OUT_STREAM
}

/// Index of the training episode used at `step`; a pure function of its arguments.
pub fn episode_index(seed: u64, step: usize, pool: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_STREAM);
    rng.set_stream(step as u64);
    rng.random_range(0..pool)
}

/// The fixed training pool of a run.
pub fn training_episodes(cfg: &RunConfig) -> Result<Vec<EpisodeSample>> {
    (0..cfg.train_episodes as u64)
        .map(|i| {
            episode_at(
                train_stream_seed(cfg.seed),
                i,
                cfg.shots,
                cfg.image_size,
                Split::Train,
            )
        })
        .collect()
}

/// Held-out episodes of classes never seen in training.
pub fn held_out_episodes(cfg: &RunConfig) -> Result<Vec<EpisodeSample>> {
    (0..cfg.eval_episodes as u64)
        .map(|i| {
            episode_at(
                held_out_stream_seed(cfg.seed),
                i,
                cfg.shots,
                cfg.image_size,
                Split::HeldOut,
            )
        })
        .collect()
}

/// Adam moments with decoupled weight decay, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &RunConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update of every trainable parameter. A zero learning rate leaves
    /// the parameters untouched bit for bit.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(VatError::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let id = ParamId(i);
            if !params.get(id).trainable {
                continue;
            }
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
            }
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            let p = params.value_mut(id).data_mut();
            for k in 0..p.len() {
                let update =
                    (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps) + self.weight_decay * p[k];
                p[k] -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Learning rate for the update made at `step` (counting from 0).
pub fn scheduled_lr(cfg: &RunConfig, step: usize) -> f64 {
    if !cfg.cosine_decay || cfg.steps == 0 {
        return cfg.lr;
    }
    let progress = (step as f64 / cfg.steps as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A model, its parameters, optimizer state and position in the episode order.
#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    model: VatModel,
    params: ParamSet,
    opt: AdamW,
    step: usize,
    episodes: Vec<EpisodeSample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let episodes = training_episodes(&cfg)?;
        Self::with_episodes(cfg, episodes)
    }

    /// Trains on an explicit episode pool instead of the synthetic one.
    pub fn with_episodes(cfg: RunConfig, episodes: Vec<EpisodeSample>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(VatError::Config(
                "training needs at least one episode".into(),
            ));
        }
        for ep in &episodes {
            ep.validate()?;
        }
        let (model, params) = VatModel::new(&cfg)?;
        let opt = AdamW::new(&params, &cfg);
        Ok(Self {
            cfg,
            model,
            params,
            opt,
            step: 0,
            episodes,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &VatModel {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn episodes(&self) -> &[EpisodeSample] {
        &self.episodes
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Loss of `ep` under the current parameters, using its first support shot.
    pub fn loss(&self, ep: &EpisodeSample) -> Result<f64> {
        let g = Graph::with_params(&self.params, false);
        let (support, mask) = &ep.support[0];
        let logits = self.model.forward(&g, &ep.query_image, support, mask)?;
        Ok(g.value(mask_loss(&g, logits, &ep.query_mask)?).item())
    }

    /// One optimizer step on the episode scheduled for the current step.
    /// Returns the loss before the update; a non-finite loss aborts
    /// without touching the parameters.
    pub fn train_step(&mut self) -> Result<f64> {
        let idx = episode_index(self.cfg.seed, self.step, self.episodes.len());
        let ep = &self.episodes[idx];
        let g = Graph::with_params(&self.params, true);
        let (support, mask) = &ep.support[0];
        let logits = self.model.forward(&g, &ep.query_image, support, mask)?;
        let loss_var = mask_loss(&g, logits, &ep.query_mask)?;
        let loss = g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(VatError::Divergence {
                step: self.step,
                loss,
            });
        }
        let grads = g.backward(loss_var)?.param_grads(&g, &self.params);
        self.opt.lr = scheduled_lr(&self.cfg, self.step);
        self.opt.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Steps until `cfg.steps`, calling `on_step` with the loss after each one.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.step < self.cfg.steps {
            let loss = self.train_step()?;
            losses.push(loss);
            on_step(self, loss)?;
        }
        Ok(losses)
    }

    /// Parameters, optimizer moments, step counter and config text.
    pub fn checkpoint(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_bytes("meta/config", self.cfg.to_text().as_bytes())?;
        c.insert_bytes("meta/step", &(self.step as u64).to_le_bytes())?;
        c.insert_bytes("meta/adam_t", &self.opt.t.to_le_bytes())?;
        for (i, (_, p)) in self.params.iter().enumerate() {
            c.insert_tensor(format!("param/{}", p.name), &p.value)?;
            c.insert_tensor(format!("adam_m/{}", p.name), &self.opt.m[i])?;
            c.insert_tensor(format!("adam_v/{}", p.name), &self.opt.v[i])?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    /// Restores a run. With `cfg`, its architecture must match the stored
    /// one; other fields (such as `steps`) take the new values.
    pub fn from_checkpoint(c: &TensorContainer, cfg: Option<RunConfig>) -> Result<Self> {
        let stored = stored_config(c)?;
        let cfg = match cfg {
            Some(cfg) => {
                check_compatible(&stored, &cfg)?;
                cfg
            }
            None => stored,
        };
        let mut t = Self::new(cfg)?;
        t.params = load_params(c, &t.cfg)?;
        for (i, (_, p)) in t.params.iter().enumerate() {
            t.opt.m[i] = c.tensor(&format!("adam_m/{}", p.name))?;
            t.opt.v[i] = c.tensor(&format!("adam_v/{}", p.name))?;
        }
        t.step = read_u64(c, "meta/step")? as usize;
        t.opt.t = read_u64(c, "meta/adam_t")?;
        Ok(t)
    }

    pub fn resume(path: &Path, cfg: Option<RunConfig>) -> Result<Self> {
        Self::from_checkpoint(&TensorContainer::read(path)?, cfg)
    }
}

fn read_u64(c: &TensorContainer, name: &str) -> Result<u64> {
    let b = c.bytes(name)?;
    let arr: [u8; 8] = b
        .try_into()
        .map_err(|_| VatError::Checkpoint(format!("{name} must hold 8 bytes")))?;
    Ok(u64::from_le_bytes(arr))
}

/// The run config stored in a checkpoint.
pub fn stored_config(c: &TensorContainer) -> Result<RunConfig> {
    let text = std::str::from_utf8(c.bytes("meta/config")?)
        .map_err(|_| VatError::Checkpoint("config entry is not UTF-8".into()))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(text)?;
    Ok(cfg)
}

/// Errors unless both configs build identically shaped networks.
pub fn check_compatible(stored: &RunConfig, cfg: &RunConfig) -> Result<()> {
    if stored.architecture_text() != cfg.architecture_text()
        || stored.freeze_backbone != cfg.freeze_backbone
    {
        return Err(VatError::Checkpoint(format!(
            "checkpoint was trained with\n{}but the config asks for\n{}",
            stored.architecture_text(),
            cfg.architecture_text()
        )));
    }
    Ok(())
}

/// Builds the model of `cfg` and fills its parameters from a checkpoint.
pub fn load_params(c: &TensorContainer, cfg: &RunConfig) -> Result<ParamSet> {
    let (_, mut params) = VatModel::new(cfg)?;
    let tensors: Vec<(String, Tensor)> = params
        .iter()
        .map(|(_, p)| {
            let name = format!("param/{}", p.name);
            c.tensor(&name)
                .map(|t| (p.name.clone(), t))
                .map_err(|_| VatError::Checkpoint(format!("missing {name}")))
        })
        .collect::<Result<_>>()?;
    params.load(|name| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t))?;
    Ok(params)
}

/// Loads a checkpoint for inference, checking it against `cfg` when given.
pub fn load_model(
    c: &TensorContainer,
    cfg: Option<&RunConfig>,
) -> Result<(RunConfig, VatModel, ParamSet)> {
    let stored = stored_config(c)?;
    let cfg = match cfg {
        Some(cfg) => {
            check_compatible(&stored, cfg)?;
            cfg.clone()
        }
        None => stored,
    };
    let (model, _) = VatModel::new(&cfg)?;
    let params = load_params(c, &cfg)?;
    Ok((cfg, model, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            image_size: 32,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            appearance: vec![4, 4, 4],
            train_episodes: 3,
            steps: 3,
            ..RunConfig::desk()
        }
    }

    #[test]
    fn order_is_pure_and_covers_pool() {
        let a: Vec<usize> = (0..50).map(|s| episode_index(1, s, 5)).collect();
        let b: Vec<usize> = (0..50).map(|s| episode_index(1, s, 5)).collect();
        assert_eq!(a, b);
        for i in 0..5 {
            assert!(a.contains(&i));
        }
    }

    #[test]
    fn zero_lr_keeps_params_bitwise() {
        let mut t = Trainer::new(RunConfig { lr: 0.0, ..tiny() }).unwrap();
        let before = t.params().clone();
        t.train_step().unwrap();
        assert_eq!(t.params(), &before);
        assert!(t.opt.m.iter().any(|m| m.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn frozen_backbone_does_not_move() {
        for freeze in [true, false] {
            let mut t = Trainer::new(RunConfig {
                freeze_backbone: freeze,
                ..tiny()
            })
            .unwrap();
            let before = t.params().clone();
            t.train_step().unwrap();
            let moved = before
                .iter()
                .zip(t.params().iter())
                .filter(|((_, a), _)| a.name.starts_with("backbone."))
                .any(|((_, a), (_, b))| a.value != b.value);
            assert_eq!(moved, !freeze);
            assert_ne!(t.params(), &before);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = RunConfig {
            lr: 1e-3,
            steps: 100,
            cosine_decay: true,
            ..tiny()
        };
        assert_eq!(scheduled_lr(&cfg, 0), 1e-3);
        assert!((scheduled_lr(&cfg, 50) - 5e-4).abs() < 1e-15);
        assert!(scheduled_lr(&cfg, 99) < 1e-6);
        assert_eq!(scheduled_lr(&cfg, 200), 0.0);
        assert_eq!(
            scheduled_lr(
                &RunConfig {
                    cosine_decay: false,
                    ..cfg
                },
                99
            ),
            1e-3
        );
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let cfg = RunConfig {
            lr: 0.1,
            weight_decay: 0.05,
            ..RunConfig::desk()
        };
        let mut opt = AdamW::new(&params, &cfg);
        let g = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        opt.step(&mut params, &[g.clone()]).unwrap();
        // First step: m̂ = g, v̂ = g², so the adaptive term is g / (|g| + eps).
        for (k, &p0) in [1.0f64, -2.0].iter().enumerate() {
            let gk = g.data()[k];
            let want = p0 - 0.1 * (gk / (gk.abs() + 1e-8) + 0.05 * p0);
            assert!((params.value(ParamId(0)).data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn resume_matches_continuous_run() {
        let mut a = Trainer::new(tiny()).unwrap();
        let full: Vec<f64> = (0..3).map(|_| a.train_step().unwrap()).collect();
        let mut b = Trainer::new(tiny()).unwrap();
        b.train_step().unwrap();
        let bytes = b.checkpoint().unwrap().to_bytes();
        let mut c =
            Trainer::from_checkpoint(&TensorContainer::from_bytes(&bytes).unwrap(), None).unwrap();
        let rest: Vec<f64> = (0..2).map(|_| c.train_step().unwrap()).collect();
        assert_eq!(
            full[1..].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            rest.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.checkpoint().unwrap().bits_eq(&c.checkpoint().unwrap()));
    }

    #[test]
    fn incompatible_config_is_rejected() {
        let t = Trainer::new(tiny()).unwrap();
        let c = t.checkpoint().unwrap();
        assert!(Trainer::from_checkpoint(&c, Some(RunConfig { dim: 16, ..tiny() })).is_err());
        assert!(Trainer::from_checkpoint(&c, Some(RunConfig { steps: 9, ..tiny() })).is_ok());
        assert!(load_model(
            &c,
            Some(&RunConfig {
                levels: 2,
                ..tiny()
            })
        )
        .is_err());
    }

    #[test]
    fn divergence_guard_trips_on_nan() {
        let mut t = Trainer::new(tiny()).unwrap();
        let id = t
            .params
            .iter()
            .find(|(_, p)| p.name.starts_with("decoder.head"))
            .unwrap()
            .0;
        t.params.value_mut(id).data_mut()[0] = f64::NAN;
        let before = t.params().clone();
        match t.train_step() {
            Err(VatError::Divergence { step: 0, loss }) => assert!(loss.is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(t.step_count(), 0);
        assert!(before
            .iter()
            .zip(t.params().iter())
            .all(|((_, a), (_, b))| a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())));
    }
}
