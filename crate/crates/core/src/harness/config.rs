//! Run configuration with flat `key = value` file support.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VatError};

/// Every knob of a training or evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    /// Embedding width of the aggregated volume.
    pub dim: usize,
    pub window: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
    pub shots: usize,
    /// Number of pyramid layers (1 to 3), finest kept.
    pub levels: usize,
    /// Appearance widths for the stride-2, -4 and -8 query maps.
    pub appearance: Vec<usize>,
    pub lr: f64,
    /// Anneal the learning rate from `lr` to zero over `steps` along a half cosine.
    pub cosine_decay: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub steps: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub freeze_backbone: bool,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    /// Full-size settings: window 4, D = 128, τ = 0.5, lr = 5e-4, widths (16, 32, 64).
    fn default() -> Self {
        Self {
            image_size: 417,
            dim: 128,
            window: 4,
            heads: 4,
            depth: 2,
            mlp_ratio: 4,
            tau: 0.5,
            shots: 1,
            levels: 3,
            appearance: vec![16, 32, 64],
            lr: 5e-4,
            cosine_decay: false,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            steps: 2000,
            train_episodes: 10,
            eval_episodes: 50,
            freeze_backbone: true,
            checkpoint_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "appearance",
    "beta1",
    "beta2",
    "checkpoint_every",
    "cosine_decay",
    "depth",
    "dim",
    "eval_episodes",
    "freeze_backbone",
    "heads",
    "image_size",
    "levels",
    "lr",
    "mlp_ratio",
    "seed",
    "shots",
    "steps",
    "tau",
    "train_episodes",
    "weight_decay",
    "window",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| VatError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Desk-scale profile: 64×64 images and D = 32. The backbone is random
    /// rather than pretrained, so it trains with the rest, and a 600-step
    /// cosine schedule at lr 1e-3 replaces the long constant-rate schedule.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            dim: 32,
            lr: 1e-3,
            cosine_decay: true,
            steps: 600,
            freeze_backbone: false,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => Err(VatError::Config(format!(
                "unknown profile {other:?} (expected desk or full)"
            ))),
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "appearance" => {
                self.appearance = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "train_episodes" => self.train_episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "freeze_backbone" => self.freeze_backbone = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "cosine_decay" => self.cosine_decay = parse(key, value)?,
            other => return Err(VatError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                VatError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Replaces the seed with `VAT_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("VAT_SEED") {
            self.seed = parse("VAT_SEED", &v)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let appearance: Vec<String> = self.appearance.iter().map(|c| c.to_string()).collect();
        BTreeMap::from([
            ("appearance", appearance.join(",")),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("cosine_decay", self.cosine_decay.to_string()),
            ("depth", self.depth.to_string()),
            ("dim", self.dim.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("freeze_backbone", self.freeze_backbone.to_string()),
            ("heads", self.heads.to_string()),
            ("image_size", self.image_size.to_string()),
            ("levels", self.levels.to_string()),
            ("lr", self.lr.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("shots", self.shots.to_string()),
            ("steps", self.steps.to_string()),
            ("tau", self.tau.to_string()),
            ("train_episodes", self.train_episodes.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("window", self.window.to_string()),
        ])
    }

    /// Sorted `key = value` lines, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Text of the fields that determine parameter shapes.
    pub fn architecture_text(&self) -> String {
        let keep = [
            "appearance",
            "depth",
            "dim",
            "heads",
            "image_size",
            "levels",
            "mlp_ratio",
            "window",
        ];
        let mut out = String::new();
        for (k, v) in self.to_map().into_iter().filter(|(k, _)| keep.contains(k)) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VatError::Config(m));
        if self.image_size < 16 {
            return fail(format!(
                "image_size {} is below the backbone stride of 16",
                self.image_size
            ));
        }
        if !(1..=3).contains(&self.levels) {
            return fail(format!("levels must be 1, 2 or 3, got {}", self.levels));
        }
        if self.dim < 8 || self.dim % 8 != 0 {
            return fail(format!(
                "dim must be a positive multiple of 8, got {}",
                self.dim
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.window == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return fail("window, depth and mlp_ratio must be positive".into());
        }
        if self.appearance.len() < 2 || self.appearance.contains(&0) {
            return fail("appearance needs at least two positive widths".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.shots == 0 {
            return fail("shots must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.train_episodes == 0 {
            return fail("train_episodes must be at least 1".into());
        }
        Ok(())
    }
}
