//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mining::{DistanceWeighting, MinerKind};

/// Which parts of the generation pipeline take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both generation stages.
    Full,
    /// Stage 1 only; the generated triplet is `(a', p', n)`.
    NoStage2,
    /// Plain triplet training: no generators, no category loss.
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoStage2 => "no_stage2",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Full, Variant::NoStage2, Variant::Baseline]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub mu: f64,
    pub phi: f64,
    pub nu: f64,
    pub tau: f64,
    pub lr_f: f64,
    pub lr_classifier: f64,
    pub lr_disc: f64,
    pub lr_gen: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub embedding_dim: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub miner: MinerKind,
    pub seed: u64,

    pub feature_hidden: usize,
    pub gen_hidden1: usize,
    pub gen_hidden2: usize,
    pub variant: Variant,
    pub train_fraction: f64,
    /// Global gradient-norm cap per network update; 0 disables clipping.
    pub grad_clip: f64,
    /// Decay of the running generator loss behind `w_o`, `w_h` and `τ_r`.
    pub ema_decay: f64,
    pub dw_clip: f64,
    pub dw_min_distance: f64,
    pub dw_max_distance: f64,
    /// Evaluate on the held-out split every this many epochs; 0 only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 0.8,
            eta: 0.3,
            beta: 0.5,
            mu: 0.3,
            phi: 0.5,
            nu: 0.2,
            tau: 0.2,
            lr_f: 1e-5,
            lr_classifier: 1e-3,
            lr_disc: 1e-4,
            lr_gen: 1e-3,
            weight_decay: 4e-4,
            batch_size: 32,
            epochs: 20,
            pretrain_epochs: 5,
            embedding_dim: 16,
            classes_per_batch: 8,
            samples_per_class: 4,
            miner: MinerKind::Random,
            seed: 0,
            feature_hidden: 64,
            gen_hidden1: 128,
            gen_hidden2: 512,
            variant: Variant::Full,
            train_fraction: 0.5,
            grad_clip: 5.0,
            ema_decay: 0.9,
            dw_clip: DistanceWeighting::default().clip,
            dw_min_distance: DistanceWeighting::default().min_distance,
            dw_max_distance: DistanceWeighting::default().max_distance,
            eval_every: 0,
        }
    }
}

/// Keys every config file must set.
pub const REQUIRED_KEYS: [&str; 21] = [
    "alpha",
    "gamma",
    "eta",
    "beta",
    "mu",
    "phi",
    "nu",
    "tau",
    "lr_f",
    "lr_classifier",
    "lr_disc",
    "lr_gen",
    "weight_decay",
    "batch_size",
    "epochs",
    "pretrain_epochs",
    "embedding_dim",
    "classes_per_batch",
    "samples_per_class",
    "miner",
    "seed",
];

/// Keys that fall back to [`TrainConfig::default`] when absent.
pub const OPTIONAL_KEYS: [&str; 11] = [
    "feature_hidden",
    "gen_hidden1",
    "gen_hidden2",
    "variant",
    "train_fraction",
    "grad_clip",
    "ema_decay",
    "dw_clip",
    "dw_min_distance",
    "dw_max_distance",
    "eval_every",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'")))
}

impl TrainConfig {
    /// Desk-scale preset for 32-wide synthetic features: the embedding keeps
    /// the input width, and the feature extractor learning rate is raised so
    /// a thousand batches move the embedding noticeably.
    pub fn desk() -> Self {
        Self { lr_f: 1e-4, embedding_dim: 32, feature_hidden: 128, ..Self::default() }
    }

    pub fn distance_weighting(&self) -> DistanceWeighting {
        DistanceWeighting { clip: self.dw_clip, min_distance: self.dw_min_distance, max_distance: self.dw_max_distance }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1.0 - 2.0 * self.eta - self.mu > 0.0) || !(1.0 - 2.0 * self.eta > 0.0) || self.eta < 0.0 || self.mu < 0.0 {
            return bad(format!("need eta, mu >= 0 and 1 - 2*eta - mu > 0 (eta {}, mu {})", self.eta, self.mu));
        }
        for (name, lr) in [
            ("lr_f", self.lr_f),
            ("lr_classifier", self.lr_classifier),
            ("lr_disc", self.lr_disc),
            ("lr_gen", self.lr_gen),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.classes_per_batch * self.samples_per_class != self.batch_size {
            return bad(format!(
                "classes_per_batch * samples_per_class = {} but batch_size = {}",
                self.classes_per_batch * self.samples_per_class,
                self.batch_size
            ));
        }
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return bad("classes_per_batch and samples_per_class must both be >= 2".into());
        }
        if !(self.alpha > 0.0) || self.gamma < 0.0 || !(self.beta > 0.0) {
            return bad(format!(
                "need alpha > 0, gamma >= 0, beta > 0 (got {}, {}, {})",
                self.alpha, self.gamma, self.beta
            ));
        }
        if self.phi < 0.0 || self.nu < 0.0 || self.tau < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("phi, nu, tau, weight_decay and grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.embedding_dim == 0 || self.feature_hidden == 0 || self.gen_hidden1 == 0 || self.gen_hidden2 == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        if !(self.dw_clip > 0.0)
            || !(0.0 < self.dw_min_distance
                && self.dw_min_distance <= self.dw_max_distance
                && self.dw_max_distance < 2.0)
        {
            return bad("distance weighting needs clip > 0 and 0 < min <= max < 2".into());
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "alpha" => self.alpha = parse_value(key, raw)?,
            "gamma" => self.gamma = parse_value(key, raw)?,
            "eta" => self.eta = parse_value(key, raw)?,
            "beta" => self.beta = parse_value(key, raw)?,
            "mu" => self.mu = parse_value(key, raw)?,
            "phi" => self.phi = parse_value(key, raw)?,
            "nu" => self.nu = parse_value(key, raw)?,
            "tau" => self.tau = parse_value(key, raw)?,
            "lr_f" => self.lr_f = parse_value(key, raw)?,
            "lr_classifier" => self.lr_classifier = parse_value(key, raw)?,
            "lr_disc" => self.lr_disc = parse_value(key, raw)?,
            "lr_gen" => self.lr_gen = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, raw)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, raw)?,
            "classes_per_batch" => self.classes_per_batch = parse_value(key, raw)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, raw)?,
            "miner" => self.miner = raw.parse()?,
            "seed" => self.seed = parse_value(key, raw)?,
            "feature_hidden" => self.feature_hidden = parse_value(key, raw)?,
            "gen_hidden1" => self.gen_hidden1 = parse_value(key, raw)?,
            "gen_hidden2" => self.gen_hidden2 = parse_value(key, raw)?,
            "variant" => self.variant = raw.parse()?,
            "train_fraction" => self.train_fraction = parse_value(key, raw)?,
            "grad_clip" => self.grad_clip = parse_value(key, raw)?,
            "ema_decay" => self.ema_decay = parse_value(key, raw)?,
            "dw_clip" => self.dw_clip = parse_value(key, raw)?,
            "dw_min_distance" => self.dw_min_distance = parse_value(key, raw)?,
            "dw_max_distance" => self.dw_max_distance = parse_value(key, raw)?,
            "eval_every" => self.eval_every = parse_value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a config file body. Every key in [`REQUIRED_KEYS`] must be
    /// present; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(Error::Config(format!("key '{key}' repeated on lines {prev} and {}", i + 1)));
            }
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: ")))
            })?;
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !seen.contains_key(**k)) {
            return Err(Error::Config(format!("missing key '{missing}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self;
        let entries: [(&str, String); 32] = [
            ("alpha", c.alpha.to_string()),
            ("gamma", c.gamma.to_string()),
            ("eta", c.eta.to_string()),
            ("beta", c.beta.to_string()),
            ("mu", c.mu.to_string()),
            ("phi", c.phi.to_string()),
            ("nu", c.nu.to_string()),
            ("tau", c.tau.to_string()),
            ("lr_f", c.lr_f.to_string()),
            ("lr_classifier", c.lr_classifier.to_string()),
            ("lr_disc", c.lr_disc.to_string()),
            ("lr_gen", c.lr_gen.to_string()),
            ("weight_decay", c.weight_decay.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("epochs", c.epochs.to_string()),
            ("pretrain_epochs", c.pretrain_epochs.to_string()),
            ("embedding_dim", c.embedding_dim.to_string()),
            ("classes_per_batch", c.classes_per_batch.to_string()),
            ("samples_per_class", c.samples_per_class.to_string()),
            ("miner", c.miner.to_string()),
            ("seed", c.seed.to_string()),
            ("feature_hidden", c.feature_hidden.to_string()),
            ("gen_hidden1", c.gen_hidden1.to_string()),
            ("gen_hidden2", c.gen_hidden2.to_string()),
            ("variant", c.variant.to_string()),
            ("train_fraction", c.train_fraction.to_string()),
            ("grad_clip", c.grad_clip.to_string()),
            ("ema_decay", c.ema_decay.to_string()),
            ("dw_clip", c.dw_clip.to_string()),
            ("dw_min_distance", c.dw_min_distance.to_string()),
            ("dw_max_distance", c.dw_max_distance.to_string()),
            ("eval_every", c.eval_every.to_string()),
        ];
        for (k, v) in entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
