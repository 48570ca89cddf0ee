//! Run configuration and its `key = value` file format.
//!
//! ```text
//! [train]
//! steps = 5
//! alpha = 1e-4
//! ```

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, RapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    PatchCue,
    Cifar,
    Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FewShot,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR training file, or a dataset directory written by `make-synth`.
    pub path: Option<PathBuf>,
    /// CIFAR test file (classification mode).
    pub test_path: Option<PathBuf>,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub hw: usize,
    pub patch_size: usize,
    pub clutter: f32,
    pub noise: f32,
    pub split: Vec<u32>,
    pub seed: u64,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::PatchCue,
            path: None,
            test_path: None,
            num_classes: 25,
            images_per_class: 60,
            hw: 32,
            patch_size: 6,
            clutter: 0.2,
            noise: 0.15,
            split: vec![64, 16, 20],
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_hw: usize,
    pub channels: [usize; 4],
    /// 1-based index of the block whose output is attended.
    pub insertion_block: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_hw: 32,
            channels: [64; 4],
            insertion_block: 2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        self.channels[3]
    }

    /// Side length of the feature map at the insertion point.
    pub fn insertion_side(&self) -> usize {
        self.input_hw >> self.insertion_block
    }

    pub fn insertion_channels(&self) -> usize {
        self.channels[self.insertion_block - 1]
    }

    /// Length of the attention vector (`h * w` at the insertion point).
    pub fn attention_dim(&self) -> usize {
        self.insertion_side() * self.insertion_side()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.insertion_block) {
            return Err(RapError::InvalidConfig(format!(
                "backbone.insertion_block must be in 1..=4, got {}",
                self.insertion_block
            )));
        }
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(16) {
            return Err(RapError::InvalidConfig(format!(
                "backbone.input_hw must be a positive multiple of 16, got {}",
                self.input_hw
            )));
        }
        if self.channels.contains(&0) {
            return Err(RapError::InvalidConfig("backbone.channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(RapError::InvalidConfig(
                "backbone batch-norm momentum/eps out of range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub conv_channels: [usize; 3],
    pub sigma: f32,
    pub deterministic_eval: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            conv_channels: [8, 8, 8],
            sigma: 0.1,
            deterministic_eval: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(RapError::InvalidConfig(format!(
                "policy.sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.conv_channels.contains(&0) {
            return Err(RapError::InvalidConfig("policy.conv_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Number of attention steps `T`.
    pub steps: usize,
    pub alpha: f32,
    /// When false the model trains as the plain backbone (identity attention).
    pub attention: bool,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub baseline_subtraction: bool,
    pub baseline_momentum: f32,
    /// Adds the validation-batch loss to the objective (fair baseline).
    pub val_objective: bool,
    pub val_pool: usize,
    pub eval_every: usize,
    pub divergence_threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::FewShot,
            steps: 5,
            alpha: 1e-4,
            attention: true,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            epochs: 2,
            batch_size: 128,
            seed: 0,
            way: 5,
            shot: 1,
            query: 16,
            baseline_subtraction: false,
            baseline_momentum: 0.9,
            val_objective: false,
            val_pool: 200,
            eval_every: 100,
            divergence_threshold: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RapError::InvalidConfig(msg));
        if self.steps == 0 {
            return bad("train.steps must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("train.alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train learning rate or Adam betas out of range".into());
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return bad("train.way must be >= 2 and shot/query >= 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("train.batch_size and train.eval_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            way: 5,
            shot: 1,
            query: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        if self.data.hw != self.backbone.input_hw {
            return Err(RapError::InvalidConfig(format!(
                "data.hw ({}) differs from backbone.input_hw ({})",
                self.data.hw, self.backbone.input_hw
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        text.parse()
    }

    /// Applies one `section.key = value` override.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || RapError::UnknownKey {
            section: section.to_string(),
            key: key.to_string(),
        };
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match section {
            "data" => {
                let d = &mut self.data;
                match key {
                    "source" => d.source = parse(k, value)?,
                    "path" => d.path = opt_path(value),
                    "test_path" => d.test_path = opt_path(value),
                    "num_classes" => d.num_classes = parse(k, value)?,
                    "images_per_class" => d.images_per_class = parse(k, value)?,
                    "hw" => d.hw = parse(k, value)?,
                    "patch_size" => d.patch_size = parse(k, value)?,
                    "clutter" => d.clutter = parse(k, value)?,
                    "noise" => d.noise = parse(k, value)?,
                    "split" => d.split = parse_list(k, value)?,
                    "seed" => d.seed = parse(k, value)?,
                    "augment" => d.augment = parse(k, value)?,
                    _ => return Err(unknown()),
                }
            }
            "backbone" => {
                let b = &mut self.backbone;
                match key {
                    "input_hw" => b.input_hw = parse(k, value)?,
                    "channels" => b.channels = parse_array(k, value)?,
                    "insertion_block" => b.insertion_block = parse(k, value)?,
                    "bn_momentum" => b.bn_momentum = parse(k, value)?,
                    "bn_eps" => b.bn_eps = parse(k, value)?,
                    _ => return Err(unknown()),
                }
            }
            "policy" => {
                let p = &mut self.policy;
                match key {
                    "conv_channels" => p.conv_channels = parse_array(k, value)?,
                    "sigma" => p.sigma = parse(k, value)?,
                    "deterministic_eval" => p.deterministic_eval = parse(k, value)?,
                    _ => return Err(unknown()),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "mode" => t.mode = parse(k, value)?,
                    "steps" => t.steps = parse(k, value)?,
                    "alpha" => t.alpha = parse(k, value)?,
                    "attention" => t.attention = parse(k, value)?,
                    "lr" => t.lr = parse(k, value)?,
                    "beta1" => t.beta1 = parse(k, value)?,
                    "beta2" => t.beta2 = parse(k, value)?,
                    "adam_eps" => t.adam_eps = parse(k, value)?,
                    "iterations" => t.iterations = parse(k, value)?,
                    "epochs" => t.epochs = parse(k, value)?,
                    "batch_size" => t.batch_size = parse(k, value)?,
                    "seed" => t.seed = parse(k, value)?,
                    "way" => t.way = parse(k, value)?,
                    "shot" => t.shot = parse(k, value)?,
                    "query" => t.query = parse(k, value)?,
                    "baseline_subtraction" => t.baseline_subtraction = parse(k, value)?,
                    "baseline_momentum" => t.baseline_momentum = parse(k, value)?,
                    "val_objective" => t.val_objective = parse(k, value)?,
                    "val_pool" => t.val_pool = parse(k, value)?,
                    "eval_every" => t.eval_every = parse(k, value)?,
                    "divergence_threshold" => t.divergence_threshold = parse(k, value)?,
                    _ => return Err(unknown()),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "episodes" => e.episodes = parse(k, value)?,
                    "way" => e.way = parse(k, value)?,
                    "shot" => e.shot = parse(k, value)?,
                    "query" => e.query = parse(k, value)?,
                    "seed" => e.seed = parse(k, value)?,
                    _ => return Err(unknown()),
                }
            }
            other => return Err(RapError::UnknownSection(other.to_string())),
        }
        Ok(())
    }

    /// Applies a dotted override such as `train.alpha=0`.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment.split_once('=').ok_or_else(|| RapError::Syntax {
            line: 0,
            reason: format!("expected section.key=value, got `{assignment}`"),
        })?;
        let (section, key) = lhs.trim().split_once('.').ok_or_else(|| RapError::Syntax {
            line: 0,
            reason: format!("expected section.key, got `{}`", lhs.trim()),
        })?;
        self.set(section, key, value.trim())
    }
}

impl FromStr for RunConfig {
    type Err = RapError;

    /// Parses on top of the defaults. Blank lines and `#` comments are skipped.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "backbone", "policy", "train", "eval"].contains(&name) {
                    return Err(RapError::UnknownSection(name.to_string()));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RapError::Syntax {
                    line: i + 1,
                    reason: format!("expected key = value, got `{line}`"),
                });
            };
            let Some(sec) = &section else {
                return Err(RapError::Syntax {
                    line: i + 1,
                    reason: "key outside of any section".into(),
                });
            };
            cfg.set(sec, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    /// The full effective configuration; parses back to an equal value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "source = {}", d.source);
        let _ = writeln!(s, "path = {}", path(&d.path));
        let _ = writeln!(s, "test_path = {}", path(&d.test_path));
        let _ = writeln!(s, "num_classes = {}", d.num_classes);
        let _ = writeln!(s, "images_per_class = {}", d.images_per_class);
        let _ = writeln!(s, "hw = {}", d.hw);
        let _ = writeln!(s, "patch_size = {}", d.patch_size);
        let _ = writeln!(s, "clutter = {}", d.clutter);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "split = {}", join(&d.split));
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "augment = {}", d.augment);
        let b = &self.backbone;
        let _ = writeln!(s, "\n[backbone]");
        let _ = writeln!(s, "input_hw = {}", b.input_hw);
        let _ = writeln!(s, "channels = {}", join(&b.channels));
        let _ = writeln!(s, "insertion_block = {}", b.insertion_block);
        let _ = writeln!(s, "bn_momentum = {}", b.bn_momentum);
        let _ = writeln!(s, "bn_eps = {}", b.bn_eps);
        let p = &self.policy;
        let _ = writeln!(s, "\n[policy]");
        let _ = writeln!(s, "conv_channels = {}", join(&p.conv_channels));
        let _ = writeln!(s, "sigma = {}", p.sigma);
        let _ = writeln!(s, "deterministic_eval = {}", p.deterministic_eval);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "mode = {}", t.mode);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "alpha = {}", t.alpha);
        let _ = writeln!(s, "attention = {}", t.attention);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "way = {}", t.way);
        let _ = writeln!(s, "shot = {}", t.shot);
        let _ = writeln!(s, "query = {}", t.query);
        let _ = writeln!(s, "baseline_subtraction = {}", t.baseline_subtraction);
        let _ = writeln!(s, "baseline_momentum = {}", t.baseline_momentum);
        let _ = writeln!(s, "val_objective = {}", t.val_objective);
        let _ = writeln!(s, "val_pool = {}", t.val_pool);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "divergence_threshold = {}", t.divergence_threshold);
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "episodes = {}", e.episodes);
        let _ = writeln!(s, "way = {}", e.way);
        let _ = writeln!(s, "shot = {}", e.shot);
        let _ = writeln!(s, "query = {}", e.query);
        let _ = writeln!(s, "seed = {}", e.seed);
        f.write_str(&s)
    }
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "patchcue" => Ok(Self::PatchCue),
            "cifar" => Ok(Self::Cifar),
            "dir" => Ok(Self::Dir),
            _ => Err("expected patchcue, cifar or dir".into()),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PatchCue => "patchcue",
            Self::Cifar => "cifar",
            Self::Dir => "dir",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "few_shot" => Ok(Self::FewShot),
            "classification" => Ok(Self::Classification),
            _ => Err("expected few_shot or classification".into()),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FewShot => "few_shot",
            Self::Classification => "classification",
        })
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| RapError::BadValue {
        key: key.to_string(),
        reason: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[T; N]>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = parse_list(key, value)?;
    items.try_into().map_err(|v: Vec<T>| RapError::BadValue {
        key: key.to_string(),
        reason: format!("expected {N} comma-separated values, got {}", v.len()),
    })
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
