use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_images, AttentionEval, EvalReport, EvalSpec};
use crate::config::{RunConfig, TrainMode};
use crate::data::{Dataset, SplitSets};
use crate::error::{RapError, Result};
use crate::model::RapModel;
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSetting {
    /// Trained and evaluated with the policy.
    On,
    /// The `On` checkpoint evaluated with all-ones attention.
    Off,
    /// Trained and evaluated without attention.
    Plain,
}

impl std::str::FromStr for AttentionSetting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "plain" => Ok(Self::Plain),
            _ => Err(format!("unknown attention setting `{s}` (expected on, off or plain)")),
        }
    }
}

impl AttentionSetting {
    fn model_name(self) -> &'static str {
        match self {
            Self::On => "RAP",
            Self::Off => "RAP-identity",
            Self::Plain => "Baseline",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::On => "on",
            Self::Off => "off",
            Self::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub steps: Vec<usize>,
    pub alphas: Vec<f32>,
    pub attention: Vec<AttentionSetting>,
    pub seeds: Vec<u64>,
}

/// One trained-and-evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub steps: usize,
    pub alpha: f32,
    pub attention: AttentionSetting,
    pub seed: u64,
    pub diverged: bool,
    pub report: Option<EvalReport>,
}

/// Seed-aggregated summary of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub steps: usize,
    pub alpha: f32,
    pub attention: AttentionSetting,
    pub seeds: usize,
    pub diverged: usize,
    /// Mean over seeds of the headline accuracy; `None` if every seed diverged.
    pub mean: Option<f64>,
    pub half_width: Option<f64>,
    pub seed_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

/// Held-out data for the final evaluation of each cell.
pub enum TestData<'a> {
    /// Few-shot episodes over the test classes of the training dataset.
    Classes(&'a [usize]),
    /// Every image of a separate dataset (classification mode).
    Images(&'a Dataset),
}

enum Trained {
    Model(Box<RapModel>),
    Diverged,
}

fn test_report(base: &RunConfig, model: &RapModel, data: &Dataset, test: &TestData<'_>, spec: &EvalSpec) -> Result<EvalReport> {
    let e = &base.eval;
    match test {
        TestData::Classes(classes) => evaluate(model, data, classes, e.way, e.shot, e.query, e.episodes, spec),
        TestData::Images(ds) => {
            let all: Vec<usize> = (0..ds.len()).collect();
            evaluate_images(model, ds, &all, spec, base.train.batch_size)
        }
    }
}

/// Trains every `(steps, alpha, attention, seed)` cell and evaluates it on
/// the test data. Diverged cells are recorded and the grid continues.
pub fn ablate(
    base: &RunConfig,
    grid: &AblationGrid,
    data: &Dataset,
    split: &SplitSets,
    test: TestData<'_>,
    on_row: &mut dyn FnMut(&AblationRow) -> Result<()>,
) -> Result<AblationResult> {
    if matches!(test, TestData::Classes(_)) != (base.train.mode == TrainMode::FewShot) {
        return Err(RapError::InvalidConfig("test data does not match the training mode".into()));
    }
    let mut cache: HashMap<(usize, u32, bool, u64), Trained> = HashMap::new();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &steps in &grid.steps {
        for &alpha in &grid.alphas {
            for &attention in &grid.attention {
                let mut seed_means = Vec::new();
                let mut diverged = 0;
                for &seed in &grid.seeds {
                    let mut cfg = base.clone();
                    cfg.train.steps = steps;
                    cfg.train.alpha = alpha;
                    cfg.train.seed = seed;
                    cfg.train.attention = attention != AttentionSetting::Plain;
                    let key = if cfg.train.attention {
                        (steps, alpha.to_bits(), true, seed)
                    } else {
                        (0, 0, false, seed)
                    };
                    let trained = match cache.entry(key) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(match train(&cfg, data, split, &mut |_| Ok(())) {
                            Ok(out) => Trained::Model(Box::new(out.best.model()?)),
                            Err(RapError::Diverged { .. }) => Trained::Diverged,
                            Err(e) => return Err(e),
                        }),
                    };
                    let report = match trained {
                        Trained::Diverged => None,
                        Trained::Model(model) => {
                            let mut spec = EvalSpec::from_config(&cfg, base.eval.seed);
                            if attention == AttentionSetting::Off {
                                spec.attention = AttentionEval::Identity;
                            }
                            Some(test_report(base, model, data, &test, &spec)?)
                        }
                    };
                    match &report {
                        Some(r) => seed_means.push(r.mean),
                        None => diverged += 1,
                    }
                    let row = AblationRow {
                        steps,
                        alpha,
                        attention,
                        seed,
                        diverged: report.is_none(),
                        report,
                    };
                    on_row(&row)?;
                    rows.push(row);
                }
                let mean = (!seed_means.is_empty()).then(|| seed_means.iter().sum::<f64>() / seed_means.len() as f64);
                let half_width = mean.map(|_| super::confidence_half_width(&seed_means));
                cells.push(AblationCell {
                    steps,
                    alpha,
                    attention,
                    seeds: grid.seeds.len(),
                    diverged,
                    mean,
                    half_width,
                    seed_means,
                });
            }
        }
    }
    Ok(AblationResult { rows, cells })
}

impl AblationResult {
    /// Fixed-width table: model, setting, mean +- half-width in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<28} {:>16}", "model", "setting", "accuracy (%)");
        for c in &self.cells {
            let setting = format!("T={} alpha={} attn={}", c.steps, c.alpha, c.attention.label());
            let acc = match (c.mean, c.half_width) {
                (Some(m), Some(h)) if c.diverged == 0 => format!("{:.2} +- {:.2}", 100.0 * m, 100.0 * h),
                (Some(m), Some(h)) => format!("{:.2} +- {:.2} ({} DIVERGED)", 100.0 * m, 100.0 * h, c.diverged),
                _ => "DIVERGED".to_string(),
            };
            let _ = writeln!(s, "{:<14} {:<28} {:>16}", c.attention.model_name(), setting, acc);
        }
        s
    }

    pub fn cell(&self, steps: usize, alpha: f32, attention: AttentionSetting) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.steps == steps && c.alpha == alpha && c.attention == attention)
    }
}
