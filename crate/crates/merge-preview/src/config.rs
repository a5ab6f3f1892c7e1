//! Experiment configuration in TOML.
//!
//! A file names its `suite`; every key it leaves out keeps that suite's
//! preset value, and the fully materialized config is what gets written into
//! reports.

use std::path::{Path, PathBuf};

use merge_preview_core::preview::MetricScale;
use merge_preview_core::vartrain::MixtureStage;
use merge_preview_core::{EmConfig, Strategy, TrainMethod, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Lse,
    MnistImbalanced,
    MnistBalanced,
    Synthetic,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 4] = [Self::Lse, Self::MnistImbalanced, Self::MnistBalanced, Self::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lse => "lse",
            Self::MnistImbalanced => "mnist_imbalanced",
            Self::MnistBalanced => "mnist_balanced",
            Self::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown suite `{s}`")))
    }
}

impl std::fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-role trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainers {
    /// Point estimates for simple averaging and task arithmetic.
    pub point: TrainerConfig,
    /// Gaussian posteriors for Hessian-weighted merges.
    pub gaussian: TrainerConfig,
    /// Mixture posteriors for the EM merge.
    pub mixture: TrainerConfig,
    /// Gradient descent on the weighted objective at each grid point.
    pub joint: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LseSettings {
    /// Terms per log-sum-exp task.
    pub terms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitsSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitsSettings {
    pub source: DigitsSource,
    pub classes: usize,
    /// Synthetic source: training examples per class.
    pub per_class: usize,
    /// Synthetic source: held-out examples per class.
    pub test_per_class: usize,
    /// Synthetic source: feature count.
    pub dim: usize,
    pub noise: f64,
    /// IDX source: training images and labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// IDX source: resample images to `side × side` (14 gives d = 196).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    /// IDX source: keep only the first `limit` training examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Class subsets per task; the suite's preset split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub suite: SuiteKind,
    /// Seeds data generation and every trainer.
    pub seed: u64,
    /// Grid spacing of preview sweeps.
    pub spacing: f64,
    /// Grid spacing of the joint-training oracle; must divide into `spacing`.
    pub exact_spacing: f64,
    pub strategies: Vec<Strategy>,
    pub metric_scale: MetricScale,
    pub histogram_bins: usize,
    pub em: EmConfig,
    pub trainers: Trainers,
    pub lse: LseSettings,
    pub digits: DigitsSettings,
}

/// Seed of the default log-sum-exp instance.
pub const LSE_INSTANCE_SEED: u64 = 1;

impl ExperimentConfig {
    pub fn preset(suite: SuiteKind) -> Self {
        match suite {
            SuiteKind::Lse => Self::lse(),
            _ => Self::digits(suite),
        }
    }

    fn lse() -> Self {
        let gd = TrainerConfig {
            learning_rate: 0.5,
            iterations: 5000,
            loss_scale: Some(1.0),
            ..TrainerConfig::gd()
        };
        let von = TrainerConfig {
            iterations: 300,
            mc_samples: 64,
            prior_precision: 0.0,
            loss_scale: Some(1.0),
            ..TrainerConfig::von_full()
        };
        let mixture = TrainerConfig {
            method: TrainMethod::MogVi,
            mixture: Some(MixtureStage {
                components: 5,
                step_size: 0.1,
                iterations: 200,
                spread: 1.0,
            }),
            ..von.clone()
        };
        Self {
            id: "lse".into(),
            suite: SuiteKind::Lse,
            seed: LSE_INSTANCE_SEED,
            spacing: 0.02,
            exact_spacing: 0.02,
            strategies: vec![Strategy::Simple, Strategy::Hessian, Strategy::Mixture],
            metric_scale: MetricScale::Fraction,
            histogram_bins: 20,
            em: EmConfig::default(),
            trainers: Trainers {
                point: gd.clone(),
                gaussian: von,
                mixture,
                joint: gd,
            },
            lse: LseSettings { terms: 10 },
            digits: DigitsSettings::synthetic(),
        }
    }

    fn digits(suite: SuiteKind) -> Self {
        // loss scales stay unset: the suite fills in the training-set size
        let gd = TrainerConfig {
            prior_precision: 1.0,
            ..TrainerConfig::gd()
        };
        let von = TrainerConfig::von_full();
        let mixture = TrainerConfig::mog_vi();
        Self {
            id: suite.as_str().into(),
            suite,
            seed: 1,
            spacing: 0.02,
            exact_spacing: 0.1,
            strategies: vec![Strategy::Simple, Strategy::Hessian, Strategy::Mixture],
            metric_scale: MetricScale::Fraction,
            histogram_bins: 20,
            em: EmConfig::default(),
            trainers: Trainers {
                point: gd.clone(),
                gaussian: von,
                mixture,
                joint: gd,
            },
            lse: LseSettings { terms: 10 },
            digits: DigitsSettings::synthetic(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return Err(Error::Usage(format!("experiment id `{}` is not a plain name", self.id)));
        }
        let fine = merge_preview_core::preview::divisions_for(self.spacing)?;
        let coarse = merge_preview_core::preview::divisions_for(self.exact_spacing)?;
        if fine % coarse != 0 {
            return Err(Error::Usage(format!(
                "exact spacing {} is not a multiple of preview spacing {}",
                self.exact_spacing, self.spacing
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Usage("no merge strategies configured".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Usage("histogram_bins must be >= 1".into()));
        }
        self.em.validate()?;
        for t in [&self.trainers.point, &self.trainers.gaussian, &self.trainers.mixture, &self.trainers.joint] {
            t.validate()?;
        }
        if self.trainers.joint.method != TrainMethod::Gd {
            return Err(Error::Usage("the joint oracle trainer must be gd".into()));
        }
        if self.suite == SuiteKind::Lse && self.lse.terms < 2 {
            return Err(Error::Usage("log-sum-exp tasks need >= 2 terms".into()));
        }
        Ok(())
    }

    /// The trainer used for `method`: the configured role trainer when one
    /// runs that method, else the method's defaults with the suite's loss
    /// scale and prior.
    pub fn trainer_for(&self, method: TrainMethod) -> TrainerConfig {
        let t = &self.trainers;
        let mut cfg = [&t.point, &t.gaussian, &t.mixture]
            .into_iter()
            .find(|c| c.method == method)
            .cloned()
            .unwrap_or_else(|| TrainerConfig {
                loss_scale: t.gaussian.loss_scale,
                prior_precision: t.gaussian.prior_precision,
                ..TrainerConfig::for_method(method)
            });
        cfg.seed = self.seed;
        cfg
    }

    /// Trainer whose artifacts feed `strategy`.
    pub fn trainer_for_strategy(&self, strategy: Strategy) -> TrainerConfig {
        let cfg = match strategy {
            Strategy::Simple | Strategy::TaskArithmetic => &self.trainers.point,
            Strategy::Hessian | Strategy::HessianTa => &self.trainers.gaussian,
            Strategy::Mixture => &self.trainers.mixture,
        };
        self.trainer_for(cfg.method)
    }

    pub fn joint_trainer(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            ..self.trainers.joint.clone()
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("<config>", e))
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::format(path, e))?;
        let suite: SuiteKind = match user.get("suite") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::format(path, "`suite` must be a string")),
            None => return Err(Error::format(path, "missing `suite`")),
        };
        let base = toml::Table::try_from(Self::preset(suite)).expect("preset serializes");
        let merged = overlay(base, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }
}

impl DigitsSettings {
    pub fn synthetic() -> Self {
        Self {
            source: DigitsSource::Synthetic,
            classes: 10,
            per_class: 50,
            test_per_class: 50,
            dim: 16,
            noise: 0.3,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            side: None,
            limit: None,
            split: None,
        }
    }
}

/// Recursively replaces `base` entries with those in `user`; tables merge,
/// everything else is overwritten.
fn overlay(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                base.insert(k, toml::Value::Table(overlay(b, u)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for suite in SuiteKind::ALL {
            let cfg = ExperimentConfig::preset(suite);
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&text, Path::new("c.toml")).unwrap();
            assert_eq!(back, cfg, "{suite}");
        }
    }

    #[test]
    fn partial_file_keeps_preset_values() {
        let text = r#"
            suite = "mnist_balanced"
            seed = 9
            [trainers.gaussian]
            iterations = 7
        "#;
        let cfg = ExperimentConfig::from_toml_str(text, Path::new("c.toml")).unwrap();
        let preset = ExperimentConfig::preset(SuiteKind::MnistBalanced);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trainers.gaussian.iterations, 7);
        assert_eq!(cfg.trainers.gaussian.learning_rate, preset.trainers.gaussian.learning_rate);
        assert_eq!(cfg.trainers.mixture, preset.trainers.mixture);
    }

    #[test]
    fn bad_files_are_rejected() {
        let p = Path::new("c.toml");
        assert!(ExperimentConfig::from_toml_str("seed = 1", p).is_err());
        assert!(ExperimentConfig::from_toml_str("suite = \"cifar\"", p).is_err());
        assert!(ExperimentConfig::from_toml_str("suite = \"lse\"\nbogus = 1", p).is_err());
        assert!(ExperimentConfig::from_toml_str("suite = \"lse\"\nspacing = 0.3", p).is_err());
        assert!(ExperimentConfig::from_toml_str("suite = \"lse\"\nspacing = 0.1\nexact_spacing = 0.04", p).is_err());
    }

    #[test]
    fn trainer_lookup_carries_suite_scale() {
        let cfg = ExperimentConfig::preset(SuiteKind::MnistImbalanced);
        let vi = cfg.trainer_for(TrainMethod::ViDiag);
        assert_eq!(vi.method, TrainMethod::ViDiag);
        assert_eq!(vi.loss_scale, None);
        assert_eq!(vi.prior_precision, 1.0);
        assert_eq!(cfg.trainer_for_strategy(Strategy::Mixture).method, TrainMethod::MogVi);
        assert_eq!(cfg.trainer_for_strategy(Strategy::Simple).method, TrainMethod::Gd);
    }
}
