//! Experiment configuration. A TOML file is layered key-by-key over one of
//! two presets, so a config only needs to name what it changes.
//!
//! ```toml
//! [experiment]
//! seeds = [0, 1, 2]
//! ensemble_sizes = [1, 3, 5]
//! gems = ["mean_estimation", "mean_encoding", "weighted_mean_estimation", "weighted_mean_encoding"]
//! workers = 1
//! out_dir = "out"
//!
//! [data]
//! per_class = 100
//! # train_manifest = "data/train/manifest.txt"
//! # validation_manifest = "data/validation/manifest.txt"
//! [data.train]
//! n_groups = 400
//! seed = 1
//!
//! [extractor.sgd]
//! initial_lr = 0.3
//! total_iters = 2000
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SynthSpec;
use crate::error::{Error, Result};
use crate::extractor::{ExtractorTrainConfig, ResidualNetConfig};
use crate::gem::GemKind;
use crate::nn::SgdConfig;
use crate::svr::{GridSearchSpec, SvrConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub ensemble_sizes: Vec<usize>,
    pub gems: Vec<GemKind>,
    /// Seeds processed concurrently.
    pub workers: usize,
    pub out_dir: PathBuf,
}

/// Either two manifests on disk or two synthetic specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Faces per class drawn for the balanced training set.
    pub per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_manifest: Option<PathBuf>,
    pub train: SynthSpec,
    pub validation: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub sgd: SgdConfig,
}

/// Single network on the full, unbalanced training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub enabled: bool,
    pub total_iters: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvrSection {
    pub face: SvrConfig,
    pub group: SvrConfig,
    /// When present, both regressors pick their (C, epsilon) by cross-validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_search: Option<GridSearchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    pub extractor: ExtractorTrainConfig,
    pub aggregator: AggregatorConfig,
    pub baseline: BaselineConfig,
    pub svr: SvrSection,
}

impl ExperimentConfig {
    /// Small networks and short schedules that finish in minutes on one core.
    pub fn desk() -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                seeds: vec![0, 1, 2],
                ensemble_sizes: vec![1, 3, 5],
                gems: GemKind::ALL.to_vec(),
                workers: 1,
                out_dir: PathBuf::from("out"),
            },
            data: DataConfig {
                per_class: 100,
                train_manifest: None,
                validation_manifest: None,
                train: SynthSpec { n_groups: 400, seed: 1, ..SynthSpec::default() },
                validation: SynthSpec { n_groups: 100, seed: 2, ..SynthSpec::default() },
            },
            extractor: ExtractorTrainConfig {
                net: ResidualNetConfig { depth: 8, widths: [4, 8, 16], num_classes: 6, feature_dim: 16 },
                sgd: SgdConfig {
                    initial_lr: 0.3,
                    decay_every_iters: 500,
                    batch_size: 16,
                    total_iters: 2000,
                    ..SgdConfig::default()
                },
                augment: true,
            },
            aggregator: AggregatorConfig {
                hidden_dim: 128,
                num_layers: 2,
                sgd: SgdConfig {
                    initial_lr: 0.05,
                    decay_every_iters: 1000,
                    batch_size: 32,
                    total_iters: 2000,
                    ..SgdConfig::default()
                },
            },
            baseline: BaselineConfig { enabled: true, total_iters: 3000, hidden_dim: 64 },
            svr: SvrSection { face: SvrConfig::default(), group: SvrConfig::default(), grid_search: None },
        }
    }

    /// The published recipe: 20-layer network, 380 faces per class, 20000 iterations.
    pub fn paper() -> Self {
        let desk = ExperimentConfig::desk();
        ExperimentConfig {
            experiment: ExperimentSection { seeds: vec![0], ensemble_sizes: (1..=6).collect(), ..desk.experiment },
            data: DataConfig {
                per_class: 380,
                train: SynthSpec { n_groups: 1000, seed: 1, ..SynthSpec::default() },
                validation: SynthSpec { n_groups: 300, seed: 2, ..SynthSpec::default() },
                ..desk.data
            },
            extractor: ExtractorTrainConfig::default(),
            aggregator: AggregatorConfig {
                sgd: SgdConfig {
                    initial_lr: 0.05,
                    decay_every_iters: 5000,
                    batch_size: 32,
                    total_iters: 10000,
                    ..SgdConfig::default()
                },
                ..desk.aggregator
            },
            baseline: BaselineConfig { enabled: true, total_iters: 30000, hidden_dim: 64 },
            svr: desk.svr,
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => ExperimentConfig::desk(),
            Scale::Paper => ExperimentConfig::paper(),
        }
    }

    /// Overlays `text` on the preset; keys absent from `text` keep preset values.
    pub fn from_toml_str(text: &str, scale: Scale) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut base =
            toml::Table::try_from(ExperimentConfig::preset(scale)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: ExperimentConfig =
            toml::Value::Table(base).try_into().map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, scale: Scale) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text, scale)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() || e.ensemble_sizes.is_empty() || e.gems.is_empty() {
            return Err(Error::Config("need at least one seed, one ensemble size and one group model".into()));
        }
        if e.ensemble_sizes.contains(&0) {
            return Err(Error::Config("ensemble sizes must be at least 1".into()));
        }
        if e.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let d = &self.data;
        if d.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if d.train_manifest.is_some() != d.validation_manifest.is_some() {
            return Err(Error::Config("train_manifest and validation_manifest must be given together".into()));
        }
        self.extractor.net.validate()?;
        self.extractor.sgd.validate()?;
        self.aggregator.sgd.validate()?;
        if self.aggregator.hidden_dim == 0 || self.aggregator.num_layers == 0 {
            return Err(Error::Config("aggregator hidden_dim and num_layers must be positive".into()));
        }
        if self.baseline.hidden_dim == 0 {
            return Err(Error::Config("baseline hidden_dim must be positive".into()));
        }
        self.svr.face.validate()?;
        self.svr.group.validate()?;
        if let Some(g) = &self.svr.grid_search {
            if g.folds < 2 || g.c_grid.is_empty() || g.epsilon_grid.is_empty() {
                return Err(Error::Config("grid search needs folds >= 2 and non-empty grids".into()));
            }
        }
        Ok(())
    }

    pub fn max_ensemble_size(&self) -> usize {
        self.experiment.ensemble_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Extractor recipe for the all-data baseline network.
    pub fn baseline_extractor(&self) -> ExtractorTrainConfig {
        let mut cfg = self.extractor.clone();
        cfg.sgd.total_iters = self.baseline.total_iters;
        cfg
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for scale in [Scale::Desk, Scale::Paper] {
            let cfg = ExperimentConfig::preset(scale);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text, scale).unwrap(), cfg);
        }
    }

    #[test]
    fn empty_file_is_the_preset() {
        assert_eq!(ExperimentConfig::from_toml_str("", Scale::Desk).unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let text = "[experiment]\nseeds = [7]\n[extractor.sgd]\ntotal_iters = 10\n";
        let cfg = ExperimentConfig::from_toml_str(text, Scale::Desk).unwrap();
        let mut want = ExperimentConfig::desk();
        want.experiment.seeds = vec![7];
        want.extractor.sgd.total_iters = 10;
        assert_eq!(cfg, want);
    }

    #[test]
    fn paper_schedule() {
        let sgd = ExperimentConfig::paper().extractor.sgd;
        assert_eq!((sgd.initial_lr, sgd.batch_size, sgd.total_iters, sgd.decay_every_iters), (0.01, 32, 20000, 5000));
        assert_eq!(sgd.weight_decay, 0.00001);
        assert_eq!(ExperimentConfig::paper().data.per_class, 380);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[experiment]\nseeds = []\n",
            "[experiment]\nensemble_sizes = [0]\n",
            "[experiment]\ngems = [\"median\"]\n",
            "[experiment]\nworkers = 0\n",
            "[data]\ntrain_manifest = \"a\"\n",
            "[extractor.net]\ndepth = 9\n",
            "[svr.face]\nC = -1.0\n",
            "[experiment]\nseedz = [1]\n",
            "not toml at all [",
        ] {
            assert!(ExperimentConfig::from_toml_str(text, Scale::Desk).is_err(), "{text}");
        }
    }

    #[test]
    fn scale_parses() {
        assert_eq!("paper".parse::<Scale>().unwrap(), Scale::Paper);
        assert!("huge".parse::<Scale>().is_err());
    }
}
