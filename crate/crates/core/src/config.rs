//! Declarative run configuration (TOML).
//!
//! Every field has a default, unknown keys are rejected, and the `train`
//! section starts from the preset of its `regime` so that a document that
//! only says `regime = "limited"` gets the limited budget.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hscore::SecondMoment;
use crate::kpi::Kpi;
use crate::models::{AdamConfig, ExtractorConfig};
use crate::pipeline::{Condition, EpochBudget, Regime, TrainConfig};
use crate::preprocess::{ColumnSchema, PreprocessConfig, SequenceDataset};
use crate::synthdata::{generate_labeled_dataset, KpiMarginalSpec, LatentProcessConfig};

/// Samples drawn from the generator when none is configured.
pub const DEFAULT_SYNTH_SAMPLES: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// A delimited KPI log at `data.path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub columns: ColumnSchema,
    /// Sample count requested from the generator.
    pub samples: usize,
    pub synth: LatentProcessConfig,
    pub marginals: KpiMarginalSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            columns: ColumnSchema::default(),
            samples: DEFAULT_SYNTH_SAMPLES,
            synth: LatentProcessConfig::default(),
            marginals: KpiMarginalSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    /// Embedding sizes visited by the dimension sweep.
    pub sweep_dims: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            conditions: Condition::ALL.to_vec(),
            sweep_dims: vec![2, 4, 8, 16, 32],
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochOverrides {
    extractor: Option<usize>,
    autoencoder: Option<usize>,
    baseline: Option<usize>,
    predictor: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    regime: Option<Regime>,
    train_fraction: Option<f64>,
    epochs: Option<EpochOverrides>,
    batch_size: Option<usize>,
    optimizer: Option<AdamConfig>,
    seed: Option<u64>,
    targets: Option<Vec<Kpi>>,
    extractor: Option<ExtractorConfig>,
    second_moment: Option<SecondMoment>,
    standardize_embeddings: Option<bool>,
}

impl TrainOverrides {
    fn resolve(self) -> TrainConfig {
        let mut t = TrainConfig::for_regime(self.regime.unwrap_or(Regime::Full));
        if let Some(e) = self.epochs {
            let EpochBudget {
                extractor,
                autoencoder,
                baseline,
                predictor,
            } = t.epochs;
            t.epochs = EpochBudget {
                extractor: e.extractor.unwrap_or(extractor),
                autoencoder: e.autoencoder.unwrap_or(autoencoder),
                baseline: e.baseline.unwrap_or(baseline),
                predictor: e.predictor.unwrap_or(predictor),
            };
        }
        t.train_fraction = self.train_fraction.unwrap_or(t.train_fraction);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.optimizer = self.optimizer.unwrap_or(t.optimizer);
        t.seed = self.seed.unwrap_or(t.seed);
        t.targets = self.targets.unwrap_or(t.targets);
        t.extractor = self.extractor.unwrap_or(t.extractor);
        t.second_moment = self.second_moment.unwrap_or(t.second_moment);
        t.standardize_embeddings = self
            .standardize_embeddings
            .unwrap_or(t.standardize_embeddings);
        t
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    preprocess: PreprocessConfig,
    #[serde(default)]
    train: TrainOverrides,
    seeds: Option<Vec<u64>>,
    conditions: Option<Vec<Condition>>,
    sweep_dims: Option<Vec<usize>>,
    output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let defaults = RunConfig::default();
        let cfg = RunConfig {
            data: raw.data,
            preprocess: raw.preprocess,
            train: raw.train.resolve(),
            seeds: raw.seeds.unwrap_or(defaults.seeds),
            conditions: raw.conditions.unwrap_or(defaults.conditions),
            sweep_dims: raw.sweep_dims.unwrap_or(defaults.sweep_dims),
            output_dir: raw.output_dir.unwrap_or(defaults.output_dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully resolved document; parsing it back yields `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.data.source, &self.data.path) {
            (DataSource::File, None) => {
                return Err(Error::Config(
                    "data.source = \"file\" needs data.path".into(),
                ))
            }
            (DataSource::Synthetic, _) if self.data.samples == 0 => {
                return Err(Error::Config("data.samples must be at least 1".into()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("conditions must not be empty".into()));
        }
        if self.sweep_dims.is_empty() {
            return Err(Error::Config("sweep_dims must not be empty".into()));
        }
        let wrap = |e: Error| Error::Config(format!("{}: {e}", e.class()));
        self.data.synth.validate().map_err(wrap)?;
        self.data.marginals.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)
    }

    /// Loads or generates the labeled dataset the config describes.
    pub fn dataset(&self) -> Result<SequenceDataset> {
        match self.data.source {
            DataSource::Synthetic => Ok(generate_labeled_dataset(
                &self.data.synth,
                &self.data.marginals,
                self.data.samples,
                &self.preprocess,
            )?
            .0),
            DataSource::File => {
                let path = self.data.path.as_ref().expect("validated");
                let log = crate::preprocess::parse_kpi_log(path, &self.data.columns)?;
                Ok(crate::preprocess::run(&log.records, &self.preprocess)?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn regime_picks_its_preset_and_fields_override_it() {
        let cfg = RunConfig::from_toml("[train]\nregime = \"limited\"\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::for_regime(Regime::Limited));
        let cfg = RunConfig::from_toml(
            "[train]\nregime = \"limited\"\nbatch_size = 64\n[train.epochs]\npredictor = 9\n",
        )
        .unwrap();
        assert_eq!(
            (
                cfg.train.batch_size,
                cfg.train.epochs.predictor,
                cfg.train.epochs.baseline
            ),
            (64, 9, 5)
        );
        assert_eq!(cfg.train.train_fraction, 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "sedds = [1]",
            "[train]\nbatchsize = 3",
            "[train.extractor]\nd_mdoel = 4",
            "[data.synth]\nnoise = 1",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            "seeds = []",
            "[train]\ntrain_fraction = 1.5",
            "[train.epochs]\nextractor = 0",
            "[data]\nsource = \"file\"",
            "[train.extractor]\nheads = 3",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn resolved_document_round_trips() {
        let cfg = RunConfig::from_toml(
            "seeds = [3, 4]\n[train]\nregime = \"limited\"\ntargets = [\"rsrq\"]\n",
        )
        .unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_nested_tables_fill_from_defaults() {
        let doc = "[train]\nregime = \"full\"\n[train.epochs]\nextractor = 10\n[train.optimizer]\nlr = 0.002\n\
                   [train.extractor]\nd_model = 16\nn = 4\n[preprocess]\nn_seq = 20\n[data.columns]\ntimestamp = \"ts\"\n";
        let cfg = RunConfig::from_toml(doc).unwrap();
        assert_eq!(cfg.train.optimizer.lr, 0.002);
        assert_eq!(cfg.train.optimizer.beta2, AdamConfig::default().beta2);
        assert_eq!((cfg.train.extractor.d_model, cfg.train.extractor.heads), (16, 4));
        assert_eq!(cfg.preprocess.window_len, 100.0);
        assert_eq!(cfg.data.columns.timestamp, "ts");
    }
}
