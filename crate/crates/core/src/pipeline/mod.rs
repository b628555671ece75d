//! The two-stage protocol and its baselines.
//!
//! Stage one fits the feature extractor `f` jointly with a target network
//! `g` on the negated H-score, then freezes `f`. Stage two fits one small
//! MLP per target KPI on the embeddings `f(X)` alone. Baselines are an MLP
//! on the flattened window and an autoencoder-trained encoder.

mod bench;
mod train;

use serde::{Deserialize, Serialize};

pub use bench::{
    dim_sweep, fit_predictors, run_benchmark, sweep_csv, sweep_svg, CellResult, Condition,
    EvalReport, FittedPredictor, SampleCounts, SeedResult, StageRecord, SweepRow, SweepTable,
};
pub use train::{
    embed_dataset, flatten_inputs, train_autoencoder, train_baseline_full, train_extractor,
    train_predictor, History, Prepared,
};

use crate::error::{Error, Result};
use crate::hscore::SecondMoment;
use crate::kpi::Kpi;
use crate::models::{AdamConfig, ExtractorConfig};
use crate::preprocess::{fit_normalization, SequenceDataset};

/// Smallest dataset `split_dataset` accepts.
pub const MIN_SAMPLES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// 80% of samples for training.
    Full,
    /// 5% of samples for training and 5 epochs for every model.
    Limited,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::Limited => "limited",
        }
    }
}

/// Epochs per trainable component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochBudget {
    /// H-score stage (extractor with target network).
    pub extractor: usize,
    pub autoencoder: usize,
    /// MLP on the flattened window.
    pub baseline: usize,
    /// Stage-two predictors on embeddings.
    pub predictor: usize,
}

impl EpochBudget {
    pub fn uniform(epochs: usize) -> Self {
        Self {
            extractor: epochs,
            autoencoder: epochs,
            baseline: epochs,
            predictor: epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub train_fraction: f64,
    pub epochs: EpochBudget,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub targets: Vec<Kpi>,
    pub extractor: ExtractorConfig,
    pub second_moment: SecondMoment,
    /// Standardize embeddings with training-split statistics before the
    /// stage-two predictors see them. Off by default: predictors consume
    /// `f(X)` as produced.
    pub standardize_embeddings: bool,
}

impl TrainConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let (train_fraction, epochs) = match regime {
            Regime::Full => (
                0.8,
                EpochBudget {
                    extractor: 10,
                    autoencoder: 20,
                    baseline: 20,
                    predictor: 20,
                },
            ),
            Regime::Limited => (0.05, EpochBudget::uniform(5)),
        };
        Self {
            regime,
            train_fraction,
            epochs,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            seed: 0,
            targets: vec![Kpi::Rsrq, Kpi::SpectralEfficiency],
            extractor: ExtractorConfig::default(),
            second_moment: SecondMoment::Uncentered,
            standardize_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "train fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        let e = self.epochs;
        if [e.extractor, e.autoencoder, e.baseline, e.predictor].contains(&0) {
            return Err(Error::Parameter(
                "every component needs at least one epoch".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter("batch size must be at least 2".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Parameter("no target KPIs configured".into()));
        }
        self.optimizer.validate()?;
        self.extractor.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Full)
    }
}

/// Chronological split: the first `floor(fraction * M)` samples train.
pub fn split_dataset(
    ds: &SequenceDataset,
    train_fraction: f64,
) -> Result<(SequenceDataset, SequenceDataset)> {
    let (train, test) = split_indices(ds.len(), train_fraction)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub(crate) fn split_indices(m: usize, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "invalid train fraction {train_fraction}"
        )));
    }
    if m < MIN_SAMPLES {
        return Err(Error::Data(format!(
            "{m} samples is too few to split (need at least {MIN_SAMPLES})"
        )));
    }
    let n_train = (train_fraction * m as f64).floor() as usize;
    if n_train == 0 || n_train == m {
        return Err(Error::Data(format!(
            "fraction {train_fraction} of {m} samples leaves an empty split"
        )));
    }
    Ok(((0..n_train).collect(), (n_train..m).collect()))
}

/// Splits chronologically and z-scores everything with training statistics.
pub fn prepare(ds: &SequenceDataset, train_fraction: f64) -> Result<Prepared> {
    let raw = ds.denormalized();
    let (train_idx, test_idx) = split_indices(raw.len(), train_fraction)?;
    let norm = fit_normalization(&raw, &train_idx)?;
    let all = raw.normalized_with(&norm)?;
    Ok(Prepared {
        train: all.subset(&train_idx),
        test: all.subset(&test_idx),
        norm,
    })
}

/// Regression quality on one series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    /// 0 when undefined.
    pub pearson: f64,
    /// False when either series has zero variance.
    pub pearson_defined: bool,
}

pub fn evaluate(predictions: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    let m = truth.len();
    if m < 2 {
        return Err(Error::Parameter(
            "evaluation needs at least two samples".into(),
        ));
    }
    let n = m as f64;
    let mse = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    let (mp, mt) = (
        predictions.iter().sum::<f64>() / n,
        truth.iter().sum::<f64>() / n,
    );
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in predictions.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp).powi(2);
        vt += (t - mt).powi(2);
    }
    if vp <= 0.0 || vt <= 0.0 {
        return Ok(Metrics {
            mse,
            pearson: 0.0,
            pearson_defined: false,
        });
    }
    let pearson = (cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0);
    Ok(Metrics {
        mse,
        pearson,
        pearson_defined: true,
    })
}

/// Deterministic sub-seed for a named purpose.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_by_hand() {
        let m = evaluate(&[0.0, 2.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((m.mse - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.pearson - 0.5).abs() < 1e-15);
        let perfect = evaluate(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((perfect.mse, perfect.pearson), (0.0, 1.0));
        let affine = evaluate(&[5.0, 7.0, 11.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((affine.pearson - 1.0).abs() < 1e-15 && affine.mse > 0.0);
        let flat = evaluate(&[3.0, 3.0], &[1.0, 2.0]).unwrap();
        assert!(!flat.pearson_defined && flat.pearson == 0.0);
        assert!(evaluate(&[1.0], &[1.0]).is_err());
        assert!(evaluate(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn split_sizes() {
        let sizes = |m, f| split_indices(m, f).map(|(a, b)| (a.len(), b.len()));
        assert_eq!(sizes(100, 0.8).unwrap(), (80, 20));
        assert_eq!(sizes(100, 0.05).unwrap(), (5, 95));
        assert_eq!(sizes(40, 0.05).unwrap(), (2, 38));
        assert!(matches!(sizes(39, 0.5), Err(Error::Data(_))));
        assert!(sizes(100, 1.0).is_err());
    }

    #[test]
    fn regime_presets() {
        let l = TrainConfig::for_regime(Regime::Limited);
        assert_eq!(l.epochs, EpochBudget::uniform(5));
        assert_eq!(l.train_fraction, 0.05);
        let f = TrainConfig::for_regime(Regime::Full);
        assert_eq!((f.epochs.extractor, f.epochs.baseline), (10, 20));
        f.validate().unwrap();
    }
}
