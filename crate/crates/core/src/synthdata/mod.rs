//! Synthetic KPI streams driven by a few latent factors.
//!
//! Every 20 ms the generator advances its factor processes (interference
//! bursts, channel fading, traffic load), mixes them through a loading
//! matrix with per-KPI noise, maps the standardized result onto each KPI's
//! target marginal and clips to the KPI's range. Missing cells and
//! outliers are then injected. Output is deterministic per seed.

mod marginal;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use marginal::{calibrate, clipped_normal_moments, KpiMarginal, KpiMarginalSpec};

use crate::error::{Error, Result};
use crate::kpi::{Kpi, K};
use crate::preprocess::{self, KpiRecord, PreprocessConfig, PreprocessReport, SequenceDataset};

/// Logging cadence of generated streams, in milliseconds.
pub const RECORD_INTERVAL_MS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// Interferer on/off process with exponential dwell times, smoothed.
    Burst,
    /// AR(1) random walk for slow channel fading.
    Fading,
    /// Sinusoidal traffic load with a random phase.
    Load,
    /// Always zero.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentProcessConfig {
    pub factors: Vec<FactorKind>,
    pub burst_on_ms: f64,
    pub burst_off_ms: f64,
    pub burst_smoothing_ms: f64,
    pub fading_correlation_ms: f64,
    pub load_period_ms: f64,
    /// `K x factors` mixing weights; `None` uses the built-in loadings for
    /// the default three factors, or seeded random weights otherwise.
    pub loadings: Option<Vec<Vec<f64>>>,
    /// Per-KPI noise level relative to unit-variance factors.
    pub noise_std: Vec<f64>,
    /// Per-cell probability that a KPI is absent from a record.
    pub missing_prob: f64,
    /// Additional absence probability for `packet_delay`.
    pub delay_missing_prob: f64,
    /// Per-cell probability of an outlier.
    pub outlier_rate: f64,
    pub seed: u64,
}

const DEFAULT_LOADINGS: [[f64; 3]; K] = [
    // burst, fading, load
    [-0.6, 0.4, 0.4],  // spectral_efficiency
    [0.0, 0.9, 0.0],   // rsrp
    [-0.7, 0.5, 0.0],  // sinr
    [-0.4, 0.5, 0.0],  // mimo_rank
    [-0.6, 0.4, 0.2],  // mcs
    [0.0, 0.0, 0.8],   // rb_number
    [-0.6, 0.5, 0.0],  // cqi
    [-0.7, 0.3, -0.3], // rsrq
    [0.0, 0.3, 0.0],   // pmi
    [0.5, 0.7, 0.2],   // ue_rssi
    [0.3, 0.0, 0.7],   // ue_buffer_status
    [0.5, 0.0, 0.5],   // packet_delay
    [0.7, -0.3, 0.0],  // bler
];

const DEFAULT_NOISE: [f64; K] = [
    0.4, 0.3, 0.4, 0.6, 0.5, 0.5, 0.5, 0.4, 0.9, 0.3, 0.6, 0.6, 0.5,
];

impl Default for LatentProcessConfig {
    fn default() -> Self {
        Self {
            factors: vec![FactorKind::Burst, FactorKind::Fading, FactorKind::Load],
            burst_on_ms: 1500.0,
            burst_off_ms: 3000.0,
            burst_smoothing_ms: 100.0,
            fading_correlation_ms: 1000.0,
            load_period_ms: 30_000.0,
            loadings: None,
            noise_std: DEFAULT_NOISE.to_vec(),
            missing_prob: 0.01,
            delay_missing_prob: 0.3,
            outlier_rate: 0.0005,
            seed: 0,
        }
    }
}

impl LatentProcessConfig {
    /// All noise, missingness and outliers switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise_std = vec![0.0; K];
        self.missing_prob = 0.0;
        self.delay_missing_prob = 0.0;
        self.outlier_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.missing_prob)
            || !prob_ok(self.delay_missing_prob)
            || !prob_ok(self.outlier_rate)
        {
            return Err(Error::Parameter("probabilities must lie in [0, 1]".into()));
        }
        if self.noise_std.len() != K || self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(Error::Parameter(format!(
                "noise_std needs {K} finite non-negative entries"
            )));
        }
        let times = [
            self.burst_on_ms,
            self.burst_off_ms,
            self.burst_smoothing_ms,
            self.fading_correlation_ms,
            self.load_period_ms,
        ];
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Parameter(
                "factor time constants must be positive".into(),
            ));
        }
        if let Some(l) = &self.loadings {
            let ok = l.len() == K
                && l.iter().all(|row| {
                    row.len() == self.factors.len() && row.iter().all(|v| v.is_finite())
                });
            if !ok {
                return Err(Error::Parameter(format!(
                    "loadings must be a finite {K} x {} matrix",
                    self.factors.len()
                )));
            }
        }
        Ok(())
    }

    /// Effective `K x factors` loading matrix.
    pub fn loading_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(l) = &self.loadings {
            return l.clone();
        }
        let default_kinds = [FactorKind::Burst, FactorKind::Fading, FactorKind::Load];
        if self.factors == default_kinds {
            return DEFAULT_LOADINGS.iter().map(|r| r.to_vec()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c6f_6164_696e_6773);
        (0..K)
            .map(|_| {
                (0..self.factors.len())
                    .map(|_| rng.random_range(-0.8..0.8))
                    .collect()
            })
            .collect()
    }
}

/// State of one latent factor; `value` is standardized to unit variance
/// in the long run (zero for [`FactorKind::Constant`]).
#[derive(Clone, Debug)]
struct Factor {
    kind: FactorKind,
    on: bool,
    smoothed: f64,
    value: f64,
    phase: f64,
}

struct Dynamics {
    p_switch_on: f64,
    p_switch_off: f64,
    p_on: f64,
    alpha: f64,
    burst_scale: f64,
    phi: f64,
    omega: f64,
}

impl Dynamics {
    fn new(cfg: &LatentProcessConfig) -> Self {
        let dt = RECORD_INTERVAL_MS;
        let p_switch_on = (dt / cfg.burst_off_ms).min(1.0);
        let p_switch_off = (dt / cfg.burst_on_ms).min(1.0);
        let p_on = cfg.burst_on_ms / (cfg.burst_on_ms + cfg.burst_off_ms);
        let alpha = 1.0 - (-dt / cfg.burst_smoothing_ms).exp();
        // Variance of an exponential moving average of a two-state chain
        // with lag-one correlation `lambda`.
        let lambda = 1.0 - p_switch_on - p_switch_off;
        let a = 1.0 - alpha;
        let ratio = alpha / (2.0 - alpha) * (1.0 + a * lambda) / (1.0 - a * lambda);
        let burst_scale = 1.0 / (p_on * (1.0 - p_on) * ratio).sqrt();
        Self {
            p_switch_on,
            p_switch_off,
            p_on,
            alpha,
            burst_scale,
            phi: (-dt / cfg.fading_correlation_ms).exp(),
            omega: 2.0 * std::f64::consts::PI * dt / cfg.load_period_ms,
        }
    }
}

impl Factor {
    fn start(kind: FactorKind, dyn_: &Dynamics, rng: &mut ChaCha8Rng) -> Self {
        let mut f = Factor {
            kind,
            on: false,
            smoothed: dyn_.p_on,
            value: 0.0,
            phase: 0.0,
        };
        match kind {
            FactorKind::Burst => f.on = rng.random_bool(dyn_.p_on),
            FactorKind::Fading => f.value = rng.sample(StandardNormal),
            FactorKind::Load => f.phase = rng.random_range(0.0..2.0 * std::f64::consts::PI),
            FactorKind::Constant => {}
        }
        f
    }

    fn advance(&mut self, step: u64, dyn_: &Dynamics, rng: &mut ChaCha8Rng) {
        match self.kind {
            FactorKind::Burst => {
                let flip = if self.on {
                    dyn_.p_switch_off
                } else {
                    dyn_.p_switch_on
                };
                if rng.random_bool(flip) {
                    self.on = !self.on;
                }
                let x = if self.on { 1.0 } else { 0.0 };
                self.smoothed += dyn_.alpha * (x - self.smoothed);
                self.value = (self.smoothed - dyn_.p_on) * dyn_.burst_scale;
            }
            FactorKind::Fading => {
                let e: f64 = rng.sample(StandardNormal);
                self.value = dyn_.phi * self.value + (1.0 - dyn_.phi * dyn_.phi).sqrt() * e;
            }
            FactorKind::Load => {
                self.value =
                    std::f64::consts::SQRT_2 * (dyn_.omega * step as f64 + self.phase).sin();
            }
            FactorKind::Constant => self.value = 0.0,
        }
    }
}

/// Streams and their latent factor trajectories.
#[derive(Clone, Debug)]
pub struct GeneratedStream {
    pub records: Vec<KpiRecord>,
    /// `records.len()` rows of factor values.
    pub factors: Vec<Vec<f64>>,
}

pub fn generate_stream(
    cfg: &LatentProcessConfig,
    spec: &KpiMarginalSpec,
    duration_ms: f64,
) -> Result<Vec<KpiRecord>> {
    Ok(generate_stream_with_factors(cfg, spec, duration_ms)?.records)
}

pub fn generate_stream_with_factors(
    cfg: &LatentProcessConfig,
    spec: &KpiMarginalSpec,
    duration_ms: f64,
) -> Result<GeneratedStream> {
    cfg.validate()?;
    spec.validate()?;
    if !(duration_ms >= RECORD_INTERVAL_MS) {
        return Err(Error::Parameter(format!(
            "duration {duration_ms} ms is shorter than one {RECORD_INTERVAL_MS} ms record"
        )));
    }
    let n = (duration_ms / RECORD_INTERVAL_MS).floor() as u64;
    let loadings = cfg.loading_matrix();
    let dyn_ = Dynamics::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut factors: Vec<Factor> = cfg
        .factors
        .iter()
        .map(|k| Factor::start(*k, &dyn_, &mut rng))
        .collect();

    // Long-run variance of each KPI's mixed signal.
    let unit = |k: &FactorKind| if *k == FactorKind::Constant { 0.0 } else { 1.0 };
    let shapes: Vec<(f64, f64, f64)> = Kpi::ALL
        .iter()
        .map(|kpi| {
            let c = kpi.index();
            let var: f64 = loadings[c]
                .iter()
                .zip(&cfg.factors)
                .map(|(l, k)| l * l * unit(k))
                .sum::<f64>()
                + cfg.noise_std[c].powi(2);
            let (mu, sigma) = calibrate(spec.get(*kpi));
            (mu, sigma, var.sqrt())
        })
        .collect();

    let mut records = Vec::with_capacity(n as usize);
    let mut trajectory = Vec::with_capacity(n as usize);
    for step in 0..n {
        factors
            .iter_mut()
            .for_each(|f| f.advance(step, &dyn_, &mut rng));
        let mut rec = KpiRecord::new(step as f64 * RECORD_INTERVAL_MS);
        for kpi in Kpi::ALL {
            let c = kpi.index();
            let m = spec.get(kpi);
            let noise: f64 = rng.sample(StandardNormal);
            let mixed: f64 = loadings[c]
                .iter()
                .zip(&factors)
                .map(|(l, f)| l * f.value)
                .sum::<f64>()
                + cfg.noise_std[c] * noise;
            let (mu, sigma, total) = shapes[c];
            let mut value = if total > 0.0 {
                (mu + sigma * mixed / total).clamp(m.min, m.max)
            } else {
                m.mean
            };
            let outlier = rng.random_bool(cfg.outlier_rate);
            let outlier_value = {
                let (lo, hi) = m.outlier_range();
                rng.random_range(lo..=hi)
            };
            if outlier {
                value = outlier_value;
            }
            if kpi.is_integer() {
                value = value.round();
            }
            let mut p_missing = cfg.missing_prob;
            if kpi == Kpi::PacketDelay {
                p_missing = 1.0 - (1.0 - p_missing) * (1.0 - cfg.delay_missing_prob);
            }
            let missing = rng.random_bool(p_missing);
            rec.values[c] = (!missing).then_some(value);
        }
        records.push(rec);
        trajectory.push(factors.iter().map(|f| f.value).collect());
    }
    Ok(GeneratedStream {
        records,
        factors: trajectory,
    })
}

/// Generates a stream long enough to yield `n_samples` windows after the
/// full preprocessing chain, and keeps the first `n_samples`.
pub fn generate_labeled_dataset(
    cfg: &LatentProcessConfig,
    spec: &KpiMarginalSpec,
    n_samples: usize,
    pre: &PreprocessConfig,
) -> Result<(SequenceDataset, PreprocessReport)> {
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be at least 1".into()));
    }
    let mut duration =
        ((n_samples + pre.n_seq + 8) as f64 * pre.t_step * 1.5).max(RECORD_INTERVAL_MS * 64.0);
    for _ in 0..12 {
        let records = generate_stream(cfg, spec, duration)?;
        let (mut ds, mut report) = preprocess::run(&records, pre)?;
        if ds.len() >= n_samples {
            ds.truncate(n_samples);
            report.samples = n_samples;
            return Ok((ds, report));
        }
        let yield_rate = (ds.len().max(1) as f64) / duration;
        duration = (duration * 2.0).max(1.3 * n_samples as f64 / yield_rate);
    }
    Err(Error::Data(format!(
        "could not produce {n_samples} samples; the stream loses too many rows in preprocessing"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let cfg = LatentProcessConfig::default();
        let spec = KpiMarginalSpec::default();
        let a = generate_stream(&cfg, &spec, 5_000.0).unwrap();
        let b = generate_stream(&cfg, &spec, 5_000.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 250);
    }

    #[test]
    fn constant_factor_without_noise_sits_at_the_mean() {
        let cfg = LatentProcessConfig {
            factors: vec![FactorKind::Constant],
            loadings: Some(vec![vec![0.7]; K]),
            ..LatentProcessConfig::default()
        }
        .noiseless();
        let spec = KpiMarginalSpec::default();
        let recs = generate_stream(&cfg, &spec, 1_000.0).unwrap();
        for rec in &recs {
            for kpi in Kpi::ALL {
                let mean = spec.get(kpi).mean;
                let expected = if kpi.is_integer() { mean.round() } else { mean };
                assert_eq!(rec.get(kpi), Some(expected), "{kpi}");
            }
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let spec = KpiMarginalSpec::default();
        let cfg = LatentProcessConfig {
            missing_prob: 1.5,
            ..LatentProcessConfig::default()
        };
        assert!(matches!(
            generate_stream(&cfg, &spec, 1000.0),
            Err(Error::Parameter(_))
        ));
        let mut bad = spec.clone();
        bad.marginals[0].mean = 99.0;
        assert!(generate_stream(&LatentProcessConfig::default(), &bad, 1000.0).is_err());
        assert!(generate_stream(&LatentProcessConfig::default(), &spec, 5.0).is_err());
    }

    #[test]
    fn random_loadings_for_custom_factor_sets() {
        let cfg = LatentProcessConfig {
            factors: vec![FactorKind::Fading; 4],
            ..LatentProcessConfig::default()
        };
        let l = cfg.loading_matrix();
        assert_eq!((l.len(), l[0].len()), (K, 4));
        assert_eq!(l, cfg.loading_matrix());
    }
}
