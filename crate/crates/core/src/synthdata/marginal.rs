use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpi::{Kpi, K};

/// Target range and moments of one KPI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpiMarginal {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl KpiMarginal {
    pub const fn new(min: f64, max: f64, mean: f64, std: f64) -> Self {
        Self {
            min,
            max,
            mean,
            std,
        }
    }

    pub fn validate(&self, kpi: Kpi) -> Result<()> {
        let finite = [self.min, self.max, self.mean, self.std]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.min > self.mean || self.mean > self.max || self.std < 0.0 {
            return Err(Error::Parameter(format!(
                "{kpi}: marginal needs min <= mean <= max and std >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Interval three times as wide as `[min, max]`, same center. Injected
    /// outliers are drawn from here.
    pub fn outlier_range(&self) -> (f64, f64) {
        let center = 0.5 * (self.min + self.max);
        let half = 1.5 * (self.max - self.min);
        (center - half, center + half)
    }
}

/// Per-KPI marginal targets. Defaults are the measured testbed statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<Kpi, KpiMarginal>",
    into = "BTreeMap<Kpi, KpiMarginal>"
)]
pub struct KpiMarginalSpec {
    pub marginals: [KpiMarginal; K],
}

impl Default for KpiMarginalSpec {
    fn default() -> Self {
        Self {
            marginals: [
                KpiMarginal::new(0.00, 3.74, 0.58, 0.38),
                KpiMarginal::new(-102.0, -75.0, -87.58, 3.70),
                KpiMarginal::new(9.43, 24.33, 18.31, 1.92),
                KpiMarginal::new(1.0, 2.0, 1.36, 0.38),
                KpiMarginal::new(0.0, 27.0, 9.04, 4.93),
                KpiMarginal::new(2.0, 25.0, 22.31, 4.34),
                KpiMarginal::new(0.0, 13.0, 8.51, 0.92),
                KpiMarginal::new(-14.00, -6.40, -10.55, 2.47),
                KpiMarginal::new(0.0, 3.0, 0.93, 0.84),
                KpiMarginal::new(-70.0, -60.0, -65.36, 2.62),
                KpiMarginal::new(0.0, 2944.0, 25.61, 85.34),
                KpiMarginal::new(0.0, 3048.06, 62.70, 208.87),
                KpiMarginal::new(0.0, 78.00, 2.64, 6.76),
            ],
        }
    }
}

impl KpiMarginalSpec {
    pub fn get(&self, kpi: Kpi) -> &KpiMarginal {
        &self.marginals[kpi.index()]
    }

    pub fn validate(&self) -> Result<()> {
        Kpi::ALL
            .iter()
            .try_for_each(|k| self.marginals[k.index()].validate(*k))
    }
}

impl TryFrom<BTreeMap<Kpi, KpiMarginal>> for KpiMarginalSpec {
    type Error = String;

    fn try_from(map: BTreeMap<Kpi, KpiMarginal>) -> std::result::Result<Self, String> {
        let mut spec = KpiMarginalSpec::default();
        for (kpi, m) in map {
            spec.marginals[kpi.index()] = m;
        }
        Ok(spec)
    }
}

impl From<KpiMarginalSpec> for BTreeMap<Kpi, KpiMarginal> {
    fn from(spec: KpiMarginalSpec) -> Self {
        Kpi::ALL
            .iter()
            .map(|k| (*k, spec.marginals[k.index()]))
            .collect()
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Mean and standard deviation of `clip(N(mu, sigma), lo, hi)`.
pub fn clipped_normal_moments(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64) {
    if sigma <= 0.0 {
        let v = mu.clamp(lo, hi);
        return (v, 0.0);
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let (pa, pb) = (std_normal_cdf(a), std_normal_cdf(b));
    let (da, db) = (std_normal_pdf(a), std_normal_pdf(b));
    let mid = pb - pa;
    let mean = lo * pa + hi * (1.0 - pb) + mu * mid + sigma * (da - db);
    let second = lo * lo * pa
        + hi * hi * (1.0 - pb)
        + mu * mu * mid
        + 2.0 * mu * sigma * (da - db)
        + sigma * sigma * (mid + a * da - b * db);
    (mean, (second - mean * mean).max(0.0).sqrt())
}

fn bisect(mut lo: f64, mut hi: f64, iters: usize, mut too_low: impl FnMut(f64) -> bool) -> f64 {
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if too_low(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Location/scale of a normal whose clipped version has the marginal's
/// mean and (as closely as the family allows) its standard deviation.
pub fn calibrate(m: &KpiMarginal) -> (f64, f64) {
    if m.std == 0.0 || m.max == m.min {
        return (m.mean, 0.0);
    }
    let width = m.max - m.min;
    let location_for = |sigma: f64| {
        bisect(
            m.min - 20.0 * sigma - width,
            m.max + 20.0 * sigma + width,
            200,
            |mu| clipped_normal_moments(mu, sigma, m.min, m.max).0 < m.mean,
        )
    };
    let sigma = bisect(1e-9 * m.std, 50.0 * m.std, 200, |sigma| {
        let mu = location_for(sigma);
        clipped_normal_moments(mu, sigma, m.min, m.max).1 < m.std
    });
    (location_for(sigma), sigma)
}
