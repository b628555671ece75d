use crate::error::{Error, Result};
use crate::kpi::{Kpi, K};

use super::log::KpiRecord;

/// Value written into `packet_delay` when only that KPI is missing.
pub const DELAY_SENTINEL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    /// Grid index: `timestamp == t_start + step * t_step`.
    pub step: i64,
    pub timestamp: f64,
    pub values: [Option<f64>; K],
}

impl FrameRow {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Values of a complete row.
    pub fn complete(&self) -> Option<[f64; K]> {
        let mut out = [0.0; K];
        for (o, v) in out.iter_mut().zip(&self.values) {
            *o = (*v)?;
        }
        Some(out)
    }
}

/// Uniformly gridded KPI table. Rows are ordered by `step`; missing grid
/// points are simply absent rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KpiFrame {
    pub t_start: f64,
    pub t_step: f64,
    pub window_len: f64,
    pub rows: Vec<FrameRow>,
}

impl KpiFrame {
    /// Builds a frame from rows in any order. When two rows share a grid
    /// step the later one wins; the number of such collisions is returned.
    pub fn from_rows(
        t_start: f64,
        t_step: f64,
        window_len: f64,
        rows: Vec<FrameRow>,
    ) -> (Self, usize) {
        let mut indexed: Vec<(usize, FrameRow)> = rows.into_iter().enumerate().collect();
        indexed.sort_by_key(|(i, r)| (r.step, *i));
        let mut out: Vec<FrameRow> = Vec::with_capacity(indexed.len());
        let mut duplicates = 0;
        for (_, row) in indexed {
            match out.last_mut() {
                Some(last) if last.step == row.step => {
                    *last = row;
                    duplicates += 1;
                }
                _ => out.push(row),
            }
        }
        let frame = Self {
            t_start,
            t_step,
            window_len,
            rows: out,
        };
        (frame, duplicates)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Present values of one KPI column, in row order.
    pub fn column(&self, kpi: Kpi) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.values[kpi.index()])
            .collect()
    }
}

/// Averages each KPI over `[t, t + window_len)` windows advanced by `t_step`,
/// stamping every output row with its window start. Windows start at the
/// earliest record.
pub fn moving_average(records: &[KpiRecord], window_len: f64, t_step: f64) -> Result<KpiFrame> {
    if !(window_len > 0.0 && window_len.is_finite()) || !(t_step > 0.0 && t_step.is_finite()) {
        return Err(Error::Parameter(format!(
            "window_len ({window_len}) and t_step ({t_step}) must be positive"
        )));
    }
    let mut sorted: Vec<&KpiRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let Some(first) = sorted.first() else {
        return Ok(KpiFrame {
            t_start: 0.0,
            t_step,
            window_len,
            rows: Vec::new(),
        });
    };
    let t0 = first.timestamp;
    let last = sorted[sorted.len() - 1].timestamp;
    let n = sorted.len();

    let mut rows = Vec::new();
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut k: i64 = 0;
    loop {
        let start = t0 + k as f64 * t_step;
        if start > last {
            break;
        }
        let end = start + window_len;
        while lo < n && sorted[lo].timestamp < start {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < n && sorted[hi].timestamp < end {
            hi += 1;
        }
        if lo == hi {
            // Empty window: jump to the first window that can reach sorted[lo].
            let Some(next) = sorted.get(lo) else { break };
            let jump = ((next.timestamp - window_len - t0) / t_step).floor() as i64 + 1;
            k = jump.max(k + 1);
            continue;
        }
        let mut sums = [0.0; K];
        let mut counts = [0usize; K];
        for rec in &sorted[lo..hi] {
            for (c, v) in rec.values.iter().enumerate() {
                if let Some(v) = v {
                    sums[c] += v;
                    counts[c] += 1;
                }
            }
        }
        let mut values = [None; K];
        for c in 0..K {
            if counts[c] > 0 {
                values[c] = Some(sums[c] / counts[c] as f64);
            }
        }
        if values.iter().any(Option::is_some) {
            rows.push(FrameRow {
                step: k,
                timestamp: start,
                values,
            });
        }
        k += 1;
    }
    Ok(KpiFrame {
        t_start: t0,
        t_step,
        window_len,
        rows,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FillReport {
    pub filled: usize,
    pub dropped: usize,
}

/// Keeps rows missing only `packet_delay` (filled with [`DELAY_SENTINEL`])
/// and drops rows missing anything else.
pub fn fill_and_filter(frame: &KpiFrame) -> (KpiFrame, FillReport) {
    let delay = Kpi::PacketDelay.index();
    let mut report = FillReport::default();
    let mut rows = Vec::with_capacity(frame.rows.len());
    for row in &frame.rows {
        let other_missing = row
            .values
            .iter()
            .enumerate()
            .any(|(c, v)| c != delay && v.is_none());
        if other_missing {
            report.dropped += 1;
            continue;
        }
        let mut row = row.clone();
        if row.values[delay].is_none() {
            row.values[delay] = Some(DELAY_SENTINEL);
            report.filled += 1;
        }
        rows.push(row);
    }
    let out = KpiFrame {
        rows,
        ..frame.clone_empty()
    };
    (out, report)
}

impl KpiFrame {
    fn clone_empty(&self) -> KpiFrame {
        KpiFrame {
            t_start: self.t_start,
            t_step: self.t_step,
            window_len: self.window_len,
            rows: Vec::new(),
        }
    }
}

/// Linear-interpolation percentile of sorted data (`rank = p/100 * (n-1)`).
pub fn percentile(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=100.0).contains(&pct) {
        return None;
    }
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Per-column `[lower, upper]` keep-interval.
pub type Bounds = [(f64, f64); K];

#[derive(Clone, Debug, PartialEq)]
pub struct IqrOutcome {
    pub frame: KpiFrame,
    pub bounds: Bounds,
    pub removed: usize,
    /// Set when the frame was too small to filter and passed through.
    pub warning: Option<String>,
}

/// Computes outlier bounds `[q_lo - 1.5 iqr, q_hi + 1.5 iqr]` per column,
/// where `q_lo`/`q_hi` are the `lower_pct`/`upper_pct` percentiles. Delay
/// sentinels are left out of the `packet_delay` percentiles.
pub fn iqr_bounds(frame: &KpiFrame, lower_pct: f64, upper_pct: f64) -> Bounds {
    let mut bounds = [(f64::NEG_INFINITY, f64::INFINITY); K];
    for kpi in Kpi::ALL {
        let mut col: Vec<f64> = frame
            .column(kpi)
            .into_iter()
            .filter(|v| !(kpi == Kpi::PacketDelay && *v == DELAY_SENTINEL))
            .collect();
        col.sort_by(f64::total_cmp);
        if let (Some(q1), Some(q3)) = (percentile(&col, lower_pct), percentile(&col, upper_pct)) {
            let iqr = q3 - q1;
            bounds[kpi.index()] = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        }
    }
    bounds
}

/// Removes every row with a value outside its column's bounds.
pub fn apply_bounds(frame: &KpiFrame, bounds: &Bounds) -> (KpiFrame, usize) {
    let delay = Kpi::PacketDelay.index();
    let keep = |row: &FrameRow| {
        row.values.iter().enumerate().all(|(c, v)| match v {
            None => true,
            Some(x) if c == delay && *x == DELAY_SENTINEL => true,
            Some(x) => *x >= bounds[c].0 && *x <= bounds[c].1,
        })
    };
    let rows: Vec<FrameRow> = frame.rows.iter().filter(|r| keep(r)).cloned().collect();
    let removed = frame.rows.len() - rows.len();
    (
        KpiFrame {
            rows,
            ..frame.clone_empty()
        },
        removed,
    )
}

pub fn iqr_filter(frame: &KpiFrame, lower_pct: f64, upper_pct: f64) -> Result<IqrOutcome> {
    if !(0.0..=100.0).contains(&lower_pct)
        || !(0.0..=100.0).contains(&upper_pct)
        || lower_pct > upper_pct
    {
        return Err(Error::Parameter(format!(
            "percentiles must satisfy 0 <= lower ({lower_pct}) <= upper ({upper_pct}) <= 100"
        )));
    }
    if frame.rows.len() < 2 {
        return Ok(IqrOutcome {
            frame: frame.clone(),
            bounds: [(f64::NEG_INFINITY, f64::INFINITY); K],
            removed: 0,
            warning: Some(format!("iqr_filter skipped: {} row(s)", frame.rows.len())),
        });
    }
    let bounds = iqr_bounds(frame, lower_pct, upper_pct);
    let (filtered, removed) = apply_bounds(frame, &bounds);
    Ok(IqrOutcome {
        frame: filtered,
        bounds,
        removed,
        warning: None,
    })
}
