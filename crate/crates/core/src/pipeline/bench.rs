use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{predict_rows, standardize};
use super::{
    embed_dataset, evaluate, flatten_inputs, prepare, train_autoencoder, train_baseline_full,
    train_extractor, train_predictor, History, Metrics, Prepared, TrainConfig,
};
use crate::error::{Error, Result};
use crate::kpi::Kpi;
use crate::models::{Extractor, ExtractorKind, Mlp};
use crate::ndiff::Tensor;
use crate::preprocess::SequenceDataset;

const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// Regressor on the flattened window.
    FullKpiMlp,
    /// Autoencoder-trained encoder, then regressor on its codes.
    AutoencoderMlp,
    /// H-score reservoir without the transformer, then regressor.
    HscoreEsnMlp,
    /// H-score Transformer-ESN, then regressor.
    HscoreTesnMlp,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::FullKpiMlp,
        Condition::AutoencoderMlp,
        Condition::HscoreEsnMlp,
        Condition::HscoreTesnMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::FullKpiMlp => "full-kpi-mlp",
            Condition::AutoencoderMlp => "autoencoder-mlp",
            Condition::HscoreEsnMlp => "hscore-esn-mlp",
            Condition::HscoreTesnMlp => "hscore-tesn-mlp",
        }
    }

    pub fn from_name(name: &str) -> Option<Condition> {
        Condition::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mse: Option<f64>,
    pub pearson: Option<f64>,
    pub pearson_defined: bool,
    /// Width of the regressor input (embedding dimension or window size).
    pub input_width: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub condition: Condition,
    pub target: Kpi,
    /// Median over successful seeds; `None` if every seed failed.
    pub mse: Option<f64>,
    pub pearson: Option<f64>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub condition: Condition,
    pub seed: u64,
    pub stage: String,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

/// Benchmark outcome. Wall-clock timings are kept out of the serialized
/// form so that reruns produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub regime: String,
    pub config_fingerprint: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub samples: SampleCounts,
    /// MSE is in the target KPI's original units.
    pub cells: Vec<CellResult>,
    pub stages: Vec<StageRecord>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn cell(&self, condition: Condition, target: Kpi) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.target == target)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("condition,target,mse_median,pearson_median,seeds_ok,seeds_total\n");
        for c in &self.cells {
            let ok = c.seeds.iter().filter(|s| s.error.is_none()).count();
            let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9e}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{ok},{}",
                c.condition.name(),
                c.target,
                fmt(c.mse),
                fmt(c.pearson),
                c.seeds.len()
            );
        }
        out
    }
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    Some(if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    })
}

fn fingerprint(cfg: &TrainConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// A stage-two regressor with its test-split score.
#[derive(Clone, Debug)]
pub struct FittedPredictor {
    pub target: Kpi,
    pub mlp: Mlp,
    pub history: History,
    pub metrics: Metrics,
}

/// Stage-two inputs for the train and test splits of a frozen extractor.
fn stage_two_features(
    extractor: &Extractor,
    data: &Prepared,
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let (tr, te) = (
        embed_dataset(extractor, &data.train)?,
        embed_dataset(extractor, &data.test)?,
    );
    if !cfg.standardize_embeddings {
        return Ok((tr, te));
    }
    let (tr, mut rest) = standardize(&tr, &[&te])?;
    Ok((tr, rest.remove(0)))
}

/// Fits one regressor and scores it on the test split in original units.
/// `None` features select the flattened-window baseline.
fn fit_target(
    features: Option<(&Tensor, &Tensor)>,
    data: &Prepared,
    target: Kpi,
    cfg: &TrainConfig,
) -> Result<FittedPredictor> {
    let (mlp, history, pred) = match features {
        None => {
            let (mlp, h) = train_baseline_full(&data.train, target, cfg)?;
            let pred = predict_rows(&mlp, &flatten_inputs(&data.test))?;
            (mlp, h, pred)
        }
        Some((train_x, test_x)) => {
            let (mlp, h) = train_predictor(train_x, &data.train.target_column(target), cfg)?;
            let pred = predict_rows(&mlp, test_x)?;
            (mlp, h, pred)
        }
    };
    let col = target.index();
    let pred: Vec<f64> = pred.into_iter().map(|p| data.norm.invert(col, p)).collect();
    let truth: Vec<f64> = data
        .test
        .target_column(target)
        .into_iter()
        .map(|v| data.norm.invert(col, v))
        .collect();
    Ok(FittedPredictor {
        target,
        mlp,
        history,
        metrics: evaluate(&pred, &truth)?,
    })
}

/// Stage two for a frozen extractor: one regressor per configured target.
pub fn fit_predictors(
    extractor: &Extractor,
    data: &Prepared,
    cfg: &TrainConfig,
) -> Result<Vec<FittedPredictor>> {
    cfg.validate()?;
    let (tr, te) = stage_two_features(extractor, data, cfg)?;
    cfg.targets
        .iter()
        .map(|&t| fit_target(Some((&tr, &te)), data, t, cfg))
        .collect()
}

type TargetOutcome = (Kpi, Result<Metrics>, usize);

/// Trains one condition for one seed and scores every target on the test
/// split, with the regressor input width.
fn run_condition(
    condition: Condition,
    data: &Prepared,
    cfg: &TrainConfig,
    stages: &mut Vec<StageRecord>,
) -> Vec<TargetOutcome> {
    let mut record = |stage: &str, history: &History| {
        stages.push(StageRecord {
            condition,
            seed: cfg.seed,
            stage: stage.into(),
            history: history.clone(),
        })
    };
    let extractor: Result<Option<Extractor>> = match condition {
        Condition::FullKpiMlp => Ok(None),
        Condition::AutoencoderMlp => {
            train_autoencoder(&data.train, &cfg.extractor, cfg).map(|(f, h)| {
                record("autoencoder", &h);
                Some(f)
            })
        }
        Condition::HscoreEsnMlp | Condition::HscoreTesnMlp => {
            let mut ec = cfg.extractor.clone();
            if condition == Condition::HscoreEsnMlp {
                ec.kind = ExtractorKind::EsnOnly;
            }
            train_extractor(&data.train, &ec, cfg).map(|(f, h)| {
                record("extractor", &h);
                Some(f)
            })
        }
    };
    let features = extractor.and_then(|f| f.map(|f| stage_two_features(&f, data, cfg)).transpose());
    let features = match features {
        Ok(v) => v,
        Err(e) => {
            let msg = format!("{}: {e}", e.class());
            return cfg
                .targets
                .iter()
                .map(|&t| (t, Err(Error::Data(msg.clone())), 0))
                .collect();
        }
    };
    let width = features
        .as_ref()
        .map_or(data.train.input_width(), |(tr, _)| tr.shape()[1]);
    cfg.targets
        .iter()
        .map(|&target| {
            let fitted = fit_target(features.as_ref().map(|(a, b)| (a, b)), data, target, cfg);
            let outcome = fitted.map(|p| {
                record(&format!("regressor:{target}"), &p.history);
                p.metrics
            });
            (target, outcome, width)
        })
        .collect()
}

/// Runs every requested condition for every seed under `cfg`'s regime and
/// reports per-cell medians. A failing condition is recorded and the rest
/// still run.
pub fn run_benchmark(
    ds: &SequenceDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    conditions: &[Condition],
) -> Result<EvalReport> {
    cfg.validate()?;
    if seeds.is_empty() || conditions.is_empty() {
        return Err(Error::Parameter(
            "benchmark needs at least one seed and one condition".into(),
        ));
    }
    let data = prepare(ds, cfg.train_fraction)?;
    let mut cells: Vec<CellResult> = Vec::new();
    for &condition in conditions {
        for &target in &cfg.targets {
            cells.push(CellResult {
                condition,
                target,
                mse: None,
                pearson: None,
                seeds: Vec::new(),
            });
        }
    }
    let mut stages = Vec::new();
    let mut timings = Vec::new();
    for &seed in seeds {
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        for &condition in conditions {
            let start = Instant::now();
            for (target, outcome, width) in run_condition(condition, &data, &run_cfg, &mut stages) {
                let cell = cells
                    .iter_mut()
                    .find(|c| c.condition == condition && c.target == target)
                    .expect("cell exists for every condition and target");
                cell.seeds.push(match outcome {
                    Ok(m) => SeedResult {
                        seed,
                        mse: Some(m.mse),
                        pearson: Some(m.pearson),
                        pearson_defined: m.pearson_defined,
                        input_width: width,
                        error: None,
                    },
                    Err(e) => SeedResult {
                        seed,
                        mse: None,
                        pearson: None,
                        pearson_defined: false,
                        input_width: width,
                        error: Some(format!("{}: {e}", e.class())),
                    },
                });
            }
            timings.push((
                format!("{}/seed{seed}", condition.name()),
                start.elapsed().as_secs_f64(),
            ));
        }
    }
    for cell in &mut cells {
        let mses: Vec<f64> = cell.seeds.iter().filter_map(|s| s.mse).collect();
        let rs: Vec<f64> = cell.seeds.iter().filter_map(|s| s.pearson).collect();
        cell.mse = median(&mses);
        cell.pearson = median(&rs);
    }
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        regime: cfg.regime.name().into(),
        config_fingerprint: fingerprint(cfg)?,
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        samples: SampleCounts {
            total: data.train.len() + data.test.len(),
            train: data.train.len(),
            test: data.test.len(),
        },
        cells,
        stages,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub target: Kpi,
    /// Median test MSE over seeds, original units.
    pub mse: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub regime: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn mse(&self, n: usize, target: Kpi) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.target == target)
            .map(|r| r.mse)
    }
}

/// The H-score Transformer-ESN protocol repeated for each embedding size.
pub fn dim_sweep(
    ds: &SequenceDataset,
    dims: &[usize],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepTable> {
    if dims.is_empty() {
        return Err(Error::Parameter(
            "dimension sweep needs at least one n".into(),
        ));
    }
    let mut rows = Vec::new();
    for &n in dims {
        let mut c = cfg.clone();
        c.extractor.n = n;
        c.extractor.kind = ExtractorKind::TEsn;
        let report = run_benchmark(ds, &c, seeds, &[Condition::HscoreTesnMlp])?;
        for cell in &report.cells {
            if let Some(err) = cell.seeds.iter().find_map(|s| s.error.clone()) {
                return Err(Error::Data(format!("sweep at n = {n}: {err}")));
            }
            let per_seed: Vec<f64> = cell.seeds.iter().filter_map(|s| s.mse).collect();
            rows.push(SweepRow {
                n,
                target: cell.target,
                mse: cell.mse.expect("all seeds succeeded"),
                per_seed,
            });
        }
    }
    Ok(SweepTable {
        regime: cfg.regime.name().into(),
        seeds: seeds.to_vec(),
        rows,
    })
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("n,target,mse_median\n");
    for r in &table.rows {
        let _ = writeln!(out, "{},{},{:.9e}", r.n, r.target, r.mse);
    }
    out
}

/// Static SVG with one panel per target: median MSE against `n` on a log2
/// axis.
pub fn sweep_svg(table: &SweepTable) -> String {
    let mut targets: Vec<Kpi> = Vec::new();
    for r in &table.rows {
        if !targets.contains(&r.target) {
            targets.push(r.target);
        }
    }
    let (pw, ph, pad) = (360.0, 260.0, 50.0);
    let width = pw * targets.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" viewBox="0 0 {width} {ph}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{ph}" fill="white"/>"#);
    for (panel, target) in targets.iter().enumerate() {
        let pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.target == *target)
            .map(|r| ((r.n as f64).log2(), r.mse))
            .collect();
        let x0 = panel as f64 * pw;
        let (xmin, xmax) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (ymin, ymax) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
        let yspan = if ymax > ymin {
            ymax - ymin
        } else {
            ymax.abs().max(1.0)
        };
        let sx = |x: f64| x0 + pad + (x - xmin) / xspan * (pw - 1.5 * pad);
        let sy = |y: f64| ph - pad - (y - ymin) / yspan * (ph - 2.0 * pad);
        let _ = writeln!(
            svg,
            r#"<line x1="{a}" y1="{b}" x2="{c}" y2="{b}" stroke="black"/><line x1="{a}" y1="{d}" x2="{a}" y2="{b}" stroke="black"/>"#,
            a = x0 + pad,
            b = ph - pad + 5.0,
            c = x0 + pw - 0.5 * pad,
            d = pad - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle">{target}: test MSE vs n</text>"#,
            x0 + pw / 2.0
        );
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for (r, (x, y)) in table.rows.iter().filter(|r| r.target == *target).zip(&pts) {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/><text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                sx(*x),
                sy(*y),
                sx(*x),
                ph - pad + 20.0,
                r.n
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.4}</text><text x="{}" y="{:.2}" text-anchor="end">{:.4}</text>"#,
            x0 + pad - 4.0,
            sy(ymax) + 4.0,
            ymax,
            x0 + pad - 4.0,
            sy(ymin) + 4.0,
            ymin
        );
    }
    svg.push_str("</svg>\n");
    svg
}
