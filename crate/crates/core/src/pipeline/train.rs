use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::hscore::h_score_var;
use crate::kpi::{Kpi, K};
use crate::models::{Adam, Extractor, ExtractorConfig, Mlp, MlpSpec};
use crate::ndiff::{Graph, Tensor, Var};
use crate::preprocess::{Normalization, SequenceDataset};

const SEED_EXTRACTOR: u64 = 1;
const SEED_TARGET_NET: u64 = 2;
const SEED_DECODER: u64 = 3;
const SEED_REGRESSOR: u64 = 4;
const SEED_SHUFFLE: u64 = 5;
const SEED_SCORE: u64 = 6;

const INFERENCE_CHUNK: usize = 512;

/// Normalized train/test splits and the transform that produced them.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: SequenceDataset,
    pub test: SequenceDataset,
    pub norm: Normalization,
}

/// Per-epoch training curve of one component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Objective on the training set before the first update.
    pub initial: f64,
    /// Mean batch objective during each epoch.
    pub epochs: Vec<f64>,
    /// Objective on the training set after the last update.
    pub last: f64,
}

/// Index chunks of at most `size`; a trailing chunk of one sample is merged
/// into its predecessor so every batch has at least two samples.
fn chunks(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map(|c| c.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one chunk") = &order[start..];
    }
    out
}

/// Shuffled mini-batch epochs. `step` runs one update and returns its loss.
fn run_epochs(
    stage: &str,
    n: usize,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut step: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut last_finite: Option<f64> = None;
    let mut batch_no = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0);
        for idx in chunks(&order, batch_size) {
            let diverged = |last: Option<f64>| Error::Diverged {
                stage: stage.to_string(),
                batch: batch_no,
                last_finite: last.map_or("none".into(), |v| format!("{v:.6e}")),
            };
            let loss = match step(idx) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Numeric { .. }) => return Err(diverged(last_finite)),
                Err(e) => return Err(e),
            };
            last_finite = Some(loss);
            total += loss * idx.len() as f64;
            count += idx.len();
            batch_no += 1;
        }
        curve.push(total / count as f64);
    }
    Ok(curve)
}

/// Sample-weighted mean of `eval` over batches of one fixed seeded
/// permutation. Batch statistics such as the H-score depend on batch
/// composition, so scoring uses shuffled batches like training does;
/// consecutive windows overlap almost entirely.
fn sweep(
    n: usize,
    batch_size: usize,
    seed: u64,
    mut eval: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut total, mut count) = (0.0, 0);
    for idx in chunks(&order, batch_size) {
        total += eval(idx)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count as f64)
}

fn gather_inputs(ds: &SequenceDataset, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * ds.input_width());
    idx.iter()
        .for_each(|&j| data.extend_from_slice(ds.input(j)));
    Tensor::new(&[idx.len(), ds.seq_len(), K], data)
}

fn gather_targets(ds: &SequenceDataset, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * K);
    idx.iter()
        .for_each(|&j| data.extend_from_slice(ds.target(j)));
    Tensor::new(&[idx.len(), K], data)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    idx.iter()
        .for_each(|&j| data.extend_from_slice(&t.data()[j * w..(j + 1) * w]));
    Tensor::new(&[idx.len(), w], data)
}

fn check_extractor(cfg: &ExtractorConfig, ds: &SequenceDataset) -> Result<()> {
    if cfg.n_seq != ds.seq_len() || cfg.k != K {
        return Err(Error::Dimension(format!(
            "extractor expects {}x{} windows, dataset has {}x{K}",
            cfg.n_seq,
            cfg.k,
            ds.seq_len()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(())
}

/// H-score of one batch, recorded on a fresh graph.
fn h_batch(
    f: &Extractor,
    g: &Mlp,
    ds: &SequenceDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(Graph, Var, crate::models::Bound, crate::models::Bound)> {
    let mut graph = Graph::new();
    let bf = f.params.bind(&mut graph);
    let bg = g.params.bind(&mut graph);
    let x = graph.constant(gather_inputs(ds, idx)?);
    let y = graph.constant(gather_targets(ds, idx)?);
    let fx = f.forward(&mut graph, &bf, x)?;
    let gy = g.forward(&mut graph, &bg, y)?;
    let ft = graph.transpose(fx)?;
    let gt = graph.transpose(gy)?;
    let h = h_score_var(&mut graph, ft, gt, cfg.second_moment)?;
    Ok((graph, h, bf, bg))
}

/// Stage one: fits `f` (configured by `extractor`) and a `(16, 32, n)`
/// target network on the negated H-score, discards the target network and
/// returns `f` frozen. The history tracks the H-score (higher is better).
pub fn train_extractor(
    train: &SequenceDataset,
    extractor: &ExtractorConfig,
    cfg: &TrainConfig,
) -> Result<(Extractor, History)> {
    cfg.validate()?;
    check_extractor(extractor, train)?;
    let mut f = Extractor::init(extractor.clone(), derive_seed(cfg.seed, SEED_EXTRACTOR))?;
    let mut g = Mlp::init(
        MlpSpec::target_network(K, extractor.n),
        derive_seed(cfg.seed, SEED_TARGET_NET),
    )?;
    let mut opt_f = Adam::new(cfg.optimizer, &f.params);
    let mut opt_g = Adam::new(cfg.optimizer, &g.params);
    let score = |f: &Extractor, g: &Mlp| {
        sweep(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, SEED_SCORE),
            |idx| {
                let (graph, h, _, _) = h_batch(f, g, train, idx, cfg)?;
                Ok(graph.value(h).item())
            },
        )
    };
    if train.len() < 2 {
        return Err(Error::Data(
            "the H-score needs at least two training samples".into(),
        ));
    }
    let initial = score(&f, &g)?;
    let curve = run_epochs(
        "extractor",
        train.len(),
        cfg.epochs.extractor,
        cfg.batch_size,
        derive_seed(cfg.seed, SEED_SHUFFLE),
        |idx| {
            let (mut graph, h, bf, bg) = h_batch(&f, &g, train, idx, cfg)?;
            let loss = graph.scale(h, -1.0)?;
            graph.backward(loss)?;
            opt_f.step(&mut f.params, &bf.grads(&graph))?;
            opt_g.step(&mut g.params, &bg.grads(&graph))?;
            Ok(graph.value(h).item())
        },
    )?;
    let last = score(&f, &g)?;
    f.freeze();
    Ok((
        f,
        History {
            initial,
            epochs: curve,
            last,
        },
    ))
}

/// Baseline encoder: the same extractor shape trained with a `(16, 32, 2)`
/// decoder to reconstruct RSRQ and spectral efficiency of the latest input
/// row. The decoder is dropped; the encoder is returned frozen. The history
/// tracks the reconstruction MSE.
pub fn train_autoencoder(
    train: &SequenceDataset,
    extractor: &ExtractorConfig,
    cfg: &TrainConfig,
) -> Result<(Extractor, History)> {
    cfg.validate()?;
    check_extractor(extractor, train)?;
    let mut f = Extractor::init(extractor.clone(), derive_seed(cfg.seed, SEED_EXTRACTOR))?;
    let mut dec = Mlp::init(
        MlpSpec::decoder(extractor.n),
        derive_seed(cfg.seed, SEED_DECODER),
    )?;
    let mut opt_f = Adam::new(cfg.optimizer, &f.params);
    let mut opt_d = Adam::new(cfg.optimizer, &dec.params);
    let cols = [Kpi::Rsrq.index(), Kpi::SpectralEfficiency.index()];
    let last_row = (train.seq_len() - 1) * K;
    let recon = |f: &Extractor,
                 dec: &Mlp,
                 idx: &[usize]|
     -> Result<(Graph, Var, crate::models::Bound, crate::models::Bound)> {
        let mut graph = Graph::new();
        let bf = f.params.bind(&mut graph);
        let bd = dec.params.bind(&mut graph);
        let x = graph.constant(gather_inputs(train, idx)?);
        let mut want = Vec::with_capacity(idx.len() * 2);
        for &j in idx {
            let row = &train.input(j)[last_row..last_row + K];
            want.extend(cols.iter().map(|&c| row[c]));
        }
        let want = graph.constant(Tensor::new(&[idx.len(), 2], want)?);
        let z = f.forward(&mut graph, &bf, x)?;
        let out = dec.forward(&mut graph, &bd, z)?;
        let diff = graph.sub(out, want)?;
        let sq = graph.square(diff)?;
        let loss = graph.mean_all(sq)?;
        Ok((graph, loss, bf, bd))
    };
    let score = |f: &Extractor, dec: &Mlp| {
        sweep(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, SEED_SCORE),
            |idx| {
                let (graph, loss, _, _) = recon(f, dec, idx)?;
                Ok(graph.value(loss).item())
            },
        )
    };
    let initial = score(&f, &dec)?;
    let curve = run_epochs(
        "autoencoder",
        train.len(),
        cfg.epochs.autoencoder,
        cfg.batch_size,
        derive_seed(cfg.seed, SEED_SHUFFLE),
        |idx| {
            let (mut graph, loss, bf, bd) = recon(&f, &dec, idx)?;
            graph.backward(loss)?;
            opt_f.step(&mut f.params, &bf.grads(&graph))?;
            opt_d.step(&mut dec.params, &bd.grads(&graph))?;
            Ok(graph.value(loss).item())
        },
    )?;
    let last = score(&f, &dec)?;
    f.freeze();
    Ok((
        f,
        History {
            initial,
            epochs: curve,
            last,
        },
    ))
}

/// Embeddings `M x n` of every window in `ds`. The extractor must be frozen.
pub fn embed_dataset(extractor: &Extractor, ds: &SequenceDataset) -> Result<Tensor> {
    if !extractor.is_frozen() {
        return Err(Error::Contract(
            "embeddings come only from a frozen extractor".into(),
        ));
    }
    check_extractor(&extractor.config, ds)
        .or_else(|e| if ds.is_empty() { Ok(()) } else { Err(e) })?;
    let n = extractor.config.n;
    let mut data = Vec::with_capacity(ds.len() * n);
    let order: Vec<usize> = (0..ds.len()).collect();
    for idx in order.chunks(INFERENCE_CHUNK) {
        let x = gather_inputs(ds, idx)?;
        data.extend_from_slice(extractor.embed_batch(x.data(), idx.len())?.data());
    }
    Tensor::new(&[ds.len(), n], data)
}

/// Flattened windows `M x (seq_len * K)`, oldest row first.
pub fn flatten_inputs(ds: &SequenceDataset) -> Tensor {
    Tensor::new(&[ds.len(), ds.input_width()], ds.inputs().to_vec())
        .expect("dataset buffers are consistent")
}

pub(crate) fn predict_rows(mlp: &Mlp, features: &Tensor) -> Result<Vec<f64>> {
    let m = features.shape()[0];
    let order: Vec<usize> = (0..m).collect();
    let mut out = Vec::with_capacity(m);
    for idx in order.chunks(INFERENCE_CHUNK) {
        let rows = gather_rows(features, idx)?;
        out.extend_from_slice(mlp.predict(rows.data(), idx.len())?.data());
    }
    Ok(out)
}

fn fit_regressor(
    stage: &str,
    features: &Tensor,
    targets: &[f64],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(Mlp, History)> {
    let s = features.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "{stage}: {:?} features for {} targets",
            s,
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("{stage}: no training samples")));
    }
    let mut mlp = Mlp::init(
        MlpSpec::predictor(s[1]),
        derive_seed(cfg.seed, SEED_REGRESSOR),
    )?;
    let mut opt = Adam::new(cfg.optimizer, &mlp.params);
    let loss_of =
        |mlp: &Mlp, idx: &[usize], track: bool| -> Result<(Graph, Var, crate::models::Bound)> {
            let mut graph = Graph::new();
            let b = if track {
                mlp.params.bind(&mut graph)
            } else {
                mlp.params.bind_constants(&mut graph)
            };
            let x = graph.constant(gather_rows(features, idx)?);
            let y = graph.constant(Tensor::new(
                &[idx.len(), 1],
                idx.iter().map(|&j| targets[j]).collect(),
            )?);
            let out = mlp.forward(&mut graph, &b, x)?;
            let diff = graph.sub(out, y)?;
            let sq = graph.square(diff)?;
            let loss = graph.mean_all(sq)?;
            Ok((graph, loss, b))
        };
    let score = |mlp: &Mlp| {
        sweep(
            targets.len(),
            INFERENCE_CHUNK,
            derive_seed(cfg.seed, SEED_SCORE),
            |idx| {
                let (graph, loss, _) = loss_of(mlp, idx, false)?;
                Ok(graph.value(loss).item())
            },
        )
    };
    let initial = score(&mlp)?;
    let curve = run_epochs(
        stage,
        targets.len(),
        epochs,
        cfg.batch_size,
        derive_seed(cfg.seed, SEED_SHUFFLE),
        |idx| {
            let (mut graph, loss, b) = loss_of(&mlp, idx, true)?;
            graph.backward(loss)?;
            opt.step(&mut mlp.params, &b.grads(&graph))?;
            Ok(graph.value(loss).item())
        },
    )?;
    let last = score(&mlp)?;
    Ok((
        mlp,
        History {
            initial,
            epochs: curve,
            last,
        },
    ))
}

/// Stage two: a `(16, 32, 1)` regressor on embeddings only.
pub fn train_predictor(
    embeddings: &Tensor,
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<(Mlp, History)> {
    cfg.validate()?;
    fit_regressor("predictor", embeddings, targets, cfg.epochs.predictor, cfg)
}

/// Baseline: the same regressor on the flattened `seq_len x K` window.
pub fn train_baseline_full(
    train: &SequenceDataset,
    target: Kpi,
    cfg: &TrainConfig,
) -> Result<(Mlp, History)> {
    cfg.validate()?;
    let features = flatten_inputs(train);
    fit_regressor(
        "baseline",
        &features,
        &train.target_column(target),
        cfg.epochs.baseline,
        cfg,
    )
}

/// Per-column `(mean, std)` of `train` applied to each matrix; std below
/// `1e-12` is treated as 1.
pub(crate) fn standardize(train: &Tensor, others: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    let (m, w) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0; w];
    let mut var = vec![0.0; w];
    for row in train.data().chunks(w) {
        row.iter().zip(&mut mean).for_each(|(v, s)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= m as f64);
    for row in train.data().chunks(w) {
        for ((v, mu), s) in row.iter().zip(&mean).zip(&mut var) {
            *s += (v - mu).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / m as f64).sqrt())
        .map(|s| if s < 1e-12 { 1.0 } else { s })
        .collect();
    let apply = |t: &Tensor| -> Result<Tensor> {
        let data = t
            .data()
            .chunks(w)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean[i]) / std[i])
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(t.shape(), data)
    };
    Ok((
        apply(train)?,
        others.iter().map(|t| apply(t)).collect::<Result<_>>()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_hold_a_single_sample() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = chunks(&order, 4).iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = chunks(&order, 3).iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);
        assert_eq!(chunks(&order[..1], 4).len(), 1);
    }

    #[test]
    fn divergence_reports_the_batch() {
        let err = run_epochs("demo", 10, 1, 2, 0, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Diverged { batch: 0, .. }));
        let mut calls = 0;
        let err = run_epochs("demo", 10, 1, 2, 0, |_| {
            calls += 1;
            Ok(if calls == 3 { f64::INFINITY } else { 1.5 })
        })
        .unwrap_err();
        match err {
            Error::Diverged {
                batch, last_finite, ..
            } => {
                assert_eq!(batch, 2);
                assert_eq!(last_finite, "1.500000e0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
