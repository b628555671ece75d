use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kpi::{Kpi, K};

use super::frame::KpiFrame;

pub const DEFAULT_SEQ_LEN: usize = 28;

/// Per-KPI z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, col: usize, v: f64) -> f64 {
        (v - self.mean[col]) / self.std[col]
    }

    pub fn invert(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }
}

/// Paired windows `X` (`seq_len x K`, row-major, oldest first) and
/// next-step vectors `Y` (`K`).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    seq_len: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    /// Frame grid step of each target row.
    target_steps: Vec<i64>,
    normalization: Option<Normalization>,
}

impl SequenceDataset {
    pub fn new(
        seq_len: usize,
        inputs: Vec<f64>,
        targets: Vec<f64>,
        target_steps: Vec<i64>,
    ) -> Result<Self> {
        let m = target_steps.len();
        if seq_len == 0 || inputs.len() != m * seq_len * K || targets.len() != m * K {
            return Err(Error::Dimension(format!(
                "dataset buffers ({} inputs, {} targets) do not match {m} samples of {seq_len}x{K}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            seq_len,
            inputs,
            targets,
            target_steps,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.target_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_steps.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_width(&self) -> usize {
        self.seq_len * K
    }

    pub fn input(&self, j: usize) -> &[f64] {
        let w = self.input_width();
        &self.inputs[j * w..(j + 1) * w]
    }

    pub fn target(&self, j: usize) -> &[f64] {
        &self.targets[j * K..(j + 1) * K]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target_steps(&self) -> &[i64] {
        &self.target_steps
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Target column of one KPI across samples.
    pub fn target_column(&self, kpi: Kpi) -> Vec<f64> {
        (0..self.len())
            .map(|j| self.target(j)[kpi.index()])
            .collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        let w = self.input_width();
        let mut inputs = Vec::with_capacity(indices.len() * w);
        let mut targets = Vec::with_capacity(indices.len() * K);
        let mut steps = Vec::with_capacity(indices.len());
        for &j in indices {
            inputs.extend_from_slice(self.input(j));
            targets.extend_from_slice(self.target(j));
            steps.push(self.target_steps[j]);
        }
        SequenceDataset {
            seq_len: self.seq_len,
            inputs,
            targets,
            target_steps: steps,
            normalization: self.normalization.clone(),
        }
    }

    pub fn truncate(&mut self, m: usize) {
        let m = m.min(self.len());
        self.inputs.truncate(m * self.input_width());
        self.targets.truncate(m * K);
        self.target_steps.truncate(m);
    }

    /// Applies `norm` to every input and target value.
    pub fn normalized_with(&self, norm: &Normalization) -> Result<SequenceDataset> {
        if self.normalization.is_some() {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        let mut out = self.clone();
        for (i, v) in out.inputs.iter_mut().enumerate() {
            *v = norm.apply(i % K, *v);
        }
        for (i, v) in out.targets.iter_mut().enumerate() {
            *v = norm.apply(i % K, *v);
        }
        out.normalization = Some(norm.clone());
        Ok(out)
    }

    /// Undoes the stored normalization.
    pub fn denormalized(&self) -> SequenceDataset {
        let Some(norm) = &self.normalization else {
            return self.clone();
        };
        let mut out = self.clone();
        for (i, v) in out.inputs.iter_mut().enumerate() {
            *v = norm.invert(i % K, *v);
        }
        for (i, v) in out.targets.iter_mut().enumerate() {
            *v = norm.invert(i % K, *v);
        }
        out.normalization = None;
        out
    }
}

/// Emits one sample per row `i` whose `n_seq - 1` predecessors and one
/// successor all sit on consecutive grid steps. Windows overlap (stride 1).
pub fn build_sequences(frame: &KpiFrame, n_seq: usize) -> Result<SequenceDataset> {
    if n_seq == 0 {
        return Err(Error::Parameter("n_seq must be at least 1".into()));
    }
    let rows = frame
        .rows
        .iter()
        .map(|r| {
            r.complete()
                .ok_or_else(|| Error::Contract(format!("row at step {} is incomplete", r.step)))
        })
        .collect::<Result<Vec<[f64; K]>>>()?;
    let steps: Vec<i64> = frame.rows.iter().map(|r| r.step).collect();

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut target_steps = Vec::new();
    let mut run = 0usize;
    for i in 0..rows.len() {
        run = if i > 0 && steps[i] == steps[i - 1] + 1 {
            run + 1
        } else {
            1
        };
        let has_successor = i + 1 < rows.len() && steps[i + 1] == steps[i] + 1;
        if run >= n_seq && has_successor {
            for row in &rows[i + 1 - n_seq..=i] {
                inputs.extend_from_slice(row);
            }
            targets.extend_from_slice(&rows[i + 1]);
            target_steps.push(steps[i + 1]);
        }
    }
    SequenceDataset::new(n_seq, inputs, targets, target_steps)
}

/// Population mean/std of each KPI over the input rows of `stats_source`.
/// Standard deviations below `1e-12` become 1.
pub fn fit_normalization(ds: &SequenceDataset, stats_source: &[usize]) -> Result<Normalization> {
    if stats_source.is_empty() {
        return Err(Error::Parameter(
            "normalization needs at least one source sample".into(),
        ));
    }
    if let Some(&bad) = stats_source.iter().find(|&&j| j >= ds.len()) {
        return Err(Error::Parameter(format!("sample index {bad} out of range")));
    }
    let rows = (stats_source.len() * ds.seq_len) as f64;
    let mut mean = vec![0.0; K];
    for &j in stats_source {
        for (i, v) in ds.input(j).iter().enumerate() {
            mean[i % K] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; K];
    for &j in stats_source {
        for (i, v) in ds.input(j).iter().enumerate() {
            var[i % K] += (v - mean[i % K]).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / rows).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(Normalization { mean, std })
}

pub fn normalize_dataset(ds: &SequenceDataset, stats_source: &[usize]) -> Result<SequenceDataset> {
    let norm = fit_normalization(ds, stats_source)?;
    ds.normalized_with(&norm)
}

const FORMAT_VERSION: u32 = 1;
const METADATA_FILE: &str = "metadata.json";
const INPUTS_FILE: &str = "inputs.f64le";
const TARGETS_FILE: &str = "targets.f64le";
const STEPS_FILE: &str = "steps.i64le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMetadata {
    format_version: u32,
    seq_len: usize,
    k: usize,
    m: usize,
    kpis: Vec<String>,
    normalization: Option<Normalization>,
    provenance: BTreeMap<String, String>,
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl SequenceDataset {
    /// SHA-256 over the stored arrays and normalization, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.seq_len as u64).to_le_bytes());
        h.update(f64_bytes(&self.inputs));
        h.update(f64_bytes(&self.targets));
        for s in &self.target_steps {
            h.update(s.to_le_bytes());
        }
        if let Some(n) = &self.normalization {
            h.update(f64_bytes(&n.mean));
            h.update(f64_bytes(&n.std));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `metadata.json` plus little-endian binary arrays into `dir`.
    pub fn save(&self, dir: &Path, provenance: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = DatasetMetadata {
            format_version: FORMAT_VERSION,
            seq_len: self.seq_len,
            k: K,
            m: self.len(),
            kpis: Kpi::ALL.iter().map(|k| k.name().to_string()).collect(),
            normalization: self.normalization.clone(),
            provenance: provenance.clone(),
        };
        fs::write(
            dir.join(METADATA_FILE),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        fs::write(dir.join(INPUTS_FILE), f64_bytes(&self.inputs))?;
        fs::write(dir.join(TARGETS_FILE), f64_bytes(&self.targets))?;
        let steps: Vec<u8> = self
            .target_steps
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        fs::write(dir.join(STEPS_FILE), steps)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(SequenceDataset, BTreeMap<String, String>)> {
        let meta: DatasetMetadata =
            serde_json::from_str(&fs::read_to_string(dir.join(METADATA_FILE))?)?;
        if meta.format_version != FORMAT_VERSION || meta.k != K {
            return Err(Error::Data(format!(
                "unsupported dataset format (version {}, K = {})",
                meta.format_version, meta.k
            )));
        }
        let inputs = read_f64s(&dir.join(INPUTS_FILE), meta.m * meta.seq_len * K)?;
        let targets = read_f64s(&dir.join(TARGETS_FILE), meta.m * K)?;
        let steps = fs::read(dir.join(STEPS_FILE))?;
        if steps.len() != meta.m * 8 {
            return Err(Error::Data(
                "step file length does not match sample count".into(),
            ));
        }
        let target_steps = steps
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut ds = SequenceDataset::new(meta.seq_len, inputs, targets, target_steps)?;
        ds.normalization = meta.normalization;
        Ok((ds, meta.provenance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::frame::FrameRow;

    fn frame_with_steps(steps: &[i64]) -> KpiFrame {
        KpiFrame {
            t_start: 0.0,
            t_step: 20.0,
            window_len: 100.0,
            rows: steps
                .iter()
                .map(|&s| FrameRow {
                    step: s,
                    timestamp: s as f64 * 20.0,
                    values: [Some(s as f64); K],
                })
                .collect(),
        }
    }

    fn consecutive(n: i64) -> KpiFrame {
        frame_with_steps(&(0..n).collect::<Vec<_>>())
    }

    #[test]
    fn sample_counts_at_the_boundary() {
        assert_eq!(build_sequences(&consecutive(28), 28).unwrap().len(), 0);
        assert_eq!(build_sequences(&consecutive(29), 28).unwrap().len(), 1);
        assert_eq!(build_sequences(&consecutive(30), 28).unwrap().len(), 2);
    }

    #[test]
    fn window_content_and_target() {
        let ds = build_sequences(&consecutive(29), 28).unwrap();
        assert_eq!(ds.input(0)[0], 0.0);
        assert_eq!(ds.input(0)[27 * K], 27.0);
        assert!(ds.target(0).iter().all(|&v| v == 28.0));
        assert_eq!(ds.target_steps(), &[28]);
    }

    #[test]
    fn gap_breaks_windows() {
        let mut steps: Vec<i64> = (0..29).collect();
        steps.extend(31..60);
        let ds = build_sequences(&frame_with_steps(&steps), 28).unwrap();
        // One window before the gap, one after it.
        assert_eq!(ds.target_steps(), &[28, 59]);
    }

    #[test]
    fn incomplete_rows_are_rejected() {
        let mut f = consecutive(30);
        f.rows[3].values[2] = None;
        assert!(matches!(build_sequences(&f, 28), Err(Error::Contract(_))));
    }

    fn two_sample_dataset(a: [f64; 2], b: [f64; 2]) -> SequenceDataset {
        // seq_len 1; column 0 varies, column 1 constant.
        let mut inputs = vec![0.0; 2 * K];
        inputs[0] = a[0];
        inputs[K] = a[1];
        inputs[1] = 4.0;
        inputs[K + 1] = 4.0;
        let mut targets = vec![0.0; 2 * K];
        targets[0] = b[0];
        targets[K] = b[1];
        SequenceDataset::new(1, inputs, targets, vec![1, 2]).unwrap()
    }

    #[test]
    fn normalization_cases() {
        let ds = two_sample_dataset([-1.0, 1.0], [0.0, 0.0]);
        let n = normalize_dataset(&ds, &[0, 1]).unwrap();
        assert_eq!((n.input(0)[0], n.input(1)[0]), (-1.0, 1.0));
        assert_eq!((n.input(0)[1], n.input(1)[1]), (0.0, 0.0));
        assert_eq!(n.normalization().unwrap().std[1], 1.0);

        let ds = two_sample_dataset([0.0, 10.0], [5.0, 15.0]);
        let n = normalize_dataset(&ds, &[0, 1]).unwrap();
        let norm = n.normalization().unwrap();
        assert_eq!((norm.mean[0], norm.std[0]), (5.0, 5.0));
        assert_eq!((n.input(0)[0], n.input(1)[0]), (-1.0, 1.0));
        assert_eq!((n.target(0)[0], n.target(1)[0]), (0.0, 2.0));
    }

    #[test]
    fn normalization_uses_only_source_samples() {
        let ds = two_sample_dataset([2.0, 100.0], [0.0, 0.0]);
        let norm = fit_normalization(&ds, &[0]).unwrap();
        assert_eq!(norm.mean[0], 2.0);
        assert!(matches!(
            fit_normalization(&ds, &[]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds =
            normalize_dataset(&build_sequences(&consecutive(31), 28).unwrap(), &[0, 1]).unwrap();
        let mut prov = BTreeMap::new();
        prov.insert("source".to_string(), "unit-test".to_string());
        ds.save(dir.path(), &prov).unwrap();
        let (back, p) = SequenceDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(p, prov);
    }
}
