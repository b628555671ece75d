//! H-score between paired feature batches.
//!
//! For features `F` (n x b) of the inputs and `G` (n x b) of the targets:
//!
//! ```text
//! H = tr(cov(F, G)) - 1/2 tr(M_F M_G),   M_F = F F^T / b,   M_G = G G^T / b
//! ```
//!
//! `cov` is centered by the batch means with a `1/b` scale. By default the
//! second-moment matrices are uncentered; [`SecondMoment::Centered`] centers
//! them as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondMoment {
    #[default]
    Uncentered,
    Centered,
}

/// Paired features with samples along columns.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    f: Tensor,
    g: Tensor,
}

impl FeatureBatch {
    pub fn new(f: Tensor, g: Tensor) -> Result<Self> {
        if f.rank() != 2 || f.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "feature batch shapes {:?} and {:?} must both be n x b",
                f.shape(),
                g.shape()
            )));
        }
        check_batch(f.shape()[1])?;
        Ok(Self { f, g })
    }

    pub fn f(&self) -> &Tensor {
        &self.f
    }

    pub fn g(&self) -> &Tensor {
        &self.g
    }
}

fn check_batch(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::Parameter(format!(
            "H-score needs a batch of at least 2, got {b}"
        )));
    }
    Ok(())
}

fn second_moment(graph: &mut Graph, x: Var, b: usize, mode: SecondMoment) -> Result<Var> {
    let x = match mode {
        SecondMoment::Uncentered => x,
        SecondMoment::Centered => {
            let mean = graph.mean(x, 1)?;
            let rows = graph.shape(x)[0];
            let ones = graph.constant(Tensor::full(&[1, b], 1.0));
            let mean = graph.reshape(mean, &[rows, 1])?;
            let spread = graph.matmul(mean, ones)?;
            graph.sub(x, spread)?
        }
    };
    let xx = graph.matmul_t(x, x, false, true)?;
    graph.scale(xx, 1.0 / b as f64)
}

/// Records the H-score of `f` and `g` (each n x b) on `graph`.
pub fn h_score_var(graph: &mut Graph, f: Var, g: Var, mode: SecondMoment) -> Result<Var> {
    let (sf, sg) = (graph.shape(f).to_vec(), graph.shape(g).to_vec());
    if sf.len() != 2 || sf != sg {
        return Err(Error::Dimension(format!(
            "h_score: shapes {sf:?} and {sg:?} must both be n x b"
        )));
    }
    let b = sf[1];
    check_batch(b)?;
    let cov = graph.batch_covariance(f, g)?;
    let alignment = graph.trace(cov)?;
    let mf = second_moment(graph, f, b, mode)?;
    let mg = second_moment(graph, g, b, mode)?;
    let prod = graph.matmul(mf, mg)?;
    let penalty = graph.trace(prod)?;
    let half = graph.scale(penalty, 0.5)?;
    graph.sub(alignment, half)
}

/// Negated H-score, the training loss.
pub fn h_loss_var(graph: &mut Graph, f: Var, g: Var, mode: SecondMoment) -> Result<Var> {
    let h = h_score_var(graph, f, g, mode)?;
    graph.scale(h, -1.0)
}

pub fn h_score(batch: &FeatureBatch) -> Result<f64> {
    h_score_with(batch, SecondMoment::Uncentered)
}

pub fn h_score_with(batch: &FeatureBatch, mode: SecondMoment) -> Result<f64> {
    let mut graph = Graph::new();
    let f = graph.constant(batch.f.clone());
    let g = graph.constant(batch.g.clone());
    let h = h_score_var(&mut graph, f, g, mode)?;
    Ok(graph.value(h).item())
}

pub fn h_loss(batch: &FeatureBatch) -> Result<f64> {
    Ok(-h_score(batch)?)
}

/// Trace of the centered cross-covariance alone.
pub fn covariance_trace(batch: &FeatureBatch) -> Result<f64> {
    let mut graph = Graph::new();
    let f = graph.constant(batch.f.clone());
    let g = graph.constant(batch.g.clone());
    let cov = graph.batch_covariance(f, g)?;
    let t = graph.trace(cov)?;
    Ok(graph.value(t).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::grad_check;

    fn batch(f: &[Vec<f64>], g: &[Vec<f64>]) -> FeatureBatch {
        FeatureBatch::new(Tensor::from_rows(f).unwrap(), Tensor::from_rows(g).unwrap()).unwrap()
    }

    #[test]
    fn zero_features_score_zero() {
        let b = batch(&[vec![0.0, 0.0, 0.0]], &[vec![1.0, 2.0, -1.0]]);
        assert_eq!(h_score(&b).unwrap(), 0.0);
        let b = batch(&[vec![3.0, 2.0]], &[vec![0.0, 0.0]]);
        assert_eq!(h_score(&b).unwrap(), 0.0);
    }

    #[test]
    fn hand_cases() {
        let b = batch(&[vec![1.0, -1.0]], &[vec![1.0, -1.0]]);
        assert_eq!(h_score(&b).unwrap(), 0.5);
        assert_eq!(h_loss(&b).unwrap(), -0.5);
        let b = batch(&[vec![1.0, -1.0]], &[vec![-1.0, 1.0]]);
        assert_eq!(h_score(&b).unwrap(), -1.5);
    }

    #[test]
    fn rejects_single_sample() {
        let f = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            FeatureBatch::new(f.clone(), f),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(FeatureBatch::new(f, g), Err(Error::Dimension(_))));
    }

    #[test]
    fn centered_variant_ignores_shift() {
        let f = vec![vec![1.0, 2.0, 4.0], vec![0.5, -1.0, 0.0]];
        let g = vec![vec![2.0, 0.0, 1.0], vec![1.0, 1.0, -3.0]];
        let shifted: Vec<Vec<f64>> = f
            .iter()
            .map(|r| r.iter().map(|v| v + 7.0).collect())
            .collect();
        let a = h_score_with(&batch(&f, &g), SecondMoment::Centered).unwrap();
        let b = h_score_with(&batch(&shifted, &g), SecondMoment::Centered).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let fv = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.0, 0.2];
        let gv = vec![0.1, 0.4, -0.3, 0.6, -0.2, 0.5, 0.3, -0.1];
        let loss_at = |p: &[f64]| -> Result<f64> {
            let mut graph = Graph::new();
            let f = graph.constant(Tensor::new(&[2, 4], p[..8].to_vec())?);
            let g = graph.constant(Tensor::new(&[2, 4], p[8..].to_vec())?);
            let l = h_loss_var(&mut graph, f, g, SecondMoment::Uncentered)?;
            Ok(graph.value(l).item())
        };
        let mut graph = Graph::new();
        let f = graph.param(Tensor::new(&[2, 4], fv.clone()).unwrap());
        let g = graph.param(Tensor::new(&[2, 4], gv.clone()).unwrap());
        let l = h_loss_var(&mut graph, f, g, SecondMoment::Uncentered).unwrap();
        graph.backward(l).unwrap();
        let mut analytic = graph.grad(f).unwrap().data().to_vec();
        analytic.extend_from_slice(graph.grad(g).unwrap().data());
        let point: Vec<f64> = fv.into_iter().chain(gv).collect();
        let err = grad_check(loss_at, &point, &analytic, 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn loss_gradient_at_zero_features() {
        let gv = vec![0.1, 0.4, -0.3, 0.6];
        let mut graph = Graph::new();
        let f = graph.param(Tensor::zeros(&[1, 4]));
        let g = graph.constant(Tensor::new(&[1, 4], gv.clone()).unwrap());
        let l = h_loss_var(&mut graph, f, g, SecondMoment::Uncentered).unwrap();
        graph.backward(l).unwrap();
        let mean = gv.iter().sum::<f64>() / 4.0;
        for (d, gj) in graph.grad(f).unwrap().data().iter().zip(&gv) {
            assert!((d + (gj - mean) / 4.0).abs() < 1e-15);
        }
    }
}
