use proptest::prelude::*;
use tesn::hscore::{
    covariance_trace, h_loss, h_loss_var, h_score, h_score_with, FeatureBatch, SecondMoment,
};
use tesn::ndiff::{grad_check, Graph, Tensor, DEFAULT_EPS};
use tesn::Error;

/// Columns are samples: `x[i][k]` is feature `i` of sample `k`.
type Rows = Vec<Vec<f64>>;

fn batch(f: &Rows, g: &Rows) -> FeatureBatch {
    FeatureBatch::new(Tensor::from_rows(f).unwrap(), Tensor::from_rows(g).unwrap()).unwrap()
}

fn means(x: &Rows) -> Vec<f64> {
    x.iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect()
}

/// Double-loop oracle over sample pairs, independent of the matrix form.
fn brute_force(f: &Rows, g: &Rows, mode: SecondMoment) -> f64 {
    let (n, b) = (f.len(), f[0].len());
    let (mf, mg) = (means(f), means(g));
    let mut cov = 0.0;
    for i in 0..n {
        for k in 0..b {
            cov += (f[i][k] - mf[i]) * (g[i][k] - mg[i]);
        }
    }
    cov /= b as f64;
    let (cf, cg) = match mode {
        SecondMoment::Uncentered => (vec![0.0; n], vec![0.0; n]),
        SecondMoment::Centered => (mf, mg),
    };
    let mut penalty = 0.0;
    for k in 0..b {
        for l in 0..b {
            let fg: f64 = (0..n).map(|i| (f[i][k] - cf[i]) * (g[i][l] - cg[i])).sum();
            penalty += fg * fg;
        }
    }
    cov - 0.5 * penalty / (b * b) as f64
}

fn pair_within(scale: f64) -> impl Strategy<Value = (Rows, Rows)> {
    (1usize..6, 2usize..24).prop_flat_map(move |(n, b)| {
        let rows = prop::collection::vec(prop::collection::vec(-scale..scale, b), n);
        (rows.clone(), rows)
    })
}

fn pair() -> impl Strategy<Value = (Rows, Rows)> {
    pair_within(3.0)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn matches_the_pairwise_oracle((f, g) in pair()) {
        for mode in [SecondMoment::Uncentered, SecondMoment::Centered] {
            let h = h_score_with(&batch(&f, &g), mode).unwrap();
            let want = brute_force(&f, &g, mode);
            prop_assert!(close(h, want, 1e-12), "{mode:?}: {h} vs {want}");
        }
    }

    #[test]
    fn symmetric_in_its_arguments((f, g) in pair()) {
        let a = h_score(&batch(&f, &g)).unwrap();
        let b = h_score(&batch(&g, &f)).unwrap();
        prop_assert!(close(a, b, 1e-12), "{a} vs {b}");
    }

    #[test]
    fn covariance_trace_ignores_shifts((f, g) in pair(), s in -5.0f64..5.0, t in -5.0f64..5.0) {
        let shift = |x: &Rows, by: f64| -> Rows { x.iter().map(|r| r.iter().map(|v| v + by).collect()).collect() };
        let a = covariance_trace(&batch(&f, &g)).unwrap();
        let b = covariance_trace(&batch(&shift(&f, s), &shift(&g, t))).unwrap();
        prop_assert!(close(a, b, 1e-12), "{a} vs {b}");
        let c = h_score_with(&batch(&shift(&f, s), &shift(&g, t)), SecondMoment::Centered).unwrap();
        let d = h_score_with(&batch(&f, &g), SecondMoment::Centered).unwrap();
        prop_assert!(close(c, d, 1e-10), "{c} vs {d}");
    }

    #[test]
    fn loss_is_the_negated_score((f, g) in pair()) {
        let b = batch(&f, &g);
        prop_assert_eq!(h_loss(&b).unwrap(), -h_score(&b).unwrap());
    }

    #[test]
    fn zero_features_score_zero((f, g) in pair()) {
        let zeros: Rows = f.iter().map(|r| vec![0.0; r.len()]).collect();
        prop_assert_eq!(h_score(&batch(&zeros, &g)).unwrap(), 0.0);
        prop_assert_eq!(h_score(&batch(&f, &zeros)).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences((f, g) in pair_within(1.0)) {
        let (n, b) = (f.len(), f[0].len());
        let flat = |x: &Rows| -> Vec<f64> { x.iter().flatten().copied().collect() };
        let loss_at = |p: &[f64]| {
            let mut graph = Graph::new();
            let fv = graph.constant(Tensor::new(&[n, b], p[..n * b].to_vec())?);
            let gv = graph.constant(Tensor::new(&[n, b], p[n * b..].to_vec())?);
            let l = h_loss_var(&mut graph, fv, gv, SecondMoment::Uncentered)?;
            Ok(graph.value(l).item())
        };
        let mut graph = Graph::new();
        let fv = graph.param(Tensor::new(&[n, b], flat(&f)).unwrap());
        let gv = graph.param(Tensor::new(&[n, b], flat(&g)).unwrap());
        let l = h_loss_var(&mut graph, fv, gv, SecondMoment::Uncentered).unwrap();
        graph.backward(l).unwrap();
        let mut analytic = graph.grad(fv).unwrap().data().to_vec();
        analytic.extend_from_slice(graph.grad(gv).unwrap().data());
        let point: Vec<f64> = flat(&f).into_iter().chain(flat(&g)).collect();
        let err = grad_check(loss_at, &point, &analytic, DEFAULT_EPS).unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn hand_computed_values() {
    let h = |f: Rows, g: Rows| h_score(&batch(&f, &g)).unwrap();
    // Perfectly aligned unit features: cov 1, penalty 1.
    assert_eq!(h(vec![vec![1.0, -1.0]], vec![vec![1.0, -1.0]]), 0.5);
    assert_eq!(h(vec![vec![1.0, -1.0]], vec![vec![-1.0, 1.0]]), -1.5);
    // A constant offset leaves the covariance alone but raises the penalty.
    assert_eq!(
        h(vec![vec![2.0, 0.0]], vec![vec![2.0, 0.0]]),
        1.0 - 0.5 * 4.0
    );
}

#[test]
fn rejects_batches_below_two() {
    let one = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    assert!(matches!(
        FeatureBatch::new(one.clone(), one),
        Err(Error::Parameter(_))
    ));
    let mut graph = Graph::new();
    let f = graph.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(
        h_loss_var(&mut graph, f, f, SecondMoment::Uncentered),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn rejects_mismatched_or_non_matrix_features() {
    let a = Tensor::zeros(&[2, 4]);
    assert!(matches!(
        FeatureBatch::new(a.clone(), Tensor::zeros(&[3, 4])),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        FeatureBatch::new(Tensor::zeros(&[8]), Tensor::zeros(&[8])),
        Err(Error::Dimension(_))
    ));
}
