use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use tesn::hscore::{h_loss_var, SecondMoment};
use tesn::models::*;
use tesn::ndiff::{grad_check, Graph, Tensor, DEFAULT_EPS};
use tesn::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ExtractorConfig {
    ExtractorConfig {
        n_seq: 4,
        k: 3,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        layers: 1,
        n_res: 8,
        n: 4,
        ..ExtractorConfig::default()
    }
}

fn eigen_radius(t: &Tensor) -> f64 {
    let n = t.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(n, n, t.data());
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// -H(f(X), g(Y)) as a function of all trainable values of `f` then `g`.
fn joint_loss(f: &Extractor, g: &Mlp, x: &Tensor, y: &Tensor) -> (f64, Vec<f64>) {
    let mut graph = Graph::new();
    let bf = f.params.bind(&mut graph);
    let bg = g.params.bind(&mut graph);
    let xv = graph.constant(x.clone());
    let yv = graph.constant(y.clone());
    let fx = f.forward(&mut graph, &bf, xv).unwrap();
    let gy = g.forward(&mut graph, &bg, yv).unwrap();
    let ft = graph.transpose(fx).unwrap();
    let gt = graph.transpose(gy).unwrap();
    let loss = h_loss_var(&mut graph, ft, gt, SecondMoment::Uncentered).unwrap();
    graph.backward(loss).unwrap();
    let mut grad = Vec::new();
    for (set, bound) in [(&f.params, &bf), (&g.params, &bg)] {
        for (e, gr) in set.entries().iter().zip(bound.grads(&graph)) {
            if e.trainable {
                match gr {
                    Some(t) => grad.extend_from_slice(t.data()),
                    None => grad.extend(std::iter::repeat(0.0).take(e.value.len())),
                }
            }
        }
    }
    (graph.value(loss).item(), grad)
}

#[test]
fn downsized_extractor_gradients_match_finite_differences() {
    let f = Extractor::init(small_config(), 5).unwrap();
    let g = Mlp::init(MlpSpec::target_network(3, 4), 6).unwrap();
    let x = random(&[4, 4, 3], 1);
    let y = random(&[4, 3], 2);
    let (_, analytic) = joint_loss(&f, &g, &x, &y);
    let nf = f.params.trainable_count();
    let mut point = f.params.flat_trainable();
    point.extend(g.params.flat_trainable());
    let err = grad_check(
        |p| {
            let mut f2 = f.clone();
            let mut g2 = g.clone();
            f2.params.set_flat_trainable(&p[..nf])?;
            g2.params.set_flat_trainable(&p[nf..])?;
            Ok(joint_loss(&f2, &g2, &x, &y).0)
        },
        &point,
        &analytic,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn esn_only_gradients_reach_only_the_readout() {
    let cfg = ExtractorConfig {
        kind: ExtractorKind::EsnOnly,
        ..small_config()
    };
    let f = Extractor::init(cfg, 3).unwrap();
    assert_eq!(f.params.trainable_count(), 4 * (8 + 12));
    let g = Mlp::init(MlpSpec::target_network(3, 4), 4).unwrap();
    let (x, y) = (random(&[5, 4, 3], 7), random(&[5, 3], 8));
    let (_, analytic) = joint_loss(&f, &g, &x, &y);
    let nf = f.params.trainable_count();
    let mut point = f.params.flat_trainable();
    point.extend(g.params.flat_trainable());
    let err = grad_check(
        |p| {
            let mut f2 = f.clone();
            let mut g2 = g.clone();
            f2.params.set_flat_trainable(&p[..nf])?;
            g2.params.set_flat_trainable(&p[nf..])?;
            Ok(joint_loss(&f2, &g2, &x, &y).0)
        },
        &point,
        &analytic,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn embedding_dimension_contract() {
    for n in [2, 4, 8, 16, 32] {
        let cfg = ExtractorConfig {
            n,
            ..ExtractorConfig::default()
        };
        let f = Extractor::init(cfg, 1).unwrap();
        let e = extract_embedding(&random(&[28, 13], 3), &f).unwrap();
        assert_eq!(e.len(), n);
    }
    let too_wide = ExtractorConfig {
        n: 365,
        ..ExtractorConfig::default()
    };
    assert!(matches!(
        Extractor::init(too_wide, 0),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn transformer_output_shape_and_position_sensitivity() {
    let f = Extractor::init(ExtractorConfig::default(), 2).unwrap();
    let x = random(&[28, 13], 9);
    let u = transformer_encode(&x, &f).unwrap();
    assert_eq!(u.shape(), &[28, 32]);
    let mut swapped = x.data().to_vec();
    for j in 0..13 {
        swapped.swap(j, 13 + j);
    }
    let u2 = transformer_encode(&Tensor::new(&[28, 13], swapped).unwrap(), &f).unwrap();
    // Rows 0 and 1 traded places; without positions the outputs would too.
    let row = |t: &Tensor, r: usize| t.data()[r * 32..(r + 1) * 32].to_vec();
    assert_ne!(row(&u, 0), row(&u2, 1));
}

#[test]
fn zeroed_blocks_reduce_to_projection_plus_position() {
    let mut f = Extractor::init(ExtractorConfig::default(), 4).unwrap();
    let names: Vec<(String, Vec<usize>)> = f
        .params
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("enc") && !e.name.contains(".ln"))
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        f.params.set_by_name(&name, Tensor::zeros(&shape)).unwrap();
    }
    let x = random(&[28, 13], 10);
    let u = transformer_encode(&x, &f).unwrap();
    let w = f.params.by_name("proj.weight").unwrap().clone();
    let pe = positional_encoding(28, 32);
    for t in 0..28 {
        for i in 0..32 {
            let z: f64 = (0..13)
                .map(|j| w.at2(i, j) * x.data()[t * 13 + j])
                .sum::<f64>()
                + pe.at2(t, i);
            assert!((u.at2(t, i) - z).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_is_linear_and_flattens_time_major() {
    let mut f = Extractor::init(ExtractorConfig::default(), 6).unwrap();
    let x = random(&[28, 13], 11);
    *f.readout_mut().unwrap() = Tensor::zeros(&[8, 64 + 364]);
    assert_eq!(extract_embedding(&x, &f).unwrap(), vec![0.0; 8]);
    // Select x_1[0] and x_1[1] through the flattened part of the readout.
    let mut w = vec![0.0; 8 * 428];
    w[64] = 1.0;
    w[428 + 64 + 1] = 1.0;
    w[2 * 428 + 64 + 13] = 1.0;
    *f.readout_mut().unwrap() = Tensor::new(&[8, 428], w).unwrap();
    let e = extract_embedding(&x, &f).unwrap();
    assert_eq!(&e[..3], &[x.data()[0], x.data()[1], x.data()[13]]);
    // Permuting KPI columns moves the selected values.
    let mut perm = x.data().to_vec();
    for t in 0..28 {
        perm.swap(t * 13, t * 13 + 1);
    }
    let e2 = extract_embedding(&Tensor::new(&[28, 13], perm).unwrap(), &f).unwrap();
    assert_ne!(e, e2);
    assert_eq!((e2[0], e2[1]), (e[1], e[0]));
}

#[test]
fn reservoir_radius_against_eigenvalue_oracle() {
    for seed in 0..4 {
        let f = Extractor::init(ExtractorConfig::default(), seed).unwrap();
        let r = eigen_radius(&f.reservoir().w_res);
        assert!((r - 0.9).abs() < 1e-3, "seed {seed}: {r}");
    }
    for n in [2, 7, 30] {
        let t = random(&[n, n], n as u64);
        assert!((spectral_radius(&t).unwrap() - eigen_radius(&t)).abs() < 1e-9);
    }
}

#[test]
fn reservoir_states_stay_in_the_open_unit_interval() {
    let res = esn_init(3, 64, 32, 0.9, 0.5).unwrap();
    let u = random(&[28, 32], 4);
    let scaled = Tensor::new(&[28, 32], u.data().iter().map(|v| v * 2.0).collect()).unwrap();
    for s in esn_states(&scaled, &res).unwrap() {
        assert!(s.iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn training_never_touches_the_reservoir() {
    let mut f = Extractor::init(small_config(), 8).unwrap();
    let before = f.reservoir();
    let g = Mlp::init(MlpSpec::target_network(3, 4), 1).unwrap();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        &f.params,
    );
    for step in 0..20 {
        let (x, y) = (random(&[4, 4, 3], step), random(&[4, 3], 100 + step));
        let mut graph = Graph::new();
        let bf = f.params.bind(&mut graph);
        let bg = g.params.bind(&mut graph);
        let xv = graph.constant(x);
        let yv = graph.constant(y);
        let fx = f.forward(&mut graph, &bf, xv).unwrap();
        let gy = g.forward(&mut graph, &bg, yv).unwrap();
        let (ft, gt) = (graph.transpose(fx).unwrap(), graph.transpose(gy).unwrap());
        let loss = h_loss_var(&mut graph, ft, gt, SecondMoment::Uncentered).unwrap();
        graph.backward(loss).unwrap();
        let grads = bf.grads(&graph);
        opt.step(&mut f.params, &grads).unwrap();
    }
    let after = f.reservoir();
    assert_eq!(before.w_res.data(), after.w_res.data());
    assert_eq!(before.w_in.data(), after.w_in.data());
    f.freeze();
    let grads = vec![None; f.params.len()];
    assert!(matches!(
        opt.step(&mut f.params, &grads),
        Err(Error::Contract(_))
    ));
}

#[test]
fn embeddings_are_deterministic_and_batch_independent() {
    let f = Extractor::init(ExtractorConfig::default(), 12).unwrap();
    let x = random(&[3, 28, 13], 13);
    let all = f.embed_batch(x.data(), 3).unwrap();
    assert_eq!(
        all,
        Extractor::init(ExtractorConfig::default(), 12)
            .unwrap()
            .embed_batch(x.data(), 3)
            .unwrap()
    );
    for j in 0..3 {
        let one = f.embed_batch(&x.data()[j * 364..(j + 1) * 364], 1).unwrap();
        for (a, b) in one.data().iter().zip(&all.data()[j * 8..(j + 1) * 8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = tempdir().unwrap();
    let mut f = Extractor::init(small_config(), 21).unwrap();
    f.freeze();
    save_extractor(&f, dir.path()).unwrap();
    let back = load_extractor(dir.path(), Some(&small_config())).unwrap();
    assert_eq!(back.params, f.params);
    assert!(back.is_frozen());

    let other = ExtractorConfig {
        n: 2,
        ..small_config()
    };
    assert!(matches!(
        load_extractor(dir.path(), Some(&other)),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        load_mlp(dir.path(), None),
        Err(Error::Checkpoint(_))
    ));

    let mlp_dir = tempdir().unwrap();
    let m = Mlp::init(MlpSpec::predictor(8), 2).unwrap();
    save_mlp(&m, mlp_dir.path()).unwrap();
    assert_eq!(
        load_mlp(mlp_dir.path(), Some(&MlpSpec::predictor(8))).unwrap(),
        m
    );
    assert!(load_mlp(mlp_dir.path(), Some(&MlpSpec::predictor(364))).is_err());

    let payload = mlp_dir.path().join("params.f64le");
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&payload, bytes).unwrap();
    assert!(matches!(
        load_mlp(mlp_dir.path(), None),
        Err(Error::Checkpoint(_))
    ));
}
